#include "standin/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>

#include <json.hpp>

#include "standin/accounting.hpp"
#include "standin/checkpoint.hpp"
#include "standin/errors.hpp"
#include "standin/flow.hpp"
#include "standin/stin_io.hpp"
#include "standin/synth_data.hpp"

namespace standin {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class RunLog {
public:
    explicit RunLog(const std::string& path) {
        if (path.empty()) return;
        const fs::path p(path);
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        out_.open(p, std::ios::app);
        if (!out_) throw DataError(path + ": cannot open run log");
    }
    void write(const json& event) {
        if (out_.is_open()) out_ << event.dump() << "\n" << std::flush;
    }

private:
    std::ofstream out_;
};

DatasetSpec dataset_spec(const RunConfig& cfg) {
    DatasetSpec s;
    s.samples = cfg.data.samples;
    s.seed = cfg.data.seed;
    s.frames = cfg.model.frames;
    s.height = cfg.model.latent_h * cfg.data.downsample;
    s.width = cfg.model.latent_w * cfg.data.downsample;
    s.ref_height = cfg.model.ref_h * cfg.data.downsample;
    s.ref_width = cfg.model.ref_w * cfg.data.downsample;
    s.glyph = cfg.data.glyph;
    return s;
}

struct Dataset {
    DatasetManifest manifest;
    std::vector<TrainExample> train;
    std::vector<LoadedSample> held_out;
};

Dataset load_dataset(const RunConfig& cfg, bool need_held_out) {
    if (cfg.model.channels != 3) throw ConfigError("model.channels must be 3 for the glyph dataset");
    const fs::path dir(cfg.data.dir);
    Dataset ds;
    ds.manifest = load_manifest(dir);
    const DatasetSpec want = dataset_spec(cfg);
    const DatasetSpec& have = ds.manifest.spec;
    if (have.frames != want.frames || have.height != want.height || have.width != want.width ||
        have.ref_height != want.ref_height || have.ref_width != want.ref_width) {
        throw DataError(dir.string() + ": dataset resolution does not match the model config (frames/latent/ref x downsample)");
    }
    for (const SampleRecord& r : ds.manifest.samples) {
        if (r.held_out) {
            if (need_held_out) ds.held_out.push_back(load_sample(dir, r));
            continue;
        }
        LoadedSample s = load_sample(dir, r);
        TrainExample ex;
        ex.x0 = pixels_to_latent(s.video, cfg.data.downsample);
        ex.ref = pixels_to_latent(s.ref, cfg.data.downsample);
        ex.prompt = prompt_ids(motion_from_index(r.motion), cfg.model.prompt_len);
        ds.train.push_back(std::move(ex));
    }
    if (ds.train.empty()) throw DataError(dir.string() + ": no training samples");
    return ds;
}

struct StageSettings {
    TrainStage stage = TrainStage::A;
    int steps = 0;
    int batch = 4;
    float lr = 1e-3f;
    std::uint64_t seed = 1;
    int log_every = 50;
    bool lora_enabled = true;
    std::string label;
};

struct StageOutcome {
    double first_loss = std::nan("");
    double last_loss = std::nan("");
};

// Runs optimizer steps [adam.state().step, settings.steps).
StageOutcome run_stage(const ModelConfig& model, ModelWeights& w, Adam& adam, const std::vector<TrainExample>& data,
                       const StageSettings& s, std::ostream& out, RunLog& log) {
    StageOutcome outcome;
    const GradScope scope = s.stage == TrainStage::B ? GradScope::LoRAOnly : GradScope::All;
    LossOptions lo{s.stage, s.lora_enabled};
    std::vector<TrainExample> batch(static_cast<std::size_t>(s.batch));
    const auto t0 = std::chrono::steady_clock::now();
    for (std::int64_t step = adam.state().step; step < s.steps; ++step) {
        Rng rng(derive_seed(s.seed, static_cast<std::uint64_t>(step)));
        for (auto& ex : batch) ex = data[rng.below(data.size())];
        ModelWeights grads = w.zeros_like();
        const double loss = training_loss(model, w, batch, rng, lo, &grads);
        adam.step(w, grads, scope);
        if (std::isnan(outcome.first_loss)) outcome.first_loss = loss;
        outcome.last_loss = loss;
        const bool last = step + 1 == s.steps;
        if (s.log_every > 0 && (step % s.log_every == 0 || last)) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            out << s.label << " step " << step << " loss " << std::setprecision(6) << loss << " (" << std::fixed
                << std::setprecision(1) << secs << "s)" << std::defaultfloat << std::setprecision(6) << "\n"
                << std::flush;
            log.write({{"event", "train_step"}, {"label", s.label}, {"step", step}, {"loss", loss}});
        }
    }
    return outcome;
}

bool same_architecture(ModelConfig a, ModelConfig b) {
    // The layout only moves image-token coordinates; a stage-A base never saw them.
    a.position_layout = b.position_layout;
    a.modulate_image_stream = b.modulate_image_stream;
    return a == b;
}

Tensor load_reference_latent(const fs::path& path, const ModelConfig& model, int downsample) {
    const Tensor t = load_tensor(path);
    const Shape latent{static_cast<std::size_t>(model.ref_h), static_cast<std::size_t>(model.ref_w),
                       static_cast<std::size_t>(model.channels)};
    const Shape pixels{latent[0] * static_cast<std::size_t>(downsample), latent[1] * static_cast<std::size_t>(downsample),
                       latent[2]};
    if (t.shape() == pixels) return pixels_to_latent(t, downsample);
    if (t.shape() == latent) return t;
    throw ValidationError(path.string() + ": reference " + shape_string(t.shape()) + " matches neither " +
                          shape_string(pixels) + " pixels nor " + shape_string(latent) + " latents");
}

void write_ppm(const fs::path& path, const Tensor& video_pixels) {
    const std::size_t F = video_pixels.dim(0), H = video_pixels.dim(1), W = video_pixels.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path.string() + ": cannot open for writing");
    out << "P6\n" << F * W << " " << H << "\n255\n";
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t x = 0; x < W; ++x)
                for (std::size_t c = 0; c < 3; ++c) {
                    const float v = video_pixels[((f * H + y) * W + x) * 3 + c];
                    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
                }
    if (!out) throw DataError(path.string() + ": write failed");
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Mean identity similarity over held-out identities, in latent space.
double evaluate_identity(const RunConfig& cfg, const ModelConfig& model, const ModelWeights& w,
                         const std::vector<LoadedSample>& held_out, bool lora_enabled, std::uint64_t seed) {
    const NoiseSchedule schedule = NoiseSchedule::uniform(cfg.ablation.sample_steps);
    double total = 0.0;
    int count = 0;
    for (const LoadedSample& s : held_out) {
        const Identity id = generate_identity(s.record.identity_seed, cfg.data.glyph);
        const Tensor glyph = pixels_to_latent(id.glyph, cfg.data.downsample);
        const Tensor ref = pixels_to_latent(s.ref, cfg.data.downsample);
        const std::vector<int> prompt = prompt_ids(motion_from_index(s.record.motion), model.prompt_len);
        for (int k = 0; k < cfg.ablation.eval_per_identity; ++k) {
            Rng rng(derive_seed(derive_seed(seed, s.record.identity_seed), static_cast<std::uint64_t>(k)));
            SampleOptions opts;
            opts.lora_enabled = lora_enabled;
            const Tensor video = sample(model, w, &ref, prompt, schedule, rng, opts);
            total += identity_similarity(glyph, video);
            ++count;
        }
    }
    return total / count;
}

}  // namespace

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
        dynamic_cast<const ShapeError*>(&e))
        return kExitConfig;
    if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return kExitData;
    if (dynamic_cast<const TrainingError*>(&e)) return kExitNumeric;
    return kExitFailure;
}

fs::path cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
    RunLog log(cfg.run_log);
    const fs::path dir(cfg.data.dir);
    const DatasetManifest m = make_dataset(dir, dataset_spec(cfg));
    const auto held = m.identity_seeds(true).size();
    out << "wrote " << m.samples.size() << " samples (" << held << " held-out identities) to " << dir.string() << "\n";
    log.write({{"event", "gen_data"}, {"dir", dir.string()}, {"samples", m.samples.size()}, {"held_out", held}});
    return dir / "manifest.json";
}

TrainResult cmd_train(const RunConfig& cfg, std::ostream& out) {
    RunLog log(cfg.run_log);
    const bool stage_b = cfg.train.stage == 'B';
    ModelConfig model = cfg.model;
    ModelWeights w;
    std::optional<AdamState> resume_state;

    if (!cfg.train.resume.empty()) {
        Checkpoint ck = load_checkpoint(cfg.train.resume);
        if (!same_architecture(ck.config, cfg.model)) throw ConfigError("resume checkpoint does not match the model config");
        if (!ck.optimizer) throw ConfigError(cfg.train.resume + ": checkpoint has no optimizer state to resume");
        w = std::move(ck.weights);
        resume_state = std::move(ck.optimizer);
    } else if (stage_b) {
        if (cfg.train.base_checkpoint.empty()) throw ConfigError("stage B requires train.base_checkpoint");
        if (!fs::exists(cfg.train.base_checkpoint))
            throw ConfigError("stage B base checkpoint not found: " + cfg.train.base_checkpoint);
        Checkpoint ck = load_checkpoint(cfg.train.base_checkpoint);
        if (!same_architecture(ck.config, cfg.model)) throw ConfigError("base checkpoint does not match the model config");
        w = std::move(ck.weights);
    } else {
        Rng init(derive_seed(cfg.train.seed, 0xA11CE));
        w = init_weights(model, init);
    }
    if (stage_b && cfg.ablation.disable_rsa) {
        throw ConfigError("ablation.disable_rsa removes the LoRA; there is nothing to train in stage B");
    }

    const Dataset data = load_dataset(cfg, false);
    const std::uint64_t base_hash = w.fingerprint(ParamGroup::Base);
    AdamConfig ac;
    ac.lr = cfg.train.lr;
    Adam adam = resume_state ? Adam(ac, std::move(*resume_state)) : Adam(ac, w);

    StageSettings s;
    s.stage = stage_b ? TrainStage::B : TrainStage::A;
    s.steps = cfg.train.steps;
    s.batch = cfg.train.batch;
    s.lr = cfg.train.lr;
    s.seed = cfg.train.seed;
    s.log_every = cfg.train.log_every;
    s.label = stage_b ? "stage B" : "stage A";
    log.write({{"event", "train_start"}, {"stage", std::string(1, cfg.train.stage)}, {"steps", s.steps},
               {"start_step", adam.state().step}, {"samples", data.train.size()}});
    const StageOutcome o = run_stage(model, w, adam, data.train, s, out, log);

    if (stage_b && w.fingerprint(ParamGroup::Base) != base_hash) {
        throw TrainingError("stage B modified frozen base weights");
    }
    const fs::path ckpt(cfg.train.out);
    save_checkpoint(ckpt, model, w, &adam.state());
    out << "saved " << ckpt.string() << "\n";
    log.write({{"event", "train_done"}, {"checkpoint", ckpt.string()}, {"base_hash", hex64(w.fingerprint(ParamGroup::Base))},
               {"lora_hash", hex64(w.fingerprint(ParamGroup::LoRA))}});
    return {ckpt, o.first_loss, o.last_loss};
}

SampleResult cmd_sample(const RunConfig& cfg, std::ostream& out) {
    RunLog log(cfg.run_log);
    if (!fs::exists(cfg.sampler.checkpoint)) throw DataError("checkpoint not found: " + cfg.sampler.checkpoint);
    const Checkpoint ck = load_checkpoint(cfg.sampler.checkpoint);
    const ModelConfig& model = ck.config;
    if (cfg.sampler.ref.empty()) throw ConfigError("sampler.ref is required");
    const Tensor ref = load_reference_latent(cfg.sampler.ref, model, cfg.data.downsample);
    const Motion motion = motion_from_index(cfg.sampler.prompt);
    const std::vector<int> prompt = prompt_ids(motion, model.prompt_len);
    const NoiseSchedule schedule = NoiseSchedule::uniform(cfg.sampler.steps);

    ForwardCounters counters;
    SampleOptions opts;
    opts.use_cache = cfg.sampler.use_cache;
    opts.lora_enabled = !cfg.ablation.disable_rsa;
    opts.counters = &counters;
    Rng rng(cfg.sampler.seed);
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor latent = sample(model, ck.weights, &ref, prompt, schedule, rng, opts);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!all_finite(latent)) throw TrainingError("sampling produced non-finite values");

    const fs::path dir(cfg.sampler.out);
    fs::create_directories(dir);
    SampleResult r{dir / "latent.stin", dir / "preview.ppm", dir / "manifest.jsonl"};
    save_tensor(r.latent, latent);
    write_ppm(r.preview, latent_to_pixels(latent, cfg.data.downsample));
    const json entry = {{"seed", cfg.sampler.seed},
                        {"schedule", schedule.timesteps},
                        {"use_cache", cfg.sampler.use_cache},
                        {"lora_enabled", opts.lora_enabled},
                        {"prompt", motion_name(motion)},
                        {"checkpoint", cfg.sampler.checkpoint},
                        {"wall_time_s", secs},
                        {"model_evals", counters.model_evals},
                        {"image_branch_evals", counters.image_branch_evals},
                        {"cache_reads", counters.cache_reads}};
    std::ofstream mf(r.manifest, std::ios::app);
    if (!mf) throw DataError(r.manifest.string() + ": cannot open for writing");
    mf << entry.dump() << "\n";
    out << "sampled " << motion_name(motion) << " in " << secs << "s (" << counters.model_evals << " model evals, "
        << counters.image_branch_evals << " image-stream block evals) -> " << r.latent.string() << "\n";
    log.write({{"event", "sample"}, {"latent", r.latent.string()}, {"wall_time_s", secs}});
    return r;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, std::ostream& out) {
    RunLog log(cfg.run_log);
    const fs::path dir(cfg.ablation.out);
    fs::create_directories(dir);
    const Dataset data = load_dataset(cfg, true);
    if (data.held_out.empty()) throw DataError("ablation needs at least one held-out identity (data.samples >= 8)");

    ModelConfig model = cfg.model;
    model.position_layout = PositionLayout::Conditional;

    // Stage A: shared base model (no image stream, so the layout is irrelevant).
    ModelWeights base;
    if (!cfg.train.base_checkpoint.empty() && fs::exists(cfg.train.base_checkpoint)) {
        Checkpoint ck = load_checkpoint(cfg.train.base_checkpoint);
        if (!same_architecture(ck.config, model)) throw ConfigError("base checkpoint does not match the model config");
        base = std::move(ck.weights);
        out << "using base checkpoint " << cfg.train.base_checkpoint << "\n";
    } else {
        Rng init(derive_seed(cfg.train.seed, 0xA11CE));
        base = init_weights(model, init);
        Adam adam(AdamConfig{cfg.train.lr}, base);
        StageSettings s;
        s.stage = TrainStage::A;
        s.steps = cfg.ablation.stage_a_steps;
        s.batch = cfg.train.batch;
        s.seed = cfg.train.seed;
        s.log_every = cfg.train.log_every;
        s.label = "ablate stage A";
        run_stage(model, base, adam, data.train, s, out, log);
        save_checkpoint(dir / "base.ckpt", model, base, &adam.state());
    }

    std::vector<AblationRow> rows{{"full", 0.0, {}}, {"disable_rsa", 0.0, {}}, {"disable_cpm", 0.0, {}}};
    for (int k = 0; k < cfg.ablation.seeds; ++k) {
        const std::uint64_t seed = derive_seed(cfg.train.seed, 1000 + static_cast<std::uint64_t>(k));
        for (auto& row : rows) {
            ModelConfig variant = model;
            ModelWeights w = base;
            const bool lora = row.variant != "disable_rsa";
            if (row.variant == "disable_cpm") variant.position_layout = PositionLayout::Shared;
            if (lora) {
                // Fresh adapters per seed so variance across seeds includes the LoRA init.
                Rng lora_init(derive_seed(seed, 0x10FA));
                for (auto& b : w.blocks) {
                    for (LoRAAdapter* l : {&b.lora_q, &b.lora_k, &b.lora_v})
                        *l = LoRAAdapter::create(static_cast<std::size_t>(model.d_model), model.lora_rank,
                                                 model.lora_alpha, lora_init);
                }
                Adam adam(AdamConfig{cfg.train.lr}, w);
                StageSettings s;
                s.stage = TrainStage::B;
                s.steps = cfg.ablation.stage_b_steps;
                s.batch = cfg.train.batch;
                s.seed = seed;
                s.log_every = cfg.train.log_every;
                s.label = "ablate " + row.variant + " seed " + std::to_string(k) + " stage B";
                run_stage(variant, w, adam, data.train, s, out, log);
            }
            const double sim = evaluate_identity(cfg, variant, w, data.held_out, lora, seed);
            row.per_seed.push_back(sim);
            out << "seed " << k << " " << row.variant << " identity_similarity " << sim << "\n" << std::flush;
            log.write({{"event", "ablate_eval"}, {"seed", k}, {"variant", row.variant}, {"identity_similarity", sim}});
        }
    }
    std::ofstream report(dir / "ablation.jsonl", std::ios::binary);
    if (!report) throw DataError((dir / "ablation.jsonl").string() + ": cannot open for writing");
    for (auto& row : rows) {
        row.identity_similarity = median(row.per_seed);
        report << json{{"variant", row.variant}, {"identity_similarity", row.identity_similarity}, {"per_seed", row.per_seed}}.dump()
               << "\n";
        out << std::left << std::setw(12) << row.variant << " " << row.identity_similarity << "\n";
    }
    return rows;
}

fs::path cmd_bench(const RunConfig& cfg, std::ostream& out) {
    RunLog log(cfg.run_log);
    ModelConfig model = cfg.model;
    ModelWeights w;
    if (!cfg.bench.checkpoint.empty()) {
        if (!fs::exists(cfg.bench.checkpoint)) throw DataError("checkpoint not found: " + cfg.bench.checkpoint);
        Checkpoint ck = load_checkpoint(cfg.bench.checkpoint);
        model = ck.config;
        w = std::move(ck.weights);
    } else {
        Rng init(derive_seed(cfg.train.seed, 0xBE7C));
        w = init_weights(model, init);
        randomize_weights(w, init, 0.05f);
    }
    Rng ref_rng(cfg.sampler.seed);
    const Tensor ref = gaussian(ref_rng, {static_cast<std::size_t>(model.ref_h), static_cast<std::size_t>(model.ref_w),
                                          static_cast<std::size_t>(model.channels)});
    const std::vector<int> prompt = prompt_ids(Motion::Right, model.prompt_len);
    const NoiseSchedule schedule = NoiseSchedule::uniform(cfg.bench.sample_steps);
    const BenchResult b = bench_cache(model, w, ref, prompt, schedule, cfg.bench.reps, cfg.sampler.seed);

    const CostReport large = count_flops(ArchSpec::wan14b_scale());
    const CostReport toy = count_flops(ArchSpec::from_model(model));
    const std::vector<Metric> metrics = {
        {"flop_convention_flops_per_mac", 2.0},
        {"wan14b.lora_params", static_cast<double>(large.trainable_params)},
        {"wan14b.lora_params_vs_153M", static_cast<double>(large.trainable_params) / 153e6 - 1.0},
        {"wan14b.flops_video_only", large.flops_video_only},
        {"wan14b.flops_uncached", large.flops_with_branch_uncached},
        {"wan14b.flops_cached", large.flops_with_branch_cached},
        {"wan14b.overhead_uncached", large.ratio_uncached},
        {"wan14b.overhead_cached", large.ratio_cached},
        {"model.lora_params", static_cast<double>(toy.trainable_params)},
        {"model.overhead_uncached", toy.ratio_uncached},
        {"model.overhead_cached", toy.ratio_cached},
        {"bench.reps", static_cast<double>(b.reps)},
        {"bench.cached_median_s", b.cached_median_s},
        {"bench.uncached_median_s", b.uncached_median_s},
        {"bench.cached_image_branch_evals", static_cast<double>(b.cached_counters.image_branch_evals)},
        {"bench.uncached_image_branch_evals", static_cast<double>(b.uncached_counters.image_branch_evals)},
        {"bench.cached_model_evals", static_cast<double>(b.cached_counters.model_evals)},
        {"bench.uncached_model_evals", static_cast<double>(b.uncached_counters.model_evals)},
    };
    const std::string spec_hash = hex64(text_hash(serialize_model_config(model)));
    const fs::path report(cfg.bench.report);
    write_report(report, metrics, spec_hash);
    out << "cached median " << b.cached_median_s << "s, uncached median " << b.uncached_median_s << "s; 14B-scale FLOP overhead "
        << 100 * large.ratio_uncached << "% uncached, " << 100 * large.ratio_cached << "% cached -> " << report.string() << "\n";
    log.write({{"event", "bench"}, {"report", report.string()}});
    return report;
}

int run_command(const std::string& name, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    try {
        if (name == "gen-data") cmd_gen_data(cfg, out);
        else if (name == "train") cmd_train(cfg, out);
        else if (name == "sample") cmd_sample(cfg, out);
        else if (name == "ablate") cmd_ablate(cfg, out);
        else if (name == "bench") cmd_bench(cfg, out);
        else throw ConfigError("unknown command '" + name + "'");
        return kExitOk;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}

}  // namespace standin
