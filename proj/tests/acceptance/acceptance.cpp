// Acceptance checks, one PASS/FAIL line per criterion.
//
//   acceptance [criterion ...]     (default: all of 1..10)
//
// Exit status is 0 only when every requested criterion passes.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "reference_model.hpp"
#include "standin/accounting.hpp"
#include "standin/attention.hpp"
#include "standin/flow.hpp"
#include "standin/model.hpp"
#include "standin/position.hpp"

using namespace standin;
using standin::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v) {
    std::ostringstream ss;
    ss << std::setprecision(4) << v;
    return ss.str();
}

Shape latent_shape(const ModelConfig& c) {
    return {static_cast<std::size_t>(c.frames), static_cast<std::size_t>(c.latent_h),
            static_cast<std::size_t>(c.latent_w), static_cast<std::size_t>(c.channels)};
}
Shape ref_shape(const ModelConfig& c) {
    return {static_cast<std::size_t>(c.ref_h), static_cast<std::size_t>(c.ref_w), static_cast<std::size_t>(c.channels)};
}

Tensor rows_of(const Tensor& t, std::size_t begin, std::size_t end) {
    Tensor out({end - begin, t.cols()});
    std::copy(t.row(begin), t.row(begin) + out.size(), out.data());
    return out;
}

ModelConfig small_model(int blocks, int heads, PositionLayout layout, bool modulate) {
    ModelConfig cfg;
    cfg.d_model = 8 * heads;
    cfg.n_blocks = blocks;
    cfg.heads = heads;
    cfg.ffn_mult = 2;
    cfg.frames = 2;
    cfg.latent_h = 4;
    cfg.latent_w = 6;
    cfg.channels = 2;
    cfg.ref_h = 4;
    cfg.ref_w = 4;
    cfg.prompt_vocab = 4;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 2.0f;
    cfg.rope = RoPEConfig::with_default_split(8);
    cfg.position_layout = layout;
    cfg.modulate_image_stream = modulate;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string line = std::string(STANDIN_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(line.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// ---- 1 ------------------------------------------------------------------------

Outcome restricted_vs_masked() {
    Rng rng(101);
    const int trials = 120;
    float worst = 0.0f;
    for (int trial = 0; trial < trials; ++trial) {
        const int heads = 1 + static_cast<int>(rng.below(4));
        const std::size_t hd = 2 * (1 + rng.below(8));
        const std::size_t w = heads * hd, ni = 1 + rng.below(24), nv = 1 + rng.below(48);
        const float spread = 0.5f + 2.0f * static_cast<float>(rng.uniform());
        const Tensor q = random_tensor(rng, {ni + nv, w}, spread), k = random_tensor(rng, {ni + nv, w}, spread),
                     v = random_tensor(rng, {ni + nv, w});
        const RestrictedOutputs r =
            restricted_attention(rows_of(q, 0, ni), rows_of(k, 0, ni), rows_of(v, 0, ni), rows_of(q, ni, ni + nv),
                                 rows_of(k, ni, ni + nv), rows_of(v, ni, ni + nv), heads);
        const Tensor joint = masked_attention_oracle(q, k, v, image_isolation_mask(ni, nv), heads);
        worst = std::max(worst, max_abs_diff(concat_rows(r.image, r.video), joint));
    }
    return {worst < 1e-6f, std::to_string(trials) + " trials, max abs diff " + fmt(worst)};
}

// ---- 2 ------------------------------------------------------------------------

Outcome image_isolation() {
    Rng rng(202);
    int checks = 0;
    bool ok = true;
    // attention level: Out_I under arbitrary video Q/K/V
    for (int trial = 0; trial < 20; ++trial) {
        const int heads = 2;
        const std::size_t w = 16, ni = 5, nv = 11;
        const Tensor qi = random_tensor(rng, {ni, w}), ki = random_tensor(rng, {ni, w}), vi = random_tensor(rng, {ni, w});
        const RestrictedOutputs a = restricted_attention(qi, ki, vi, random_tensor(rng, {nv, w}),
                                                         random_tensor(rng, {nv, w}), random_tensor(rng, {nv, w}), heads);
        const RestrictedOutputs b = restricted_attention(qi, ki, vi, random_tensor(rng, {nv, w}, 10.0f),
                                                         random_tensor(rng, {nv, w}, 10.0f),
                                                         random_tensor(rng, {nv, w}, 10.0f), heads);
        ok = ok && a.image == b.image;
        ++checks;
    }
    // model level: every block's image activations under video-token perturbation
    for (PositionLayout layout : {PositionLayout::Conditional, PositionLayout::Shared}) {
        for (bool modulate : {true, false}) {
            const ModelConfig cfg = small_model(3, 2, layout, modulate);
            Rng init(303);
            ModelWeights w = init_weights(cfg, init);
            randomize_weights(w, init, 0.3f);
            const Tensor ref = random_tensor(rng, ref_shape(cfg));
            const std::vector<int> prompt{1, 2};
            std::vector<Tensor> base;
            ForwardOptions o;
            o.image_activations = &base;
            (void)model_forward(cfg, w, random_tensor(rng, latent_shape(cfg)), &ref, prompt, 0.5f, o);
            for (int trial = 0; trial < 4; ++trial) {
                std::vector<Tensor> other;
                ForwardOptions p;
                p.image_activations = &other;
                const float s = static_cast<float>(rng.uniform());
                (void)model_forward(cfg, w, random_tensor(rng, latent_shape(cfg), 5.0f), &ref, prompt, s, p);
                ok = ok && other.size() == base.size();
                for (std::size_t b = 0; b < base.size() && b < other.size(); ++b) ok = ok && other[b] == base[b];
                ++checks;
            }
        }
    }
    return {ok, std::to_string(checks) + " perturbations, bit-identical: " + (ok ? "yes" : "no")};
}

// ---- 3 ------------------------------------------------------------------------

Outcome kv_cache() {
    float worst = 0.0f;
    bool counters_ok = true;
    int configs = 0;
    const int steps = 6;
    for (int blocks : {1, 3})
        for (int heads : {1, 2})
            for (PositionLayout layout : {PositionLayout::Conditional, PositionLayout::Shared})
                for (bool modulate : {true, false})
                    for (bool lora : {true, false}) {
                        const ModelConfig cfg = small_model(blocks, heads, layout, modulate);
                        Rng init(400 + configs);
                        ModelWeights w = init_weights(cfg, init);
                        randomize_weights(w, init, 0.3f);
                        const Tensor ref = random_tensor(init, ref_shape(cfg));
                        const std::vector<int> prompt{0, 3};
                        ForwardCounters cached, uncached;
                        Rng r1(9), r2(9);
                        const NoiseSchedule sched = NoiseSchedule::uniform(steps);
                        const Tensor a = sample(cfg, w, &ref, prompt, sched, r1, {true, lora, &cached});
                        const Tensor b = sample(cfg, w, &ref, prompt, sched, r2, {false, lora, &uncached});
                        worst = std::max(worst, max_abs_diff(a, b));
                        const auto n = static_cast<std::uint64_t>(blocks);
                        counters_ok = counters_ok && cached.image_branch_evals == n &&
                                      cached.cache_reads == n * (steps - 1) && uncached.image_branch_evals == n * steps &&
                                      cached.model_evals == steps;
                        ++configs;
                    }
    return {worst < 1e-5f && counters_ok, std::to_string(configs) + " configs, max abs diff " + fmt(worst) +
                                              ", image branch once per block when cached: " +
                                              (counters_ok ? "yes" : "no")};
}

// ---- 4 ------------------------------------------------------------------------

Outcome lora_params() {
    const std::int64_t n = count_lora_params(ArchSpec::wan14b_scale());
    const double rel = static_cast<double>(n) / 153e6 - 1.0;
    bool enum_ok = true;
    for (int r : {1, 3, 8})
        for (int blocks : {1, 2, 5}) {
            ModelConfig cfg = small_model(blocks, 2, PositionLayout::Conditional, true);
            cfg.lora_rank = r;
            Rng rng(4);
            const ModelWeights w = init_weights(cfg, rng);
            enum_ok = enum_ok && count_lora_params(ArchSpec::from_model(cfg)) ==
                                     static_cast<std::int64_t>(w.parameter_count(ParamGroup::LoRA));
        }
    return {n == 157286400 && std::abs(rel) <= 0.05 && enum_ok,
            std::to_string(n) + " (" + fmt(100.0 * rel) + "% vs 153M), toy enumeration matches: " +
                (enum_ok ? "yes" : "no")};
}

// ---- 5 ------------------------------------------------------------------------

Outcome flop_overhead() {
    const CostReport r = count_flops(ArchSpec::wan14b_scale());
    const bool uncached = r.ratio_uncached >= 0.015 && r.ratio_uncached <= 0.04;
    const bool cached = r.ratio_cached < 0.003;
    return {uncached && cached, "uncached " + fmt(100.0 * r.ratio_uncached) + "% in [1.5, 4]: " +
                                    (uncached ? "yes" : "no") + "; cached " + fmt(100.0 * r.ratio_cached) +
                                    "% < 0.3: " + (cached ? "yes" : "no")};
}

// ---- 6 ------------------------------------------------------------------------

Outcome gradients() {
    const auto r = standin::testing::gradient_check(standin::testing::tiny_config(), 606, 64);
    const bool ok = r.parameters <= 1000 && r.samples.size() >= 50 && r.max_rel_error < 1e-3;
    return {ok, std::to_string(r.samples.size()) + " coordinates over " + std::to_string(r.parameters) +
                    " parameters, max rel error " + fmt(r.max_rel_error)};
}

// ---- 7 ------------------------------------------------------------------------

Outcome ablation() {
    const fs::path work = fs::current_path() / "acceptance_ablation";
    fs::create_directories(work);
    const fs::path config = fs::path(STANDIN_SOURCE_DIR) / "configs" / "ablation.cfg";
    const std::string common = "--config " + config.string() + " --set data.dir=" + (work / "data").string() +
                               " --set ablation.out=" + (work / "out").string() +
                               " --set run.log=" + (work / "run.jsonl").string();
    if (int rc = run_cli("gen-data " + common, work / "gen_data.log"); rc != 0)
        return {false, "gen-data exited with " + std::to_string(rc)};
    if (int rc = run_cli("ablate " + common, work / "ablate.log"); rc != 0)
        return {false, "ablate exited with " + std::to_string(rc) + " (see " + (work / "ablate.log").string() + ")"};
    std::map<std::string, double> sim;
    std::ifstream in(work / "out" / "ablation.jsonl");
    std::string line;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        sim[j.at("variant").get<std::string>()] = j.at("identity_similarity").get<double>();
    }
    if (sim.size() != 3) return {false, "ablation report incomplete"};
    const double m_rsa = sim["full"] - sim["disable_rsa"], m_cpm = sim["full"] - sim["disable_cpm"];
    return {m_rsa >= 0.1 && m_cpm >= 0.1, "median similarity full " + fmt(sim["full"]) + ", w/o RSA " +
                                              fmt(sim["disable_rsa"]) + ", w/o CPM " + fmt(sim["disable_cpm"]) +
                                              "; margins " + fmt(m_rsa) + ", " + fmt(m_cpm)};
}

// ---- 8 ------------------------------------------------------------------------

double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

Outcome rope_properties() {
    Rng rng(808);
    double norm_err = 0.0, rel_err = 0.0;
    const RoPEConfig cfg = RoPEConfig::with_default_split(16);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor x = random_tensor(rng, {1, 16});
        const Coord3D c{static_cast<int>(rng.below(40)) - 20, static_cast<int>(rng.below(40)) - 20,
                        static_cast<int>(rng.below(40)) - 20};
        const Tensor y = apply_rope(x, std::span<const Coord3D>(&c, 1), cfg);
        norm_err = std::max(norm_err, std::abs(std::sqrt(dot(y, y)) - std::sqrt(dot(x, x))));
    }
    // <R(p) q, R(p') k> depends on p - p' only: shift both positions together
    for (int trial = 0; trial < 4; ++trial) {
        const Tensor q = random_tensor(rng, {1, 16}), k = random_tensor(rng, {1, 16});
        const Coord3D p{static_cast<int>(rng.below(8)), static_cast<int>(rng.below(8)), static_cast<int>(rng.below(8))};
        const Coord3D pk{static_cast<int>(rng.below(8)), static_cast<int>(rng.below(8)), static_cast<int>(rng.below(8))};
        const double want = dot(apply_rope(q, std::span<const Coord3D>(&p, 1), cfg),
                                apply_rope(k, std::span<const Coord3D>(&pk, 1), cfg));
        for (int dt = -8; dt <= 8; ++dt)
            for (int dh = -8; dh <= 8; dh += 4)
                for (int dw = -8; dw <= 8; dw += 2) {
                    const Coord3D a{p.t + dt, p.h + dh, p.w + dw}, b{pk.t + dt, pk.h + dh, pk.w + dw};
                    const double got = dot(apply_rope(q, std::span<const Coord3D>(&a, 1), cfg),
                                           apply_rope(k, std::span<const Coord3D>(&b, 1), cfg));
                    rel_err = std::max(rel_err, std::abs(got - want));
                }
    }
    // grid disjointness sweep
    int cases = 0;
    bool disjoint = true;
    for (; cases < 200; ++cases) {
        const int F = 1 + static_cast<int>(rng.below(9)), H = 1 + static_cast<int>(rng.below(12)),
                  W = 1 + static_cast<int>(rng.below(12)), HI = 1 + static_cast<int>(rng.below(12)),
                  WI = 1 + static_cast<int>(rng.below(12));
        const std::vector<Coord3D> g = build_position_grid(F, H, W, HI, WI);
        const std::set<Coord3D> video(g.begin(), g.begin() + F * H * W);
        for (auto it = g.begin() + F * H * W; it != g.end(); ++it) disjoint = disjoint && video.count(*it) == 0;
        disjoint = disjoint && g.size() == static_cast<std::size_t>(F * H * W + HI * WI);
    }
    const bool ok = norm_err < 1e-6 && rel_err < 1e-4 && disjoint;
    return {ok, "norm error " + fmt(norm_err) + ", max shift-invariance error " + fmt(rel_err) + " over shifts +-8, " +
                    std::to_string(cases) + " grids disjoint: " + (disjoint ? "yes" : "no")};
}

// ---- 9 ------------------------------------------------------------------------

Outcome inpainting() {
    float worst = 0.0f;
    bool identical = true;
    for (int trial = 0; trial < 6; ++trial) {
        const ModelConfig cfg = small_model(2, 2, PositionLayout::Conditional, true);
        Rng rng(900 + trial);
        ModelWeights w = init_weights(cfg, rng);
        randomize_weights(w, rng, 0.3f);
        const Tensor ref = random_tensor(rng, ref_shape(cfg)), known = random_tensor(rng, latent_shape(cfg));
        const std::vector<int> prompt{2, 1};
        const NoiseSchedule sched = NoiseSchedule::uniform(8);
        Tensor mask(known.shape());
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < 0.5 ? 1.0f : 0.0f;
        Rng a(trial);
        const Tensor out = sample_inpaint(cfg, w, &ref, prompt, known, mask, sched, a);
        for (std::size_t i = 0; i < out.size(); ++i)
            if (mask[i] == 0.0f) worst = std::max(worst, std::abs(out[i] - known[i]));
        Rng b(trial), c(trial);
        identical = identical && sample_inpaint(cfg, w, &ref, prompt, known, Tensor(known.shape(), 1.0f), sched, b) ==
                                     sample(cfg, w, &ref, prompt, sched, c);
    }
    return {worst <= 1e-5f && identical, "kept cells max abs diff " + fmt(worst) +
                                             ", all-one mask bit-identical to sample: " + (identical ? "yes" : "no")};
}

// ---- 10 -----------------------------------------------------------------------

bool same_tree(const fs::path& a, const fs::path& b, int& files) {
    std::set<fs::path> names;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) names.insert(fs::relative(e.path(), a));
    for (const auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file()) names.insert(fs::relative(e.path(), b));
    bool ok = true;
    for (const auto& n : names) {
        ok = ok && fs::exists(a / n) && fs::exists(b / n) && slurp(a / n) == slurp(b / n);
        ++files;
    }
    return ok;
}

Outcome determinism() {
    const fs::path work = fs::temp_directory_path() / "standin_acceptance_determinism";
    fs::remove_all(work);
    fs::create_directories(work);
    const fs::path config = work / "run.cfg";
    std::ofstream(config) << "[model]\nd_model = 16\nn_blocks = 2\nheads = 2\nffn_mult = 2\nframes = 2\n"
                             "latent_h = 8\nlatent_w = 8\nlora_rank = 2\nlora_alpha = 2\n"
                             "[data]\nsamples = 8\n[train]\nsteps = 4\nbatch = 2\n[sampler]\nsteps = 4\n";
    const auto args = [&](const std::string& cmd, const std::string& tag) {
        const fs::path d = work / tag;
        return cmd + " --config " + config.string() + " --set data.dir=" + (d / "data").string() +
               " --set train.out=" + (d / "a.ckpt").string() + " --set sampler.checkpoint=" + (d / "a.ckpt").string() +
               " --set sampler.ref=" + (d / "data/s00007/ref.stin").string() +
               " --set sampler.out=" + (d / "samples").string() + " --set run.log=" + (work / "run.jsonl").string();
    };
    for (const char* tag : {"run1", "run2"})
        for (const char* cmd : {"gen-data", "train", "sample"})
            if (int rc = run_cli(args(cmd, tag), work / "cli.log"); rc != 0)
                return {false, std::string(cmd) + " exited with " + std::to_string(rc)};
    int files = 0;
    bool ok = same_tree(work / "run1/data", work / "run2/data", files);
    for (const char* f : {"a.ckpt", "samples/latent.stin", "samples/preview.ppm"}) {
        ok = ok && slurp(work / "run1" / f) == slurp(work / "run2" / f) && !slurp(work / "run1" / f).empty();
        ++files;
    }
    fs::remove_all(work);
    return {ok, std::to_string(files) + " artifacts compared, byte-identical: " + (ok ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria = {
        {1, {"restricted attention equals masked full attention", restricted_vs_masked}},
        {2, {"image branch isolation", image_isolation}},
        {3, {"kv cache correctness", kv_cache}},
        {4, {"LoRA parameter count", lora_params}},
        {5, {"FLOP overhead brackets", flop_overhead}},
        {6, {"gradient correctness", gradients}},
        {7, {"ablation ordering", ablation}},
        {8, {"rope properties", rope_properties}},
        {9, {"inpainting fidelity", inpainting}},
        {10, {"determinism", determinism}},
    };
    std::vector<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));
    if (wanted.empty())
        for (const auto& [k, v] : criteria) wanted.push_back(k);

    int failures = 0;
    for (int id : wanted) {
        const auto it = criteria.find(id);
        if (it == criteria.end()) {
            std::cout << "criterion " << id << ": FAIL unknown criterion\n";
            ++failures;
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = it->second.second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << "criterion " << id << " (" << it->second.first << "): " << (o.pass ? "PASS" : "FAIL") << " -- "
                  << o.detail << " [" << fmt(secs) << " s]\n"
                  << std::flush;
        failures += o.pass ? 0 : 1;
    }
    return failures == 0 ? 0 : 1;
}
