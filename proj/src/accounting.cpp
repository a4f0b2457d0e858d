#include "standin/accounting.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "standin/errors.hpp"

namespace standin {

void ArchSpec::validate() const {
    if (d_model <= 0 || n_blocks <= 0 || heads <= 0 || n_video_tokens <= 0 || cross_len <= 0 || !(ffn_mult > 0)) {
        throw ValidationError("arch spec: sizes must be positive");
    }
    if (lora_rank < 0 || n_image_tokens < 0) throw ValidationError("arch spec: rank and image tokens must be >= 0");
}

ArchSpec ArchSpec::from_model(const ModelConfig& cfg) {
    return {cfg.d_model,          cfg.n_blocks,        cfg.heads,           cfg.lora_rank, static_cast<double>(cfg.ffn_mult),
            cfg.video_tokens(), cfg.image_tokens(), cfg.prompt_len};
}

ArchSpec ArchSpec::wan14b_scale() {
    ArchSpec s;
    s.d_model = 5120;
    s.n_blocks = 40;
    s.heads = 40;
    s.lora_rank = 128;
    s.ffn_mult = 13824.0 / 5120.0;
    s.n_video_tokens = 21 * 30 * 52;
    s.n_image_tokens = 32 * 32;
    s.cross_len = 512;
    return s;
}

std::int64_t count_lora_params(const ArchSpec& spec) {
    spec.validate();
    return spec.n_blocks * 3 * spec.lora_rank * (spec.d_model + spec.d_model);
}

CostReport count_flops(const ArchSpec& spec) {
    spec.validate();
    const double d = static_cast<double>(spec.d_model);
    const double m = spec.ffn_mult;
    const double nv = static_cast<double>(spec.n_video_tokens);
    const double ni = static_cast<double>(spec.n_image_tokens);
    const double L = static_cast<double>(spec.cross_len);
    const double r = static_cast<double>(spec.lora_rank);

    // Everything a stream of n tokens costs apart from its self-attention scores.
    auto dense = [&](double n) {
        return 3 * 2 * n * d * d      // QKV
               + 2 * n * d * d        // output projection
               + 2 * 2 * n * d * d * m  // FFN
               + 2 * 2 * n * d * d    // cross query + output
               + 2 * 2 * n * L * d;   // cross scores + aggregation
    };
    auto attention = [&](double n_q, double n_k) { return 2 * 2 * n_q * n_k * d; };
    const double prompt_kv = 2 * 2 * L * d * d;
    const double lora = 3 * 2 * ni * (d * r + r * d);

    const double video_block = dense(nv) + attention(nv, nv) + prompt_kv;
    const double extra_keys = attention(nv, nv + ni) - attention(nv, nv);
    const double image_block = dense(ni) + lora + attention(ni, ni);

    const double blocks = static_cast<double>(spec.n_blocks);
    CostReport rep;
    rep.trainable_params = count_lora_params(spec);
    const double base_params = blocks * (8 * d * d + 2 * d * d * m);
    rep.total_params = static_cast<std::int64_t>(std::llround(base_params)) + rep.trainable_params;
    rep.flops_video_only = blocks * video_block;
    rep.flops_with_branch_uncached = blocks * (video_block + extra_keys + image_block);
    rep.flops_with_branch_cached = blocks * (video_block + extra_keys);
    rep.ratio_uncached = (rep.flops_with_branch_uncached - rep.flops_video_only) / rep.flops_video_only;
    rep.ratio_cached = (rep.flops_with_branch_cached - rep.flops_video_only) / rep.flops_video_only;
    return rep;
}

double identity_similarity(const Tensor& glyph, const Tensor& video) {
    if (glyph.rank() != 3 || video.rank() != 4 || glyph.dim(2) != video.dim(3)) {
        throw ShapeError("identity similarity: expected glyph [g x g x c] and video [F x H x W x c]");
    }
    const std::size_t gh = glyph.dim(0), gw = glyph.dim(1), C = glyph.dim(2);
    const std::size_t F = video.dim(0), H = video.dim(1), W = video.dim(2);
    if (gh > H || gw > W) throw ValidationError("identity similarity: glyph larger than the frame");

    const std::size_t n = gh * gw * C;
    std::vector<double> g(n);
    double g_mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) g_mean += glyph[i];
    g_mean /= static_cast<double>(n);
    double g_norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        g[i] = glyph[i] - g_mean;
        g_norm += g[i] * g[i];
    }
    g_norm = std::sqrt(g_norm);
    if (g_norm == 0.0) return 0.0;

    std::vector<double> per_frame(F);
#pragma omp parallel for
    for (std::size_t f = 0; f < F; ++f) {
        double best = -std::numeric_limits<double>::infinity();
        std::vector<double> patch(n);
        for (std::size_t top = 0; top + gh <= H; ++top)
            for (std::size_t left = 0; left + gw <= W; ++left) {
                double p_mean = 0.0;
                std::size_t k = 0;
                for (std::size_t y = 0; y < gh; ++y)
                    for (std::size_t x = 0; x < gw; ++x)
                        for (std::size_t c = 0; c < C; ++c, ++k) {
                            patch[k] = video[(((f * H) + top + y) * W + left + x) * C + c];
                            p_mean += patch[k];
                        }
                p_mean /= static_cast<double>(n);
                double dot = 0.0, p_norm = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double p = patch[i] - p_mean;
                    dot += p * g[i];
                    p_norm += p * p;
                }
                const double sim = p_norm > 1e-18 ? dot / (std::sqrt(p_norm) * g_norm) : 0.0;
                best = std::max(best, sim);
            }
        per_frame[f] = best;
    }
    double total = 0.0;
    for (double v : per_frame) total += v;
    return total / static_cast<double>(F);
}

BenchResult bench_cache(const ModelConfig& cfg, const ModelWeights& w, const Tensor& ref,
                        std::span<const int> prompt, const NoiseSchedule& schedule, int reps, std::uint64_t seed) {
    if (reps < 3) throw ValidationError("bench: reps must be >= 3");
    BenchResult out;
    out.reps = reps;
    std::vector<double> cached, uncached;
    // Untimed warm-up of both paths: first-touch allocations and thread pool start.
    for (const bool use_cache : {true, false}) {
        Rng rng(seed);
        SampleOptions opts;
        opts.use_cache = use_cache;
        (void)sample(cfg, w, &ref, prompt, schedule, rng, opts);
    }
    for (int rep = 0; rep < reps; ++rep) {
        // Alternate the order so drift in machine state hits both paths alike.
        for (int pass = 0; pass < 2; ++pass) {
            const bool use_cache = (pass == 0) == (rep % 2 == 0);
            ForwardCounters counters;
            Rng rng(seed);
            SampleOptions opts;
            opts.use_cache = use_cache;
            opts.counters = &counters;
            const auto t0 = std::chrono::steady_clock::now();
            (void)sample(cfg, w, &ref, prompt, schedule, rng, opts);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            (use_cache ? cached : uncached).push_back(secs);
            (use_cache ? out.cached_counters : out.uncached_counters) = counters;
        }
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    out.cached_median_s = median(cached);
    out.uncached_median_s = median(uncached);
    const auto expected_cached = static_cast<std::uint64_t>(cfg.n_blocks);
    if (out.cached_counters.image_branch_evals != expected_cached) {
        throw CacheError("bench: cached session ran the image stream " +
                         std::to_string(out.cached_counters.image_branch_evals) + " times, expected " +
                         std::to_string(expected_cached));
    }
    return out;
}

std::uint64_t text_hash(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_report(const std::filesystem::path& path, std::span<const Metric> metrics, const std::string& spec_hash) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path.string() + ": cannot open for writing");
    for (const Metric& m : metrics) {
        const nlohmann::json line = {
            {"name", m.name}, {"value", m.value}, {"spec_hash", spec_hash}, {"version", kReportVersion}};
        out << line.dump() << "\n";
    }
    if (!out) throw DataError(path.string() + ": write failed");
}

}  // namespace standin
