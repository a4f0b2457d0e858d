#pragma once

// Analytic parameter / FLOP counts, the synthetic identity metric and the
// cache benchmark.
//
// FLOP convention: one multiply-accumulate = 2 FLOPs. Normalizations,
// softmax exponentials, RoPE and modulation are not counted; they are
// O(n d) against the O(n d^2) and O(n^2 d) terms.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "standin/flow.hpp"
#include "standin/model.hpp"

namespace standin {

inline constexpr const char* kReportVersion = "standin-1";

struct ArchSpec {
    std::int64_t d_model = 0;
    std::int64_t n_blocks = 0;
    std::int64_t heads = 0;
    std::int64_t lora_rank = 0;
    double ffn_mult = 4.0;
    std::int64_t n_video_tokens = 0;
    std::int64_t n_image_tokens = 0;
    std::int64_t cross_len = 0;

    void validate() const;
    static ArchSpec from_model(const ModelConfig& cfg);
    // 14B video DiT: d=5120, 40 blocks, 40 heads, FFN 13824; 81 frames at
    // 832x480 through an 8x spatial / 4x temporal VAE and 2x2 patches gives
    // 21 x 30 x 52 = 32,760 video tokens; a 512x512 reference gives 32 x 32.
    static ArchSpec wan14b_scale();
};

struct CostReport {
    std::int64_t trainable_params = 0;  // LoRA A and B
    std::int64_t total_params = 0;      // block matrices + LoRA
    double flops_video_only = 0.0;
    double flops_with_branch_uncached = 0.0;
    double flops_with_branch_cached = 0.0;
    double ratio_uncached = 0.0;  // (uncached - video_only) / video_only
    double ratio_cached = 0.0;
};

std::int64_t count_lora_params(const ArchSpec& spec);

// Per-block terms for n tokens attending to n_k keys:
//   QKV 3*2*n*d^2, scores + weighted sum 2*2*n*n_k*d, output 2*n*d^2,
//   FFN 2*2*n*d^2*m, cross-attention: query/output 2*2*n*d^2, prompt K/V
//   2*2*L*d^2 (shared by both streams), scores 2*2*n*L*d.
// Uncached: the image stream runs every layer (LoRA included) and the video
// queries see n_V + n_I keys. Cached: only the extra video-query x image-key
// scores and value aggregation remain.
CostReport count_flops(const ArchSpec& spec);

// Per frame: maximum over every window of the cosine similarity between the
// scalar-mean-centered window and the mean-centered glyph; averaged over
// frames. glyph [g x g x c], video [F x H x W x c]. Zero-variance windows
// score 0.
double identity_similarity(const Tensor& glyph, const Tensor& video);

struct BenchResult {
    double cached_median_s = 0.0;
    double uncached_median_s = 0.0;
    ForwardCounters cached_counters;    // of one session
    ForwardCounters uncached_counters;  // of one session
    int reps = 0;
};

BenchResult bench_cache(const ModelConfig& cfg, const ModelWeights& w, const Tensor& ref,
                        std::span<const int> prompt, const NoiseSchedule& schedule, int reps,
                        std::uint64_t seed);

struct Metric {
    std::string name;
    double value = 0.0;
};

std::uint64_t text_hash(const std::string& text);
std::string hex64(std::uint64_t v);

// One JSON object per line: {name, value, spec_hash, version}.
void write_report(const std::filesystem::path& path, std::span<const Metric> metrics,
                  const std::string& spec_hash);

}  // namespace standin
