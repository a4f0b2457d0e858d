#pragma once

// Run configuration: flat `[section]` / `key = value` text.
//
//   # comment
//   [model]
//   d_model = 64
//   [rope]
//   split = auto        # or "8,4,4" (t,h,w channels)
//
// Unknown sections or keys are errors. serialize() writes every key, so
// parse(serialize(c)) == c.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "standin/model.hpp"

namespace standin {

struct DataConfig {
    std::string dir = "dataset";
    int samples = 256;
    std::uint64_t seed = 7;
    int glyph = 8;       // glyph edge, pixels
    int downsample = 2;  // pixels per latent cell

    bool operator==(const DataConfig&) const = default;
};

struct TrainConfig {
    char stage = 'A';
    int steps = 2000;
    int batch = 4;
    float lr = 1e-3f;
    std::uint64_t seed = 1;
    int log_every = 50;
    std::string out = "runs/stage_a.ckpt";
    std::string base_checkpoint;  // stage B: the stage-A weights
    std::string resume;           // continue from a checkpoint with optimizer state

    bool operator==(const TrainConfig&) const = default;
};

struct SamplerConfig {
    int steps = 20;
    std::uint64_t seed = 1;
    bool use_cache = true;
    std::string checkpoint = "runs/stage_b.ckpt";
    std::string ref;  // ref.stin (pixels) of a dataset sample
    int prompt = 0;   // motion class
    std::string out = "samples";

    bool operator==(const SamplerConfig&) const = default;
};

struct AblationConfig {
    // Used by train / sample. ablate runs every variant regardless.
    bool disable_rsa = false;
    bool disable_cpm = false;
    int seeds = 3;
    int stage_a_steps = 2000;
    int stage_b_steps = 1000;
    int eval_per_identity = 1;
    int sample_steps = 20;
    std::string out = "runs/ablate";

    bool operator==(const AblationConfig&) const = default;
};

struct BenchConfig {
    int reps = 5;
    int sample_steps = 20;
    std::string checkpoint;  // empty: freshly initialized weights
    std::string report = "report.jsonl";

    bool operator==(const BenchConfig&) const = default;
};

struct RunConfig {
    ModelConfig model;
    bool rope_auto = true;  // derive the rope split from head_dim
    DataConfig data;
    TrainConfig train;
    SamplerConfig sampler;
    AblationConfig ablation;
    BenchConfig bench;
    std::string run_log = "run.jsonl";

    // Applies rope_auto and the ablation flags, then validates.
    void finalize();
    bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& text);
std::string serialize_config(const RunConfig& cfg);
RunConfig load_config(const std::filesystem::path& path);

// "section.key=value". Sets the field only; call finalize() afterwards, or use
// apply_overrides, so a chain of edits may pass through invalid states.
void apply_override(RunConfig& cfg, const std::string& assignment);
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments);

// Only the [model] and [rope] sections; embedded in checkpoint headers.
std::string serialize_model_config(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& text);

}  // namespace standin
