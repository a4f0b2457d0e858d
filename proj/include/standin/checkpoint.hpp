#pragma once

// Model checkpoints in the STIN archive container.
//
// Header: the [model]/[rope] config text followed by a [checkpoint] section
// (optimizer step). Entries: every parameter under its name, plus
// "adam.m.<name>" / "adam.v.<name>" when optimizer state is saved.

#include <cstdint>
#include <filesystem>
#include <optional>

#include "standin/model.hpp"

namespace standin {

struct AdamState {
    ModelWeights m;
    ModelWeights v;
    std::int64_t step = 0;
};

struct Checkpoint {
    ModelConfig config;
    ModelWeights weights;
    std::optional<AdamState> optimizer;
};

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ModelWeights& w,
                     const AdamState* optimizer = nullptr);

// Validates every expected name and shape; missing or extra tensors are data errors.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace standin
