#pragma once

// Test-only helpers: a straightforward double-precision re-implementation of
// the model forward pass (naive loops, no shared code with src/model.cpp
// beyond the weight container) and a finite-difference gradient checker
// built on it.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "standin/model.hpp"

namespace standin::testing {

// One weight coordinate nudged by delta inside the reference forward.
struct Nudge {
    std::string tensor;
    std::size_t index = 0;
    double delta = 0.0;
};

// Velocity prediction in double precision, flattened like the latent.
std::vector<double> reference_forward(const ModelConfig& cfg, const ModelWeights& w, const Tensor& noisy_latent,
                                      const Tensor* ref_latent, std::span<const int> prompt, float s,
                                      bool lora_enabled, const std::optional<Nudge>& nudge = std::nullopt);

// About 900 parameters: d=6, one head, rope split (2,2,2), one block, FFN x1,
// one channel, 2 frames of 4x4 with patch (1,2,2), 4x4 reference, LoRA rank 1.
ModelConfig tiny_config();

Tensor random_tensor(Rng& rng, const Shape& shape, float std = 1.0f);

struct GradCheckSample {
    std::string tensor;
    std::size_t index = 0;
    double backprop = 0.0;
    double finite_diff = 0.0;
    double rel_error = 0.0;
};

struct GradCheckResult {
    std::vector<GradCheckSample> samples;
    double max_rel_error = 0.0;
    double forward_max_diff = 0.0;  // float model vs double reference
    std::size_t parameters = 0;
};

// Loss = sum(output * projection) for a random projection, so d(loss)/d(output)
// is the projection itself. Compares model_backward against central
// differences of the reference forward at `coords` sampled coordinates
// (every tensor at least once). Relative error is |a - b| / max(|a|, |b|, floor).
GradCheckResult gradient_check(const ModelConfig& cfg, std::uint64_t seed, int coords, double floor = 1e-4);

}  // namespace standin::testing
