#pragma once

// Rectified flow: x_s = (1 - s) x0 + s eps, the model predicts the velocity
// eps - x0. Sampling integrates from s = 1 to s = 0 with Euler steps.

#include <cstdint>
#include <span>
#include <vector>

#include "standin/checkpoint.hpp"
#include "standin/model.hpp"

namespace standin {

// Decreasing timesteps s_N > ... > s_1 in (0, 1]; integration ends at s = 0.
struct NoiseSchedule {
    std::vector<float> timesteps;

    static NoiseSchedule uniform(int steps);  // s_k = k / N
    std::size_t size() const { return timesteps.size(); }
    float next(std::size_t i) const { return i + 1 < timesteps.size() ? timesteps[i + 1] : 0.0f; }
    void validate() const;
};

Tensor interpolate(const Tensor& x0, const Tensor& eps, float s);

struct TrainExample {
    Tensor x0;   // [F x H x W x c] latent
    Tensor ref;  // [ref_h x ref_w x c] latent, empty for stage A
    std::vector<int> prompt;
};

enum class TrainStage { A, B };

struct LossOptions {
    TrainStage stage = TrainStage::A;
    bool lora_enabled = true;
};

// Mean squared velocity error over the batch. s ~ U(0,1) and eps ~ N(0,1)
// are drawn per example from rng. When grads is non-null the gradient of the
// loss is accumulated into it: every tensor in stage A, LoRA only in stage B.
// Stage A ignores the reference (no image stream). A non-finite loss throws
// TrainingError.
double training_loss(const ModelConfig& cfg, const ModelWeights& w, std::span<const TrainExample> batch,
                     Rng& rng, const LossOptions& options, ModelWeights* grads);

// Same objective with s and eps supplied explicitly (one per example).
double training_loss_at(const ModelConfig& cfg, const ModelWeights& w, std::span<const TrainExample> batch,
                        std::span<const float> s, std::span<const Tensor> eps, const LossOptions& options,
                        ModelWeights* grads);

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

class Adam {
public:
    Adam(AdamConfig cfg, const ModelWeights& like);
    Adam(AdamConfig cfg, AdamState state) : cfg_(cfg), state_(std::move(state)) {}

    // Updates the tensors of the given scope in place.
    void step(ModelWeights& w, const ModelWeights& grads, GradScope scope);
    const AdamState& state() const { return state_; }

private:
    AdamConfig cfg_;
    AdamState state_;
};

struct SampleOptions {
    bool use_cache = true;
    bool lora_enabled = true;
    ForwardCounters* counters = nullptr;
};

// Euler integration from gaussian noise. With use_cache, image keys/values are
// computed on the first step and read on every later step.
Tensor sample(const ModelConfig& cfg, const ModelWeights& w, const Tensor* ref, std::span<const int> prompt,
              const NoiseSchedule& schedule, Rng& rng, const SampleOptions& options = {});

// mask: 1 = generate, 0 = keep known_video. Before each step the kept cells
// are reset to interpolate(known, eps0, s); the result is clamped at s = 0.
Tensor sample_inpaint(const ModelConfig& cfg, const ModelWeights& w, const Tensor* ref,
                      std::span<const int> prompt, const Tensor& known_video, const Tensor& mask,
                      const NoiseSchedule& schedule, Rng& rng, const SampleOptions& options = {});

}  // namespace standin
