#include "standin/flow.hpp"

#include <cmath>
#include <sstream>

#include "standin/errors.hpp"

namespace standin {

NoiseSchedule NoiseSchedule::uniform(int steps) {
    if (steps < 1) throw ValidationError("schedule: need at least one step");
    NoiseSchedule s;
    for (int k = steps; k >= 1; --k) s.timesteps.push_back(static_cast<float>(k) / static_cast<float>(steps));
    return s;
}

void NoiseSchedule::validate() const {
    if (timesteps.empty()) throw ValidationError("schedule: empty");
    if (!(timesteps.front() <= 1.0f)) throw ValidationError("schedule: s_N must be <= 1");
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        if (!(timesteps[i] > 0.0f)) throw ValidationError("schedule: timesteps must be positive");
        if (i > 0 && !(timesteps[i] < timesteps[i - 1])) throw ValidationError("schedule: must strictly decrease");
    }
}

Tensor interpolate(const Tensor& x0, const Tensor& eps, float s) {
    if (x0.shape() != eps.shape()) {
        throw ShapeError("interpolate: " + shape_string(x0.shape()) + " vs " + shape_string(eps.shape()));
    }
    if (s == 0.0f) return x0;
    if (s == 1.0f) return eps;
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0f - s) * x0[i] + s * eps[i];
    return out;
}

double training_loss_at(const ModelConfig& cfg, const ModelWeights& w, std::span<const TrainExample> batch,
                        std::span<const float> s, std::span<const Tensor> eps, const LossOptions& options,
                        ModelWeights* grads) {
    if (batch.empty() || s.size() != batch.size() || eps.size() != batch.size()) {
        throw ValidationError("training loss: batch, s and eps sizes differ");
    }
    const bool stage_b = options.stage == TrainStage::B;
    const GradScope scope = stage_b ? GradScope::LoRAOnly : GradScope::All;
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const TrainExample& ex = batch[b];
        if (stage_b && ex.ref.empty()) throw ValidationError("training loss: stage B needs reference latents");
        const Tensor x_s = interpolate(ex.x0, eps[b], s[b]);
        const Tensor* ref = stage_b ? &ex.ref : nullptr;
        ForwardTape tape;
        ForwardOptions fo;
        fo.lora_enabled = options.lora_enabled;
        fo.tape = grads ? &tape : nullptr;
        const Tensor pred = model_forward(cfg, w, x_s, ref, ex.prompt, s[b], fo);

        const double n = static_cast<double>(pred.size());
        double sq = 0.0;
        Tensor d_out(pred.shape());
        const float g = static_cast<float>(2.0 / (n * static_cast<double>(batch.size())));
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const float diff = pred[i] - (eps[b][i] - ex.x0[i]);
            sq += static_cast<double>(diff) * diff;
            d_out[i] = g * diff;
        }
        const double loss = sq / n;
        if (!std::isfinite(loss)) {
            std::ostringstream msg;
            msg << "non-finite loss on batch item " << b << " at s=" << s[b]
                << " (prediction finite: " << (all_finite(pred) ? "yes" : "no")
                << ", input finite: " << (all_finite(x_s) ? "yes" : "no") << ")";
            throw TrainingError(msg.str());
        }
        total += loss;
        if (grads) model_backward(cfg, w, tape, d_out, *grads, scope, options.lora_enabled);
    }
    return total / static_cast<double>(batch.size());
}

double training_loss(const ModelConfig& cfg, const ModelWeights& w, std::span<const TrainExample> batch,
                     Rng& rng, const LossOptions& options, ModelWeights* grads) {
    std::vector<float> s;
    std::vector<Tensor> eps;
    for (const TrainExample& ex : batch) {
        s.push_back(static_cast<float>(rng.uniform()));
        eps.push_back(gaussian(rng, ex.x0.shape()));
    }
    return training_loss_at(cfg, w, batch, s, eps, options, grads);
}

Adam::Adam(AdamConfig cfg, const ModelWeights& like)
    : cfg_(cfg), state_{like.zeros_like(), like.zeros_like(), 0} {}

void Adam::step(ModelWeights& w, const ModelWeights& grads, GradScope scope) {
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const float c1 = static_cast<float>(1.0 - std::pow(cfg_.beta1, t));
    const float c2 = static_cast<float>(1.0 - std::pow(cfg_.beta2, t));

    std::vector<Tensor*> params, ms, vs;
    std::vector<const Tensor*> gs;
    std::vector<ParamGroup> groups;
    w.for_each([&](const std::string&, Tensor& p, ParamGroup g) {
        params.push_back(&p);
        groups.push_back(g);
    });
    grads.for_each([&](const std::string&, const Tensor& g, ParamGroup) { gs.push_back(&g); });
    state_.m.for_each([&](const std::string&, Tensor& m, ParamGroup) { ms.push_back(&m); });
    state_.v.for_each([&](const std::string&, Tensor& v, ParamGroup) { vs.push_back(&v); });
    if (gs.size() != params.size() || ms.size() != params.size() || vs.size() != params.size()) {
        throw ValidationError("adam: gradient / state layout does not match the weights");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (scope == GradScope::LoRAOnly && groups[i] != ParamGroup::LoRA) continue;
        Tensor& p = *params[i];
        const Tensor& g = *gs[i];
        Tensor& m = *ms[i];
        Tensor& v = *vs[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
            const float mhat = m[j] / c1;
            const float vhat = v[j] / c2;
            p[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

namespace {

struct SamplerState {
    KVCache cache;
    ForwardOptions options;
};

SamplerState make_sampler_state(const SampleOptions& options) {
    SamplerState st;
    st.options.lora_enabled = options.lora_enabled;
    st.options.counters = options.counters;
    return st;
}

void euler_step(const ModelConfig& cfg, const ModelWeights& w, const Tensor* ref, std::span<const int> prompt,
                float s, float s_next, bool use_cache, SamplerState& st, Tensor& x) {
    ForwardOptions fo = st.options;
    if (use_cache && ref) fo.cache = &st.cache;
    const Tensor v = model_forward(cfg, w, x, ref, prompt, s, fo);
    const float dt = s_next - s;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += dt * v[i];
}

}  // namespace

Tensor sample(const ModelConfig& cfg, const ModelWeights& w, const Tensor* ref, std::span<const int> prompt,
              const NoiseSchedule& schedule, Rng& rng, const SampleOptions& options) {
    schedule.validate();
    const Shape shape{static_cast<std::size_t>(cfg.frames), static_cast<std::size_t>(cfg.latent_h),
                      static_cast<std::size_t>(cfg.latent_w), static_cast<std::size_t>(cfg.channels)};
    Tensor x = gaussian(rng, shape);
    SamplerState st = make_sampler_state(options);
    for (std::size_t i = 0; i < schedule.size(); ++i) {
        euler_step(cfg, w, ref, prompt, schedule.timesteps[i], schedule.next(i), options.use_cache, st, x);
    }
    return x;
}

Tensor sample_inpaint(const ModelConfig& cfg, const ModelWeights& w, const Tensor* ref,
                      std::span<const int> prompt, const Tensor& known_video, const Tensor& mask,
                      const NoiseSchedule& schedule, Rng& rng, const SampleOptions& options) {
    schedule.validate();
    const Shape shape{static_cast<std::size_t>(cfg.frames), static_cast<std::size_t>(cfg.latent_h),
                      static_cast<std::size_t>(cfg.latent_w), static_cast<std::size_t>(cfg.channels)};
    if (known_video.shape() != shape) {
        throw ShapeError("inpaint: known video " + shape_string(known_video.shape()) + ", expected " +
                         shape_string(shape));
    }
    if (mask.shape() != shape) {
        throw ShapeError("inpaint: mask " + shape_string(mask.shape()) + ", expected " + shape_string(shape));
    }
    for (float m : mask.values()) {
        if (m != 0.0f && m != 1.0f) throw ValidationError("inpaint: mask entries must be 0 or 1");
    }
    // Same first draw as sample(): with an all-one mask the two coincide.
    const Tensor eps0 = gaussian(rng, shape);
    Tensor x = eps0;
    SamplerState st = make_sampler_state(options);
    auto clamp_known = [&](float s) {
        const Tensor known_s = interpolate(known_video, eps0, s);
        for (std::size_t i = 0; i < x.size(); ++i)
            if (mask[i] == 0.0f) x[i] = known_s[i];
    };
    for (std::size_t i = 0; i < schedule.size(); ++i) {
        clamp_known(schedule.timesteps[i]);
        euler_step(cfg, w, ref, prompt, schedule.timesteps[i], schedule.next(i), options.use_cache, st, x);
    }
    clamp_known(0.0f);
    return x;
}

}  // namespace standin
