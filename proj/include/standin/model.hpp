#pragma once

// Miniature video DiT with a conditional image branch.
//
// Each block runs two token streams through shared weights:
//
//   video: modulated by the embedding of the denoising time s
//   image: modulated by the embedding of s_ref = 0, LoRA on its Q/K/V
//
//   x  += gate1 * W_o RestrictedAttn(LN(x) * (1 + scale1) + shift1)
//   x  += W_co CrossAttn(LN_affine(x), prompt)
//   x  += gate2 * FFN(LN(x) * (1 + scale2) + shift2)
//
// The two streams only meet inside restricted self-attention. Image tokens
// never reach the output head. Backward passes are written by hand.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "standin/attention.hpp"
#include "standin/position.hpp"
#include "standin/tensor.hpp"

namespace standin {

struct GridDims {
    int frames = 1;
    int height = 1;
    int width = 1;

    int count() const { return frames * height * width; }
    bool operator==(const GridDims&) const = default;
};

struct PatchSize {
    int t = 1;
    int h = 2;
    int w = 2;

    bool operator==(const PatchSize&) const = default;
};

struct ModelConfig {
    int d_model = 64;
    int n_blocks = 4;
    int heads = 4;
    int ffn_mult = 4;
    PatchSize patch;
    int frames = 8;
    int latent_h = 16;
    int latent_w = 16;
    int channels = 3;
    int ref_h = 8;
    int ref_w = 8;
    int prompt_vocab = 7;
    int prompt_len = 2;
    RoPEConfig rope = RoPEConfig::with_default_split(16);
    int lora_rank = 8;
    float lora_alpha = 8.0f;
    PositionLayout position_layout = PositionLayout::Conditional;
    // false: image tokens bypass adaLN modulation (shift = scale = 0, gate = 1)
    bool modulate_image_stream = true;

    int head_dim() const { return d_model / heads; }
    int patch_dim() const { return patch.t * patch.h * patch.w * channels; }
    GridDims video_grid() const { return {frames / patch.t, latent_h / patch.h, latent_w / patch.w}; }
    GridDims image_grid() const { return {1, ref_h / patch.h, ref_w / patch.w}; }
    int video_tokens() const { return video_grid().count(); }
    int image_tokens() const { return image_grid().count(); }

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// ---- weights -------------------------------------------------------------------

enum class ParamGroup { Base, LoRA };

struct BlockWeights {
    Tensor mod_w;  // [d x 6d]: shift1 scale1 gate1 shift2 scale2 gate2
    Tensor mod_b;  // [6d]
    ProjectionWeights attn;
    LoRAAdapter lora_q;
    LoRAAdapter lora_k;
    LoRAAdapter lora_v;
    Tensor cross_norm_g;
    Tensor cross_norm_b;
    ProjectionWeights cross;
    Tensor ffn_w1;  // [d x d*m]
    Tensor ffn_b1;
    Tensor ffn_w2;  // [d*m x d]
    Tensor ffn_b2;
};

struct ModelWeights {
    Tensor patch_w;  // [patch_dim x d]
    Tensor patch_b;
    Tensor time_w1;  // [d x d], input: sinusoidal features of width d
    Tensor time_b1;
    Tensor time_w2;
    Tensor time_b2;
    Tensor prompt_table;  // [vocab x d]
    std::vector<BlockWeights> blocks;
    Tensor head_mod_w;  // [d x 2d]: shift, scale
    Tensor head_mod_b;
    Tensor head_w;  // [d x patch_dim]
    Tensor head_b;

    // Visits every parameter tensor with its checkpoint name and group.
    template <typename F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <typename F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

    ModelWeights zeros_like() const;
    std::size_t parameter_count(ParamGroup group) const;
    std::uint64_t fingerprint(ParamGroup group) const;

private:
    template <typename Self, typename F>
    static void visit(Self& self, F& f) {
        f("embed.patch.w", self.patch_w, ParamGroup::Base);
        f("embed.patch.b", self.patch_b, ParamGroup::Base);
        f("embed.time.w1", self.time_w1, ParamGroup::Base);
        f("embed.time.b1", self.time_b1, ParamGroup::Base);
        f("embed.time.w2", self.time_w2, ParamGroup::Base);
        f("embed.time.b2", self.time_b2, ParamGroup::Base);
        f("embed.prompt", self.prompt_table, ParamGroup::Base);
        for (std::size_t i = 0; i < self.blocks.size(); ++i) {
            auto& b = self.blocks[i];
            const std::string p = "block" + std::to_string(i) + ".";
            f(p + "mod.w", b.mod_w, ParamGroup::Base);
            f(p + "mod.b", b.mod_b, ParamGroup::Base);
            f(p + "attn.q", b.attn.wq, ParamGroup::Base);
            f(p + "attn.k", b.attn.wk, ParamGroup::Base);
            f(p + "attn.v", b.attn.wv, ParamGroup::Base);
            f(p + "attn.o", b.attn.wo, ParamGroup::Base);
            f(p + "lora_q.A", b.lora_q.a, ParamGroup::LoRA);
            f(p + "lora_q.B", b.lora_q.b, ParamGroup::LoRA);
            f(p + "lora_k.A", b.lora_k.a, ParamGroup::LoRA);
            f(p + "lora_k.B", b.lora_k.b, ParamGroup::LoRA);
            f(p + "lora_v.A", b.lora_v.a, ParamGroup::LoRA);
            f(p + "lora_v.B", b.lora_v.b, ParamGroup::LoRA);
            f(p + "norm_cross.g", b.cross_norm_g, ParamGroup::Base);
            f(p + "norm_cross.b", b.cross_norm_b, ParamGroup::Base);
            f(p + "cross.q", b.cross.wq, ParamGroup::Base);
            f(p + "cross.k", b.cross.wk, ParamGroup::Base);
            f(p + "cross.v", b.cross.wv, ParamGroup::Base);
            f(p + "cross.o", b.cross.wo, ParamGroup::Base);
            f(p + "ffn.w1", b.ffn_w1, ParamGroup::Base);
            f(p + "ffn.b1", b.ffn_b1, ParamGroup::Base);
            f(p + "ffn.w2", b.ffn_w2, ParamGroup::Base);
            f(p + "ffn.b2", b.ffn_b2, ParamGroup::Base);
        }
        f("head.mod.w", self.head_mod_w, ParamGroup::Base);
        f("head.mod.b", self.head_mod_b, ParamGroup::Base);
        f("head.w", self.head_w, ParamGroup::Base);
        f("head.b", self.head_b, ParamGroup::Base);
    }
};

// adaLN-zero initialization: modulation and output head start at zero, LoRA B
// at zero, everything else fan-in scaled Gaussian.
ModelWeights init_weights(const ModelConfig& cfg, Rng& rng);

// Fills every tensor (LoRA included) with N(0, std^2). Test helper for
// exercising paths that adaLN-zero would otherwise silence.
void randomize_weights(ModelWeights& w, Rng& rng, float std = 0.3f);

// Checks that the tensor set matches cfg exactly (names and shapes).
void validate_weights(const ModelConfig& cfg, const ModelWeights& w);

// ---- patches and timestep features --------------------------------------------

// [F x H x W x c] -> [(F/pt)(H/ph)(W/pw) x pt*ph*pw*c]; within a patch the
// order is (dt, dh, dw, channel).
struct Patches {
    Tensor tokens;
    GridDims grid;
};
Patches patchify(const Tensor& latent, PatchSize patch);
Tensor unpatchify(const Tensor& tokens, GridDims grid, PatchSize patch, int channels);

// [cos(1000 s f_0..f_{h-1}), sin(1000 s f_0..f_{h-1})], f_i = 10000^(-i/h), h = dim/2.
Tensor timestep_features(float s, int dim);

// ---- forward / backward -----------------------------------------------------------

struct TimestepPair {
    float s = 1.0f;
    static constexpr float s_ref = 0.0f;
};

struct ForwardCounters {
    std::uint64_t model_evals = 0;
    // Blocks that ran the image stream up to its Q/K/V projection.
    std::uint64_t image_branch_evals = 0;
    std::uint64_t cache_reads = 0;
};

// Per-session cache: one entry per block. Bound on first use to a fingerprint
// of (weights, reference, prompt); reuse under a different binding throws.
class KVCache {
public:
    bool populated() const { return !entries_.empty(); }
    std::size_t size() const { return entries_.size(); }
    const KVCacheEntry& entry(std::size_t block) const { return entries_.at(block); }

    void bind(std::uint64_t key);
    void store(std::vector<KVCacheEntry> entries);
    void clear();

private:
    std::vector<KVCacheEntry> entries_;
    std::uint64_t key_ = 0;
    bool bound_ = false;
};

struct StreamTape {
    Tensor x_in;
    Tensor xhat1, rstd1, h1;
    Tensor xa_q, xa_k, xa_v;  // h1 * A (image stream only)
    Tensor q_rot, k_rot, v;
    Tensor probs;
    Tensor attn;
    Tensor o;
    Tensor x1;
    Tensor xhat2, rstd2, a2;
    Tensor cq, cross_probs, cross;
    Tensor x2;
    Tensor xhat3, rstd3, h3;
    Tensor ff_pre, ff_act, ff_out;
    Tensor mod;  // [6d] modulation actually applied
};

struct BlockTape {
    StreamTape video;
    StreamTape image;
    Tensor k_all;
    Tensor v_all;
    Tensor ck;  // prompt keys / values for cross-attention
    Tensor cv;
};

struct TimeTape {
    Tensor features;
    Tensor hidden;  // pre-activation of the first layer
    Tensor temb;    // output of the MLP
    Tensor cond;    // silu(temb)
};

struct ForwardTape {
    Tensor video_patches;
    Tensor image_patches;
    bool has_image = false;
    TimeTape time_video;
    TimeTape time_image;
    std::vector<int> prompt_ids;
    Tensor prompt_emb;
    std::vector<BlockTape> blocks;
    Tensor x_final, xhat_final, rstd_final, h_final, head_mod;
};

struct ForwardOptions {
    KVCache* cache = nullptr;
    ForwardTape* tape = nullptr;
    ForwardCounters* counters = nullptr;
    bool lora_enabled = true;
    // Receives the image-stream tokens leaving each block (empty when cached).
    std::vector<Tensor>* image_activations = nullptr;
};

// Conditioning computed once per forward and shared by every block.
struct BlockContext {
    const ModelConfig* cfg = nullptr;
    const RopeTable* rope_video = nullptr;
    const RopeTable* rope_image = nullptr;
    const Tensor* cond_video = nullptr;  // silu(temb(s))
    const Tensor* cond_image = nullptr;  // silu(temb(0))
    const Tensor* prompt_emb = nullptr;  // [prompt_len x d]
    bool lora_enabled = true;
    ForwardCounters* counters = nullptr;
};

// One DiT block on both streams. With a populated cache entry the image stream
// is skipped and its keys/values are read from the entry; with an empty entry
// they are computed and stored into it.
void block_forward(const BlockWeights& w, const BlockContext& ctx, Tensor& video, Tensor& image,
                   KVCacheEntry* cache_entry, BlockTape* tape);

// Velocity prediction with the same shape as noisy_latent. ref_latent may be
// null (no image branch); it is [ref_h x ref_w x channels] otherwise.
Tensor model_forward(const ModelConfig& cfg, const ModelWeights& w, const Tensor& noisy_latent,
                     const Tensor* ref_latent, std::span<const int> prompt_ids, float s,
                     const ForwardOptions& options = {});

enum class GradScope { All, LoRAOnly };

// Accumulates d(loss)/d(weights) into grads given d(loss)/d(output).
// With GradScope::LoRAOnly every base tensor in grads is left untouched.
void model_backward(const ModelConfig& cfg, const ModelWeights& w, const ForwardTape& tape,
                    const Tensor& d_output, ModelWeights& grads, GradScope scope,
                    bool lora_enabled = true);

}  // namespace standin
