#pragma once

// Restricted self-attention between a reference-image token stream and a
// video token stream.
//
//   Out_I = Attention(Q'_I, K'_I, V_I)
//   Out_V = Attention(Q'_V, [K'_V; K'_I], [V_V; V_I])
//
// Image queries never see video keys, so the image stream is a function of
// the image tokens alone. Q/K/V tensors are [n x heads*head_dim] with heads
// laid out contiguously along the columns.

#include <cstdint>
#include <vector>

#include "standin/tensor.hpp"

namespace standin {

struct ProjectionWeights {
    Tensor wq;
    Tensor wk;
    Tensor wv;
    Tensor wo;
    int heads = 1;

    std::size_t width() const { return wq.rows(); }
    void validate() const;
};

// Low-rank delta (alpha / rank) * A * B added to a base projection.
// B starts at zero so a fresh adapter leaves the base map unchanged.
struct LoRAAdapter {
    Tensor a;  // [d x r]
    Tensor b;  // [r x d]
    int rank = 0;
    float alpha = 0.0f;

    float scale() const { return rank > 0 ? alpha / static_cast<float>(rank) : 0.0f; }
    Tensor delta() const;

    static LoRAAdapter create(std::size_t d, int rank, float alpha, Rng& rng, float init_std = 0.02f);
};

struct QKV {
    Tensor q;
    Tensor k;
    Tensor v;
};

QKV project_qkv_video(const Tensor& x, const ProjectionWeights& w);
QKV project_qkv_image(const Tensor& x, const ProjectionWeights& w, const LoRAAdapter& lora_q,
                      const LoRAAdapter& lora_k, const LoRAAdapter& lora_v);

struct RestrictedOutputs {
    Tensor image;  // Out_I
    Tensor video;  // Out_V
};

// Inputs are already rotated (primed). Scale is 1/sqrt(head_dim).
RestrictedOutputs restricted_attention(const Tensor& q_image, const Tensor& k_image,
                                       const Tensor& v_image, const Tensor& q_video,
                                       const Tensor& k_video, const Tensor& v_video, int heads);

struct AttentionMask {
    std::size_t n_q = 0;
    std::size_t n_k = 0;
    std::vector<std::uint8_t> blocked;  // row-major, 1 = blocked

    AttentionMask(std::size_t queries, std::size_t keys)
        : n_q(queries), n_k(keys), blocked(queries * keys, 0) {}

    bool is_blocked(std::size_t i, std::size_t j) const { return blocked[i * n_k + j] != 0; }
    void block(std::size_t i, std::size_t j) { blocked[i * n_k + j] = 1; }
};

// Joint sequence ordered [image; video]; image queries may not read video keys.
AttentionMask image_isolation_mask(std::size_t n_image, std::size_t n_video);

// Plain serial attention with -inf logits at blocked pairs. Independent of the
// kernels used by restricted_attention; kept as its test oracle.
Tensor masked_attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v,
                               const AttentionMask& mask, int heads);

// Rotated image keys and image values of one block, captured on the first
// denoising step and read on every later one.
struct KVCacheEntry {
    Tensor k_image_rot;
    Tensor v_image;
};

}  // namespace standin
