#include "standin/model.hpp"

#include <cmath>
#include <string>

#include "standin/errors.hpp"
#include "standin/kernels.hpp"

namespace standin {

namespace {

constexpr float kNormEps = 1e-6f;

std::size_t to_size(int v) { return static_cast<std::size_t>(v); }

// ---- small dense helpers ---------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr) {
    Tensor y({x.rows(), w.cols()});
    if (x.rows() > 0) kernels::gemm(x.data(), w.data(), y.data(), x.rows(), x.cols(), w.cols());
    if (bias) {
        for (std::size_t r = 0; r < y.rows(); ++r) {
            float* row = y.row(r);
            for (std::size_t c = 0; c < y.cols(); ++c) row[c] += (*bias)[c];
        }
    }
    return y;
}

// dw += x^T dy
void accumulate_weight_grad(const Tensor& x, const Tensor& dy, Tensor& dw) {
    if (x.rows() == 0) return;
    kernels::gemm_tn(x.data(), dy.data(), dw.data(), x.rows(), x.cols(), dy.cols(), true);
}

// dx (+)= dy w^T
void accumulate_input_grad(const Tensor& dy, const Tensor& w, Tensor& dx) {
    if (dy.rows() == 0) return;
    kernels::gemm_nt(dy.data(), w.data(), dx.data(), dy.rows(), dy.cols(), w.rows(), true);
}

void accumulate_colsum(const Tensor& dy, float* out) {
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        const float* row = dy.row(r);
        for (std::size_t c = 0; c < dy.cols(); ++c) out[c] += row[c];
    }
}

void accumulate_colsum_product(const Tensor& a, const Tensor& b, float* out) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const float* ar = a.row(r);
        const float* br = b.row(r);
        for (std::size_t c = 0; c < a.cols(); ++c) out[c] += ar[c] * br[c];
    }
}

struct Normalized {
    Tensor xhat;
    Tensor rstd;
};

Normalized normalize(const Tensor& x) {
    Normalized n{Tensor(x.shape()), Tensor({x.rows()})};
    kernels::layer_norm_rows(x.data(), n.xhat.data(), n.rstd.data(), x.rows(), x.cols(), kNormEps);
    return n;
}

void normalize_backward(const Tensor& xhat, const Tensor& rstd, const Tensor& dxhat, Tensor& dx) {
    kernels::layer_norm_rows_backward(xhat.data(), rstd.data(), dxhat.data(), dx.data(), xhat.rows(),
                                      xhat.cols(), true);
}

// xhat * (1 + scale) + shift, row-broadcast.
Tensor modulate(const Tensor& xhat, const float* shift, const float* scale) {
    Tensor out(xhat.shape());
    const std::size_t d = xhat.cols();
    for (std::size_t r = 0; r < xhat.rows(); ++r) {
        const float* in = xhat.row(r);
        float* o = out.row(r);
        for (std::size_t c = 0; c < d; ++c) o[c] = in[c] * (1.0f + scale[c]) + shift[c];
    }
    return out;
}

// Gradient through modulate: accumulates d_shift / d_scale, returns d_xhat.
Tensor modulate_backward(const Tensor& xhat, const Tensor& dh, const float* scale, float* d_shift,
                         float* d_scale) {
    accumulate_colsum(dh, d_shift);
    accumulate_colsum_product(dh, xhat, d_scale);
    Tensor dxhat(dh.shape());
    for (std::size_t r = 0; r < dh.rows(); ++r) {
        const float* g = dh.row(r);
        float* o = dxhat.row(r);
        for (std::size_t c = 0; c < dh.cols(); ++c) o[c] = g[c] * (1.0f + scale[c]);
    }
    return dxhat;
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

float silu_grad(float x) {
    const float sig = 1.0f / (1.0f + std::exp(-x));
    return sig * (1.0f + x * (1.0f - sig));
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2 / pi)
constexpr float kGeluK = 0.044715f;

float gelu(float x) { return 0.5f * x * (1.0f + std::tanh(kGeluC * (x + kGeluK * x * x * x))); }

float gelu_grad(float x) {
    const float t = std::tanh(kGeluC * (x + kGeluK * x * x * x));
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * kGeluK * x * x);
}

Tensor gaussian_fill(Shape shape, Rng& rng, float std) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<float>(rng.normal()) * std;
    return t;
}

Tensor fan_in_init(std::size_t in, std::size_t out, Rng& rng) {
    return gaussian_fill({in, out}, rng, 1.0f / std::sqrt(static_cast<float>(in)));
}

kernels::AttentionDims attention_dims(const ModelConfig& cfg, std::size_t n_q, std::size_t n_k) {
    return {n_q, n_k, to_size(cfg.heads), to_size(cfg.head_dim()),
            1.0f / std::sqrt(static_cast<float>(cfg.head_dim()))};
}

// Modulation vector [6d] for a stream with conditioning cond = silu(temb).
Tensor stream_modulation(const BlockWeights& w, const Tensor& cond) {
    return linear(cond.reshaped({1, cond.size()}), w.mod_w, &w.mod_b).reshaped({w.mod_b.size()});
}

Tensor identity_modulation(std::size_t d) {
    Tensor m({6 * d});
    for (std::size_t c = 0; c < d; ++c) {
        m[2 * d + c] = 1.0f;
        m[5 * d + c] = 1.0f;
    }
    return m;
}

TimeTape embed_time(const ModelWeights& w, float s, int d) {
    TimeTape t;
    t.features = timestep_features(s, d).reshaped({1, to_size(d)});
    t.hidden = linear(t.features, w.time_w1, &w.time_b1);
    Tensor act = t.hidden;
    for (auto& v : act.values()) v = silu(v);
    t.temb = linear(act, w.time_w2, &w.time_b2);
    t.cond = t.temb;
    for (auto& v : t.cond.values()) v = silu(v);
    t.cond = t.cond.reshaped({to_size(d)});
    return t;
}

void embed_time_backward(const ModelWeights& w, const TimeTape& t, const Tensor& d_cond,
                         ModelWeights& g) {
    const std::size_t d = d_cond.size();
    Tensor d_temb({1, d});
    for (std::size_t i = 0; i < d; ++i) d_temb[i] = d_cond[i] * silu_grad(t.temb[i]);
    Tensor act = t.hidden;
    for (auto& v : act.values()) v = silu(v);
    accumulate_weight_grad(act, d_temb, g.time_w2);
    accumulate_colsum(d_temb, g.time_b2.data());
    Tensor d_act({1, d});
    accumulate_input_grad(d_temb, w.time_w2, d_act);
    for (std::size_t i = 0; i < d; ++i) d_act[i] *= silu_grad(t.hidden[i]);
    accumulate_weight_grad(t.features, d_act, g.time_w1);
    accumulate_colsum(d_act, g.time_b1.data());
}

// ---- block pieces ------------------------------------------------------------------

void stream_pre_attention(const BlockWeights& w, const BlockContext& ctx, const Tensor& x,
                          bool image_stream, const RopeTable& rope, StreamTape& st) {
    const std::size_t d = to_size(ctx.cfg->d_model);
    st.x_in = x;
    Normalized n1 = normalize(x);
    st.xhat1 = std::move(n1.xhat);
    st.rstd1 = std::move(n1.rstd);
    st.h1 = modulate(st.xhat1, st.mod.data(), st.mod.data() + d);

    auto project = [&](const Tensor& base, const LoRAAdapter& lora, Tensor& xa) {
        Tensor y = linear(st.h1, base);
        if (image_stream && ctx.lora_enabled && lora.rank > 0) {
            xa = linear(st.h1, lora.a);
            Tensor delta = linear(xa, lora.b);
            const float s = lora.scale();
            for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * delta[i];
        }
        return y;
    };
    st.q_rot = project(w.attn.wq, w.lora_q, st.xa_q);
    st.k_rot = project(w.attn.wk, w.lora_k, st.xa_k);
    st.v = project(w.attn.wv, w.lora_v, st.xa_v);
    rotate_in_place(st.q_rot, rope, ctx.cfg->heads);
    rotate_in_place(st.k_rot, rope, ctx.cfg->heads);
}

Tensor stream_post_attention(const BlockWeights& w, const BlockContext& ctx, StreamTape& st,
                             const Tensor& ck, const Tensor& cv, bool record) {
    const ModelConfig& cfg = *ctx.cfg;
    const std::size_t d = to_size(cfg.d_model);
    const std::size_t n = st.x_in.rows();
    const float* gate1 = st.mod.data() + 2 * d;
    const float* shift2 = st.mod.data() + 3 * d;
    const float* scale2 = st.mod.data() + 4 * d;
    const float* gate2 = st.mod.data() + 5 * d;

    st.o = linear(st.attn, w.attn.wo);
    st.x1 = st.x_in;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) st.x1.at(r, c) += gate1[c] * st.o.at(r, c);

    Normalized n2 = normalize(st.x1);
    st.xhat2 = std::move(n2.xhat);
    st.rstd2 = std::move(n2.rstd);
    st.a2 = Tensor(st.xhat2.shape());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c)
            st.a2.at(r, c) = st.xhat2.at(r, c) * w.cross_norm_g[c] + w.cross_norm_b[c];
    st.cq = linear(st.a2, w.cross.wq);
    st.cross = Tensor({n, d});
    if (record) st.cross_probs = Tensor({to_size(cfg.heads), n, ck.rows()});
    if (n > 0) {
        kernels::attention_forward(attention_dims(cfg, n, ck.rows()), st.cq.data(), ck.data(), cv.data(),
                                   st.cross.data(), record ? st.cross_probs.data() : nullptr);
    }
    Tensor cross_out = linear(st.cross, w.cross.wo);
    st.x2 = add(st.x1, cross_out);

    Normalized n3 = normalize(st.x2);
    st.xhat3 = std::move(n3.xhat);
    st.rstd3 = std::move(n3.rstd);
    st.h3 = modulate(st.xhat3, shift2, scale2);
    st.ff_pre = linear(st.h3, w.ffn_w1, &w.ffn_b1);
    st.ff_act = st.ff_pre;
    for (auto& v : st.ff_act.values()) v = gelu(v);
    st.ff_out = linear(st.ff_act, w.ffn_w2, &w.ffn_b2);

    Tensor out = st.x2;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) out.at(r, c) += gate2[c] * st.ff_out.at(r, c);
    return out;
}

}  // namespace

// ---- config ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw ValidationError("model config: " + msg);
    };
    require(d_model > 0 && n_blocks > 0 && heads > 0 && ffn_mult > 0, "sizes must be positive");
    require(d_model % heads == 0, "d_model must equal heads * head_dim");
    require(d_model % 2 == 0, "d_model must be even (sinusoidal timestep features)");
    require(patch.t > 0 && patch.h > 0 && patch.w > 0, "patch sizes must be positive");
    require(frames > 0 && latent_h > 0 && latent_w > 0 && channels > 0, "latent dims must be positive");
    require(frames % patch.t == 0 && latent_h % patch.h == 0 && latent_w % patch.w == 0,
            "latent dims must be divisible by the patch size");
    require(ref_h > 0 && ref_w > 0 && ref_h % patch.h == 0 && ref_w % patch.w == 0,
            "reference dims must be positive and divisible by the patch size");
    require(prompt_vocab > 0 && prompt_len > 0, "prompt vocabulary and length must be positive");
    require(lora_rank >= 0, "lora_rank must be non-negative");
    require(rope.head_dim == head_dim(), "rope.head_dim must equal d_model / heads");
    rope.validate();
}

// ---- weights ---------------------------------------------------------------------------

ModelWeights init_weights(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = to_size(cfg.d_model);
    const std::size_t pd = to_size(cfg.patch_dim());
    const std::size_t hidden = d * to_size(cfg.ffn_mult);
    ModelWeights w;
    w.patch_w = fan_in_init(pd, d, rng);
    w.patch_b = Tensor({d});
    w.time_w1 = gaussian_fill({d, d}, rng, 0.02f);
    w.time_b1 = Tensor({d});
    w.time_w2 = gaussian_fill({d, d}, rng, 0.02f);
    w.time_b2 = Tensor({d});
    w.prompt_table = gaussian_fill({to_size(cfg.prompt_vocab), d}, rng, 1.0f);
    w.blocks.resize(to_size(cfg.n_blocks));
    for (auto& b : w.blocks) {
        b.mod_w = Tensor({d, 6 * d});
        b.mod_b = Tensor({6 * d});
        b.attn = {fan_in_init(d, d, rng), fan_in_init(d, d, rng), fan_in_init(d, d, rng),
                  fan_in_init(d, d, rng), cfg.heads};
        b.lora_q = LoRAAdapter::create(d, cfg.lora_rank, cfg.lora_alpha, rng);
        b.lora_k = LoRAAdapter::create(d, cfg.lora_rank, cfg.lora_alpha, rng);
        b.lora_v = LoRAAdapter::create(d, cfg.lora_rank, cfg.lora_alpha, rng);
        b.cross_norm_g = Tensor({d}, 1.0f);
        b.cross_norm_b = Tensor({d});
        b.cross = {fan_in_init(d, d, rng), fan_in_init(d, d, rng), fan_in_init(d, d, rng),
                   fan_in_init(d, d, rng), cfg.heads};
        b.ffn_w1 = fan_in_init(d, hidden, rng);
        b.ffn_b1 = Tensor({hidden});
        b.ffn_w2 = fan_in_init(hidden, d, rng);
        b.ffn_b2 = Tensor({d});
    }
    w.head_mod_w = Tensor({d, 2 * d});
    w.head_mod_b = Tensor({2 * d});
    w.head_w = Tensor({d, pd});
    w.head_b = Tensor({pd});
    return w;
}

void randomize_weights(ModelWeights& w, Rng& rng, float std) {
    w.for_each([&](const std::string&, Tensor& t, ParamGroup) {
        for (auto& v : t.values()) v = static_cast<float>(rng.normal()) * std;
    });
}

void validate_weights(const ModelConfig& cfg, const ModelWeights& w) {
    Rng scratch(0);
    const ModelWeights expected = init_weights(cfg, scratch);
    if (w.blocks.size() != expected.blocks.size()) {
        throw ValidationError("weights: expected " + std::to_string(expected.blocks.size()) + " blocks");
    }
    std::vector<std::pair<std::string, Shape>> shapes;
    expected.for_each([&](const std::string& name, const Tensor& t, ParamGroup) {
        shapes.emplace_back(name, t.shape());
    });
    std::size_t i = 0;
    w.for_each([&](const std::string& name, const Tensor& t, ParamGroup) {
        if (t.shape() != shapes[i].second) {
            throw ValidationError("weights: " + name + " has shape " + shape_string(t.shape()) +
                                  ", expected " + shape_string(shapes[i].second));
        }
        ++i;
    });
    for (const auto& b : w.blocks) {
        for (const LoRAAdapter* l : {&b.lora_q, &b.lora_k, &b.lora_v}) {
            if (l->rank != cfg.lora_rank) throw ValidationError("weights: LoRA rank does not match config");
        }
    }
}

ModelWeights ModelWeights::zeros_like() const {
    ModelWeights z = *this;
    z.for_each([](const std::string&, Tensor& t, ParamGroup) { t.fill(0.0f); });
    return z;
}

std::size_t ModelWeights::parameter_count(ParamGroup group) const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t, ParamGroup g) {
        if (g == group) n += t.size();
    });
    return n;
}

std::uint64_t ModelWeights::fingerprint(ParamGroup group) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for_each([&](const std::string&, const Tensor& t, ParamGroup g) {
        if (g == group) h = standin::fingerprint(t, h);
    });
    return h;
}

// ---- patches ---------------------------------------------------------------------------

Patches patchify(const Tensor& latent, PatchSize patch) {
    if (latent.rank() != 4) throw ShapeError("patchify: expected [F x H x W x c], got " + shape_string(latent.shape()));
    const std::size_t F = latent.dim(0), H = latent.dim(1), W = latent.dim(2), C = latent.dim(3);
    const std::size_t pt = to_size(patch.t), ph = to_size(patch.h), pw = to_size(patch.w);
    if (pt == 0 || ph == 0 || pw == 0 || F % pt || H % ph || W % pw) {
        throw ValidationError("patchify: latent " + shape_string(latent.shape()) +
                              " is not divisible by the patch size");
    }
    GridDims grid{static_cast<int>(F / pt), static_cast<int>(H / ph), static_cast<int>(W / pw)};
    const std::size_t pd = pt * ph * pw * C;
    Tensor tokens({to_size(grid.count()), pd});
    std::size_t tok = 0;
    for (std::size_t gt = 0; gt < F / pt; ++gt)
        for (std::size_t gh = 0; gh < H / ph; ++gh)
            for (std::size_t gw = 0; gw < W / pw; ++gw, ++tok) {
                float* out = tokens.row(tok);
                for (std::size_t dt = 0; dt < pt; ++dt)
                    for (std::size_t dh = 0; dh < ph; ++dh)
                        for (std::size_t dw = 0; dw < pw; ++dw) {
                            const std::size_t src =
                                (((gt * pt + dt) * H + gh * ph + dh) * W + gw * pw + dw) * C;
                            for (std::size_t c = 0; c < C; ++c) *out++ = latent[src + c];
                        }
            }
    return {std::move(tokens), grid};
}

Tensor unpatchify(const Tensor& tokens, GridDims grid, PatchSize patch, int channels) {
    const std::size_t pt = to_size(patch.t), ph = to_size(patch.h), pw = to_size(patch.w);
    const std::size_t C = to_size(channels);
    if (tokens.rank() != 2 || tokens.rows() != to_size(grid.count()) || tokens.cols() != pt * ph * pw * C) {
        throw ShapeError("unpatchify: tokens " + shape_string(tokens.shape()) + " do not match grid " +
                         std::to_string(grid.frames) + "x" + std::to_string(grid.height) + "x" +
                         std::to_string(grid.width));
    }
    const std::size_t F = to_size(grid.frames) * pt, H = to_size(grid.height) * ph,
                      W = to_size(grid.width) * pw;
    Tensor latent({F, H, W, C});
    std::size_t tok = 0;
    for (std::size_t gt = 0; gt < to_size(grid.frames); ++gt)
        for (std::size_t gh = 0; gh < to_size(grid.height); ++gh)
            for (std::size_t gw = 0; gw < to_size(grid.width); ++gw, ++tok) {
                const float* in = tokens.row(tok);
                for (std::size_t dt = 0; dt < pt; ++dt)
                    for (std::size_t dh = 0; dh < ph; ++dh)
                        for (std::size_t dw = 0; dw < pw; ++dw) {
                            const std::size_t dst =
                                (((gt * pt + dt) * H + gh * ph + dh) * W + gw * pw + dw) * C;
                            for (std::size_t c = 0; c < C; ++c) latent[dst + c] = *in++;
                        }
            }
    return latent;
}

Tensor timestep_features(float s, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw ValidationError("timestep features: dim must be positive and even");
    const int half = dim / 2;
    Tensor out({to_size(dim)});
    const double t = 1000.0 * static_cast<double>(s);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[to_size(i)] = static_cast<float>(std::cos(t * freq));
        out[to_size(half + i)] = static_cast<float>(std::sin(t * freq));
    }
    return out;
}

// ---- cache -----------------------------------------------------------------------------

void KVCache::bind(std::uint64_t key) {
    if (bound_ && key != key_) {
        throw CacheError("kv cache reused with a different reference, prompt or weights");
    }
    key_ = key;
    bound_ = true;
}

void KVCache::store(std::vector<KVCacheEntry> entries) {
    if (populated()) throw CacheError("kv cache is already populated for this session");
    entries_ = std::move(entries);
}

void KVCache::clear() {
    entries_.clear();
    bound_ = false;
    key_ = 0;
}

// ---- forward ---------------------------------------------------------------------------

void block_forward(const BlockWeights& w, const BlockContext& ctx, Tensor& video, Tensor& image,
                   KVCacheEntry* cache_entry, BlockTape* tape) {
    const ModelConfig& cfg = *ctx.cfg;
    const std::size_t d = to_size(cfg.d_model);
    const bool record = tape != nullptr;
    BlockTape local;
    BlockTape& bt = record ? *tape : local;

    const bool use_cached = cache_entry != nullptr && !cache_entry->k_image_rot.empty();
    if (use_cached) {
        const std::size_t n_i = to_size(cfg.image_tokens());
        if (cache_entry->k_image_rot.rows() != n_i || cache_entry->k_image_rot.cols() != d ||
            cache_entry->v_image.shape() != cache_entry->k_image_rot.shape()) {
            throw CacheError("kv cache entry shape " + shape_string(cache_entry->k_image_rot.shape()) +
                             " does not match " + std::to_string(n_i) + " image tokens x " +
                             std::to_string(d));
        }
    }
    const bool run_image = !use_cached && image.rows() > 0;

    bt.ck = linear(*ctx.prompt_emb, w.cross.wk);
    bt.cv = linear(*ctx.prompt_emb, w.cross.wv);

    bt.video.mod = stream_modulation(w, *ctx.cond_video);
    stream_pre_attention(w, ctx, video, false, *ctx.rope_video, bt.video);
    if (run_image) {
        bt.image.mod = cfg.modulate_image_stream ? stream_modulation(w, *ctx.cond_image) : identity_modulation(d);
        stream_pre_attention(w, ctx, image, true, *ctx.rope_image, bt.image);
        if (ctx.counters) ++ctx.counters->image_branch_evals;
        if (cache_entry) *cache_entry = {bt.image.k_rot, bt.image.v};
    } else if (use_cached && ctx.counters) {
        ++ctx.counters->cache_reads;
    }

    const Tensor empty({0, d});
    const Tensor& k_image = use_cached ? cache_entry->k_image_rot : (run_image ? bt.image.k_rot : empty);
    const Tensor& v_image = use_cached ? cache_entry->v_image : (run_image ? bt.image.v : empty);

    if (run_image) {
        const std::size_t n_i = image.rows();
        bt.image.attn = Tensor({n_i, d});
        if (record) bt.image.probs = Tensor({to_size(cfg.heads), n_i, n_i});
        kernels::attention_forward(attention_dims(cfg, n_i, n_i), bt.image.q_rot.data(), bt.image.k_rot.data(),
                                   bt.image.v.data(), bt.image.attn.data(),
                                   record ? bt.image.probs.data() : nullptr);
    }

    bt.k_all = concat_rows(bt.video.k_rot, k_image);
    bt.v_all = concat_rows(bt.video.v, v_image);
    const std::size_t n_v = video.rows();
    bt.video.attn = Tensor({n_v, d});
    if (record) bt.video.probs = Tensor({to_size(cfg.heads), n_v, bt.k_all.rows()});
    if (n_v > 0) {
        kernels::attention_forward(attention_dims(cfg, n_v, bt.k_all.rows()), bt.video.q_rot.data(),
                                   bt.k_all.data(), bt.v_all.data(), bt.video.attn.data(),
                                   record ? bt.video.probs.data() : nullptr);
    }

    video = stream_post_attention(w, ctx, bt.video, bt.ck, bt.cv, record);
    if (run_image) image = stream_post_attention(w, ctx, bt.image, bt.ck, bt.cv, record);
}

Tensor model_forward(const ModelConfig& cfg, const ModelWeights& w, const Tensor& noisy_latent,
                     const Tensor* ref_latent, std::span<const int> prompt_ids, float s,
                     const ForwardOptions& options) {
    cfg.validate();
    const std::size_t d = to_size(cfg.d_model);
    const Shape latent_shape{to_size(cfg.frames), to_size(cfg.latent_h), to_size(cfg.latent_w),
                             to_size(cfg.channels)};
    if (noisy_latent.shape() != latent_shape) {
        throw ShapeError("model: latent " + shape_string(noisy_latent.shape()) + ", expected " +
                         shape_string(latent_shape));
    }
    const Shape ref_shape{to_size(cfg.ref_h), to_size(cfg.ref_w), to_size(cfg.channels)};
    if (ref_latent && ref_latent->shape() != ref_shape) {
        throw ShapeError("model: reference " + shape_string(ref_latent->shape()) + ", expected " +
                         shape_string(ref_shape));
    }
    if (prompt_ids.size() != to_size(cfg.prompt_len)) {
        throw ValidationError("model: expected " + std::to_string(cfg.prompt_len) + " prompt ids");
    }
    for (int id : prompt_ids) {
        if (id < 0 || id >= cfg.prompt_vocab) throw ValidationError("model: prompt id out of range");
    }
    if (w.blocks.size() != to_size(cfg.n_blocks)) throw ShapeError("model: weights do not match n_blocks");

    if (options.counters) ++options.counters->model_evals;

    KVCache* cache = options.cache;
    if (cache) {
        if (!ref_latent) throw CacheError("kv cache requires a reference image");
        std::uint64_t key = w.fingerprint(ParamGroup::Base) ^ (w.fingerprint(ParamGroup::LoRA) * 31);
        key = fingerprint(*ref_latent, key);
        for (int id : prompt_ids) key = (key ^ static_cast<std::uint64_t>(id)) * 0x100000001b3ULL;
        key ^= options.lora_enabled ? 0x5bd1e995ULL : 0;
        key ^= cfg.position_layout == PositionLayout::Conditional ? 0 : 0x27d4eb2dULL;
        cache->bind(key);
        if (cache->populated() && cache->size() != w.blocks.size()) {
            throw CacheError("kv cache holds " + std::to_string(cache->size()) + " blocks, model has " +
                             std::to_string(w.blocks.size()));
        }
    }
    const bool cached = cache && cache->populated();

    ForwardTape* tape = options.tape;
    const Patches vp = patchify(noisy_latent, cfg.patch);
    Tensor video = linear(vp.tokens, w.patch_w, &w.patch_b);

    const bool has_image = ref_latent != nullptr;
    Tensor image({0, d});
    Tensor image_patches({0, to_size(cfg.patch_dim())});
    if (has_image && !cached) {
        // A single reference frame, repeated to fill the temporal patch extent.
        Tensor clip({to_size(cfg.patch.t), ref_shape[0], ref_shape[1], ref_shape[2]});
        for (std::size_t f = 0; f < clip.dim(0); ++f)
            std::copy(ref_latent->values().begin(), ref_latent->values().end(),
                      clip.values().begin() + static_cast<std::ptrdiff_t>(f * ref_latent->size()));
        image_patches = patchify(clip, cfg.patch).tokens;
        image = linear(image_patches, w.patch_w, &w.patch_b);
    }

    const GridDims vg = cfg.video_grid();
    const GridDims ig = cfg.image_grid();
    const auto coords = build_position_grid(vg.frames, vg.height, vg.width, ig.height, ig.width,
                                            cfg.position_layout);
    const std::span<const Coord3D> all(coords);
    const RopeTable rope_video = make_rope_table(cfg.rope, all.first(to_size(vg.count())));
    const RopeTable rope_image = make_rope_table(cfg.rope, all.subspan(to_size(vg.count())));

    TimeTape time_video = embed_time(w, s, cfg.d_model);
    TimeTape time_image;
    if (has_image) time_image = embed_time(w, TimestepPair::s_ref, cfg.d_model);

    Tensor prompt_emb({prompt_ids.size(), d});
    for (std::size_t i = 0; i < prompt_ids.size(); ++i) {
        const float* src = w.prompt_table.row(to_size(prompt_ids[i]));
        std::copy(src, src + d, prompt_emb.row(i));
    }

    BlockContext ctx;
    ctx.cfg = &cfg;
    ctx.rope_video = &rope_video;
    ctx.rope_image = &rope_image;
    ctx.cond_video = &time_video.cond;
    ctx.cond_image = has_image ? &time_image.cond : nullptr;
    ctx.prompt_emb = &prompt_emb;
    ctx.lora_enabled = options.lora_enabled;
    ctx.counters = options.counters;

    if (tape) {
        tape->blocks.assign(w.blocks.size(), BlockTape{});
        tape->video_patches = vp.tokens;
        tape->image_patches = image_patches;
        tape->has_image = has_image && !cached;
    }
    std::vector<KVCacheEntry> captured(cache && !cached ? w.blocks.size() : 0);
    for (std::size_t b = 0; b < w.blocks.size(); ++b) {
        KVCacheEntry* entry = nullptr;
        KVCacheEntry read_entry;
        if (cached) {
            read_entry = cache->entry(b);
            entry = &read_entry;
        } else if (cache) {
            entry = &captured[b];
        }
        block_forward(w.blocks[b], ctx, video, image, entry, tape ? &tape->blocks[b] : nullptr);
        if (options.image_activations && !cached && has_image) options.image_activations->push_back(image);
    }
    if (cache && !cached) cache->store(std::move(captured));

    // Output head on video tokens only.
    Tensor head_mod = linear(time_video.cond.reshaped({1, d}), w.head_mod_w, &w.head_mod_b).reshaped({2 * d});
    Normalized nf = normalize(video);
    Tensor h = modulate(nf.xhat, head_mod.data(), head_mod.data() + d);
    Tensor out = linear(h, w.head_w, &w.head_b);

    if (tape) {
        tape->time_video = std::move(time_video);
        tape->time_image = std::move(time_image);
        tape->prompt_ids.assign(prompt_ids.begin(), prompt_ids.end());
        tape->prompt_emb = std::move(prompt_emb);
        tape->x_final = std::move(video);
        tape->xhat_final = std::move(nf.xhat);
        tape->rstd_final = std::move(nf.rstd);
        tape->h_final = std::move(h);
        tape->head_mod = std::move(head_mod);
    }
    return unpatchify(out, vg, cfg.patch, cfg.channels);
}

// ---- backward --------------------------------------------------------------------------

namespace {

struct BackwardContext {
    const ModelConfig* cfg;
    const RopeTable* rope_video;
    const RopeTable* rope_image;
    bool base;  // accumulate base-parameter gradients
    bool lora_enabled;
};

// Backward through the post-attention half of a stream. On entry dx holds
// d(loss)/d(block output); on exit it holds the residual contribution to
// d(loss)/d(block input). Returns d(loss)/d(attention output before W_o).
Tensor stream_post_backward(const BlockWeights& w, BlockWeights& g, const BackwardContext& bc,
                            const StreamTape& st, const Tensor& ck, const Tensor& cv, Tensor& dx,
                            Tensor& dmod, Tensor& dck, Tensor& dcv) {
    const ModelConfig& cfg = *bc.cfg;
    const std::size_t d = to_size(cfg.d_model);
    const std::size_t n = st.x_in.rows();
    const float* gate1 = st.mod.data() + 2 * d;
    const float* scale2 = st.mod.data() + 4 * d;
    const float* gate2 = st.mod.data() + 5 * d;

    // gated feed-forward
    accumulate_colsum_product(dx, st.ff_out, dmod.data() + 5 * d);
    Tensor dff(dx.shape());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) dff.at(r, c) = dx.at(r, c) * gate2[c];
    if (bc.base) {
        accumulate_weight_grad(st.ff_act, dff, g.ffn_w2);
        accumulate_colsum(dff, g.ffn_b2.data());
    }
    Tensor dpre(st.ff_pre.shape());
    accumulate_input_grad(dff, w.ffn_w2, dpre);
    for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] *= gelu_grad(st.ff_pre[i]);
    if (bc.base) {
        accumulate_weight_grad(st.h3, dpre, g.ffn_w1);
        accumulate_colsum(dpre, g.ffn_b1.data());
    }
    Tensor dh3({n, d});
    accumulate_input_grad(dpre, w.ffn_w1, dh3);
    Tensor dxhat3 = modulate_backward(st.xhat3, dh3, scale2, dmod.data() + 3 * d, dmod.data() + 4 * d);
    normalize_backward(st.xhat3, st.rstd3, dxhat3, dx);

    // cross-attention (residual, ungated)
    if (bc.base) accumulate_weight_grad(st.cross, dx, g.cross.wo);
    Tensor dcross({n, d});
    accumulate_input_grad(dx, w.cross.wo, dcross);
    Tensor dcq({n, d});
    if (n > 0) {
        kernels::attention_backward(attention_dims(cfg, n, ck.rows()), st.cq.data(), ck.data(), cv.data(),
                                    st.cross_probs.data(), dcross.data(), dcq.data(), dck.data(),
                                    dcv.data());
    }
    if (bc.base) accumulate_weight_grad(st.a2, dcq, g.cross.wq);
    Tensor da2({n, d});
    accumulate_input_grad(dcq, w.cross.wq, da2);
    if (bc.base) {
        accumulate_colsum_product(da2, st.xhat2, g.cross_norm_g.data());
        accumulate_colsum(da2, g.cross_norm_b.data());
    }
    Tensor dxhat2({n, d});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) dxhat2.at(r, c) = da2.at(r, c) * w.cross_norm_g[c];
    normalize_backward(st.xhat2, st.rstd2, dxhat2, dx);

    // gated attention output
    accumulate_colsum_product(dx, st.o, dmod.data() + 2 * d);
    Tensor d_o({n, d});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) d_o.at(r, c) = dx.at(r, c) * gate1[c];
    if (bc.base) accumulate_weight_grad(st.attn, d_o, g.attn.wo);
    Tensor dattn({n, d});
    accumulate_input_grad(d_o, w.attn.wo, dattn);
    return dattn;
}

void lora_backward(const LoRAAdapter& lora, LoRAAdapter& g, const Tensor& h1, const Tensor& xa,
                   const Tensor& dy, Tensor& dh1) {
    const float s = lora.scale();
    Tensor dy_scaled = scale(dy, s);
    accumulate_weight_grad(xa, dy_scaled, g.b);
    Tensor dxa({dy.rows(), to_size(lora.rank)});
    accumulate_input_grad(dy_scaled, lora.b, dxa);
    accumulate_weight_grad(h1, dxa, g.a);
    accumulate_input_grad(dxa, lora.a, dh1);
}

// Backward through the projections and the first norm; adds into dx and dmod.
void stream_pre_backward(const BlockWeights& w, BlockWeights& g, const BackwardContext& bc,
                         const StreamTape& st, bool image_stream, const Tensor& dq, const Tensor& dk,
                         const Tensor& dv, Tensor& dx, Tensor& dmod) {
    const std::size_t d = to_size(bc.cfg->d_model);
    const std::size_t n = st.x_in.rows();
    Tensor dh1({n, d});
    const bool adapted = image_stream && bc.lora_enabled;
    auto projection = [&](const Tensor& weight, Tensor& grad, const LoRAAdapter& lora, LoRAAdapter& lora_g,
                          const Tensor& xa, const Tensor& dy) {
        if (bc.base) accumulate_weight_grad(st.h1, dy, grad);
        accumulate_input_grad(dy, weight, dh1);
        if (adapted && lora.rank > 0) lora_backward(lora, lora_g, st.h1, xa, dy, dh1);
    };
    projection(w.attn.wq, g.attn.wq, w.lora_q, g.lora_q, st.xa_q, dq);
    projection(w.attn.wk, g.attn.wk, w.lora_k, g.lora_k, st.xa_k, dk);
    projection(w.attn.wv, g.attn.wv, w.lora_v, g.lora_v, st.xa_v, dv);
    Tensor dxhat1 = modulate_backward(st.xhat1, dh1, st.mod.data() + d, dmod.data(), dmod.data() + d);
    normalize_backward(st.xhat1, st.rstd1, dxhat1, dx);
}

Tensor rows_slice(const Tensor& t, std::size_t begin, std::size_t count) {
    Tensor out({count, t.cols()});
    std::copy(t.row(begin), t.row(begin) + count * t.cols(), out.data());
    return out;
}

void block_backward(const BlockWeights& w, BlockWeights& g, const BackwardContext& bc,
                    const BlockTape& bt, const Tensor& cond_video, const Tensor* cond_image,
                    const Tensor& prompt_emb, Tensor& dvideo, Tensor& dimage, Tensor& dcond_video,
                    Tensor& dcond_image, Tensor& dprompt) {
    const ModelConfig& cfg = *bc.cfg;
    const std::size_t d = to_size(cfg.d_model);
    const std::size_t n_v = bt.video.x_in.rows();
    const std::size_t n_i = bt.image.x_in.rows();
    const bool has_image = n_i > 0;

    Tensor dck(bt.ck.shape());
    Tensor dcv(bt.cv.shape());
    Tensor dmod_v({6 * d});
    Tensor dmod_i({6 * d});

    Tensor dattn_v = stream_post_backward(w, g, bc, bt.video, bt.ck, bt.cv, dvideo, dmod_v, dck, dcv);
    Tensor dattn_i;
    if (has_image) dattn_i = stream_post_backward(w, g, bc, bt.image, bt.ck, bt.cv, dimage, dmod_i, dck, dcv);

    Tensor dq_v({n_v, d});
    Tensor dk_all(bt.k_all.shape());
    Tensor dv_all(bt.v_all.shape());
    kernels::attention_backward(attention_dims(cfg, n_v, bt.k_all.rows()), bt.video.q_rot.data(),
                                bt.k_all.data(), bt.v_all.data(), bt.video.probs.data(), dattn_v.data(),
                                dq_v.data(), dk_all.data(), dv_all.data());
    Tensor dk_v = rows_slice(dk_all, 0, n_v);
    Tensor dv_v = rows_slice(dv_all, 0, n_v);
    rotate_in_place(dq_v, *bc.rope_video, cfg.heads, true);
    rotate_in_place(dk_v, *bc.rope_video, cfg.heads, true);
    stream_pre_backward(w, g, bc, bt.video, false, dq_v, dk_v, dv_v, dvideo, dmod_v);

    if (has_image) {
        Tensor dk_i = rows_slice(dk_all, n_v, n_i);
        Tensor dv_i = rows_slice(dv_all, n_v, n_i);
        Tensor dq_i({n_i, d});
        kernels::attention_backward(attention_dims(cfg, n_i, n_i), bt.image.q_rot.data(), bt.image.k_rot.data(),
                                    bt.image.v.data(), bt.image.probs.data(), dattn_i.data(), dq_i.data(),
                                    dk_i.data(), dv_i.data());
        rotate_in_place(dq_i, *bc.rope_image, cfg.heads, true);
        rotate_in_place(dk_i, *bc.rope_image, cfg.heads, true);
        stream_pre_backward(w, g, bc, bt.image, true, dq_i, dk_i, dv_i, dimage, dmod_i);
    }

    if (!bc.base) return;
    auto mod_backward = [&](const Tensor& cond, const Tensor& dmod, Tensor& dcond) {
        const Tensor c = cond.reshaped({1, d});
        const Tensor dm = dmod.reshaped({1, 6 * d});
        accumulate_weight_grad(c, dm, g.mod_w);
        accumulate_colsum(dm, g.mod_b.data());
        Tensor dc = dcond.reshaped({1, d});
        accumulate_input_grad(dm, w.mod_w, dc);
        dcond = dc.reshaped({d});
    };
    mod_backward(cond_video, dmod_v, dcond_video);
    if (has_image && cfg.modulate_image_stream) mod_backward(*cond_image, dmod_i, dcond_image);

    accumulate_weight_grad(prompt_emb, dck, g.cross.wk);
    accumulate_weight_grad(prompt_emb, dcv, g.cross.wv);
    accumulate_input_grad(dck, w.cross.wk, dprompt);
    accumulate_input_grad(dcv, w.cross.wv, dprompt);
}

}  // namespace

void model_backward(const ModelConfig& cfg, const ModelWeights& w, const ForwardTape& tape,
                    const Tensor& d_output, ModelWeights& grads, GradScope scope, bool lora_enabled) {
    const std::size_t d = to_size(cfg.d_model);
    const bool base = scope == GradScope::All;
    if (tape.blocks.size() != w.blocks.size()) throw ValidationError("backward: tape does not match model");

    const Tensor d_out = patchify(d_output, cfg.patch).tokens;

    // output head
    if (base) {
        accumulate_weight_grad(tape.h_final, d_out, grads.head_w);
        accumulate_colsum(d_out, grads.head_b.data());
    }
    Tensor dh(tape.h_final.shape());
    accumulate_input_grad(d_out, w.head_w, dh);
    Tensor d_head_mod({2 * d});
    Tensor dxhat = modulate_backward(tape.xhat_final, dh, tape.head_mod.data() + d, d_head_mod.data(),
                                     d_head_mod.data() + d);
    Tensor dvideo(tape.x_final.shape());
    normalize_backward(tape.xhat_final, tape.rstd_final, dxhat, dvideo);

    Tensor dcond_video({d});
    Tensor dcond_image({d});
    if (base) {
        const Tensor c = tape.time_video.cond.reshaped({1, d});
        const Tensor dm = d_head_mod.reshaped({1, 2 * d});
        accumulate_weight_grad(c, dm, grads.head_mod_w);
        accumulate_colsum(dm, grads.head_mod_b.data());
        Tensor dc({1, d});
        accumulate_input_grad(dm, w.head_mod_w, dc);
        dcond_video = dc.reshaped({d});
    }

    const GridDims vg = cfg.video_grid();
    const GridDims ig = cfg.image_grid();
    const auto coords = build_position_grid(vg.frames, vg.height, vg.width, ig.height, ig.width,
                                            cfg.position_layout);
    const std::span<const Coord3D> all(coords);
    const RopeTable rope_video = make_rope_table(cfg.rope, all.first(to_size(vg.count())));
    const RopeTable rope_image = make_rope_table(cfg.rope, all.subspan(to_size(vg.count())));
    const BackwardContext bc{&cfg, &rope_video, &rope_image, base, lora_enabled};

    // Image tokens are discarded before the head: their gradient starts at zero.
    Tensor dimage({tape.has_image ? tape.image_patches.rows() : 0, d});
    Tensor dprompt(tape.prompt_emb.shape());
    for (std::size_t b = w.blocks.size(); b-- > 0;) {
        block_backward(w.blocks[b], grads.blocks[b], bc, tape.blocks[b], tape.time_video.cond,
                       tape.has_image ? &tape.time_image.cond : nullptr, tape.prompt_emb, dvideo, dimage,
                       dcond_video, dcond_image, dprompt);
    }
    if (!base) return;

    accumulate_weight_grad(tape.video_patches, dvideo, grads.patch_w);
    accumulate_colsum(dvideo, grads.patch_b.data());
    if (tape.has_image) {
        accumulate_weight_grad(tape.image_patches, dimage, grads.patch_w);
        accumulate_colsum(dimage, grads.patch_b.data());
    }
    embed_time_backward(w, tape.time_video, dcond_video, grads);
    if (tape.has_image) embed_time_backward(w, tape.time_image, dcond_image, grads);
    for (std::size_t i = 0; i < tape.prompt_ids.size(); ++i) {
        float* dst = grads.prompt_table.row(to_size(tape.prompt_ids[i]));
        const float* src = dprompt.row(i);
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
}

}  // namespace standin
