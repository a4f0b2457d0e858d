#include "standin/attention.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "standin/errors.hpp"
#include "standin/kernels.hpp"

namespace standin {

void ProjectionWeights::validate() const {
    const std::size_t d = wq.rows();
    for (const Tensor* w : {&wq, &wk, &wv, &wo}) {
        if (w->rank() != 2 || w->dim(0) != d || w->dim(1) != d) {
            throw ShapeError("projection weights must all be [d x d]");
        }
    }
    if (heads < 1 || d % static_cast<std::size_t>(heads) != 0) {
        throw ShapeError("projection: heads=" + std::to_string(heads) + " does not divide d=" +
                         std::to_string(d));
    }
}

Tensor LoRAAdapter::delta() const {
    if (rank == 0) return Tensor({a.rows(), b.cols()});
    return standin::scale(matmul(a, b), scale());
}

LoRAAdapter LoRAAdapter::create(std::size_t d, int rank, float alpha, Rng& rng, float init_std) {
    if (rank < 0) throw ValidationError("lora: rank must be non-negative");
    LoRAAdapter lora;
    lora.rank = rank;
    lora.alpha = alpha;
    lora.a = Tensor({d, static_cast<std::size_t>(rank)});
    for (auto& v : lora.a.values()) v = static_cast<float>(rng.normal()) * init_std;
    lora.b = Tensor({static_cast<std::size_t>(rank), d});
    return lora;
}

namespace {

Tensor project(const Tensor& x, const Tensor& w) {
    if (x.cols() != w.rows()) {
        throw ShapeError("projection: input width " + std::to_string(x.cols()) +
                         " does not match weights " + shape_string(w.shape()));
    }
    Tensor out({x.rows(), w.cols()});
    kernels::gemm(x.data(), w.data(), out.data(), x.rows(), x.cols(), w.cols());
    return out;
}

Tensor project_adapted(const Tensor& x, const Tensor& w, const LoRAAdapter& lora) {
    Tensor out = project(x, w);
    if (lora.rank == 0 || x.rows() == 0) return out;
    if (lora.a.rows() != w.rows() || lora.b.cols() != w.cols()) {
        throw ShapeError("lora adapter shape does not match its base projection");
    }
    // x A B is evaluated as (x A) B: never materializes the d x d delta.
    Tensor xa = project(x, lora.a);
    Tensor xab = project(xa, lora.b);
    const float s = lora.scale();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * xab[i];
    return out;
}

void check_head_split(const Tensor& t, int heads, const char* what) {
    if (t.rank() != 2 || heads < 1 || t.cols() % static_cast<std::size_t>(heads) != 0) {
        throw ShapeError(std::string("attention: ") + what + " must be [n x heads*head_dim]");
    }
}

}  // namespace

QKV project_qkv_video(const Tensor& x, const ProjectionWeights& w) {
    w.validate();
    return {project(x, w.wq), project(x, w.wk), project(x, w.wv)};
}

QKV project_qkv_image(const Tensor& x, const ProjectionWeights& w, const LoRAAdapter& lora_q,
                      const LoRAAdapter& lora_k, const LoRAAdapter& lora_v) {
    w.validate();
    return {project_adapted(x, w.wq, lora_q), project_adapted(x, w.wk, lora_k),
            project_adapted(x, w.wv, lora_v)};
}

RestrictedOutputs restricted_attention(const Tensor& q_image, const Tensor& k_image,
                                       const Tensor& v_image, const Tensor& q_video,
                                       const Tensor& k_video, const Tensor& v_video, int heads) {
    for (const Tensor* t : {&q_image, &k_image, &v_image, &q_video, &k_video, &v_video}) {
        check_head_split(*t, heads, "operand");
    }
    const std::size_t width = q_video.cols();
    for (const Tensor* t : {&q_image, &k_image, &v_image, &k_video, &v_video}) {
        if (t->cols() != width) throw ShapeError("attention: operand widths differ");
    }
    if (k_image.rows() != v_image.rows() || k_video.rows() != v_video.rows()) {
        throw ShapeError("attention: key/value counts differ");
    }
    const std::size_t head_dim = width / static_cast<std::size_t>(heads);
    const float sc = 1.0f / std::sqrt(static_cast<float>(head_dim));

    RestrictedOutputs out{Tensor({q_image.rows(), width}), Tensor({q_video.rows(), width})};
    if (q_image.rows() > 0) {
        if (k_image.rows() == 0) throw ShapeError("attention: image queries without image keys");
        kernels::AttentionDims dims{q_image.rows(), k_image.rows(), static_cast<std::size_t>(heads),
                                    head_dim, sc};
        kernels::attention_forward(dims, q_image.data(), k_image.data(), v_image.data(),
                                   out.image.data(), nullptr);
    }
    const Tensor k_all = concat_rows(k_video, k_image);
    const Tensor v_all = concat_rows(v_video, v_image);
    if (q_video.rows() > 0 && k_all.rows() > 0) {
        kernels::AttentionDims dims{q_video.rows(), k_all.rows(), static_cast<std::size_t>(heads),
                                    head_dim, sc};
        kernels::attention_forward(dims, q_video.data(), k_all.data(), v_all.data(),
                                   out.video.data(), nullptr);
    }
    return out;
}

AttentionMask image_isolation_mask(std::size_t n_image, std::size_t n_video) {
    const std::size_t n = n_image + n_video;
    AttentionMask mask(n, n);
    for (std::size_t i = 0; i < n_image; ++i)
        for (std::size_t j = n_image; j < n; ++j) mask.block(i, j);
    return mask;
}

Tensor masked_attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v,
                               const AttentionMask& mask, int heads) {
    check_head_split(q, heads, "q");
    if (k.shape() != v.shape() || k.cols() != q.cols()) throw ShapeError("oracle: k/v shape mismatch");
    if (mask.n_q != q.rows() || mask.n_k != k.rows()) throw ShapeError("oracle: mask shape mismatch");
    const std::size_t width = q.cols();
    const std::size_t head_dim = width / static_cast<std::size_t>(heads);
    const double sc = 1.0 / std::sqrt(static_cast<double>(head_dim));

    Tensor out({q.rows(), width});
    std::vector<double> weight(k.rows());
    for (std::size_t i = 0; i < q.rows(); ++i) {
        bool any_open = false;
        for (std::size_t j = 0; j < k.rows(); ++j) any_open = any_open || !mask.is_blocked(i, j);
        if (!any_open) {
            throw ValidationError("oracle: query " + std::to_string(i) + " has every key blocked");
        }
        for (int h = 0; h < heads; ++h) {
            const std::size_t off = static_cast<std::size_t>(h) * head_dim;
            double row_max = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < k.rows(); ++j) {
                if (mask.is_blocked(i, j)) {
                    weight[j] = -std::numeric_limits<double>::infinity();
                    continue;
                }
                double s = 0.0;
                for (std::size_t c = 0; c < head_dim; ++c) {
                    s += static_cast<double>(q.at(i, off + c)) * k.at(j, off + c);
                }
                weight[j] = s * sc;
                row_max = std::max(row_max, weight[j]);
            }
            double total = 0.0;
            for (auto& w : weight) {
                w = std::exp(w - row_max);  // exp(-inf) == 0 for blocked pairs
                total += w;
            }
            for (std::size_t c = 0; c < head_dim; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < k.rows(); ++j) acc += weight[j] * v.at(j, off + c);
                out.at(i, off + c) = static_cast<float>(acc / total);
            }
        }
    }
    return out;
}

}  // namespace standin
