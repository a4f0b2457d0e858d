#pragma once

// Raw-pointer compute kernels behind the Tensor API and the model.
//
// Every kernel in `standin::kernels` is OpenMP-parallel over independent
// output rows (or heads), so each output element is reduced by exactly one
// thread in a fixed order: results are bit-identical for any thread count.
// `standin::kernels::reference` holds straightforward serial versions used
// as test oracles and as the baseline in the kernel benchmark.
//
// Matrices are row-major. Attention operands are [n x heads*head_dim] with
// head h occupying columns [h*head_dim, (h+1)*head_dim).

#include <cstddef>

namespace standin::kernels {

// c[m x n] = a[m x k] * b[k x n]   (c += ... when accumulate)
void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate = false);

// c[m x n] = a[m x k] * b[n x k]^T
void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false);

// c[k x n] = a[m x k]^T * b[m x n]
void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false);

struct AttentionDims {
    std::size_t n_q;
    std::size_t n_k;
    std::size_t heads;
    std::size_t head_dim;
    float scale;
};

// out = softmax(q k^T * scale) v per head. When probs is non-null it receives
// the [heads x n_q x n_k] attention weights for the backward pass.
void attention_forward(const AttentionDims& dims, const float* q, const float* k, const float* v,
                       float* out, float* probs);

// Accumulates dq, dk, dv from d_out using the saved probabilities.
void attention_backward(const AttentionDims& dims, const float* q, const float* k,
                        const float* v, const float* probs, const float* d_out, float* dq,
                        float* dk, float* dv);

// xhat = (x - mean) * rstd per row, without affine parameters.
void layer_norm_rows(const float* x, float* xhat, float* rstd, std::size_t rows, std::size_t d,
                     float eps);

// dx (+)= rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
void layer_norm_rows_backward(const float* xhat, const float* rstd, const float* dxhat,
                              float* dx, std::size_t rows, std::size_t d, bool accumulate);

}  // namespace standin::kernels

namespace standin::kernels::reference {

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n);
void attention_forward(const AttentionDims& dims, const float* q, const float* k, const float* v,
                       float* out);
void layer_norm_rows(const float* x, float* xhat, std::size_t rows, std::size_t d, float eps);

}  // namespace standin::kernels::reference
