#include "standin/kernels.hpp"

#include <cmath>
#include <vector>

namespace standin::kernels::reference {

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(a[i * k + p]) * b[p * n + j];
            c[i * n + j] = static_cast<float>(acc);
        }
    }
}

void attention_forward(const AttentionDims& dims, const float* q, const float* k, const float* v,
                       float* out) {
    const std::size_t width = dims.heads * dims.head_dim;
    std::vector<double> logits(dims.n_k);
    for (std::size_t h = 0; h < dims.heads; ++h) {
        const std::size_t off = h * dims.head_dim;
        for (std::size_t i = 0; i < dims.n_q; ++i) {
            double row_max = -INFINITY;
            for (std::size_t j = 0; j < dims.n_k; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dims.head_dim; ++c) {
                    s += static_cast<double>(q[i * width + off + c]) * k[j * width + off + c];
                }
                logits[j] = s * dims.scale;
                if (logits[j] > row_max) row_max = logits[j];
            }
            double total = 0.0;
            for (std::size_t j = 0; j < dims.n_k; ++j) {
                logits[j] = std::exp(logits[j] - row_max);
                total += logits[j];
            }
            for (std::size_t c = 0; c < dims.head_dim; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < dims.n_k; ++j) acc += logits[j] / total * v[j * width + off + c];
                out[i * width + off + c] = static_cast<float>(acc);
            }
        }
    }
}

void layer_norm_rows(const float* x, float* xhat, std::size_t rows, std::size_t d, float eps) {
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += x[r * d + i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (x[r * d + i] - mu) * (x[r * d + i] - mu);
        var /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) {
            xhat[r * d + i] = static_cast<float>((x[r * d + i] - mu) / std::sqrt(var + eps));
        }
    }
}

}  // namespace standin::kernels::reference
