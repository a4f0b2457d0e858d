#include "standin/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <vector>

namespace standin::kernels {

namespace {

using Index = std::ptrdiff_t;

// Eight independent partial sums in a fixed combination order so the loop
// vectorizes without reassociation flags and stays reproducible.
inline float dot(const float* x, const float* y, std::size_t n) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int l = 0; l < 8; ++l) acc[l] += x[i + l] * y[i + l];
    }
    float s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

// Same fixed eight-lane layout as dot(), with double partial sums.
inline double dot_f64(const float* x, const float* y, std::size_t n) {
    double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int l = 0; l < 8; ++l) acc[l] += static_cast<double>(x[i + l]) * y[i + l];
    }
    double s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; i < n; ++i) s += static_cast<double>(x[i]) * y[i];
    return s;
}

inline void axpy(float alpha, const float* x, float* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// exp for x <= 0 without a libm call, so the softmax loop vectorizes.
// Cody-Waite range reduction x = n ln2 + r, |r| <= ln2/2, then a degree-6
// polynomial for e^r and 2^n assembled in the exponent bits. Relative error
// is about 2 ulp; inputs below -87 flush to 0.
inline float exp_nonpositive(float x) {
    x = std::max(x, -87.0f);
    // round-to-nearest via the 1.5 * 2^23 shift; same result as nearbyint for |v| < 2^22
    const float n = (x * 1.44269504088896341f + 12582912.0f) - 12582912.0f;
    float r = x - n * 0.693359375f;
    r = r + n * 2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
    float scale;
    std::memcpy(&scale, &bits, sizeof(scale));
    return p * scale;
}

}  // namespace

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < static_cast<Index>(m); ++i) {
        float* c_row = c + i * n;
        if (!accumulate) std::fill(c_row, c_row + n, 0.0f);
        const float* a_row = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const float a_ip = a_row[p];
            if (a_ip == 0.0f) continue;
            axpy(a_ip, b + p * n, c_row, n);
        }
    }
}

void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < static_cast<Index>(m); ++i) {
        float* c_row = c + i * n;
        const float* a_row = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const float v = dot(a_row, b + j * k, k);
            c_row[j] = accumulate ? c_row[j] + v : v;
        }
    }
}

void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (Index p = 0; p < static_cast<Index>(k); ++p) {
        float* c_row = c + p * n;
        if (!accumulate) std::fill(c_row, c_row + n, 0.0f);
        for (std::size_t i = 0; i < m; ++i) {
            const float a_ip = a[i * k + p];
            if (a_ip == 0.0f) continue;
            axpy(a_ip, b + i * n, c_row, n);
        }
    }
}

namespace {

// Per-head transposed copy: dst[h][c][j] = src[j][h*hd + c]. Long rows over
// the key axis keep the inner loops vectorized for small head_dim.
void pack_heads_transposed(const float* src, float* dst, std::size_t n, std::size_t heads,
                           std::size_t hd) {
    const std::size_t width = heads * hd;
#pragma omp parallel for schedule(static)
    for (Index h = 0; h < static_cast<Index>(heads); ++h) {
        float* out = dst + h * hd * n;
        for (std::size_t j = 0; j < n; ++j) {
            const float* row = src + j * width + h * hd;
            for (std::size_t c = 0; c < hd; ++c) out[c * n + j] = row[c];
        }
    }
}

}  // namespace

void attention_forward(const AttentionDims& dims, const float* q, const float* k, const float* v,
                       float* out, float* probs) {
    const std::size_t width = dims.heads * dims.head_dim;
    const std::size_t hd = dims.head_dim;
    const std::size_t nk = dims.n_k;
    std::vector<float> kt(dims.heads * hd * nk), vt(dims.heads * hd * nk);
    pack_heads_transposed(k, kt.data(), nk, dims.heads, hd);
    pack_heads_transposed(v, vt.data(), nk, dims.heads, hd);
#pragma omp parallel
    {
        std::vector<float> scratch(probs ? 0 : nk);
        std::vector<double> scores(nk);
#pragma omp for collapse(2) schedule(static)
        for (Index h = 0; h < static_cast<Index>(dims.heads); ++h) {
            for (Index i = 0; i < static_cast<Index>(dims.n_q); ++i) {
                float* p = probs ? probs + (h * dims.n_q + i) * nk : scratch.data();
                const float* q_row = q + i * width + h * hd;
                const float* kh = kt.data() + h * hd * nk;
                const float* vh = vt.data() + h * hd * nk;
                // Scores accumulate in double: logits of a few tens would otherwise
                // carry float rounding straight into the exponent.
                std::fill(scores.begin(), scores.end(), 0.0);
                for (std::size_t c = 0; c < hd; ++c) {
                    const double qc = static_cast<double>(q_row[c]) * dims.scale;
                    const float* kc = kh + c * nk;
                    for (std::size_t j = 0; j < nk; ++j) scores[j] += qc * kc[j];
                }
                double row_max = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < nk; ++j) row_max = std::max(row_max, scores[j]);
                for (std::size_t j = 0; j < nk; ++j) p[j] = exp_nonpositive(static_cast<float>(scores[j] - row_max));
                double total = 0.0;
                for (std::size_t j = 0; j < nk; ++j) total += p[j];
                const double inv = 1.0 / total;
                float* o = out + i * width + h * hd;
                for (std::size_t c = 0; c < hd; ++c) {
                    o[c] = static_cast<float>(dot_f64(p, vh + c * nk, nk) * inv);
                }
                for (std::size_t j = 0; j < nk; ++j) p[j] = static_cast<float>(p[j] * inv);
            }
        }
    }
}

void attention_backward(const AttentionDims& dims, const float* q, const float* k,
                        const float* v, const float* probs, const float* d_out, float* dq,
                        float* dk, float* dv) {
    const std::size_t width = dims.heads * dims.head_dim;
    const std::size_t hd = dims.head_dim;
    const std::size_t nk = dims.n_k;
    std::vector<float> kt(dims.heads * hd * nk), vt(dims.heads * hd * nk);
    std::vector<float> dkt(dims.heads * hd * nk, 0.0f), dvt(dims.heads * hd * nk, 0.0f);
    pack_heads_transposed(k, kt.data(), nk, dims.heads, hd);
    pack_heads_transposed(v, vt.data(), nk, dims.heads, hd);
#pragma omp parallel
    {
        std::vector<float> ds(nk);
#pragma omp for schedule(static)
        for (Index h = 0; h < static_cast<Index>(dims.heads); ++h) {
            const std::size_t off = h * hd;
            const float* kh = kt.data() + off * nk;
            const float* vh = vt.data() + off * nk;
            float* dkh = dkt.data() + off * nk;
            float* dvh = dvt.data() + off * nk;
            for (std::size_t i = 0; i < dims.n_q; ++i) {
                const float* p = probs + (h * dims.n_q + i) * nk;
                const float* g = d_out + i * width + off;
                // d(score_j) before the softmax Jacobian: g . v_j
                std::fill(ds.begin(), ds.end(), 0.0f);
                for (std::size_t c = 0; c < hd; ++c) {
                    axpy(g[c], vh + c * nk, ds.data(), nk);
                    axpy(g[c], p, dvh + c * nk, nk);
                }
                double row_dot = 0.0;
                for (std::size_t j = 0; j < nk; ++j) row_dot += static_cast<double>(ds[j]) * p[j];
                const float rd = static_cast<float>(row_dot);
                for (std::size_t j = 0; j < nk; ++j) ds[j] = p[j] * (ds[j] - rd) * dims.scale;
                const float* q_row = q + i * width + off;
                float* dq_row = dq + i * width + off;
                for (std::size_t c = 0; c < hd; ++c) {
                    dq_row[c] += dot(ds.data(), kh + c * nk, nk);
                    axpy(q_row[c], ds.data(), dkh + c * nk, nk);
                }
            }
        }
    }
#pragma omp parallel for schedule(static)
    for (Index j = 0; j < static_cast<Index>(nk); ++j) {
        for (std::size_t h = 0; h < dims.heads; ++h)
            for (std::size_t c = 0; c < hd; ++c) {
                dk[j * width + h * hd + c] += dkt[(h * hd + c) * nk + j];
                dv[j * width + h * hd + c] += dvt[(h * hd + c) * nk + j];
            }
    }
}

void layer_norm_rows(const float* x, float* xhat, float* rstd, std::size_t rows, std::size_t d,
                     float eps) {
#pragma omp parallel for schedule(static)
    for (Index r = 0; r < static_cast<Index>(rows); ++r) {
        const float* xr = x + r * d;
        double sum = 0.0;
        for (std::size_t i = 0; i < d; ++i) sum += xr[i];
        const double mu = sum / static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = xr[i] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        rstd[r] = static_cast<float>(inv);
        float* out = xhat + r * d;
        for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<float>((xr[i] - mu) * inv);
    }
}

void layer_norm_rows_backward(const float* xhat, const float* rstd, const float* dxhat,
                              float* dx, std::size_t rows, std::size_t d, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (Index r = 0; r < static_cast<Index>(rows); ++r) {
        const float* xh = xhat + r * d;
        const float* g = dxhat + r * d;
        double mean_g = 0.0;
        double mean_gx = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            mean_g += g[i];
            mean_gx += static_cast<double>(g[i]) * xh[i];
        }
        mean_g /= static_cast<double>(d);
        mean_gx /= static_cast<double>(d);
        float* out = dx + r * d;
        for (std::size_t i = 0; i < d; ++i) {
            const float v = static_cast<float>(rstd[r] * (g[i] - mean_g - xh[i] * mean_gx));
            out[i] = accumulate ? out[i] + v : v;
        }
    }
}

}  // namespace standin::kernels
