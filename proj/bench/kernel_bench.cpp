// Parallel kernels vs the serial reference versions.
//
//   kernel_bench [reps]
//
// Prints one line per kernel: median milliseconds for each and the max abs
// difference between their outputs.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <vector>

#include "standin/kernels.hpp"
#include "standin/tensor.hpp"

namespace {

double median_ms(int reps, const std::function<void()>& fn) {
    std::vector<double> t;
    for (int i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(t.begin(), t.end());
    return t[t.size() / 2];
}

std::vector<float> random_vec(standin::Rng& rng, std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

float max_diff(const std::vector<float>& a, const std::vector<float>& b) {
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

void report(const char* name, double par, double ref, float diff) {
    std::printf("%-22s parallel %9.3f ms  reference %9.3f ms  speedup %5.2fx  max|diff| %.2e\n", name, par, ref,
                ref / par, static_cast<double>(diff));
}

}  // namespace

int main(int argc, char** argv) {
    const int reps = argc > 1 ? std::max(3, std::atoi(argv[1])) : 5;
    std::printf("threads: %d, reps: %d\n", omp_get_max_threads(), reps);
    standin::Rng rng(2024);
    namespace k = standin::kernels;

    {
        const std::size_t m = 512, kk = 64, n = 256;
        const auto a = random_vec(rng, m * kk), b = random_vec(rng, kk * n);
        std::vector<float> c1(m * n), c2(m * n);
        const double par = median_ms(reps, [&] { k::gemm(a.data(), b.data(), c1.data(), m, kk, n); });
        const double ref = median_ms(reps, [&] { k::reference::gemm(a.data(), b.data(), c2.data(), m, kk, n); });
        report("gemm 512x64x256", par, ref, max_diff(c1, c2));
    }
    {
        const std::size_t nq = 512, nk = 528, heads = 4, hd = 16;
        const auto q = random_vec(rng, nq * heads * hd), kv = random_vec(rng, nk * heads * hd),
                   v = random_vec(rng, nk * heads * hd);
        std::vector<float> o1(nq * heads * hd), o2(o1.size());
        const k::AttentionDims dims{nq, nk, heads, hd, 0.25f};
        const double par = median_ms(reps, [&] { k::attention_forward(dims, q.data(), kv.data(), v.data(), o1.data(), nullptr); });
        const double ref = median_ms(reps, [&] { k::reference::attention_forward(dims, q.data(), kv.data(), v.data(), o2.data()); });
        report("attention 512x528 h4", par, ref, max_diff(o1, o2));
    }
    {
        const std::size_t rows = 4096, d = 64;
        const auto x = random_vec(rng, rows * d);
        std::vector<float> y1(rows * d), y2(rows * d), rstd(rows);
        const double par = median_ms(reps, [&] { k::layer_norm_rows(x.data(), y1.data(), rstd.data(), rows, d, 1e-6f); });
        const double ref = median_ms(reps, [&] { k::reference::layer_norm_rows(x.data(), y2.data(), rows, d, 1e-6f); });
        report("layer_norm 4096x64", par, ref, max_diff(y1, y2));
    }
    return 0;
}
