#include "standin/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include "standin/errors.hpp"
#include "standin/kernels.hpp"

namespace standin {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
        throw ShapeError("tensor: shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
    }
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("tensor: axis out of range");
    return shape_[axis];
}

std::size_t Tensor::cols() const {
    if (shape_.empty()) return 1;
    return shape_.back();
}

std::size_t Tensor::rows() const {
    const std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
}

Tensor Tensor::reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
        throw ShapeError("reshape: " + shape_string(shape_) + " -> " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

// ---- Rng -------------------------------------------------------------------

std::uint64_t Rng::next_u64() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Rng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

float Rng::uniform(float lo, float hi) noexcept {
    return lo + static_cast<float>(uniform()) * (hi - lo);
}

std::uint64_t Rng::below(std::uint64_t n) noexcept {
    if (n == 0) return 0;
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
}

double Rng::normal() noexcept {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // u1 in (0, 1] keeps the log finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(theta);
    has_spare_ = true;
    return radius * std::cos(theta);
}

std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) noexcept {
    Rng mix(parent ^ (stream * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL));
    return mix.next_u64();
}

std::uint64_t fingerprint(const Tensor& t, std::uint64_t h) noexcept {
    // FNV-style multiply-xor over 64-bit words in four independent lanes (the
    // cache binding hashes every weight on each forward, so throughput matters),
    // folded with the SplitMix64 finalizer.
    constexpr std::uint64_t prime = 0x100000001b3ULL;
    std::uint64_t lane[4] = {h, h ^ 0x9e3779b97f4a7c15ULL, h ^ 0xbf58476d1ce4e5b9ULL, h ^ 0x94d049bb133111ebULL};
    for (auto d : t.shape()) lane[0] = (lane[0] ^ static_cast<std::uint64_t>(d)) * prime;
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    const std::size_t n = t.size() * sizeof(float);
    std::size_t i = 0;
    for (; i + 32 <= n; i += 32) {
        for (int l = 0; l < 4; ++l) {
            std::uint64_t word;
            std::memcpy(&word, bytes + i + 8 * l, sizeof word);
            lane[l] = (lane[l] ^ word) * prime;
        }
    }
    for (; i < n; ++i) lane[1] = (lane[1] ^ bytes[i]) * prime;
    std::uint64_t z = lane[0] ^ (lane[1] * 3) ^ (lane[2] * 5) ^ (lane[3] * 7) ^ n;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ---- operations --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    Tensor c({a.dim(0), b.dim(1)});
    kernels::gemm(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
    return c;
}

Tensor softmax_rows(const Tensor& x) {
    Tensor out = x;
    const std::size_t n = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        float* row = out.row(r);
        const float m = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - m);
            total += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) row[j] = static_cast<float>(row[j] / total);
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    const std::size_t d = x.cols();
    if (gamma.size() != d || beta.size() != d) {
        throw ShapeError("layer_norm: affine size does not match trailing dim " + std::to_string(d));
    }
    Tensor out(x.shape());
    std::vector<float> rstd(x.rows());
    kernels::layer_norm_rows(x.data(), out.data(), rstd.data(), x.rows(), d, eps);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        float* row = out.row(r);
        for (std::size_t i = 0; i < d; ++i) row[i] = row[i] * gamma[i] + beta[i];
    }
    return out;
}

Tensor gaussian(Rng& rng, const Shape& shape) {
    Tensor out(shape);
    for (auto& v : out.values()) v = static_cast<float>(rng.normal());
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: rank-2 tensor required");
    Tensor t({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

namespace {
void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor scale(const Tensor& a, float s) {
    Tensor out = a;
    for (auto& v : out.values()) v *= s;
    return out;
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
    if (top.cols() != bottom.cols()) throw ShapeError("concat_rows: column mismatch");
    std::vector<float> data;
    data.reserve(top.size() + bottom.size());
    data.insert(data.end(), top.values().begin(), top.values().end());
    data.insert(data.end(), bottom.values().begin(), bottom.values().end());
    return Tensor({top.rows() + bottom.rows(), top.cols()}, std::move(data));
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same(a, b, "max_abs_diff");
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const float d = std::fabs(a[i] - b[i]);
        if (std::isnan(d)) return d;
        m = std::max(m, d);
    }
    return m;
}

bool all_finite(const Tensor& t) noexcept {
    return std::all_of(t.values().begin(), t.values().end(), [](float v) { return std::isfinite(v); });
}

double mean(const Tensor& t) noexcept {
    if (t.empty()) return 0.0;
    double s = 0.0;
    for (float v : t.values()) s += v;
    return s / static_cast<double>(t.size());
}

}  // namespace standin
