#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace standin {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense float32 array, row-major. Extents may be zero so that an empty token
// stream (no reference image) is still a well-formed [0 x d] matrix.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Leading extent for a [rows x cols] view; cols is the trailing dimension.
    std::size_t rows() const;
    std::size_t cols() const;

    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }
    std::vector<float>& storage() noexcept { return data_; }

    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }
    float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    float* row(std::size_t r) { return data_.data() + r * cols(); }
    const float* row(std::size_t r) const { return data_.data() + r * cols(); }

    Tensor reshaped(Shape shape) const;
    void fill(float value);

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

// SplitMix64 (Steele, Lea, Flood 2014): state advances by the golden-ratio
// Weyl increment 0x9E3779B97F4A7C15 and each output is the state passed
// through the two-round xor-shift-multiply finalizer. Normal samples use the
// Box-Muller transform on two 53-bit uniforms, computed in double precision.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t next_u64() noexcept;
    // Uniform in [0, 1).
    double uniform() noexcept;
    float uniform(float lo, float hi) noexcept;
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept;
    double normal() noexcept;

private:
    std::uint64_t seed_;
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stateless seed derivation: mixes a parent seed with a stream index.
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) noexcept;

// FNV-1a over the raw float bytes plus the shape; used for freeze checks and
// cache fingerprints.
std::uint64_t fingerprint(const Tensor& t, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept;

// ---- pure tensor operations ------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor gaussian(Rng& rng, const Shape& shape);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);

// Row-wise concatenation of two [.. x d] matrices.
Tensor concat_rows(const Tensor& top, const Tensor& bottom);

float max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t) noexcept;
double mean(const Tensor& t) noexcept;

}  // namespace standin
