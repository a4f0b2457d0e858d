#include "standin/position.hpp"

#include <cmath>
#include <string>

#include "standin/errors.hpp"

namespace standin {

RoPEConfig RoPEConfig::with_default_split(int head_dim, double base) {
    RoPEConfig cfg;
    cfg.head_dim = head_dim;
    cfg.base = base;
    cfg.d_h = (head_dim / 4) & ~1;
    cfg.d_w = cfg.d_h;
    cfg.d_t = head_dim - cfg.d_h - cfg.d_w;
    return cfg;
}

void RoPEConfig::validate() const {
    if (head_dim <= 0 || head_dim % 2 != 0) {
        throw ValidationError("rope: head_dim must be positive and even, got " + std::to_string(head_dim));
    }
    for (int part : {d_t, d_h, d_w}) {
        if (part < 0 || part % 2 != 0) throw ValidationError("rope: axis split parts must be even and non-negative");
    }
    if (d_t + d_h + d_w != head_dim) {
        throw ValidationError("rope: d_t + d_h + d_w must equal head_dim");
    }
    if (!(base > 0.0)) throw ValidationError("rope: base must be positive");
}

std::vector<Coord3D> build_position_grid(int frames, int video_h, int video_w, int image_h,
                                         int image_w, PositionLayout layout) {
    if (frames < 1 || video_h < 1 || video_w < 1 || image_h < 1 || image_w < 1) {
        throw ValidationError("position grid: all dimensions must be >= 1");
    }
    std::vector<Coord3D> coords;
    coords.reserve(static_cast<std::size_t>(frames * video_h * video_w + image_h * image_w));
    for (int t = 0; t < frames; ++t)
        for (int h = 0; h < video_h; ++h)
            for (int w = 0; w < video_w; ++w) coords.push_back({t, h, w});

    const bool conditional = layout == PositionLayout::Conditional;
    const int t_ref = conditional ? -1 : 0;
    const int h0 = conditional ? video_h : 0;
    const int w0 = conditional ? video_w : 0;
    for (int h = 0; h < image_h; ++h)
        for (int w = 0; w < image_w; ++w) coords.push_back({t_ref, h0 + h, w0 + w});
    return coords;
}

namespace {

// Fills angles for one coordinate; out has head_dim / 2 entries.
void fill_angles(const RoPEConfig& cfg, Coord3D c, float* out) {
    std::size_t slot = 0;
    auto axis = [&](int position, int dims) {
        for (int j = 0; j < dims / 2; ++j) {
            const double freq = std::pow(cfg.base, -2.0 * j / dims);
            out[slot++] = static_cast<float>(position * freq);
        }
    };
    axis(c.t, cfg.d_t);
    axis(c.h, cfg.d_h);
    axis(c.w, cfg.d_w);
}

}  // namespace

Tensor rope_angles(const RoPEConfig& cfg, Coord3D c) {
    cfg.validate();
    Tensor out({static_cast<std::size_t>(cfg.head_dim / 2)});
    fill_angles(cfg, c, out.data());
    return out;
}

RopeTable make_rope_table(const RoPEConfig& cfg, std::span<const Coord3D> coords) {
    cfg.validate();
    const std::size_t half = static_cast<std::size_t>(cfg.head_dim / 2);
    RopeTable table{Tensor({coords.size(), half}), Tensor({coords.size(), half})};
    std::vector<float> angles(half);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        fill_angles(cfg, coords[i], angles.data());
        for (std::size_t j = 0; j < half; ++j) {
            table.cos.at(i, j) = static_cast<float>(std::cos(static_cast<double>(angles[j])));
            table.sin.at(i, j) = static_cast<float>(std::sin(static_cast<double>(angles[j])));
        }
    }
    return table;
}

void rotate_in_place(Tensor& x, const RopeTable& table, int heads, bool inverse) {
    const std::size_t n = table.cos.rows();
    const std::size_t half = table.cos.cols();
    const std::size_t head_dim = 2 * half;
    if (x.size() != n * static_cast<std::size_t>(heads) * head_dim) {
        throw ShapeError("rope: tensor " + shape_string(x.shape()) + " does not match " +
                         std::to_string(n) + " tokens x " + std::to_string(heads) + " heads x " +
                         std::to_string(head_dim));
    }
    const float sign = inverse ? -1.0f : 1.0f;
    for (std::size_t i = 0; i < n; ++i) {
        const float* c = table.cos.row(i);
        const float* s = table.sin.row(i);
        float* token = x.data() + i * heads * head_dim;
        for (int h = 0; h < heads; ++h) {
            float* v = token + h * head_dim;
            for (std::size_t j = 0; j < half; ++j) {
                const float a = v[2 * j];
                const float b = v[2 * j + 1];
                v[2 * j] = a * c[j] - sign * b * s[j];
                v[2 * j + 1] = sign * a * s[j] + b * c[j];
            }
        }
    }
}

Tensor apply_rope(const Tensor& x, std::span<const Coord3D> coords, const RoPEConfig& cfg) {
    if (x.rank() < 2 || x.dim(0) != coords.size()) {
        throw ShapeError("apply_rope: token count does not match coordinate count");
    }
    if (coords.empty()) return x;
    const std::size_t width = x.size() / coords.size();
    if (width % static_cast<std::size_t>(cfg.head_dim) != 0) {
        throw ShapeError("apply_rope: width is not a multiple of head_dim");
    }
    Tensor out = x;
    rotate_in_place(out, make_rope_table(cfg, coords), static_cast<int>(width / cfg.head_dim));
    return out;
}

}  // namespace standin
