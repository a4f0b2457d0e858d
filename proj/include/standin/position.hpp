#pragma once

// Token coordinates and 3D rotary embedding.
//
// Video tokens sit on the grid (t, h, w) in [0,F) x [0,H_V) x [0,W_V).
// Reference-image tokens get temporal index -1 and the spatial block
// [H_V, H_V+H_I) x [W_V, W_V+W_I), so the two coordinate sets never meet.

#include <compare>
#include <span>
#include <vector>

#include "standin/tensor.hpp"

namespace standin {

struct Coord3D {
    int t = 0;
    int h = 0;
    int w = 0;

    auto operator<=>(const Coord3D&) const = default;
};

struct RoPEConfig {
    int head_dim = 16;
    // Channels per axis. Each part is even; their sum is head_dim.
    int d_t = 8;
    int d_h = 4;
    int d_w = 4;
    double base = 10000.0;

    // (head_dim/2, head_dim/4, head_dim/4), rounded to even parts.
    static RoPEConfig with_default_split(int head_dim, double base = 10000.0);
    void validate() const;

    bool operator==(const RoPEConfig&) const = default;
};

enum class PositionLayout {
    Conditional,  // temporal index -1, offset spatial subspace
    Shared,       // reference tokens reuse the video rule: t = 0, h and w from 0
};

std::vector<Coord3D> build_position_grid(int frames, int video_h, int video_w, int image_h,
                                         int image_w,
                                         PositionLayout layout = PositionLayout::Conditional);

// Rotation angle per channel pair: [head_dim / 2].
Tensor rope_angles(const RoPEConfig& cfg, Coord3D c);

// Per-token cos/sin tables, [n x head_dim/2] each.
struct RopeTable {
    Tensor cos;
    Tensor sin;
};

RopeTable make_rope_table(const RoPEConfig& cfg, std::span<const Coord3D> coords);

// Rotates channel pairs (2j, 2j+1) of every head. x is [n x heads*head_dim]
// (or [n x heads x head_dim]). inverse=true applies the transpose rotation,
// which is also the gradient map.
void rotate_in_place(Tensor& x, const RopeTable& table, int heads, bool inverse = false);

Tensor apply_rope(const Tensor& x, std::span<const Coord3D> coords, const RoPEConfig& cfg);

}  // namespace standin
