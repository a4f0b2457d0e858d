#pragma once

// Procedural identity-glyph dataset.
//
// An identity is a seeded 4x4 grid of colored cells (the glyph). Its reference
// image is the glyph centered on a white canvas; its training clip shows the
// glyph moving over a low-frequency cluttered background along a trajectory
// chosen by the motion class, which is also the prompt.
//
// Layout on disk:
//   <dir>/manifest.json
//   <dir>/<sample_id>/{ref.stin, video.stin, meta.json}
// ref.stin is [H_ref x W_ref x 3] and video.stin [F x H x W x 3], pixels in [0,1].

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "standin/tensor.hpp"

namespace standin {

inline constexpr const char* kGeneratorVersion = "glyph-1";
inline constexpr int kGlyphCells = 4;

enum class Motion { Left, Right, Up, Down, RotateCw, RotateCcw };
inline constexpr int kMotionCount = 6;

std::string motion_name(Motion m);
Motion motion_from_index(int index);  // validation error outside [0, kMotionCount)

struct Identity {
    std::uint64_t seed = 0;
    Tensor glyph;  // [g x g x 3], constant over g/4 x g/4 cells
};

// Deterministic in (seed, size). Rejects grids where fewer than min_fraction
// of the cells are at least kCellSeparation away from every other cell,
// reseeding deterministically up to max_retries times.
inline constexpr float kCellSeparation = 0.25f;
Identity generate_identity(std::uint64_t seed, int glyph_px = 8, int max_retries = 16,
                           float min_fraction = 0.25f);

// Fraction of cells whose color is >= kCellSeparation (Euclidean) from all others.
float distinct_cell_fraction(const Tensor& glyph);

// Glyph centered (even offset) on a white canvas.
Tensor render_reference(const Identity& id, int height, int width);

struct Placement {
    int top = 0;
    int left = 0;

    bool operator==(const Placement&) const = default;
};

struct RenderedVideo {
    Tensor video;  // [F x H x W x 3]
    std::vector<Placement> trajectory;
};

// Positions move two pixels per frame (left/right/up/down) or orbit the
// frame center (rotate-*); every placement lies on the even-pixel lattice.
RenderedVideo render_video(const Identity& id, Motion motion, Rng& rng, int frames, int height, int width);

// Low-frequency noise in [0.05, 0.85] (never white): a coarse random grid
// bilinearly upsampled.
Tensor clutter_background(Rng& rng, int height, int width);

// Average-pools factor x factor pixel blocks and maps [0,1] -> [-1,1].
Tensor pixels_to_latent(const Tensor& pixels, int factor);
// Inverse value map [-1,1] -> [0,1] clipped, with nearest-neighbour upsampling.
Tensor latent_to_pixels(const Tensor& latent, int factor);

std::vector<int> prompt_ids(Motion motion, int prompt_len);

struct DatasetSpec {
    int samples = 256;
    std::uint64_t seed = 7;
    int frames = 8;
    int height = 32;
    int width = 32;
    int ref_height = 16;
    int ref_width = 16;
    int glyph = 8;
};

struct SampleRecord {
    std::string id;
    std::uint64_t identity_seed = 0;
    std::uint64_t video_seed = 0;
    int motion = 0;
    bool held_out = false;
};

struct DatasetManifest {
    std::string version = kGeneratorVersion;
    DatasetSpec spec;
    std::vector<SampleRecord> samples;

    std::vector<std::uint64_t> identity_seeds(bool held_out) const;
};

// Every 8th sample (index % 8 == 7) is a held-out identity.
DatasetManifest plan_dataset(const DatasetSpec& spec);
DatasetManifest make_dataset(const std::filesystem::path& dir, const DatasetSpec& spec);
DatasetManifest load_manifest(const std::filesystem::path& dir);

struct LoadedSample {
    SampleRecord record;
    Tensor ref;    // pixels
    Tensor video;  // pixels
};
LoadedSample load_sample(const std::filesystem::path& dir, const SampleRecord& record);

}  // namespace standin
