#include "standin/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "standin/errors.hpp"
#include "standin/stin_io.hpp"

namespace standin {

using nlohmann::json;

namespace {

std::size_t to_size(int v) { return static_cast<std::size_t>(v); }

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path.string() + ": cannot open for writing");
    out << text;
    if (!out) throw DataError(path.string() + ": write failed");
}

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path.string() + ": cannot open");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

void paste(Tensor& canvas, std::size_t frame_offset, const Tensor& glyph, int top, int left) {
    const std::size_t W = canvas.dim(canvas.rank() - 2);
    const std::size_t g = glyph.dim(0);
    for (std::size_t y = 0; y < g; ++y)
        for (std::size_t x = 0; x < g; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                canvas[frame_offset + ((to_size(top) + y) * W + to_size(left) + x) * 3 + c] =
                    glyph[(y * g + x) * 3 + c];
}

int even_floor(double v) { return 2 * static_cast<int>(std::floor(v / 2.0)); }

}  // namespace

std::string motion_name(Motion m) {
    switch (m) {
        case Motion::Left: return "left";
        case Motion::Right: return "right";
        case Motion::Up: return "up";
        case Motion::Down: return "down";
        case Motion::RotateCw: return "rotate-cw";
        case Motion::RotateCcw: return "rotate-ccw";
    }
    return "unknown";
}

Motion motion_from_index(int index) {
    if (index < 0 || index >= kMotionCount) {
        throw ValidationError("motion class " + std::to_string(index) + " is outside [0, " +
                              std::to_string(kMotionCount) + ")");
    }
    return static_cast<Motion>(index);
}

float distinct_cell_fraction(const Tensor& glyph) {
    const std::size_t g = glyph.dim(0);
    const std::size_t cell = g / kGlyphCells;
    std::vector<std::array<float, 3>> colors;
    for (int cy = 0; cy < kGlyphCells; ++cy)
        for (int cx = 0; cx < kGlyphCells; ++cx) {
            const std::size_t base = (to_size(cy) * cell * g + to_size(cx) * cell) * 3;
            colors.push_back({glyph[base], glyph[base + 1], glyph[base + 2]});
        }
    int distinct = 0;
    for (std::size_t i = 0; i < colors.size(); ++i) {
        bool separated = true;
        for (std::size_t j = 0; j < colors.size() && separated; ++j) {
            if (i == j) continue;
            float d2 = 0.0f;
            for (int c = 0; c < 3; ++c) d2 += (colors[i][c] - colors[j][c]) * (colors[i][c] - colors[j][c]);
            separated = std::sqrt(d2) >= kCellSeparation;
        }
        distinct += separated ? 1 : 0;
    }
    return static_cast<float>(distinct) / static_cast<float>(colors.size());
}

Identity generate_identity(std::uint64_t seed, int glyph_px, int max_retries, float min_fraction) {
    if (glyph_px < kGlyphCells || glyph_px % kGlyphCells != 0) {
        throw ValidationError("identity: glyph size must be a positive multiple of " + std::to_string(kGlyphCells));
    }
    const std::size_t g = to_size(glyph_px);
    const std::size_t cell = g / kGlyphCells;
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(attempt)));
        Tensor glyph({g, g, 3});
        for (int cy = 0; cy < kGlyphCells; ++cy)
            for (int cx = 0; cx < kGlyphCells; ++cx) {
                const float rgb[3] = {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
                                      static_cast<float>(rng.uniform())};
                for (std::size_t y = 0; y < cell; ++y)
                    for (std::size_t x = 0; x < cell; ++x)
                        for (std::size_t c = 0; c < 3; ++c)
                            glyph[((to_size(cy) * cell + y) * g + to_size(cx) * cell + x) * 3 + c] = rgb[c];
            }
        if (distinct_cell_fraction(glyph) >= min_fraction) return {seed, std::move(glyph)};
    }
    throw ValidationError("identity: seed " + std::to_string(seed) + " exhausted " +
                          std::to_string(max_retries) + " retries without a distinguishable glyph");
}

Tensor render_reference(const Identity& id, int height, int width) {
    const int g = static_cast<int>(id.glyph.dim(0));
    if (g > height || g > width) {
        throw ValidationError("reference: glyph " + std::to_string(g) + " does not fit a " + std::to_string(height) +
                              "x" + std::to_string(width) + " canvas");
    }
    Tensor canvas({to_size(height), to_size(width), 3}, 1.0f);
    paste(canvas, 0, id.glyph, even_floor((height - g) / 2.0), even_floor((width - g) / 2.0));
    return canvas;
}

Tensor clutter_background(Rng& rng, int height, int width) {
    constexpr int kCoarse = 4;
    float grid[kCoarse + 1][kCoarse + 1][3];
    for (auto& row : grid)
        for (auto& cell : row)
            for (float& v : cell) v = 0.05f + 0.8f * static_cast<float>(rng.uniform());
    Tensor bg({to_size(height), to_size(width), 3});
    for (int y = 0; y < height; ++y) {
        const float fy = static_cast<float>(y) / static_cast<float>(std::max(height - 1, 1)) * kCoarse;
        const int y0 = std::min(static_cast<int>(fy), kCoarse - 1);
        const float ty = fy - static_cast<float>(y0);
        for (int x = 0; x < width; ++x) {
            const float fx = static_cast<float>(x) / static_cast<float>(std::max(width - 1, 1)) * kCoarse;
            const int x0 = std::min(static_cast<int>(fx), kCoarse - 1);
            const float tx = fx - static_cast<float>(x0);
            for (int c = 0; c < 3; ++c) {
                const float top = grid[y0][x0][c] * (1 - tx) + grid[y0][x0 + 1][c] * tx;
                const float bottom = grid[y0 + 1][x0][c] * (1 - tx) + grid[y0 + 1][x0 + 1][c] * tx;
                bg[(to_size(y) * to_size(width) + to_size(x)) * 3 + to_size(c)] =
                    std::clamp(top * (1 - ty) + bottom * ty, 0.05f, 0.85f);
            }
        }
    }
    return bg;
}

RenderedVideo render_video(const Identity& id, Motion motion, Rng& rng, int frames, int height, int width) {
    const int g = static_cast<int>(id.glyph.dim(0));
    constexpr int kStep = 2;
    const int max_top = height - g;
    const int max_left = width - g;
    if (frames < 1 || max_top < 0 || max_left < 0) throw ValidationError("video: glyph does not fit the frame");

    auto pick = [&](int lo, int hi) {  // even value in [lo, hi]
        const int first = lo + (lo & 1);
        const int count = (hi - first) / 2 + 1;
        if (hi < first) throw ValidationError("video: no room for the requested trajectory");
        return first + 2 * static_cast<int>(rng.below(static_cast<std::uint64_t>(count)));
    };

    std::vector<Placement> path;
    const int travel = kStep * (frames - 1);
    switch (motion) {
        case Motion::Left:
        case Motion::Right: {
            if (travel > max_left) throw ValidationError("video: horizontal travel exceeds the frame");
            const int top = pick(0, max_top);
            const int start = pick(0, max_left - travel);
            for (int f = 0; f < frames; ++f) {
                const int step = kStep * f;
                path.push_back({top, motion == Motion::Right ? start + step : start + travel - step});
            }
            break;
        }
        case Motion::Up:
        case Motion::Down: {
            if (travel > max_top) throw ValidationError("video: vertical travel exceeds the frame");
            const int left = pick(0, max_left);
            const int start = pick(0, max_top - travel);
            for (int f = 0; f < frames; ++f) {
                const int step = kStep * f;
                path.push_back({motion == Motion::Down ? start + step : start + travel - step, left});
            }
            break;
        }
        case Motion::RotateCw:
        case Motion::RotateCcw: {
            // Orbit of radius r around an even center; screen coordinates, so
            // clockwise means increasing angle with y pointing down.
            const int r = std::min({6, max_top / 2, max_left / 2}) & ~1;
            const int cy = pick(r, max_top - r);
            const int cx = pick(r, max_left - r);
            const double phase = 2.0 * std::numbers::pi * rng.uniform();
            const double dir = motion == Motion::RotateCw ? 1.0 : -1.0;
            for (int f = 0; f < frames; ++f) {
                const double a = phase + dir * 2.0 * std::numbers::pi * f / frames;
                const int top = std::clamp(2 * static_cast<int>(std::lround((cy + r * std::sin(a)) / 2.0)), 0, max_top & ~1);
                const int left = std::clamp(2 * static_cast<int>(std::lround((cx + r * std::cos(a)) / 2.0)), 0, max_left & ~1);
                path.push_back({top, left});
            }
            break;
        }
    }

    const Tensor background = clutter_background(rng, height, width);
    RenderedVideo out{Tensor({to_size(frames), to_size(height), to_size(width), 3}), path};
    const std::size_t frame_size = background.size();
    for (int f = 0; f < frames; ++f) {
        const std::size_t offset = to_size(f) * frame_size;
        std::copy(background.data(), background.data() + frame_size, out.video.data() + offset);
        paste(out.video, offset, id.glyph, path[to_size(f)].top, path[to_size(f)].left);
    }
    return out;
}

Tensor pixels_to_latent(const Tensor& pixels, int factor) {
    if (pixels.rank() < 3 || factor < 1) throw ShapeError("pixels_to_latent: expected [... x H x W x c]");
    const std::size_t r = pixels.rank();
    const std::size_t H = pixels.dim(r - 3), W = pixels.dim(r - 2), C = pixels.dim(r - 1);
    const std::size_t k = to_size(factor);
    if (H % k || W % k) throw ValidationError("pixels_to_latent: size not divisible by the factor");
    const std::size_t lead = pixels.size() / (H * W * C);
    Shape shape = pixels.shape();
    shape[r - 3] = H / k;
    shape[r - 2] = W / k;
    Tensor out(shape);
    const float norm = 1.0f / static_cast<float>(k * k);
    for (std::size_t l = 0; l < lead; ++l)
        for (std::size_t y = 0; y < H / k; ++y)
            for (std::size_t x = 0; x < W / k; ++x)
                for (std::size_t c = 0; c < C; ++c) {
                    float acc = 0.0f;
                    for (std::size_t dy = 0; dy < k; ++dy)
                        for (std::size_t dx = 0; dx < k; ++dx)
                            acc += pixels[((l * H + y * k + dy) * W + x * k + dx) * C + c];
                    out[((l * (H / k) + y) * (W / k) + x) * C + c] = 2.0f * acc * norm - 1.0f;
                }
    return out;
}

Tensor latent_to_pixels(const Tensor& latent, int factor) {
    if (latent.rank() < 3 || factor < 1) throw ShapeError("latent_to_pixels: expected [... x H x W x c]");
    const std::size_t r = latent.rank();
    const std::size_t H = latent.dim(r - 3), W = latent.dim(r - 2), C = latent.dim(r - 1);
    const std::size_t k = to_size(factor);
    const std::size_t lead = latent.size() / (H * W * C);
    Shape shape = latent.shape();
    shape[r - 3] = H * k;
    shape[r - 2] = W * k;
    Tensor out(shape);
    for (std::size_t l = 0; l < lead; ++l)
        for (std::size_t y = 0; y < H * k; ++y)
            for (std::size_t x = 0; x < W * k; ++x)
                for (std::size_t c = 0; c < C; ++c) {
                    const float v = latent[((l * H + y / k) * W + x / k) * C + c];
                    out[((l * H * k + y) * W * k + x) * C + c] = std::clamp(0.5f * (v + 1.0f), 0.0f, 1.0f);
                }
    return out;
}

std::vector<int> prompt_ids(Motion motion, int prompt_len) {
    if (prompt_len < 1) throw ValidationError("prompt length must be positive");
    std::vector<int> ids(to_size(prompt_len), 0);
    ids.back() = static_cast<int>(motion) + 1;
    return ids;
}

std::vector<std::uint64_t> DatasetManifest::identity_seeds(bool held_out) const {
    std::vector<std::uint64_t> out;
    for (const auto& s : samples)
        if (s.held_out == held_out) out.push_back(s.identity_seed);
    return out;
}

DatasetManifest plan_dataset(const DatasetSpec& spec) {
    if (spec.samples < 1) throw ValidationError("dataset: need at least one sample");
    DatasetManifest m;
    m.spec = spec;
    for (int i = 0; i < spec.samples; ++i) {
        SampleRecord r;
        char name[32];
        std::snprintf(name, sizeof(name), "s%05d", i);
        r.id = name;
        r.identity_seed = derive_seed(spec.seed, 2 * static_cast<std::uint64_t>(i));
        r.video_seed = derive_seed(spec.seed, 2 * static_cast<std::uint64_t>(i) + 1);
        Rng pick(derive_seed(r.video_seed, 0));
        r.motion = static_cast<int>(pick.below(kMotionCount));
        r.held_out = i % 8 == 7;
        m.samples.push_back(r);
    }
    return m;
}

namespace {

json spec_json(const DatasetSpec& s) {
    return {{"samples", s.samples}, {"seed", s.seed},       {"frames", s.frames},
            {"height", s.height},   {"width", s.width},     {"ref_height", s.ref_height},
            {"ref_width", s.ref_width}, {"glyph", s.glyph}};
}

}  // namespace

DatasetManifest make_dataset(const std::filesystem::path& dir, const DatasetSpec& spec) {
    const DatasetManifest m = plan_dataset(spec);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError(dir.string() + ": " + ec.message());

    std::vector<std::string> errors(m.samples.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        const SampleRecord& r = m.samples[i];
        try {
            const Identity id = generate_identity(r.identity_seed, spec.glyph);
            Rng rng(derive_seed(r.video_seed, 1));
            const RenderedVideo video =
                render_video(id, motion_from_index(r.motion), rng, spec.frames, spec.height, spec.width);
            const auto sample_dir = dir / r.id;
            std::filesystem::create_directories(sample_dir);
            save_tensor(sample_dir / "ref.stin", render_reference(id, spec.ref_height, spec.ref_width));
            save_tensor(sample_dir / "video.stin", video.video);
            json traj = json::array();
            for (const auto& p : video.trajectory) traj.push_back({p.top, p.left});
            const json meta = {{"id", r.id},
                               {"prompt_id", r.motion},
                               {"motion", motion_name(motion_from_index(r.motion))},
                               {"identity_seed", r.identity_seed},
                               {"video_seed", r.video_seed},
                               {"split", r.held_out ? "heldout" : "train"},
                               {"trajectory", traj}};
            write_text(sample_dir / "meta.json", meta.dump(2) + "\n");
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw DataError(e);

    json samples = json::array();
    for (const auto& r : m.samples) {
        samples.push_back({{"id", r.id},
                           {"identity_seed", r.identity_seed},
                           {"video_seed", r.video_seed},
                           {"motion", r.motion},
                           {"split", r.held_out ? "heldout" : "train"}});
    }
    const json manifest = {{"version", m.version},
                           {"spec", spec_json(spec)},
                           {"sample_count", m.samples.size()},
                           {"train_identity_seeds", m.identity_seeds(false)},
                           {"heldout_identity_seeds", m.identity_seeds(true)},
                           {"samples", samples}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    const json j = read_json(path);
    try {
        DatasetManifest m;
        m.version = j.at("version").get<std::string>();
        if (m.version != kGeneratorVersion) throw DataError(path.string() + ": unsupported generator version " + m.version);
        const json& s = j.at("spec");
        m.spec.samples = s.at("samples");
        m.spec.seed = s.at("seed");
        m.spec.frames = s.at("frames");
        m.spec.height = s.at("height");
        m.spec.width = s.at("width");
        m.spec.ref_height = s.at("ref_height");
        m.spec.ref_width = s.at("ref_width");
        m.spec.glyph = s.at("glyph");
        for (const json& r : j.at("samples")) {
            SampleRecord rec;
            rec.id = r.at("id").get<std::string>();
            rec.identity_seed = r.at("identity_seed");
            rec.video_seed = r.at("video_seed");
            rec.motion = r.at("motion");
            rec.held_out = r.at("split").get<std::string>() == "heldout";
            m.samples.push_back(rec);
        }
        return m;
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

LoadedSample load_sample(const std::filesystem::path& dir, const SampleRecord& record) {
    const auto sample_dir = dir / record.id;
    return {record, load_tensor(sample_dir / "ref.stin"), load_tensor(sample_dir / "video.stin")};
}

}  // namespace standin
