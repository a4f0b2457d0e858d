#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "reference_model.hpp"
#include "standin/checkpoint.hpp"
#include "standin/errors.hpp"
#include "standin/model.hpp"
#include "standin/stin_io.hpp"

using namespace standin;
using namespace standin::testing;

namespace {

Shape latent_shape(const ModelConfig& c) {
    return {static_cast<std::size_t>(c.frames), static_cast<std::size_t>(c.latent_h),
            static_cast<std::size_t>(c.latent_w), static_cast<std::size_t>(c.channels)};
}
Shape ref_shape(const ModelConfig& c) {
    return {static_cast<std::size_t>(c.ref_h), static_cast<std::size_t>(c.ref_w), static_cast<std::size_t>(c.channels)};
}

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_blocks = 2;
    cfg.heads = 2;
    cfg.ffn_mult = 2;
    cfg.frames = 2;
    cfg.latent_h = 4;
    cfg.latent_w = 6;
    cfg.channels = 2;
    cfg.ref_h = 4;
    cfg.ref_w = 4;
    cfg.prompt_vocab = 4;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 2.0f;
    cfg.rope = RoPEConfig::with_default_split(8);
    return cfg;
}

struct Fixture {
    ModelConfig cfg = small_config();
    ModelWeights w;
    Tensor latent, ref;
    std::vector<int> prompt{1, 3};

    explicit Fixture(std::uint64_t seed = 1) {
        Rng rng(seed);
        w = init_weights(cfg, rng);
        randomize_weights(w, rng, 0.3f);
        latent = random_tensor(rng, latent_shape(cfg));
        ref = random_tensor(rng, ref_shape(cfg));
    }
};

}  // namespace

TEST_SUITE("model") {

TEST_CASE("patchify single patch, token count and round trip") {
    const Tensor x({1, 2, 2, 1}, {1, 2, 3, 4});
    const Patches p = patchify(x, {1, 2, 2});
    CHECK(p.tokens == Tensor({1, 4}, {1, 2, 3, 4}));
    CHECK(unpatchify(p.tokens, p.grid, {1, 2, 2}, 1) == x);

    Rng rng(1);
    const Tensor big = random_tensor(rng, {8, 16, 16, 3});
    const Patches bp = patchify(big, {1, 2, 2});
    CHECK(bp.tokens.rows() == 512);
    CHECK(unpatchify(bp.tokens, bp.grid, {1, 2, 2}, 3) == big);

    const Tensor odd = random_tensor(rng, {4, 6, 4, 2});
    const Patches op = patchify(odd, {2, 3, 2});
    CHECK(unpatchify(op.tokens, op.grid, {2, 3, 2}, 2) == odd);

    CHECK_THROWS_AS(patchify(random_tensor(rng, {1, 3, 2, 1}), {1, 2, 2}), ValidationError);
    CHECK_THROWS_AS(unpatchify(Tensor({3, 4}), GridDims{1, 1, 1}, {1, 2, 2}, 1), ShapeError);
}

TEST_CASE("timestep features") {
    const Tensor zero = timestep_features(0.0f, 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(zero[i] == 1.0f);
        CHECK(zero[4 + i] == 0.0f);
    }
    const Tensor half = timestep_features(0.5f, 8);
    for (int i = 0; i < 4; ++i) {
        const double f = std::pow(10000.0, -i / 4.0);
        CHECK(std::abs(half[i] - std::cos(500.0 * f)) < 1e-6);
        CHECK(std::abs(half[4 + i] - std::sin(500.0 * f)) < 1e-6);
    }
    CHECK(timestep_features(0.3f, 8) == timestep_features(0.3f, 8));
    CHECK_THROWS_AS(timestep_features(0.1f, 7), ValidationError);
}

TEST_CASE("config validation") {
    ModelConfig cfg = small_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = small_config();
    cfg.latent_w = 5;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = small_config();
    cfg.rope.d_t += 2;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("initialization: adaLN-zero, zero LoRA B, parameter partition") {
    const ModelConfig cfg = small_config();
    Rng rng(3);
    const ModelWeights w = init_weights(cfg, rng);
    for (const auto& b : w.blocks) {
        for (float v : b.mod_w.values()) CHECK(v == 0.0f);
        for (const LoRAAdapter* l : {&b.lora_q, &b.lora_k, &b.lora_v}) {
            for (float v : l->b.values()) CHECK(v == 0.0f);
            CHECK(l->rank == cfg.lora_rank);
        }
    }
    std::set<std::string> lora;
    w.for_each([&](const std::string& name, const Tensor&, ParamGroup g) {
        if (g == ParamGroup::LoRA) lora.insert(name);
    });
    std::set<std::string> expect;
    for (int b = 0; b < cfg.n_blocks; ++b)
        for (const char* p : {"q", "k", "v"})
            for (const char* m : {"A", "B"})
                expect.insert("block" + std::to_string(b) + ".lora_" + p + "." + m);
    CHECK(lora == expect);
    CHECK(w.parameter_count(ParamGroup::LoRA) ==
          static_cast<std::size_t>(cfg.n_blocks * 3 * cfg.lora_rank * 2 * cfg.d_model));

    // zero-init model predicts exactly zero
    const Tensor out = model_forward(cfg, w, Tensor(latent_shape(cfg), 0.5f), nullptr, std::vector<int>{0, 1}, 0.5f);
    for (float v : out.values()) CHECK(v == 0.0f);
    CHECK_NOTHROW(validate_weights(cfg, w));
    ModelConfig other = cfg;
    other.lora_rank = 3;
    CHECK_THROWS_AS(validate_weights(other, w), ValidationError);
}

TEST_CASE("forward: shape, determinism, double-precision reference") {
    Fixture f;
    const Tensor a = model_forward(f.cfg, f.w, f.latent, &f.ref, f.prompt, 0.4f);
    CHECK(a.shape() == f.latent.shape());
    CHECK(a == model_forward(f.cfg, f.w, f.latent, &f.ref, f.prompt, 0.4f));

    const auto ref_out = reference_forward(f.cfg, f.w, f.latent, &f.ref, f.prompt, 0.4f, true);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(ref_out[i] - a[i]));
    CHECK(diff < 1e-4);

    // no reference image: the same blocks run as a plain text-to-video DiT
    const Tensor plain = model_forward(f.cfg, f.w, f.latent, nullptr, f.prompt, 0.4f);
    const auto ref_plain = reference_forward(f.cfg, f.w, f.latent, nullptr, f.prompt, 0.4f, true);
    diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(ref_plain[i] - plain[i]));
    CHECK(diff < 1e-4);

    for (PositionLayout layout : {PositionLayout::Shared, PositionLayout::Conditional}) {
        for (bool modulate : {false, true}) {
            ModelConfig c = f.cfg;
            c.position_layout = layout;
            c.modulate_image_stream = modulate;
            const Tensor y = model_forward(c, f.w, f.latent, &f.ref, f.prompt, 0.7f, {.lora_enabled = false});
            const auto r = reference_forward(c, f.w, f.latent, &f.ref, f.prompt, 0.7f, false);
            diff = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) diff = std::max(diff, std::abs(r[i] - y[i]));
            CHECK(diff < 1e-4);
        }
    }

    CHECK_THROWS_AS(model_forward(f.cfg, f.w, Tensor({1, 2, 3, 4}), &f.ref, f.prompt, 0.4f), ShapeError);
    CHECK_THROWS_AS(model_forward(f.cfg, f.w, f.latent, &f.latent, f.prompt, 0.4f), ShapeError);
    CHECK_THROWS_AS(model_forward(f.cfg, f.w, f.latent, &f.ref, std::vector<int>{0, 9}, 0.4f), ValidationError);
}

TEST_CASE("image stream ignores video tokens at every block") {
    Fixture f;
    std::vector<Tensor> acts_a, acts_b;
    ForwardOptions oa, ob;
    oa.image_activations = &acts_a;
    ob.image_activations = &acts_b;
    (void)model_forward(f.cfg, f.w, f.latent, &f.ref, f.prompt, 0.3f, oa);
    Rng rng(77);
    (void)model_forward(f.cfg, f.w, random_tensor(rng, f.latent.shape(), 3.0f), &f.ref, f.prompt, 0.9f, ob);
    REQUIRE(acts_a.size() == static_cast<std::size_t>(f.cfg.n_blocks));
    for (std::size_t b = 0; b < acts_a.size(); ++b) CHECK(acts_a[b] == acts_b[b]);
}

TEST_CASE("cached forward matches the recompute path") {
    Fixture f;
    KVCache cache;
    ForwardCounters counters;
    ForwardOptions o;
    o.cache = &cache;
    o.counters = &counters;
    const Tensor first = model_forward(f.cfg, f.w, f.latent, &f.ref, f.prompt, 0.8f, o);
    CHECK(cache.populated());
    const Tensor second = model_forward(f.cfg, f.w, f.latent, &f.ref, f.prompt, 0.8f, o);
    const Tensor fresh = model_forward(f.cfg, f.w, f.latent, &f.ref, f.prompt, 0.8f);
    CHECK(max_abs_diff(first, fresh) < 1e-6f);
    CHECK(max_abs_diff(second, fresh) < 1e-6f);
    CHECK(counters.image_branch_evals == static_cast<std::uint64_t>(f.cfg.n_blocks));
    CHECK(counters.cache_reads == static_cast<std::uint64_t>(f.cfg.n_blocks));
    CHECK(counters.model_evals == 2);

    // rebinding the session to another reference is a cache error
    Tensor other = f.ref;
    other[0] += 1.0f;
    CHECK_THROWS_AS(model_forward(f.cfg, f.w, f.latent, &other, f.prompt, 0.8f, o), CacheError);
    CHECK_THROWS_AS(model_forward(f.cfg, f.w, f.latent, nullptr, f.prompt, 0.8f, o), CacheError);
    CHECK_THROWS_AS(cache.store({}), CacheError);
}

TEST_CASE("block: cached entry equals uncached, wrong shape is a cache error") {
    Fixture f;
    const std::size_t d = static_cast<std::size_t>(f.cfg.d_model);
    Rng rng(12);
    const auto coords = build_position_grid(2, 2, 3, 2, 2);
    const std::span<const Coord3D> all(coords);
    const RopeTable rv = make_rope_table(f.cfg.rope, all.first(12));
    const RopeTable ri = make_rope_table(f.cfg.rope, all.subspan(12));
    const Tensor cv = random_tensor(rng, {d}), ci = random_tensor(rng, {d}), pe = random_tensor(rng, {2, d});
    BlockContext ctx;
    ctx.cfg = &f.cfg;
    ctx.rope_video = &rv;
    ctx.rope_image = &ri;
    ctx.cond_video = &cv;
    ctx.cond_image = &ci;
    ctx.prompt_emb = &pe;

    const Tensor video0 = random_tensor(rng, {12, d}), image0 = random_tensor(rng, {4, d});
    Tensor v1 = video0, i1 = image0;
    KVCacheEntry entry;
    block_forward(f.w.blocks[0], ctx, v1, i1, &entry, nullptr);
    CHECK(entry.k_image_rot.rows() == 4);
    Tensor v2 = video0, i2 = Tensor({0, d});
    block_forward(f.w.blocks[0], ctx, v2, i2, &entry, nullptr);
    CHECK(max_abs_diff(v1, v2) < 1e-6f);

    KVCacheEntry bad{Tensor({3, d}), Tensor({3, d})};
    Tensor v3 = video0, i3 = Tensor({0, d});
    CHECK_THROWS_AS(block_forward(f.w.blocks[0], ctx, v3, i3, &bad, nullptr), CacheError);

    // returned image tokens do not depend on the video tokens
    Tensor v4 = random_tensor(rng, {12, d}), i4 = image0;
    block_forward(f.w.blocks[0], ctx, v4, i4, nullptr, nullptr);
    CHECK(i4 == i1);
}

TEST_CASE("backward matches finite differences") {
    const GradCheckResult r = gradient_check(tiny_config(), 5, 60);
    CHECK(r.parameters <= 1000);
    CHECK(r.forward_max_diff < 1e-5);
    CHECK(r.max_rel_error < 1e-3);

    ModelConfig shared = tiny_config();
    shared.position_layout = PositionLayout::Shared;
    shared.modulate_image_stream = false;
    CHECK(gradient_check(shared, 6, 60).max_rel_error < 1e-3);
}

TEST_CASE("LoRA-only scope leaves base gradients untouched") {
    const ModelConfig cfg = tiny_config();
    Rng rng(8);
    ModelWeights w = init_weights(cfg, rng);
    randomize_weights(w, rng, 0.4f);
    const Tensor x = random_tensor(rng, latent_shape(cfg)), ref = random_tensor(rng, ref_shape(cfg));
    ForwardTape tape;
    ForwardOptions o;
    o.tape = &tape;
    const Tensor out = model_forward(cfg, w, x, &ref, std::vector<int>{0, 2}, 0.5f, o);
    ModelWeights all = w.zeros_like(), lora = w.zeros_like();
    model_backward(cfg, w, tape, out, all, GradScope::All);
    model_backward(cfg, w, tape, out, lora, GradScope::LoRAOnly);
    std::vector<const Tensor*> a, l;
    all.for_each([&](const std::string&, const Tensor& t, ParamGroup) { a.push_back(&t); });
    std::size_t i = 0;
    bool any_lora = false;
    lora.for_each([&](const std::string& name, const Tensor& t, ParamGroup g) {
        if (g == ParamGroup::Base) {
            for (float v : t.values()) REQUIRE_MESSAGE(v == 0.0f, name);
        } else {
            CHECK(max_abs_diff(t, *a[i]) < 1e-6f);
            for (float v : t.values()) any_lora = any_lora || v != 0.0f;
        }
        ++i;
    });
    CHECK(any_lora);
}

TEST_CASE("checkpoint round trip and validation") {
    Fixture f;
    const auto dir = std::filesystem::temp_directory_path() / "standin_ckpt_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "model.ckpt";
    save_checkpoint(path, f.cfg, f.w);
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.config == f.cfg);
    CHECK(ck.weights.fingerprint(ParamGroup::Base) == f.w.fingerprint(ParamGroup::Base));
    CHECK(ck.weights.fingerprint(ParamGroup::LoRA) == f.w.fingerprint(ParamGroup::LoRA));
    CHECK_FALSE(ck.optimizer.has_value());

    // drop a tensor: loading names it
    NamedTensors arch = load_archive(path);
    arch.entries.erase(arch.entries.begin() + 3);
    save_archive(dir / "broken.ckpt", arch);
    CHECK_THROWS_AS(load_checkpoint(dir / "broken.ckpt"), DataError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), DataError);
    std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
