#include <doctest.h>

#include <cmath>
#include <numeric>

#include "reference_model.hpp"
#include "standin/attention.hpp"
#include "standin/errors.hpp"

using namespace standin;
using standin::testing::random_tensor;

namespace {

ProjectionWeights random_projection(Rng& rng, std::size_t d, int heads) {
    return {random_tensor(rng, {d, d}, 0.3f), random_tensor(rng, {d, d}, 0.3f), random_tensor(rng, {d, d}, 0.3f),
            random_tensor(rng, {d, d}, 0.3f), heads};
}

Tensor rows_of(const Tensor& t, std::size_t begin, std::size_t end) {
    Tensor out({end - begin, t.cols()});
    std::copy(t.row(begin), t.row(begin) + out.size(), out.data());
    return out;
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("video projections") {
    Rng rng(1);
    const std::size_t d = 4;
    ProjectionWeights w = random_projection(rng, d, 2);
    w.wq = Tensor({d, d});
    for (std::size_t i = 0; i < d; ++i) w.wq.at(i, i) = 1.0f;
    const Tensor e1({1, d}, {1, 0, 0, 0});
    CHECK(project_qkv_video(e1, w).q == e1);

    const QKV z = project_qkv_video(Tensor({3, d}), w);
    for (const Tensor* t : {&z.q, &z.k, &z.v})
        for (float v : t->values()) CHECK(v == 0.0f);

    const Tensor x = random_tensor(rng, {5, d});
    const QKV r = project_qkv_video(x, w);
    CHECK(max_abs_diff(r.k, matmul(x, w.wk)) < 1e-6f);
    CHECK(max_abs_diff(r.v, matmul(x, w.wv)) < 1e-6f);
    CHECK_THROWS_AS(project_qkv_video(random_tensor(rng, {2, 3}), w), ShapeError);
}

TEST_CASE("lora adapters on image projections") {
    Rng rng(2);
    const std::size_t d = 6;
    const ProjectionWeights w = random_projection(rng, d, 3);
    const Tensor x = random_tensor(rng, {4, d});

    // zero-init B: exact base projection
    const LoRAAdapter fresh = LoRAAdapter::create(d, 2, 2.0f, rng);
    const QKV base = project_qkv_video(x, w);
    const QKV adapted = project_qkv_image(x, w, fresh, fresh, fresh);
    CHECK(adapted.q == base.q);
    CHECK(adapted.k == base.k);
    CHECK(adapted.v == base.v);

    // rank-1 outer product u v^T with alpha = 1
    LoRAAdapter one;
    one.rank = 1;
    one.alpha = 1.0f;
    one.a = random_tensor(rng, {d, 1});
    one.b = random_tensor(rng, {1, d});
    const QKV r1 = project_qkv_image(x, w, one, fresh, fresh);
    Tensor expect = matmul(x, w.wq);
    for (std::size_t i = 0; i < 4; ++i) {
        double xu = 0.0;
        for (std::size_t c = 0; c < d; ++c) xu += static_cast<double>(x.at(i, c)) * one.a[c];
        for (std::size_t c = 0; c < d; ++c) expect.at(i, c) += static_cast<float>(xu * one.b[c]);
    }
    CHECK(max_abs_diff(r1.q, expect) < 1e-5f);

    // doubling alpha doubles the adapted - base difference
    LoRAAdapter twice = one;
    twice.alpha = 2.0f;
    const Tensor diff1 = sub(r1.q, base.q);
    const Tensor diff2 = sub(project_qkv_image(x, w, twice, fresh, fresh).q, base.q);
    CHECK(max_abs_diff(diff2, scale(diff1, 2.0f)) < 1e-5f);

    CHECK(one.delta().shape() == Shape{d, d});
    CHECK(LoRAAdapter::create(d, 0, 1.0f, rng).scale() == 0.0f);
    CHECK_THROWS_AS(LoRAAdapter::create(d, -1, 1.0f, rng), ValidationError);
}

TEST_CASE("uniform attention example") {
    const Tensor same({1, 2}, {0.5f, -0.25f});
    const Tensor vi({1, 2}, {1.0f, 2.0f});
    const Tensor vv({1, 2}, {3.0f, -4.0f});
    const RestrictedOutputs out = restricted_attention(same, same, vi, same, same, vv, 1);
    CHECK(out.image == vi);
    CHECK(std::abs(out.video[0] - 2.0f) < 1e-6f);
    CHECK(std::abs(out.video[1] + 1.0f) < 1e-6f);
}

TEST_CASE("masked oracle") {
    Rng rng(4);
    const Tensor q = random_tensor(rng, {5, 4}), k = random_tensor(rng, {5, 4}), v = random_tensor(rng, {5, 4});
    const AttentionMask open(5, 5);
    // unmasked oracle equals the plain path (all tokens as "video", no image tokens)
    const Tensor none({0, 4});
    const RestrictedOutputs plain = restricted_attention(none, none, none, q, k, v, 2);
    CHECK(max_abs_diff(masked_attention_oracle(q, k, v, open, 2), plain.video) < 1e-6f);

    AttentionMask blocked(5, 5);
    for (std::size_t j = 0; j < 5; ++j) blocked.block(2, j);
    CHECK_THROWS_AS(masked_attention_oracle(q, k, v, blocked, 2), ValidationError);

    const AttentionMask m = image_isolation_mask(2, 3);
    CHECK(m.is_blocked(0, 2));
    CHECK(m.is_blocked(1, 4));
    CHECK_FALSE(m.is_blocked(0, 1));
    CHECK_FALSE(m.is_blocked(3, 0));
}

TEST_CASE("permuting video tokens permutes the video output only") {
    Rng rng(5);
    const std::size_t ni = 3, nv = 6, w = 8;
    const Tensor qi = random_tensor(rng, {ni, w}), ki = random_tensor(rng, {ni, w}), vi = random_tensor(rng, {ni, w});
    const Tensor qv = random_tensor(rng, {nv, w}), kv = random_tensor(rng, {nv, w}), vv = random_tensor(rng, {nv, w});
    std::vector<std::size_t> perm(nv);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[1], perm[4]);
    auto permute = [&](const Tensor& t) {
        Tensor out(t.shape());
        for (std::size_t i = 0; i < nv; ++i) std::copy(t.row(perm[i]), t.row(perm[i]) + w, out.row(i));
        return out;
    };
    const RestrictedOutputs a = restricted_attention(qi, ki, vi, qv, kv, vv, 2);
    const RestrictedOutputs b = restricted_attention(qi, ki, vi, permute(qv), permute(kv), permute(vv), 2);
    CHECK(a.image == b.image);
    CHECK(max_abs_diff(permute(a.video), b.video) < 1e-6f);
}

TEST_CASE("restricted attention matches the joint masked oracle") {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const int heads = 1 + static_cast<int>(rng.below(3));
        const std::size_t hd = 2 * (1 + rng.below(4));
        const std::size_t w = heads * hd, ni = 1 + rng.below(5), nv = 1 + rng.below(9);
        const Tensor q = random_tensor(rng, {ni + nv, w}), k = random_tensor(rng, {ni + nv, w}),
                     v = random_tensor(rng, {ni + nv, w});
        const RestrictedOutputs r =
            restricted_attention(rows_of(q, 0, ni), rows_of(k, 0, ni), rows_of(v, 0, ni), rows_of(q, ni, ni + nv),
                                 rows_of(k, ni, ni + nv), rows_of(v, ni, ni + nv), heads);
        const Tensor joint = masked_attention_oracle(q, k, v, image_isolation_mask(ni, nv), heads);
        CHECK(max_abs_diff(concat_rows(r.image, r.video), joint) < 1e-6f);
    }
}

TEST_CASE("shape errors") {
    Rng rng(7);
    const Tensor a = random_tensor(rng, {2, 4}), b = random_tensor(rng, {2, 6});
    CHECK_THROWS_AS(restricted_attention(a, a, a, a, b, b, 2), ShapeError);
    CHECK_THROWS_AS(restricted_attention(a, a, a, a, a, a, 3), ShapeError);
}

}  // TEST_SUITE
