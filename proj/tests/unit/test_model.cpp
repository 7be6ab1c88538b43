#include "mlit/model.hpp"
#include "mlit/ops.hpp"
#include "mlit/verify.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace mlit;

namespace {

Tensor random_images(std::int64_t b, std::uint64_t seed, DType dtype = DType::f64, std::int64_t size = 36) {
    RngStream rng(seed);
    std::vector<double> v(static_cast<std::size_t>(b * 3 * size * size));
    for (auto& x : v)
        x = rng.uniform(-1, 1);
    return Tensor::from_values({b, 3, size, size}, v, dtype);
}

} // namespace

TEST(Schedules, HiddenSizes) {
    const auto xxs = hidden_size_schedule(9, 81, 27);
    EXPECT_EQ(xxs.front(), 81);
    EXPECT_EQ(xxs.back(), 27);
    EXPECT_EQ(xxs[4], 54);
    EXPECT_EQ(hidden_size_schedule(4, 72, 72), (std::vector<std::int64_t>(4, 72)));
    EXPECT_EQ(hidden_size_schedule(1, 81, 27), (std::vector<std::int64_t>{81}));
    for (auto [L, first, last] : {std::tuple{9, 81, 27}, {12, 96, 32}, {15, 144, 72}, {3, 27, 9}}) {
        const auto s = hidden_size_schedule(L, first, last);
        ASSERT_EQ(s.size(), static_cast<std::size_t>(L));
        EXPECT_EQ(s.front(), first);
        EXPECT_EQ(s.back(), last);
        for (int i = 0; i < L; ++i) {
            // floor of an exact rational, evaluated in integers
            const std::int64_t want = (static_cast<std::int64_t>(L - 1 - i) * (first - last)) / (L - 1) + last;
            EXPECT_EQ(s[static_cast<std::size_t>(i)], want);
            if (i > 0) {
                EXPECT_LE(s[static_cast<std::size_t>(i)], s[static_cast<std::size_t>(i - 1)]);
            }
        }
    }
}

TEST(Schedules, ExpertCounts) {
    EXPECT_EQ(expert_count_schedule(9), (std::vector<int>{3, 3, 3, 4, 4, 4, 5, 5, 5}));
    EXPECT_EQ(expert_count_schedule(15), (std::vector<int>{3, 3, 3, 3, 3, 4, 4, 4, 4, 4, 5, 5, 5, 5, 5}));
    EXPECT_EQ(expert_count_schedule(3), (std::vector<int>{3, 4, 5}));
    EXPECT_EQ(expert_count_schedule(12), (std::vector<int>{3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5}));
    EXPECT_THROW(expert_count_schedule(10), ConfigError);
}

TEST(Presets, TableValues) {
    const auto s = mlit_preset("S"), xs = mlit_preset("XS"), xxs = mlit_preset("XXS");
    EXPECT_EQ(std::tuple(s.embed, s.layers, s.hidden_first, s.hidden_last, s.heads, s.groups),
              std::tuple(144, 15, 144, 72, 8, 4));
    EXPECT_EQ(std::tuple(xs.embed, xs.layers, xs.hidden_first, xs.hidden_last, xs.heads, xs.groups),
              std::tuple(128, 12, 96, 32, 8, 4));
    EXPECT_EQ(std::tuple(xxs.embed, xxs.layers, xxs.hidden_first, xxs.hidden_last, xxs.heads, xxs.groups),
              std::tuple(108, 9, 81, 27, 6, 3));
    for (const auto& c : {s, xs, xxs}) {
        EXPECT_EQ(std::tuple(c.experts_min, c.experts_max, c.top_k, c.stages, c.image, c.patch),
                  std::tuple(3, 5, 2, 3, 36, 3));
        EXPECT_DOUBLE_EQ(c.dropout, 0.1);
        EXPECT_EQ(c.tokens(), 145);
        EXPECT_EQ(c.patch_dim(), 27);
    }
    EXPECT_THROW(mlit_preset("L"), ConfigError);
    const auto specs = layer_specs(xxs);
    ASSERT_EQ(specs.size(), 9u);
    EXPECT_EQ(specs[3].experts, 4);
    EXPECT_EQ(specs[4].hidden, 54);
}

TEST(Patchify, ConstantImage) {
    const Tensor p = patchify(Tensor::ones({2, 3, 36, 36}, DType::f64), 3);
    EXPECT_EQ(p.shape(), (Shape{2, 145, 27}));
    const auto v = p.to_vector();
    for (std::int64_t s = 0; s < 2; ++s)
        for (std::int64_t i = 0; i < 145 * 27; ++i)
            ASSERT_EQ(v[static_cast<std::size_t>(s * 145 * 27 + i)], i < 144 * 27 ? 1.0 : 0.0);
}

TEST(Patchify, IndexArithmetic) {
    const Tensor img = random_images(1, 1);
    const auto x = img.to_vector(), p = patchify(img, 3).to_vector();
    for (int r = 0; r < 12; ++r)
        for (int c = 0; c < 12; ++c)
            for (int dy = 0; dy < 3; ++dy)
                for (int dx = 0; dx < 3; ++dx)
                    for (int ch = 0; ch < 3; ++ch) {
                        const auto patch = r * 12 + c;
                        const auto within = (dy * 3 + dx) * 3 + ch;
                        const auto pixel = (ch * 36 + 3 * r + dy) * 36 + 3 * c + dx;
                        ASSERT_EQ(p[static_cast<std::size_t>(patch * 27 + within)], x[static_cast<std::size_t>(pixel)]);
                    }
}

TEST(Patchify, RoundTripAndErrors) {
    const Tensor img = random_images(3, 2, DType::f32);
    EXPECT_EQ(unpatchify(patchify(img, 3), 3, 36, 3).to_vector(), img.to_vector());
    EXPECT_THROW(patchify(Tensor::zeros({1, 3, 35, 35}), 3), ShapeError);
    EXPECT_THROW(patchify(Tensor::zeros({3, 36, 36}), 3), ShapeError);
}

TEST(ParamCount, ClosedFormMatchesGraphWalk) {
    for (const auto& name : mlit_preset_names()) {
        const auto cfg = mlit_preset(name);
        RngStream init(0);
        const auto enc = build_encoder(cfg, DType::f32, init);
        ParamList params;
        collect_params(params, "encoder", enc);
        EXPECT_EQ(params.numel(), encoder_param_count(cfg)) << name;
        std::int64_t breakdown = 0;
        for (const auto& [module, n] : param_breakdown(params, 3))
            breakdown += n;
        EXPECT_EQ(breakdown, params.numel());
    }
}

TEST(ParamCount, HeadlessTotalsNearReference) {
    const std::vector<std::pair<std::string, double>> refs = {{"S", 2.36e6}, {"XS", 1.21e6}, {"XXS", 0.66e6}};
    for (const auto& [name, ref] : refs) {
        const double got = static_cast<double>(encoder_param_count(mlit_preset(name)));
        EXPECT_LE(std::abs(got - ref) / ref, 0.025) << name << " " << got;
    }
    EXPECT_EQ(encoder_param_count(mlit_preset("S")), 2358182);
    EXPECT_EQ(encoder_param_count(mlit_preset("XS")), 1202348);
    EXPECT_EQ(encoder_param_count(mlit_preset("XXS")), 651373);
}

TEST(ParamCount, ClassifierAddsHead) {
    const auto cfg = mlit_preset("micro");
    RngStream init(0);
    const auto model = build_mlit(cfg, DType::f32, init);
    ParamList params;
    collect_params(params, model);
    EXPECT_EQ(params.numel(), encoder_param_count(cfg) + cfg.embed * cfg.classes + cfg.classes);
    EXPECT_EQ(params.numel_with_prefix("head"), cfg.embed * cfg.classes + cfg.classes);
    // Patch embedding carries no bias.
    EXPECT_EQ(params.numel_with_prefix("encoder.patch_embed"), 27 * cfg.embed);
}

TEST(Classifier, LogitShapeAndEvalDeterminism) {
    const auto cfg = mlit_preset("micro");
    RngStream init(1);
    const auto model = build_mlit(cfg, DType::f32, init);
    const Tensor img = random_images(2, 3, DType::f32);
    const auto a = classify_forward(model, img, {});
    const auto b = classify_forward(model, img, {});
    EXPECT_EQ(a.logits.shape(), (Shape{2, 100}));
    EXPECT_EQ(a.logits.to_vector(), b.logits.to_vector());
    EXPECT_TRUE(std::isfinite(a.aux.item()));
}

TEST(Classifier, PatchAndPositionPermutationInvariance) {
    const auto cfg = mlit_preset("micro");
    RngStream init(4);
    const auto model = build_mlit(cfg, DType::f64, init);
    const Tensor patches = patchify(random_images(2, 5), 3);
    std::vector<std::int64_t> perm(145);
    std::iota(perm.begin(), perm.end(), 0);
    RngStream shuffle(6);
    shuffle.shuffle(perm.begin(), perm.begin() + 144);

    std::vector<std::int64_t> rows;
    for (std::int64_t s = 0; s < 2; ++s)
        for (auto p : perm)
            rows.push_back(s * 145 + p);
    const Tensor permuted = reshape(gather_rows(reshape(patches, {290, 27}), rows), {2, 145, 27});
    MLiTClassifier moved = model;
    moved.encoder.pos_embed = gather_rows(model.encoder.pos_embed, perm);

    const auto a = classify_patches(model, patches, {}).logits.to_vector();
    const auto b = classify_patches(moved, permuted, {}).logits.to_vector();
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_NEAR(a[i], b[i], 1e-5);
}

TEST(Classifier, LossIsCrossEntropyPlusScaledAux) {
    const auto cfg = mlit_preset("micro");
    RngStream init(7);
    const auto model = build_mlit(cfg, DType::f64, init);
    RngStream noise(8), drop(9);
    ForwardContext ctx{.train = true, .gate_noise = &noise, .dropout = &drop};
    const auto out = classify_forward(model, random_images(3, 9), ctx);
    const std::vector<int> labels = {1, 7, 99};
    const double ce = cross_entropy(out.logits, labels).item();
    EXPECT_NEAR(classification_loss(out, labels, 0.5).item() - ce, 0.5 * out.aux.item(), 1e-12);
    EXPECT_NEAR(classification_loss(out, labels, 0.0).item(), ce, 1e-15);
}

TEST(Encoder, SelectedPositionsSetSequenceLength) {
    const auto cfg = mlit_preset("micro");
    RngStream init(10);
    const auto enc = build_encoder(cfg, DType::f32, init);
    const Tensor patches = patchify(random_images(2, 11, DType::f32), 3);
    std::vector<std::int64_t> pos;
    for (int s = 0; s < 2; ++s) {
        for (std::int64_t i = 0; i < 36; ++i)
            pos.push_back(i * 4 + s);
        pos.push_back(144);
    }
    const auto out = encoder_forward(enc, patches, pos, {});
    EXPECT_EQ(out.sequence_length, 37);
    EXPECT_EQ(out.tokens.shape(), (Shape{2, 37, cfg.embed}));
    EXPECT_EQ(encoder_forward(enc, patches, {}, {}).sequence_length, 145);
}
