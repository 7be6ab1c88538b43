#include "mlit/autodiff.hpp"
#include "mlit/grad_check.hpp"
#include "mlit/mae.hpp"
#include "mlit/ops.hpp"
#include "mlit/verify.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

using namespace mlit;

namespace {

Tensor random_images(std::int64_t b, std::uint64_t seed, DType dtype) {
    RngStream rng(seed);
    std::vector<double> v(static_cast<std::size_t>(b * 3 * 36 * 36));
    for (auto& x : v)
        x = rng.uniform(-1, 1);
    return Tensor::from_values({b, 3, 36, 36}, v, dtype);
}

DecoderConfig tiny_decoder() {
    DecoderConfig d;
    d.embed = 12;
    d.layers = 1;
    d.hidden = 8;
    d.heads = 2;
    d.groups = 1;
    return d;
}

MaeModel tiny_model(DType dtype, std::uint64_t seed) {
    RngStream init(seed);
    return build_mae(mlit_preset("micro"), tiny_decoder(), dtype, init);
}

} // namespace

TEST(Masking, Counts) {
    RngStream rng(0);
    const auto plan = random_mask(144, 0.75, rng, 4);
    ASSERT_EQ(plan.batch(), 4u);
    for (std::size_t s = 0; s < 4; ++s) {
        EXPECT_EQ(plan.visible[s].size(), 36u);
        EXPECT_EQ(plan.masked[s].size(), 108u);
        std::set<std::int64_t> all(plan.visible[s].begin(), plan.visible[s].end());
        all.insert(plan.masked[s].begin(), plan.masked[s].end());
        EXPECT_EQ(all.size(), 144u);
        EXPECT_EQ(*all.begin(), 0);
        EXPECT_EQ(*all.rbegin(), 143);
        EXPECT_TRUE(std::is_sorted(plan.visible[s].begin(), plan.visible[s].end()));
    }
    EXPECT_THROW(random_mask(144, 1.0, rng), ConfigError);
    EXPECT_THROW(random_mask(144, 0.0, rng), ConfigError);
}

TEST(Masking, SameSeedSamePlan) {
    RngStream a(5), b(5);
    const auto pa = random_mask(144, 0.75, a, 3), pb = random_mask(144, 0.75, b, 3);
    EXPECT_EQ(pa.visible, pb.visible);
    EXPECT_EQ(pa.masked, pb.masked);
}

TEST(Masking, EachPatchMaskedWithRatioFrequency) {
    RngStream rng(11);
    std::vector<int> hits(144, 0);
    const int draws = 10000;
    const auto plan = random_mask(144, 0.75, rng, draws);
    for (const auto& m : plan.masked)
        for (auto i : m)
            ++hits[static_cast<std::size_t>(i)];
    for (int h : hits)
        EXPECT_NEAR(h / static_cast<double>(draws), 0.75, 0.02);
}

TEST(MaeForward, SequenceLengthAndShapes) {
    const auto model = tiny_model(DType::f32, 1);
    RngStream mask(2);
    const auto plan = random_mask(144, 0.75, mask, 2);
    const auto out = mae_forward(model, random_images(2, 3, DType::f32), plan, {});
    EXPECT_EQ(out.prediction.encoder_sequence_length, 37);
    EXPECT_EQ(out.prediction.predictions.shape(), (Shape{2, 145, 27}));
    EXPECT_TRUE(std::isfinite(out.loss.total.item()));
}

TEST(MaeForward, ZeroImageWithZeroHeadLeavesOnlyAux) {
    auto model = tiny_model(DType::f64, 4);
    for (auto& v : model.decoder.head.weight.mutable_data<double>())
        v = 0;
    RngStream mask(5);
    const auto plan = random_mask(144, 0.75, mask, 2);
    const auto out = mae_forward(model, Tensor::zeros({2, 3, 36, 36}, DType::f64), plan, {}, {0.1, 0.5});
    EXPECT_EQ(out.loss.mse_masked.item(), 0.0);
    EXPECT_EQ(out.loss.mse_unmasked.item(), 0.0);
    EXPECT_NEAR(out.loss.total.item(), 0.5 * out.loss.aux.item(), 1e-15);
    EXPECT_NEAR(out.loss.aux.item(), out.prediction.aux_encoder.item() + out.prediction.aux_decoder.item(), 1e-15);
}

TEST(MaeLoss, TermsCoverTheirPatchesOnly) {
    RngStream rng(6);
    const auto plan = random_mask(144, 0.75, rng, 2);
    const Tensor targets = Tensor::zeros({2, 145, 27}, DType::f64);
    std::vector<double> pred(2 * 145 * 27, 0.0);
    for (std::size_t s = 0; s < 2; ++s) {
        for (auto i : plan.masked[s])
            for (int j = 0; j < 27; ++j)
                pred[(s * 145 + static_cast<std::size_t>(i)) * 27 + static_cast<std::size_t>(j)] = 2.0;
        for (auto i : plan.visible[s])
            for (int j = 0; j < 27; ++j)
                pred[(s * 145 + static_cast<std::size_t>(i)) * 27 + static_cast<std::size_t>(j)] = 1.0;
        for (int j = 0; j < 27; ++j)
            pred[(s * 145 + 144) * 27 + static_cast<std::size_t>(j)] = 100.0; // classification patch
    }
    const auto l = mae_loss(Tensor::from_values({2, 145, 27}, pred, DType::f64), targets, plan,
                            Tensor::scalar(0.2, DType::f64), {0.1, 0.5});
    EXPECT_NEAR(l.mse_masked.item(), 4.0, 1e-14);
    EXPECT_NEAR(l.mse_unmasked.item(), 1.0, 1e-14);
    EXPECT_NEAR(l.total.item(), 4.0 + 0.1 + 0.1, 1e-15);
}

TEST(MaeLoss, AlphaZeroIgnoresVisiblePredictions) {
    RngStream rng(7);
    const auto plan = random_mask(144, 0.75, rng, 1);
    const auto model = tiny_model(DType::f64, 8);
    const auto p = mae_predict(model, random_images(1, 9, DType::f64), plan, {});
    Tensor perturbed = p.predictions.clone();
    auto d = perturbed.mutable_data<double>();
    for (auto i : plan.visible[0])
        for (int j = 0; j < 27; ++j)
            d[static_cast<std::size_t>(i * 27 + j)] += 5.0;
    const MaeWeights w{0.0, 0.5};
    const Tensor aux = add(p.aux_encoder, p.aux_decoder);
    EXPECT_EQ(mae_loss(p.predictions, p.patches, plan, aux, w).total.item(),
              mae_loss(perturbed, p.patches, plan, aux, w).total.item());
    EXPECT_NE(mae_loss(p.predictions, p.patches, plan, aux, {0.1, 0.5}).total.item(),
              mae_loss(perturbed, p.patches, plan, aux, {0.1, 0.5}).total.item());
}

TEST(MaeForward, MaskedOrderDoesNotMatter) {
    const auto model = tiny_model(DType::f64, 10);
    RngStream rng(11);
    const auto plan = random_mask(144, 0.75, rng, 2);
    MaskPlan shuffled = plan;
    RngStream sh(12);
    for (auto& m : shuffled.masked)
        sh.shuffle(m.begin(), m.end());
    const Tensor img = random_images(2, 13, DType::f64);
    const double a = mae_forward(model, img, plan, {}).loss.total.item();
    const double b = mae_forward(model, img, shuffled, {}).loss.total.item();
    EXPECT_NEAR(a, b, 1e-12 * std::abs(a));
}

TEST(MaeForward, RejectsInconsistentPlans) {
    const auto model = tiny_model(DType::f32, 14);
    RngStream rng(15);
    auto plan = random_mask(144, 0.75, rng, 1);
    plan.masked[0].push_back(plan.visible[0][0]);
    EXPECT_ANY_THROW(mae_forward(model, random_images(1, 16, DType::f32), plan, {}));
}

TEST(Reconstruct, CopyVisibleAndShape) {
    const auto model = tiny_model(DType::f32, 17);
    RngStream rng(18);
    const auto plan = random_mask(144, 0.75, rng, 2);
    const Tensor img = random_images(2, 19, DType::f32);
    const Tensor copied = reconstruct(model, img, plan, true, {});
    const Tensor predicted = reconstruct(model, img, plan, false, {});
    EXPECT_EQ(copied.shape(), (Shape{2, 3, 36, 36}));
    EXPECT_EQ(predicted.shape(), (Shape{2, 3, 36, 36}));
    const auto x = img.to_vector(), c = copied.to_vector(), p = predicted.to_vector();
    for (std::size_t s = 0; s < 2; ++s) {
        const std::set<std::int64_t> vis(plan.visible[s].begin(), plan.visible[s].end());
        for (int ch = 0; ch < 3; ++ch)
            for (int y = 0; y < 36; ++y)
                for (int xx = 0; xx < 36; ++xx) {
                    const auto idx = ((s * 3 + static_cast<std::size_t>(ch)) * 36 + static_cast<std::size_t>(y)) * 36 +
                                     static_cast<std::size_t>(xx);
                    if (vis.count((y / 3) * 12 + xx / 3))
                        ASSERT_EQ(c[idx], x[idx]);
                    else
                        ASSERT_EQ(c[idx], p[idx]);
                }
    }
}

TEST(Decoder, ParameterCounts) {
    for (bool table : {false, true}) {
        auto d = decoder_preset();
        d.separate_pos_embed = table;
        const auto enc = mlit_preset("XXS");
        RngStream init(0);
        const auto dec = build_decoder(d, enc, DType::f32, init);
        ParamList params;
        collect_params(params, "decoder", dec);
        EXPECT_EQ(params.numel(), decoder_param_count(d, enc.embed, enc.tokens(), enc.patch_dim()));
    }
    const auto counts = decoder_counts();
    EXPECT_EQ(counts.without_pos_table, 317592);
    EXPECT_EQ(counts.with_pos_table, 333252);
    EXPECT_LE(std::abs(static_cast<double>(counts.with_pos_table) - 0.34e6) / 0.34e6, 0.06);
    const auto d = decoder_preset();
    EXPECT_EQ(std::tuple(d.embed, d.layers, d.hidden, d.heads, d.groups, d.experts, d.top_k),
              std::tuple(108, 4, 72, 6, 3, 3, 2));
}

TEST(MaeForward, CompositeLossGradients) {
    // Narrow widths keep each parameter's share of the loss large enough for
    // central differences to resolve it. Coordinates with gradients near 1e-6
    // on a loss near 0.65 still sit within a few 1e-4 of rounding noise.
    auto enc = mlit_preset("micro");
    enc.embed = 16;
    enc.heads = 4;
    enc.groups = 2;
    enc.hidden_first = 12;
    enc.hidden_last = 8;
    auto dec = tiny_decoder();
    dec.embed = 16;
    dec.heads = 4;
    dec.groups = 2;
    RngStream init(20);
    const auto model = build_mae(enc, dec, DType::f64, init);
    ParamList params;
    collect_params(params, model);
    RngStream rng(21);
    const auto plan = random_mask(144, 0.75, rng, 1);
    const Tensor img = random_images(1, 22, DType::f64);
    auto loss = [&] { return mae_forward(model, img, plan, {}).loss.total; };

    // A key bias adds the same q.b to every score of a query row, which the
    // softmax cancels: its true gradient is zero and central differences only
    // see rounding, so those tensors are checked in absolute terms.
    std::vector<Tensor> checked, key_bias;
    for (const auto& p : params.items())
        (p.name.ends_with("attention.key.bias") ? key_bias : checked).push_back(p.tensor);
    ASSERT_FALSE(key_bias.empty());

    GradCheckOptions opt;
    opt.max_coords_per_param = 4;
    opt.sample_seed = 23;
    const auto r = grad_check(loss, checked, opt);
    EXPECT_LT(r.max_rel_error, 1e-4) << "coordinate " << r.worst_index << " analytic " << r.analytic << " numeric " << r.numeric;

    Tape tape;
    Tensor total;
    {
        auto rec = tape.record();
        total = loss();
    }
    const Gradients g = tape.backward(total);
    for (const auto& t : key_bias)
        for (double v : g.of(t).to_vector())
            EXPECT_LT(std::abs(v), 1e-14);
    const auto kb = grad_check(loss, key_bias, opt);
    EXPECT_LT(std::abs(kb.numeric), 1e-9);
}
