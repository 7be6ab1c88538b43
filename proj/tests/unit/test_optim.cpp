#include "mlit/autodiff.hpp"
#include "mlit/data.hpp"
#include "mlit/model.hpp"
#include "mlit/optim.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace mlit;

namespace {

Schedule pretrain_schedule() {
    Schedule s;
    s.base_lr = 3e-4;
    s.batch_size = 840;
    s.total_epochs = 100;
    s.warmup_epochs = 5;
    s.steps_per_epoch = 60;
    return s;
}

ParamList scalar_param(double value, bool decay) {
    ParamList params;
    params.add("w", Tensor::from_values({1}, {value}, DType::f64), decay);
    return params;
}

} // namespace

TEST(Schedule, ReferencePoints) {
    const auto s = pretrain_schedule();
    EXPECT_EQ(lr_at(0, s), 0.0);
    EXPECT_DOUBLE_EQ(s.peak(), 9.84375e-4);
    EXPECT_DOUBLE_EQ(lr_at(s.warmup_steps(), s), 9.84375e-4);
    EXPECT_LT(lr_at(s.total_steps(), s), 1e-8 * s.peak());
    EXPECT_DOUBLE_EQ(scaled_lr(5e-3, 256), 5e-3);
}

TEST(Schedule, ContinuousAtWarmupBoundary) {
    const auto s = pretrain_schedule();
    const auto w = s.warmup_steps();
    EXPECT_NEAR(lr_at(w - 1, s), s.peak() * (w - 1) / static_cast<double>(w), 1e-15);
    EXPECT_NEAR(lr_at(w + 1, s), s.peak(), 1e-6 * s.peak());
    for (std::int64_t i = 1; i < w; ++i)
        EXPECT_GT(lr_at(i, s), lr_at(i - 1, s));
    for (std::int64_t i = w + 1; i <= s.total_steps(); ++i)
        ASSERT_LE(lr_at(i, s), lr_at(i - 1, s));
}

TEST(Schedule, NoWarmupStartsAtPeak) {
    auto s = pretrain_schedule();
    s.warmup_epochs = 0;
    EXPECT_DOUBLE_EQ(lr_at(0, s), s.peak());
}

TEST(Schedule, DefaultWarmupAndValidation) {
    EXPECT_DOUBLE_EQ(default_warmup_epochs(400), 20.0);
    EXPECT_DOUBLE_EQ(default_warmup_epochs(100), 5.0);
    auto s = pretrain_schedule();
    s.warmup_epochs = s.total_epochs;
    EXPECT_THROW(validate(s), ConfigError);
    s = pretrain_schedule();
    s.batch_size = 0;
    EXPECT_THROW(validate(s), ConfigError);
    EXPECT_NO_THROW(validate(pretrain_schedule()));
}

TEST(Layerwise, Multipliers) {
    const auto off = layerwise_lrs(1.0, 9);
    EXPECT_EQ(off.head, 1.0);
    EXPECT_EQ(off.embed, 1.0);
    for (double v : off.layers)
        EXPECT_EQ(v, 1.0);

    const auto two = layerwise_lrs(0.9, 2);
    ASSERT_EQ(two.layers.size(), 2u);
    EXPECT_NEAR(two.layers[0], 0.81, 1e-15);
    EXPECT_NEAR(two.layers[1], 0.9, 1e-15);
    EXPECT_NEAR(two.embed, 0.729, 1e-15);

    const auto deep = layerwise_lrs(0.75, 15);
    EXPECT_LE(deep.embed, deep.layers.front());
    for (std::size_t i = 1; i < deep.layers.size(); ++i)
        EXPECT_LE(deep.layers[i - 1], deep.layers[i]);
    EXPECT_LE(deep.layers.back(), deep.head);

    EXPECT_THROW(layerwise_lrs(0.0, 3), ConfigError);
    EXPECT_THROW(layerwise_lrs(1.1, 3), ConfigError);
}

TEST(Layerwise, ByParameterName) {
    const auto lrs = layerwise_lrs(0.9, 2);
    EXPECT_NEAR(layerwise_multiplier("encoder.layers.0.attention.query.weight", lrs), 0.81, 1e-15);
    EXPECT_NEAR(layerwise_multiplier("encoder.layers.1.gate.w_gate", lrs), 0.9, 1e-15);
    EXPECT_NEAR(layerwise_multiplier("encoder.patch_embed.weight", lrs), 0.729, 1e-15);
    EXPECT_NEAR(layerwise_multiplier("encoder.pos_embed", lrs), 0.729, 1e-15);
    EXPECT_EQ(layerwise_multiplier("encoder.norm.gamma", lrs), 1.0);
    EXPECT_EQ(layerwise_multiplier("head.weight", lrs), 1.0);
    EXPECT_THROW(layerwise_multiplier("encoder.layers.2.norm1.gamma", lrs), ConfigError);
}

TEST(AdamW, ZeroGradientWithoutDecayIsNoOp) {
    const auto params = scalar_param(0.37, true);
    AdamW opt(params, {.weight_decay = 0.0});
    for (int i = 0; i < 5; ++i)
        opt.step({Tensor::zeros({1}, DType::f64)}, 0.1);
    EXPECT_EQ(params.items()[0].tensor.item(), 0.37);
    EXPECT_EQ(opt.steps(), 5);
}

TEST(AdamW, ConstantGradientApproachesSignStep) {
    for (double g : {3.0, -0.02}) {
        const auto params = scalar_param(0.0, true);
        AdamW opt(params, {.weight_decay = 0.0});
        const double lr = 1e-3;
        double prev = 0.0, last_step = 0.0;
        for (int i = 0; i < 200; ++i) {
            opt.step({Tensor::from_values({1}, {g}, DType::f64)}, lr);
            const double now = params.items()[0].tensor.item();
            last_step = now - prev;
            prev = now;
        }
        // With bias correction every step of a constant gradient is
        // lr * g / (|g| + eps) exactly, up to the eps term.
        EXPECT_NEAR(last_step, -lr * std::copysign(1.0, g), lr * 1e-6);
        EXPECT_NEAR(prev, -200 * lr * std::copysign(1.0, g), 200 * lr * 1e-6);
    }
}

TEST(AdamW, DecoupledDecayOnly) {
    const auto params = scalar_param(2.0, true);
    AdamW opt(params, {.weight_decay = 0.05});
    opt.step({Tensor::zeros({1}, DType::f64)}, 0.1);
    EXPECT_DOUBLE_EQ(params.items()[0].tensor.item(), 2.0 * (1 - 0.005));
    // the decay never enters the moments
    EXPECT_EQ(opt.first_moments()[0].item(), 0.0);
    EXPECT_EQ(opt.second_moments()[0].item(), 0.0);
}

TEST(AdamW, NoDecayFlagSkipsDecay) {
    const auto params = scalar_param(2.0, false);
    AdamW opt(params, {.weight_decay = 0.05});
    opt.step({Tensor::zeros({1}, DType::f64)}, 0.1);
    EXPECT_EQ(params.items()[0].tensor.item(), 2.0);
}

TEST(AdamW, ZeroRateChangesNothing) {
    RngStream init(1);
    const auto model = build_mlit(mlit_preset("micro"), DType::f32, init);
    ParamList params;
    collect_params(params, model);
    std::vector<std::vector<double>> before;
    std::vector<Tensor> grads;
    RngStream g(2);
    for (const auto& p : params.items()) {
        before.push_back(p.tensor.to_vector());
        std::vector<double> v(static_cast<std::size_t>(p.tensor.numel()));
        for (auto& x : v)
            x = g.normal();
        grads.push_back(Tensor::from_values(p.tensor.shape(), v, DType::f32));
    }
    AdamW opt(params);
    opt.step(grads, 0.0);
    for (std::size_t i = 0; i < params.size(); ++i)
        EXPECT_EQ(params.items()[i].tensor.to_vector(), before[i]) << params.items()[i].name;
}

TEST(AdamW, ShapeMismatchIsContractError) {
    const auto params = scalar_param(1.0, true);
    AdamW opt(params);
    EXPECT_THROW(opt.step({Tensor::zeros({2}, DType::f64)}, 0.1), ContractError);
    EXPECT_THROW(opt.step(std::vector<Tensor>{}, 0.1), ContractError);
    EXPECT_THROW(opt.step({Tensor::zeros({1}, DType::f64)}, 0.1, {1.0, 2.0}), ContractError);
}

TEST(AdamW, StandardNoDecaySet) {
    RngStream init(3);
    const auto model = build_mlit(mlit_preset("micro"), DType::f32, init);
    ParamList params;
    collect_params(params, model);
    for (const auto& p : params.items()) {
        const bool no_decay = p.name.ends_with(".bias") || p.name.ends_with(".gamma") || p.name.ends_with(".beta") ||
                              p.name.ends_with("pos_embed");
        EXPECT_EQ(p.decay, !no_decay) << p.name;
    }
}

TEST(AdamW, EightSampleRunDecreasesSmoothedLoss) {
    const auto cfg = mlit_preset("XXS");
    RngStream init(4);
    const auto model = build_mlit(cfg, DType::f32, init);
    ParamList params;
    collect_params(params, model);
    const auto data = make_synthetic(8, cfg.classes, 5);
    const std::vector<std::int64_t> all = {0, 1, 2, 3, 4, 5, 6, 7};
    const auto batch = make_batch(data, all, {}, false, nullptr);

    Schedule s;
    s.base_lr = 3e-4;
    s.batch_size = 256; // peak 3e-4
    s.total_epochs = 200;
    s.warmup_epochs = 10;
    s.steps_per_epoch = 1;
    AdamW opt(params);
    std::vector<double> losses;
    for (std::int64_t step = 0; step < 200; ++step) {
        Tape tape;
        Tensor loss;
        {
            auto rec = tape.record();
            loss = classification_loss(classify_forward(model, batch.images, {}), batch.labels, 0.5);
        }
        losses.push_back(loss.item());
        opt.step(tape.backward(loss), lr_at(step, s));
    }
    std::vector<double> smoothed;
    for (std::size_t i = 0; i + 10 <= losses.size(); i += 10) {
        double m = 0;
        for (std::size_t j = i; j < i + 10; ++j)
            m += losses[j];
        smoothed.push_back(m / 10);
    }
    for (std::size_t i = 1; i < smoothed.size(); ++i)
        EXPECT_LT(smoothed[i], smoothed[i - 1]) << "window " << i;
    EXPECT_LT(smoothed.back(), 0.5 * smoothed.front());
}
