#include "mlit/autodiff.hpp"
#include "mlit/grad_check.hpp"
#include "mlit/ops.hpp"
#include "mlit/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

using namespace mlit;

namespace {

Tensor param(Shape shape, RngStream& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v)
        x = rng.uniform(-scale, scale);
    Tensor t = Tensor::from_values(std::move(shape), v, DType::f64);
    t.set_requires_grad();
    return t;
}

double check(const std::function<Tensor()>& f, const std::vector<Tensor>& params) {
    return grad_check(f, params).max_rel_error;
}

} // namespace

TEST(Backward, SumGivesOnes) {
    RngStream rng(0);
    Tensor w = param({3, 4}, rng);
    Tape tape;
    Tensor loss;
    {
        auto rec = tape.record();
        loss = sum(w);
    }
    const auto g = tape.backward(loss).of(w).to_vector();
    for (double v : g)
        EXPECT_EQ(v, 1.0);
}

TEST(Backward, SiluAtZero) {
    Tensor x = Tensor::zeros({5}, DType::f64);
    x.set_requires_grad();
    Tape tape;
    Tensor loss;
    {
        auto rec = tape.record();
        loss = sum(silu(x));
    }
    for (double v : tape.backward(loss).of(x).to_vector())
        EXPECT_EQ(v, 0.5);
}

TEST(Backward, UnreachableParameterGetsZeros) {
    RngStream rng(1);
    Tensor a = param({2, 2}, rng), b = param({2, 2}, rng);
    Tape tape;
    Tensor loss;
    {
        auto rec = tape.record();
        loss = sum(square(a));
    }
    const Gradients g = tape.backward(loss);
    EXPECT_TRUE(g.reached(a));
    EXPECT_FALSE(g.reached(b));
    EXPECT_EQ(g.of(b).shape(), b.shape());
    for (double v : g.of(b).to_vector())
        EXPECT_EQ(v, 0.0);
}

TEST(Backward, NonScalarLossIsRejected) {
    RngStream rng(2);
    Tensor a = param({2, 2}, rng);
    Tape tape;
    Tensor y;
    {
        auto rec = tape.record();
        y = square(a);
    }
    EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, ReusedInputAccumulates) {
    Tensor x = Tensor::from_values({1}, {3}, DType::f64);
    x.set_requires_grad();
    Tape tape;
    Tensor loss;
    {
        auto rec = tape.record();
        loss = sum(add(mul(x, x), x));
    }
    EXPECT_EQ(tape.backward(loss).of(x).item(), 7.0);
}

TEST(Backward, NoGradSuspendsRecording) {
    RngStream rng(3);
    Tensor x = param({2}, rng);
    Tape tape;
    auto rec = tape.record();
    {
        autodiff::NoGrad ng;
        EXPECT_FALSE(sum(x).requires_grad());
    }
    EXPECT_TRUE(sum(x).requires_grad());
}

TEST(Backward, NodesAreTopologicallyOrdered) {
    RngStream rng(4);
    Tensor x = param({3, 3}, rng);
    Tape tape;
    {
        auto rec = tape.record();
        (void)sum(softmax_rows(matmul(silu(x), x)));
    }
    for (std::size_t i = 0; i < tape.nodes().size(); ++i)
        for (std::size_t in : tape.nodes()[i].inputs) {
            if (in != Tape::kNoNode)
                EXPECT_LT(in, i);
        }
}

TEST(GradCheck, SquareAtThree) {
    Tensor x = Tensor::from_values({1}, {3}, DType::f64);
    x.set_requires_grad();
    const auto r = grad_check([&] { return sum(square(x)); }, {x});
    EXPECT_NEAR(r.analytic, 6.0, 1e-12);
    EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, NondeterministicLossIsFlagged) {
    Tensor x = Tensor::from_values({1}, {1}, DType::f64);
    x.set_requires_grad();
    int calls = 0;
    EXPECT_THROW(grad_check([&] { return scale(sum(x), 1.0 + 1e-3 * ++calls); }, {x}), ContractError);
}

// Every differentiable op on its own, reduced to a scalar through a fixed
// random projection so no gradient is trivially uniform.
class PerOp : public ::testing::Test {
protected:
    RngStream rng{42};
    Tensor a = param({3, 4}, rng), b = param({3, 4}, rng), w = param({4, 5}, rng), bias = param({5}, rng);
    Tensor proj4 = Tensor::from_values({3, 4}, {0.3, -1.1, 0.7, 0.2, 1.3, -0.4, 0.9, -0.8, 0.5, 0.6, -1.2, 0.1},
                                       DType::f64);

    Tensor project(const Tensor& y) {
        if (y.shape() == proj4.shape())
            return sum(mul(y, proj4));
        RngStream p(7);
        std::vector<double> v(static_cast<std::size_t>(y.numel()));
        for (auto& x : v)
            x = p.uniform(-1, 1);
        return sum(mul(y, Tensor::from_values(y.shape(), v, DType::f64)));
    }
};

TEST_F(PerOp, Elementwise) {
    Tensor pos = param({3, 4}, rng);
    {
        auto d = pos.mutable_data<double>();
        for (auto& x : d)
            x = std::abs(x) + 0.5;
    }
    const std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
        {"add", [&] { return project(add(a, b)); }},
        {"sub", [&] { return project(sub(a, b)); }},
        {"mul", [&] { return project(mul(a, b)); }},
        {"div", [&] { return project(div(a, pos)); }},
        {"scale", [&] { return project(scale(a, -2.5)); }},
        {"add_scalar", [&] { return project(add_scalar(a, 3.0)); }},
        {"square", [&] { return project(square(a)); }},
        {"clamp_min", [&] { return project(clamp_min(a, 0.05)); }},
        {"sigmoid", [&] { return project(sigmoid(a)); }},
        {"silu", [&] { return project(silu(a)); }},
        {"softplus", [&] { return project(softplus(a)); }},
        {"normal_cdf", [&] { return project(normal_cdf(a)); }},
    };
    for (const auto& [name, f] : cases)
        EXPECT_LT(check(f, {a, b, pos}), 1e-4) << name;
}

TEST_F(PerOp, ShapeOps) {
    const std::vector<std::int64_t> idx{2, 0, 2, 1};
    const std::vector<std::int64_t> flat{0, 5, 11, 5};
    const std::vector<std::int64_t> along{3, 1, 0, 0, 2, 2};
    const std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
        {"reshape", [&] { return project(reshape(a, {4, 3})); }},
        {"permute", [&] { return project(permute(reshape(a, {3, 2, 2}), {2, 0, 1})); }},
        {"gather_rows", [&] { return project(gather_rows(a, idx)); }},
        {"index_add_rows", [&] { return project(index_add_rows(b, idx, concat_rows(a, gather_rows(a, {idx.data(), 1})))); }},
        {"concat_rows", [&] { return project(concat_rows(a, b)); }},
        {"gather_elements", [&] { return project(gather_elements(a, flat)); }},
        {"take_along_rows", [&] { return project(take_along_rows(a, along, 2)); }},
        {"sum_rows", [&] { return project(sum_rows(a)); }},
        {"mean", [&] { return mean(square(a)); }},
        {"mul_rows", [&] { return project(mul_rows(a, reshape(sum_rows(permute(b, {1, 0})), {3}))); }},
    };
    for (const auto& [name, f] : cases)
        EXPECT_LT(check(f, {a, b}), 1e-4) << name;
}

TEST_F(PerOp, LinearAlgebra) {
    Tensor batch_a = param({2, 3, 4}, rng), batch_b = param({2, 4, 3}, rng), batch_bt = param({2, 3, 4}, rng);
    const std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
        {"matmul", [&] { return project(matmul(a, w)); }},
        {"matmul_3d", [&] { return project(matmul(reshape(a, {1, 3, 4}), w)); }},
        {"linear", [&] { return project(linear(a, w, bias)); }},
        {"add_bias", [&] { return project(add_bias(matmul(a, w), bias)); }},
        {"batched_matmul", [&] { return project(batched_matmul(batch_a, batch_b)); }},
        {"batched_matmul_t", [&] { return project(batched_matmul(batch_a, batch_bt, true)); }},
    };
    for (const auto& [name, f] : cases)
        EXPECT_LT(check(f, {a, w, bias, batch_a, batch_b, batch_bt}), 1e-4) << name;
}

TEST_F(PerOp, Normalizations) {
    Tensor gamma = param({4}, rng), beta = param({4}, rng);
    const std::vector<std::uint8_t> keep = {1, 0, 1, 1, 0, 1, 1, 1, 1, 1, 0, 0};
    const std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
        {"softmax_rows", [&] { return project(softmax_rows(scale(a, 3.0))); }},
        {"masked_softmax_rows", [&] { return project(masked_softmax_rows(a, keep)); }},
        {"layer_norm", [&] { return project(layer_norm(a, gamma, beta)); }},
        {"cv", [&] { return coefficient_of_variation(reshape(add_scalar(square(a), 0.5), {12})); }},
        {"cv_squared", [&] { return coefficient_of_variation(reshape(add_scalar(square(a), 0.5), {12}), true); }},
    };
    for (const auto& [name, f] : cases)
        EXPECT_LT(check(f, {a, gamma, beta}), 1e-4) << name;
}

TEST_F(PerOp, Losses) {
    const std::vector<int> labels = {3, 0, 4};
    Tensor target = param({3, 4}, rng);
    EXPECT_LT(check([&] { return cross_entropy(matmul(a, w), labels); }, {a, w}), 1e-4);
    EXPECT_LT(check([&] { return mse(a, target); }, {a, target}), 1e-4);
}

TEST_F(PerOp, CompositeGraph) {
    Tensor gamma = param({5}, rng), beta = param({5}, rng);
    auto f = [&] {
        const Tensor h = layer_norm(silu(linear(a, w, bias)), gamma, beta);
        const Tensor p = softmax_rows(batched_matmul(reshape(h, {1, 3, 5}), reshape(h, {1, 3, 5}), true));
        return add(mean(square(p)), cross_entropy(h, std::vector<int>{0, 4, 2}));
    };
    EXPECT_LT(check(f, {a, w, bias, gamma, beta}), 1e-4);
}
