#include "oracles.hpp"

#include "mlit/attention.hpp"
#include "mlit/grad_check.hpp"
#include "mlit/ops.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace mlit;

namespace {

Tensor random_input(Shape shape, std::uint64_t seed) {
    RngStream rng(seed);
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v)
        x = rng.uniform(-1.5, 1.5);
    return Tensor::from_values(std::move(shape), v, DType::f64);
}

std::vector<double> slice(const std::vector<double>& v, std::int64_t begin, std::int64_t len) {
    return {v.begin() + begin, v.begin() + begin + len};
}

void expect_matches_oracle(const GqaParams& p, const Tensor& x, double tol) {
    const std::int64_t b = x.dim(0), n = x.dim(1), m = x.dim(2);
    const auto got = gqa_forward(x, p).to_vector();
    const auto xs = x.to_vector();
    for (std::int64_t s = 0; s < b; ++s) {
        const auto want = oracle::attention(slice(xs, s * n * m, n * m), n, m, oracle::dense(p.query),
                                            oracle::dense(p.key), oracle::dense(p.value), oracle::dense(p.output),
                                            p.heads, p.groups);
        for (std::int64_t i = 0; i < n * m; ++i)
            ASSERT_NEAR(got[static_cast<std::size_t>(s * n * m + i)], want[static_cast<std::size_t>(i)], tol);
    }
}

// Copies a key/value projection of width G*d into one of width H*d where
// query head h reads group h / (H/G).
Linear widen(const Linear& l, int heads, int groups, std::int64_t d) {
    const std::int64_t m = l.in_features(), per = heads / groups;
    const auto w = l.weight.to_vector(), b = l.bias.to_vector();
    std::vector<double> wide(static_cast<std::size_t>(m * heads * d)), wide_b(static_cast<std::size_t>(heads * d));
    for (int h = 0; h < heads; ++h)
        for (std::int64_t c = 0; c < d; ++c) {
            const std::int64_t src = (h / per) * d + c, dst = h * d + c;
            for (std::int64_t r = 0; r < m; ++r)
                wide[static_cast<std::size_t>(r * heads * d + dst)] = w[static_cast<std::size_t>(r * groups * d + src)];
            wide_b[static_cast<std::size_t>(dst)] = b[static_cast<std::size_t>(src)];
        }
    return {Tensor::from_values({m, heads * d}, wide, DType::f64), Tensor::from_values({heads * d}, wide_b, DType::f64)};
}

} // namespace

TEST(Gqa, MultiHeadMatchesReference) {
    RngStream init(1);
    const auto p = make_gqa(12, 4, 4, DType::f64, init);
    expect_matches_oracle(p, random_input({2, 5, 12}, 2), 1e-6);
}

TEST(Gqa, GroupedMatchesReference) {
    RngStream init(3);
    const auto p = make_gqa(12, 6, 3, DType::f64, init);
    expect_matches_oracle(p, random_input({2, 7, 12}, 4), 1e-6);
}

TEST(Gqa, SharedKeyValueEqualsDuplicatedMultiHead) {
    for (int groups : {1, 2}) {
        RngStream init(5);
        const int heads = 4;
        const auto gqa = make_gqa(8, heads, groups, DType::f64, init);
        GqaParams mha = gqa;
        mha.groups = heads;
        mha.key = widen(gqa.key, heads, groups, gqa.head_dim());
        mha.value = widen(gqa.value, heads, groups, gqa.head_dim());
        const Tensor x = random_input({3, 6, 8}, 6);
        const auto a = gqa_forward(x, gqa).to_vector(), b = gqa_forward(x, mha).to_vector();
        for (std::size_t i = 0; i < a.size(); ++i)
            ASSERT_NEAR(a[i], b[i], 1e-6) << "groups " << groups;
    }
}

TEST(Gqa, SingleTokenReducesToValuePath) {
    RngStream init(7);
    const auto p = make_gqa(12, 6, 2, DType::f64, init);
    const Tensor x = random_input({2, 1, 12}, 8);
    Tensor weights;
    const auto y = gqa_forward(x, p, &weights).to_vector();
    for (double w : weights.to_vector())
        EXPECT_EQ(w, 1.0);
    const std::int64_t d = p.head_dim();
    const auto xs = x.to_vector();
    for (std::int64_t s = 0; s < 2; ++s) {
        const auto v = oracle::apply(oracle::dense(p.value), slice(xs, s * 12, 12), 1);
        std::vector<double> ctx(12);
        for (int h = 0; h < 6; ++h)
            for (std::int64_t c = 0; c < d; ++c)
                ctx[static_cast<std::size_t>(h * d + c)] = v[static_cast<std::size_t>((h / 3) * d + c)];
        const auto want = oracle::apply(oracle::dense(p.output), ctx, 1);
        for (std::int64_t j = 0; j < 12; ++j)
            EXPECT_NEAR(y[static_cast<std::size_t>(s * 12 + j)], want[static_cast<std::size_t>(j)], 1e-12);
    }
}

TEST(Gqa, TokenPermutationPermutesOutput) {
    RngStream init(9);
    const auto p = make_gqa(12, 6, 3, DType::f64, init);
    const std::int64_t n = 7, m = 12;
    const Tensor x = random_input({1, n, m}, 10);
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    RngStream shuffle(11);
    shuffle.shuffle(perm.begin(), perm.end());
    const Tensor xp = reshape(gather_rows(reshape(x, {n, m}), perm), {1, n, m});
    const auto y = gqa_forward(x, p).to_vector(), yp = gqa_forward(xp, p).to_vector();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < m; ++j)
            EXPECT_NEAR(yp[static_cast<std::size_t>(i * m + j)],
                        y[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)] * m + j)], 1e-12);
}

TEST(Gqa, AttentionRowsSumToOne) {
    RngStream init(12);
    const auto p = make_gqa(16, 8, 4, DType::f32, init);
    const Tensor x = random_input({2, 9, 16}, 13).to(DType::f32);
    Tensor weights;
    (void)gqa_forward(scale(x, 30.0), p, &weights);
    EXPECT_EQ(weights.shape(), (Shape{2, 8, 9, 9}));
    const auto w = weights.to_vector();
    for (std::size_t r = 0; r < w.size() / 9; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < 9; ++j)
            s += w[r * 9 + j];
        ASSERT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Gqa, ShapeAndConfigErrors) {
    RngStream init(0);
    EXPECT_THROW(make_gqa(12, 6, 4, DType::f32, init), ConfigError);
    EXPECT_THROW(make_gqa(10, 4, 2, DType::f32, init), ConfigError);
    EXPECT_NO_THROW(validate_gqa_shape(108, 6, 3));
    const auto p = make_gqa(12, 6, 3, DType::f32, init);
    EXPECT_EQ(gqa_forward(Tensor::zeros({3, 4, 12}), p).shape(), (Shape{3, 4, 12}));
}

TEST(Gqa, ParameterCountFormula) {
    for (auto [m, h, g] : {std::tuple{108, 6, 3}, {144, 8, 4}, {128, 8, 4}, {12, 4, 1}, {12, 4, 4}}) {
        RngStream init(0);
        ParamList params;
        collect_params(params, "attn", make_gqa(m, h, g, DType::f32, init));
        const std::int64_t d = m / h;
        const std::int64_t want = (m * m + m) + 2 * (m * g * d + g * d) + (m * m + m);
        EXPECT_EQ(params.numel(), want);
        EXPECT_EQ(gqa_param_count(m, h, g), want);
    }
}

TEST(Gqa, GradientsMatchFiniteDifferences) {
    RngStream init(14);
    const auto p = make_gqa(8, 4, 2, DType::f64, init);
    ParamList params;
    collect_params(params, "attn", p);
    Tensor x = random_input({2, 3, 8}, 15);
    x.set_requires_grad();
    const Tensor proj = random_input({2, 3, 8}, 16);
    // The key bias has an exact zero gradient (softmax is shift invariant), so
    // it is checked in absolute terms.
    std::vector<Tensor> tensors{x}, key_bias;
    for (const auto& item : params.items())
        (item.name.ends_with("key.bias") ? key_bias : tensors).push_back(item.tensor);
    ASSERT_EQ(key_bias.size(), 1u);
    auto f = [&] { return sum(mul(gqa_forward(x, p), proj)); };
    EXPECT_LT(grad_check(f, tensors).max_rel_error, 1e-4);
    EXPECT_LT(std::abs(grad_check(f, key_bias).numeric), 1e-9);
}
