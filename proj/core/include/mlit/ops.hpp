#pragma once

#include "mlit/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mlit {

class RngStream;

// Differentiable tensor operations. Every op records a tape node when an input
// requires grad; shape violations throw ShapeError. Binary ops require equal
// dtypes and equal shapes unless noted.

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);

/// x[.., m, k] · w[k, n] -> [.., m, n]
Tensor matmul(const Tensor& x, const Tensor& w);
/// a[B, m, k] · b[B, k, n] (or b[B, n, k] with transpose_b) -> [B, m, n]
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
/// x · w + bias; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
/// x[.., n] + bias[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x[r, ..] scaled row-wise by w[r].
Tensor mul_rows(const Tensor& x, const Tensor& w);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor square(const Tensor& x);
Tensor clamp_min(const Tensor& x, double lo);

Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
/// max(x,0) + log1p(exp(-|x|))
Tensor softplus(const Tensor& x);
Tensor normal_cdf(const Tensor& x);

/// Softmax over the last axis, stabilized by the row maximum.
Tensor softmax_rows(const Tensor& x);
/// Softmax over the last axis restricted to entries with keep != 0; others are 0.
Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> keep);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Column sums of x[r, c] -> [c]
Tensor sum_rows(const Tensor& x);

/// Rows of x[R, m] at idx -> [q, m]
Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> idx);
/// base[R, m] with src[q, m] added into rows idx (duplicates accumulate).
Tensor index_add_rows(const Tensor& base, std::span<const std::int64_t> idx, const Tensor& src);
/// Stack a[r1, m] on top of b[r2, m].
Tensor concat_rows(const Tensor& a, const Tensor& b);
/// Flat elements of x at idx -> [q]
Tensor gather_elements(const Tensor& x, std::span<const std::int64_t> idx);
/// out[r, j] = x[r, idx[r * cols + j]] for x[r, c] -> [r, cols]
Tensor take_along_rows(const Tensor& x, std::span<const std::int64_t> idx, std::int64_t cols);

/// Inverted dropout: identity when !train or p == 0.
Tensor dropout(const Tensor& x, double p, bool train, RngStream* stream);

/// Mean cross-entropy of logits[b, c] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean of squared differences.
Tensor mse(const Tensor& prediction, const Tensor& target);
/// Population std / (mean + 1e-10) of a 1-D tensor; squared form when `squared`.
Tensor coefficient_of_variation(const Tensor& v, bool squared = false);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

namespace scalar {

double sigmoid(double x);
double silu(double x);
double softplus(double x);
double normal_cdf(double x);
double normal_pdf(double x);

} // namespace scalar

} // namespace mlit
