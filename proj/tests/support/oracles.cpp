#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace oracle {

Vec matmul(const Vec& a, const Vec& b, std::int64_t M, std::int64_t K, std::int64_t N) {
    Vec c(static_cast<std::size_t>(M * N), 0.0);
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t j = 0; j < N; ++j) {
            double s = 0;
            for (std::int64_t p = 0; p < K; ++p)
                s += a[static_cast<std::size_t>(i * K + p)] * b[static_cast<std::size_t>(p * N + j)];
            c[static_cast<std::size_t>(i * N + j)] = s;
        }
    return c;
}

std::vector<float> matmul_f32(const std::vector<float>& a, const std::vector<float>& b, std::int64_t M,
                              std::int64_t K, std::int64_t N) {
    std::vector<float> c(static_cast<std::size_t>(M * N), 0.0f);
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t j = 0; j < N; ++j) {
            float s = 0;
            for (std::int64_t p = 0; p < K; ++p)
                s += a[static_cast<std::size_t>(i * K + p)] * b[static_cast<std::size_t>(p * N + j)];
            c[static_cast<std::size_t>(i * N + j)] = s;
        }
    return c;
}

Vec softmax(const Vec& row) {
    const double mx = *std::max_element(row.begin(), row.end());
    Vec out(row.size());
    double total = 0;
    for (std::size_t j = 0; j < row.size(); ++j)
        total += out[j] = std::exp(row[j] - mx);
    for (auto& v : out)
        v /= total;
    return out;
}

Vec softmax_top_k(const Vec& row, int k) {
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    Vec kept;
    for (int i = 0; i < k; ++i)
        kept.push_back(row[order[static_cast<std::size_t>(i)]]);
    const Vec p = softmax(kept);
    Vec out(row.size(), 0.0);
    for (int i = 0; i < k; ++i)
        out[order[static_cast<std::size_t>(i)]] = p[static_cast<std::size_t>(i)];
    return out;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double softplus(double x) { return std::log(1.0 + std::exp(x)); }

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double cv(const Vec& v) {
    const double mu = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0;
    for (double x : v)
        var += (x - mu) * (x - mu);
    return std::sqrt(var / static_cast<double>(v.size())) / mu;
}

Dense dense(const mlit::Linear& layer) {
    Dense d;
    d.w = layer.weight.to_vector();
    if (layer.bias.defined())
        d.b = layer.bias.to_vector();
    d.in = layer.in_features();
    d.out = layer.out_features();
    return d;
}

Vec apply(const Dense& d, const Vec& rows, std::int64_t r) {
    Vec y = matmul(rows, d.w, r, d.in, d.out);
    if (!d.b.empty())
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < d.out; ++j)
                y[static_cast<std::size_t>(i * d.out + j)] += d.b[static_cast<std::size_t>(j)];
    return y;
}

Vec attention(const Vec& x, std::int64_t n, std::int64_t m, const Dense& q, const Dense& k, const Dense& v,
              const Dense& o, int heads, int groups) {
    const std::int64_t d = m / heads;
    const int per_group = heads / groups;
    const Vec Q = apply(q, x, n), K = apply(k, x, n), V = apply(v, x, n);
    const std::int64_t kv_width = groups * d;
    Vec ctx(static_cast<std::size_t>(n * m), 0.0);
    for (int h = 0; h < heads; ++h) {
        const int g = h / per_group;
        for (std::int64_t i = 0; i < n; ++i) {
            Vec scores(static_cast<std::size_t>(n));
            for (std::int64_t j = 0; j < n; ++j) {
                double s = 0;
                for (std::int64_t c = 0; c < d; ++c)
                    s += Q[static_cast<std::size_t>(i * m + h * d + c)] *
                         K[static_cast<std::size_t>(j * kv_width + g * d + c)];
                scores[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(d));
            }
            const Vec p = softmax(scores);
            for (std::int64_t c = 0; c < d; ++c) {
                double s = 0;
                for (std::int64_t j = 0; j < n; ++j)
                    s += p[static_cast<std::size_t>(j)] * V[static_cast<std::size_t>(j * kv_width + g * d + c)];
                ctx[static_cast<std::size_t>(i * m + h * d + c)] = s;
            }
        }
    }
    return apply(o, ctx, n);
}

Vec expert(const mlit::SharedSwiGLUBank& bank, int e, const Vec& rows, std::int64_t r) {
    const Vec a = apply(dense(bank.w_for(e)), rows, r);
    const Vec b = apply(dense(bank.v_for(e)), rows, r);
    Vec h(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        h[i] = silu(a[i]) * b[i];
    return apply(dense(bank.w2_for(e)), h, r);
}

Vec moe_dense(const mlit::GateParams& gate, const mlit::SharedSwiGLUBank& bank, const Vec& rows, std::int64_t r,
              std::int64_t m) {
    const int t = gate.experts();
    const Vec logits = matmul(rows, gate.w_gate.to_vector(), r, m, t);
    std::vector<Vec> outs;
    for (int e = 0; e < t; ++e)
        outs.push_back(expert(bank, e, rows, r));
    Vec y(static_cast<std::size_t>(r * m), 0.0);
    for (std::int64_t i = 0; i < r; ++i) {
        const Vec row(logits.begin() + i * t, logits.begin() + (i + 1) * t);
        const Vec g = softmax_top_k(row, gate.k);
        for (int e = 0; e < t; ++e)
            for (std::int64_t j = 0; j < m; ++j)
                y[static_cast<std::size_t>(i * m + j)] +=
                    g[static_cast<std::size_t>(e)] * outs[static_cast<std::size_t>(e)][static_cast<std::size_t>(i * m + j)];
    }
    return y;
}

Vec resize_channel(const Vec& img, std::int64_t h, std::int64_t w, std::int64_t out_h, std::int64_t out_w) {
    auto at = [&](std::int64_t y, std::int64_t x) {
        y = std::clamp<std::int64_t>(y, 0, h - 1);
        x = std::clamp<std::int64_t>(x, 0, w - 1);
        return img[static_cast<std::size_t>(y * w + x)];
    };
    Vec out(static_cast<std::size_t>(out_h * out_w));
    for (std::int64_t oy = 0; oy < out_h; ++oy)
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const double sy = (static_cast<double>(oy) + 0.5) * static_cast<double>(h) / static_cast<double>(out_h) - 0.5;
            const double sx = (static_cast<double>(ox) + 0.5) * static_cast<double>(w) / static_cast<double>(out_w) - 0.5;
            const double fy = std::floor(sy), fx = std::floor(sx);
            const double ty = sy - fy, tx = sx - fx;
            const auto y0 = static_cast<std::int64_t>(fy), x0 = static_cast<std::int64_t>(fx);
            out[static_cast<std::size_t>(oy * out_w + ox)] =
                (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        }
    return out;
}

} // namespace oracle
