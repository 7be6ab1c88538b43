#include "mlit/gating.hpp"

#include "mlit/nn.hpp"
#include "mlit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mlit {

void validate_top_k(int k, int experts) {
    if (k < 1 || k >= experts)
        throw ConfigError("gate: k must satisfy 1 <= k < experts, got k=" + std::to_string(k) +
                          " experts=" + std::to_string(experts));
}

GateParams make_gate(std::int64_t embed, int experts, int k, DType dtype, RngStream& init) {
    validate_top_k(k, experts);
    const double bound = 1.0 / std::sqrt(static_cast<double>(embed));
    GateParams p;
    p.w_gate = uniform_tensor({embed, experts}, -bound, bound, dtype, init).set_requires_grad();
    p.w_noise = uniform_tensor({embed, experts}, -bound, bound, dtype, init).set_requires_grad();
    p.k = k;
    return p;
}

void collect_params(ParamList& out, std::string_view prefix, const GateParams& p) {
    out.add(join_name(prefix, "w_gate"), p.w_gate, true);
    out.add(join_name(prefix, "w_noise"), p.w_noise, true);
}

NoisyLogits noisy_logits(const Tensor& x2d, const GateParams& p, bool train, RngStream* noise) {
    if (x2d.rank() != 2)
        throw ShapeError("noisy_logits: expected [rows, m], got " + shape_str(x2d.shape()));
    NoisyLogits out;
    out.clean = matmul(x2d, p.w_gate);
    out.noise_scale = softplus(matmul(x2d, p.w_noise));
    if (!train) {
        out.logits = out.clean;
        return out;
    }
    if (!noise)
        throw ContractError("noisy_logits: training mode requires a gate-noise stream");
    std::vector<double> eps(static_cast<std::size_t>(out.clean.numel()));
    for (auto& e : eps)
        e = noise->normal();
    Tensor eps_t = Tensor::from_values(out.clean.shape(), eps, out.clean.dtype());
    out.logits = add(out.clean, mul(eps_t, out.noise_scale));
    return out;
}

namespace {

std::vector<std::int64_t> row_order(const Tensor& h, std::size_t take) {
    const std::int64_t rows = h.dim(0), t = h.dim(1);
    const auto values = h.to_vector();
    std::vector<std::int64_t> out;
    out.reserve(static_cast<std::size_t>(rows) * take);
    std::vector<std::int64_t> cols(static_cast<std::size_t>(t));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = values.data() + r * t;
        std::iota(cols.begin(), cols.end(), 0);
        std::partial_sort(cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(take), cols.end(),
                          [row](std::int64_t a, std::int64_t b) {
                              return row[a] > row[b] || (row[a] == row[b] && a < b);
                          });
        out.insert(out.end(), cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(take));
    }
    return out;
}

void check_logits(const Tensor& h, int k, const char* op) {
    if (h.rank() != 2)
        throw ShapeError(std::string(op) + ": expected [rows, t], got " + shape_str(h.shape()));
    validate_top_k(k, static_cast<int>(h.dim(1)));
}

} // namespace

std::vector<std::int64_t> top_k_indices(const Tensor& h, int k) {
    check_logits(h, k, "top_k_indices");
    return row_order(h, static_cast<std::size_t>(k));
}

Tensor softmax_k(const Tensor& h, int k) {
    check_logits(h, k, "softmax_k");
    const std::int64_t rows = h.dim(0), t = h.dim(1);
    const auto top = row_order(h, static_cast<std::size_t>(k));
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(rows * t), 0);
    for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j)
            keep[static_cast<std::size_t>(r * t + top[static_cast<std::size_t>(r * k + j)])] = 1;
    return masked_softmax_rows(h, keep);
}

Tensor psi_thresholds(const Tensor& h, int k) {
    check_logits(h, k, "psi_thresholds");
    const std::int64_t rows = h.dim(0), t = h.dim(1);
    const auto order = row_order(h, static_cast<std::size_t>(k) + 1);
    const auto values = h.to_vector();
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rows * t));
    for (std::int64_t r = 0; r < rows; ++r) {
        const auto kth = order[static_cast<std::size_t>(r * (k + 1) + k - 1)];
        const auto next = order[static_cast<std::size_t>(r * (k + 1) + k)];
        const double lk = values[static_cast<std::size_t>(r * t + kth)];
        for (std::int64_t c = 0; c < t; ++c)
            idx[static_cast<std::size_t>(r * t + c)] = values[static_cast<std::size_t>(r * t + c)] >= lk ? next : kth;
    }
    return take_along_rows(h, idx, t);
}

Tensor load_probability(const Tensor& clean, const Tensor& noise_scale, const Tensor& psi) {
    return normal_cdf(div(sub(clean, psi), clamp_min(noise_scale, 1e-6)));
}

Tensor cv(const Tensor& v, bool squared) { return coefficient_of_variation(v, squared); }

GateOutput gate_forward(const Tensor& x2d, const GateParams& p, bool train, RngStream* noise) {
    validate_top_k(p.k, p.experts());
    auto nl = noisy_logits(x2d, p, train, noise);
    GateOutput out;
    out.k = p.k;
    out.top_k = top_k_indices(nl.logits, p.k);
    out.gates = softmax_k(nl.logits, p.k);
    out.load_prob = load_probability(nl.clean, nl.noise_scale, psi_thresholds(nl.logits, p.k));
    out.clean_logits = std::move(nl.clean);
    out.logits = std::move(nl.logits);
    out.noise_scale = std::move(nl.noise_scale);
    return out;
}

Tensor aux_loss(const GateOutput& out, const GateParams& p) {
    Tensor importance = cv(sum_rows(out.gates), p.squared_cv);
    Tensor load = cv(sum_rows(out.load_prob), p.squared_cv);
    return add(scale(importance, p.w_importance), scale(load, p.w_load));
}

} // namespace mlit
