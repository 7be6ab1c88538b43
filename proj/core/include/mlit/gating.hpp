#pragma once

#include "mlit/rng.hpp"
#include "mlit/tensor.hpp"

#include <cstdint>
#include <vector>

namespace mlit {

class ParamList;

/// Noisy top-k gate over `t` experts. Gate matrices carry no bias.
struct GateParams {
    Tensor w_gate;  // [m, t]
    Tensor w_noise; // [m, t]
    int k = 2;
    double w_importance = 1e-2;
    double w_load = 1e-2;
    bool squared_cv = false;

    int experts() const { return static_cast<int>(w_gate.dim(1)); }
};

/// Throws ConfigError unless 1 <= k < experts.
void validate_top_k(int k, int experts);

GateParams make_gate(std::int64_t embed, int experts, int k, DType dtype, RngStream& init);

void collect_params(ParamList& out, std::string_view prefix, const GateParams& p);

struct NoisyLogits {
    Tensor clean;       // x W_g
    Tensor logits;      // H
    Tensor noise_scale; // softplus(x W_noise)
};

/// H = xW_g + eps * softplus(xW_noise), eps ~ N(0, 1) drawn from `noise` when
/// training; H = xW_g otherwise.
NoisyLogits noisy_logits(const Tensor& x2d, const GateParams& p, bool train, RngStream* noise);

/// Per row, the k largest column indices in descending value order. Ties go to
/// the lower column index. Result is row-major [rows, k].
std::vector<std::int64_t> top_k_indices(const Tensor& h, int k);

/// Row-wise softmax over the top-k entries of h[r, t]; other entries are 0.
Tensor softmax_k(const Tensor& h, int k);

/// psi[r, c] = (k+1)-th largest of row r if h[r, c] >= k-th largest, else the
/// k-th largest. Values are copied out of h, so gradients flow back into it.
Tensor psi_thresholds(const Tensor& h, int k);

/// Phi((clean - psi) / max(noise_scale, 1e-6)).
Tensor load_probability(const Tensor& clean, const Tensor& noise_scale, const Tensor& psi);

/// Coefficient of variation: population std / (mean + 1e-10).
Tensor cv(const Tensor& v, bool squared = false);

struct GateOutput {
    Tensor clean_logits;
    Tensor logits;
    Tensor noise_scale;
    Tensor gates;     // G, k nonzeros per row
    Tensor load_prob; // P
    std::vector<std::int64_t> top_k; // [rows, k]
    int k = 0;
};

GateOutput gate_forward(const Tensor& x2d, const GateParams& p, bool train, RngStream* noise);

/// w_importance * CV(column sums of G) + w_load * CV(column sums of P).
Tensor aux_loss(const GateOutput& out, const GateParams& p);

} // namespace mlit
