#pragma once

#include "mlit/tensor.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace mlit {

struct GradCheckOptions {
    double eps = 1e-5;
    /// Coordinates sampled per parameter; negative checks every coordinate.
    std::int64_t max_coords_per_param = -1;
    std::uint64_t sample_seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coords_checked = 0;
};

/// Compares reverse-mode gradients of `loss` against central differences.
/// `loss` must read the current values of `params` (all f64) and be
/// deterministic; a repeat-evaluation mismatch throws ContractError.
/// Relative error uses the denominator max(|a|, |b|, 1e-8).
GradCheckResult grad_check(const std::function<Tensor()>& loss, const std::vector<Tensor>& params,
                           const GradCheckOptions& options = {});

} // namespace mlit
