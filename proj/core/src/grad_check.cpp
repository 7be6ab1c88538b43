#include "mlit/grad_check.hpp"

#include "mlit/autodiff.hpp"
#include "mlit/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mlit {

GradCheckResult grad_check(const std::function<Tensor()>& loss, const std::vector<Tensor>& params,
                           const GradCheckOptions& options) {
    for (const auto& p : params)
        if (p.dtype() != DType::f64)
            throw ContractError("grad_check requires f64 parameters");

    std::vector<Tensor> tracked = params;
    std::vector<bool> previously(params.size());
    for (std::size_t i = 0; i < tracked.size(); ++i) {
        previously[i] = tracked[i].impl()->leaf_requires_grad;
        tracked[i].set_requires_grad(true);
    }

    Tape tape;
    Tensor value;
    {
        auto recording = tape.record();
        value = loss();
    }
    const Gradients grads = tape.backward(value);

    auto evaluate = [&] {
        autodiff::NoGrad no_grad;
        return loss().item();
    };
    const double base = value.item();
    if (evaluate() != base)
        throw ContractError("grad_check: loss is not deterministic across evaluations");

    GradCheckResult result;
    RngStream sampler(options.sample_seed);
    for (std::size_t pi = 0; pi < tracked.size(); ++pi) {
        Tensor& p = tracked[pi];
        auto data = p.mutable_data<double>();
        const auto analytic = grads.of(p).to_vector();
        std::vector<std::int64_t> coords(data.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (options.max_coords_per_param >= 0 &&
            static_cast<std::int64_t>(coords.size()) > options.max_coords_per_param) {
            sampler.shuffle(coords.begin(), coords.end());
            coords.resize(static_cast<std::size_t>(options.max_coords_per_param));
            std::sort(coords.begin(), coords.end());
        }
        for (auto c : coords) {
            const auto k = static_cast<std::size_t>(c);
            const double saved = data[k];
            data[k] = saved + options.eps;
            const double fp = evaluate();
            data[k] = saved - options.eps;
            const double fm = evaluate();
            data[k] = saved;
            const double numeric = (fp - fm) / (2.0 * options.eps);
            const double a = analytic[k];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            ++result.coords_checked;
            if (rel > result.max_rel_error || result.worst_index < 0) {
                result.max_rel_error = std::max(rel, result.max_rel_error);
                if (rel >= result.max_rel_error) {
                    result.worst_param = pi;
                    result.worst_index = c;
                    result.analytic = a;
                    result.numeric = numeric;
                }
            }
        }
    }
    for (std::size_t i = 0; i < tracked.size(); ++i)
        tracked[i].set_requires_grad(previously[i]);
    return result;
}

} // namespace mlit
