#pragma once

#include "mlit/autodiff.hpp"
#include "mlit/nn.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mlit {

/// Peak rate from the linear scaling rule: base_lr * batch / 256.
double scaled_lr(double base_lr, std::int64_t batch_size);

/// Per-step warmup + cosine schedule.
struct Schedule {
    double base_lr = 3e-4;
    std::int64_t batch_size = 256;
    double total_epochs = 1;
    double warmup_epochs = 0;
    std::int64_t steps_per_epoch = 1;

    double peak() const { return scaled_lr(base_lr, batch_size); }
    std::int64_t total_steps() const;
    std::int64_t warmup_steps() const;
};

void validate(const Schedule& s);

/// Linear ramp from 0 to peak over the warmup steps, then
/// peak * 0.5 * (1 + cos(pi * progress)) down to 0 at total_steps.
double lr_at(std::int64_t step, const Schedule& s);

/// Warmup of 5% of the run.
double default_warmup_epochs(double total_epochs);

struct LayerwiseLrs {
    double head = 1.0;          // classifier and final norm
    std::vector<double> layers; // layer i: decay^(L - i)
    double embed = 1.0;         // patch embedding and positional table: decay^(L + 1)
};

LayerwiseLrs layerwise_lrs(double decay, int layers);

/// Multiplier for a parameter named as by collect_params on a classifier
/// ("encoder.layers.<i>.*", "encoder.patch_embed.*", "encoder.pos_embed", ...).
double layerwise_multiplier(const std::string& name, const LayerwiseLrs& lrs);

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// Decoupled-weight-decay Adam with bias correction. Parameters flagged
/// `decay = false` in the ParamList skip the decay term.
class AdamW {
public:
    AdamW(const ParamList& params, AdamWOptions options = {});

    /// Updates parameters in place. `multipliers` (empty or one per parameter)
    /// scale the learning rate per tensor.
    void step(const std::vector<Tensor>& grads, double lr, const std::vector<double>& multipliers = {});
    void step(const Gradients& grads, double lr, const std::vector<double>& multipliers = {});

    std::int64_t steps() const noexcept { return step_; }
    const AdamWOptions& options() const noexcept { return options_; }
    const ParamList& params() const noexcept { return params_; }
    const std::vector<Tensor>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor>& second_moments() const noexcept { return v_; }

    /// Restores moments and the step counter, e.g. from a checkpoint.
    void load_state(std::int64_t steps, std::vector<Tensor> first, std::vector<Tensor> second);

private:
    ParamList params_;
    AdamWOptions options_;
    std::vector<Tensor> m_, v_;
    std::int64_t step_ = 0;
};

} // namespace mlit
