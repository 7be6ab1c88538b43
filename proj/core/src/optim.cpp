#include "mlit/optim.hpp"

#include <cmath>
#include <numbers>

namespace mlit {

double scaled_lr(double base_lr, std::int64_t batch_size) {
    return base_lr * static_cast<double>(batch_size) / 256.0;
}

std::int64_t Schedule::total_steps() const {
    return static_cast<std::int64_t>(std::llround(total_epochs * static_cast<double>(steps_per_epoch)));
}

std::int64_t Schedule::warmup_steps() const {
    return static_cast<std::int64_t>(std::llround(warmup_epochs * static_cast<double>(steps_per_epoch)));
}

void validate(const Schedule& s) {
    if (s.base_lr < 0 || s.batch_size <= 0 || s.steps_per_epoch <= 0 || s.total_epochs <= 0)
        throw ConfigError("schedule: base_lr >= 0, batch, steps_per_epoch and epochs > 0 required");
    if (s.warmup_epochs < 0 || s.warmup_epochs >= s.total_epochs)
        throw ConfigError("schedule: warmup must be shorter than the run");
}

double lr_at(std::int64_t step, const Schedule& s) {
    const double peak = s.peak();
    const std::int64_t warm = s.warmup_steps(), total = s.total_steps();
    if (step < 0)
        return 0.0;
    if (step < warm)
        return peak * static_cast<double>(step) / static_cast<double>(warm);
    if (step >= total)
        return 0.0;
    const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double default_warmup_epochs(double total_epochs) { return 0.05 * total_epochs; }

LayerwiseLrs layerwise_lrs(double decay, int layers) {
    if (!(decay > 0.0 && decay <= 1.0))
        throw ConfigError("layer-wise decay must be in (0, 1]");
    LayerwiseLrs out;
    for (int i = 0; i < layers; ++i)
        out.layers.push_back(std::pow(decay, layers - i));
    out.embed = std::pow(decay, layers + 1);
    return out;
}

double layerwise_multiplier(const std::string& name, const LayerwiseLrs& lrs) {
    static const std::string layer_prefix = "encoder.layers.";
    if (name.rfind(layer_prefix, 0) == 0) {
        const auto end = name.find('.', layer_prefix.size());
        const auto index = std::stoul(name.substr(layer_prefix.size(), end - layer_prefix.size()));
        if (index >= lrs.layers.size())
            throw ConfigError("layer-wise decay: no multiplier for " + name);
        return lrs.layers[index];
    }
    if (name.rfind("encoder.patch_embed", 0) == 0 || name == "encoder.pos_embed")
        return lrs.embed;
    return lrs.head;
}

AdamW::AdamW(const ParamList& params, AdamWOptions options) : params_(params), options_(options) {
    for (const auto& p : params_.items()) {
        m_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
        v_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
    }
}

void AdamW::step(const Gradients& grads, double lr, const std::vector<double>& multipliers) {
    std::vector<Tensor> g;
    g.reserve(params_.size());
    for (const auto& p : params_.items())
        g.push_back(grads.of(p.tensor));
    step(g, lr, multipliers);
}

void AdamW::step(const std::vector<Tensor>& grads, double lr, const std::vector<double>& multipliers) {
    const auto& items = params_.items();
    if (grads.size() != items.size())
        throw ContractError("adamw: " + std::to_string(grads.size()) + " gradients for " +
                            std::to_string(items.size()) + " parameters");
    if (!multipliers.empty() && multipliers.size() != items.size())
        throw ContractError("adamw: multiplier count does not match parameters");
    for (std::size_t i = 0; i < items.size(); ++i)
        if (grads[i].shape() != items[i].tensor.shape() || grads[i].dtype() != items[i].tensor.dtype())
            throw ContractError("adamw: gradient for " + items[i].name + " has shape " +
                                shape_str(grads[i].shape()) + ", parameter has " +
                                shape_str(items[i].tensor.shape()));

    ++step_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bc2_sqrt = std::sqrt(1.0 - std::pow(b2, static_cast<double>(step_)));
    for (std::size_t i = 0; i < items.size(); ++i) {
        Tensor param = items[i].tensor;
        const double rate = lr * (multipliers.empty() ? 1.0 : multipliers[i]);
        const double decay = items[i].decay ? options_.weight_decay : 0.0;
        dispatch(param.dtype(), [&]<class T>() {
            auto p = param.mutable_data<T>();
            auto m = m_[i].mutable_data<T>();
            auto v = v_[i].mutable_data<T>();
            auto g = grads[i].data<T>();
            const T shrink = static_cast<T>(1.0 - rate * decay);
            const T step_size = static_cast<T>(rate / bc1);
            const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2);
            const T eps = static_cast<T>(options_.eps), bc2s = static_cast<T>(bc2_sqrt);
            for (std::size_t j = 0; j < p.size(); ++j) {
                p[j] *= shrink;
                m[j] = tb1 * m[j] + (T(1) - tb1) * g[j];
                v[j] = tb2 * v[j] + (T(1) - tb2) * g[j] * g[j];
                p[j] -= step_size * m[j] / (std::sqrt(v[j]) / bc2s + eps);
            }
        });
    }
}

void AdamW::load_state(std::int64_t steps, std::vector<Tensor> first, std::vector<Tensor> second) {
    const auto& items = params_.items();
    if (first.size() != items.size() || second.size() != items.size())
        throw ContractError("adamw: state does not match parameter count");
    for (std::size_t i = 0; i < items.size(); ++i)
        if (first[i].shape() != items[i].tensor.shape() || second[i].shape() != items[i].tensor.shape())
            throw ContractError("adamw: moment shape mismatch for " + items[i].name);
    step_ = steps;
    for (std::size_t i = 0; i < items.size(); ++i) {
        m_[i] = first[i].to(items[i].tensor.dtype()).clone();
        v_[i] = second[i].to(items[i].tensor.dtype()).clone();
    }
}

} // namespace mlit
