#include "mlit/autodiff.hpp"

#include "mlit/ops.hpp"

#include <atomic>

namespace mlit {

namespace {

thread_local Tape* g_active = nullptr;
std::atomic<std::uint64_t> g_next_serial{1};

} // namespace

Tensor Gradients::of(const Tensor& param) const {
    auto it = grads_.find(param.impl().get());
    if (it != grads_.end())
        return it->second;
    return Tensor::zeros(param.shape(), param.dtype());
}

bool Gradients::reached(const Tensor& param) const {
    return grads_.count(param.impl().get()) != 0;
}

Tape::Tape() : serial_(g_next_serial.fetch_add(1)) {}

Tape::~Tape() {
    if (g_active == this)
        g_active = nullptr;
}

Tape::Recording::Recording(Tape& tape) : previous_(g_active) { g_active = &tape; }

Tape::Recording::~Recording() { g_active = previous_; }

std::size_t Tape::node_for(const Tensor& t) {
    if (!t.defined())
        return kNoNode;
    const auto& impl = t.impl();
    if (impl->tape_serial == serial_)
        return impl->node;
    if (!impl->leaf_requires_grad)
        return kNoNode;
    auto [it, inserted] = leaf_nodes_.try_emplace(impl.get(), nodes_.size());
    if (inserted)
        nodes_.push_back(Node{"leaf", {}, nullptr, impl});
    return it->second;
}

Gradients Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward requires a scalar loss");
    Gradients result;
    const auto& limpl = loss.impl();
    std::size_t root;
    if (limpl->tape_serial == serial_) {
        root = limpl->node;
    } else if (auto it = leaf_nodes_.find(limpl.get()); it != leaf_nodes_.end()) {
        root = it->second;
    } else {
        throw ContractError("backward: loss was not recorded on this tape");
    }

    autodiff::NoGrad no_grad;
    std::vector<Tensor> grads(nodes_.size());
    grads[root] = Tensor::ones(loss.shape(), loss.dtype());
    for (std::size_t i = root + 1; i-- > 0;) {
        if (!grads[i].defined())
            continue;
        Node& node = nodes_[i];
        if (node.leaf) {
            result.grads_[node.leaf.get()] = grads[i];
            continue;
        }
        std::vector<bool> needed(node.inputs.size());
        bool any = false;
        for (std::size_t j = 0; j < node.inputs.size(); ++j) {
            needed[j] = node.inputs[j] != kNoNode;
            any = any || needed[j];
        }
        if (!any)
            continue;
        auto input_grads = node.backward(grads[i], needed);
        for (std::size_t j = 0; j < node.inputs.size(); ++j) {
            if (!needed[j] || j >= input_grads.size() || !input_grads[j].defined())
                continue;
            auto& slot = grads[node.inputs[j]];
            slot = slot.defined() ? add(slot, input_grads[j]) : input_grads[j];
        }
        grads[i] = Tensor();
    }
    return result;
}

namespace autodiff {

std::uint64_t active_tape_serial() { return g_active ? g_active->serial() : 0; }

bool is_recording() { return g_active != nullptr; }

NoGrad::NoGrad() : previous_(g_active) { g_active = nullptr; }

NoGrad::~NoGrad() { g_active = previous_; }

bool any_requires_grad(const std::vector<Tensor>& inputs) {
    if (!g_active)
        return false;
    for (const auto& t : inputs)
        if (t.requires_grad())
            return true;
    return false;
}

} // namespace autodiff

void record_op(std::string_view op, Tensor& out, const std::vector<Tensor>& inputs,
               Tape::BackwardFn backward) {
    Tape* tape = g_active;
    if (!tape || !autodiff::any_requires_grad(inputs))
        return;
    Tape::Node node{op, {}, std::move(backward), nullptr};
    node.inputs.reserve(inputs.size());
    for (const auto& t : inputs)
        node.inputs.push_back(tape->node_for(t));
    tape->nodes_.push_back(std::move(node));
    out.impl()->tape_serial = tape->serial();
    out.impl()->node = tape->nodes_.size() - 1;
}

} // namespace mlit
