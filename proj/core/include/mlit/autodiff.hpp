#pragma once

#include "mlit/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mlit {

/// Gradients of a scalar loss with respect to trainable leaves.
class Gradients {
public:
    /// Gradient for `param`; an all-zero tensor if the loss does not depend on it.
    Tensor of(const Tensor& param) const;
    bool reached(const Tensor& param) const;
    std::size_t size() const noexcept { return grads_.size(); }

private:
    friend class Tape;
    std::unordered_map<const detail::TensorImpl*, Tensor> grads_;
};

/// Ordered record of differentiable ops. Nodes are appended in execution order,
/// so creation order is a topological order and backward is a reverse sweep.
class Tape {
public:
    using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out,
                                                         const std::vector<bool>& needed)>;

    struct Node {
        std::string_view op;
        std::vector<std::size_t> inputs; // kNoNode for untracked inputs
        BackwardFn backward;
        std::shared_ptr<detail::TensorImpl> leaf; // set for leaf nodes only
    };

    static constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// While alive, ops on tracked inputs are recorded onto this tape.
    class Recording {
    public:
        explicit Recording(Tape& tape);
        ~Recording();
        Recording(const Recording&) = delete;
        Recording& operator=(const Recording&) = delete;

    private:
        Tape* previous_;
    };

    [[nodiscard]] Recording record() { return Recording(*this); }

    /// Reverse sweep from a scalar loss recorded on this tape.
    Gradients backward(const Tensor& loss);

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    std::uint64_t serial() const noexcept { return serial_; }

private:
    friend void record_op(std::string_view, Tensor&, const std::vector<Tensor>&, BackwardFn);
    std::size_t node_for(const Tensor& t);

    std::uint64_t serial_;
    std::vector<Node> nodes_;
    std::unordered_map<const detail::TensorImpl*, std::size_t> leaf_nodes_;
};

namespace autodiff {

/// Serial of the tape currently recording on this thread, 0 when none.
std::uint64_t active_tape_serial();
bool is_recording();

/// Suspends recording for its lifetime.
class NoGrad {
public:
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    Tape* previous_;
};

/// True if any input should propagate gradients under the active tape.
bool any_requires_grad(const std::vector<Tensor>& inputs);

} // namespace autodiff

/// Appends a node producing `out` when recording and an input is tracked.
/// `backward` returns one gradient per input (undefined entries are ignored).
void record_op(std::string_view op, Tensor& out, const std::vector<Tensor>& inputs,
               Tape::BackwardFn backward);

} // namespace mlit
