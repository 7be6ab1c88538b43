#pragma once

#include "mlit/rng.hpp"
#include "mlit/tensor.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace mlit {

Tensor uniform_tensor(Shape shape, double lo, double hi, DType dtype, RngStream& stream);
Tensor normal_tensor(Shape shape, double stddev, DType dtype, RngStream& stream);

/// y = x · weight + bias, weight stored as [in, out].
struct Linear {
    Tensor weight;
    Tensor bias; // undefined when the layer has no bias

    std::int64_t in_features() const { return weight.dim(0); }
    std::int64_t out_features() const { return weight.dim(1); }
    Tensor operator()(const Tensor& x) const;
};

/// Fan-in scaled uniform init U(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
Linear make_linear(std::int64_t in, std::int64_t out, bool bias, DType dtype, RngStream& init);

struct LayerNorm {
    Tensor gamma;
    Tensor beta;
    double eps = 1e-5;

    Tensor operator()(const Tensor& x) const;
};

LayerNorm make_layer_norm(std::int64_t features, DType dtype);

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay = true; // false for biases, norms, positional tables and mask tokens
};

/// Ordered view of a model's trainable tensors.
class ParamList {
public:
    void add(std::string name, const Tensor& tensor, bool decay);
    void add(std::string_view prefix, const Linear& layer);
    void add(std::string_view prefix, const LayerNorm& norm);

    const std::vector<NamedParam>& items() const noexcept { return items_; }
    std::vector<Tensor> tensors() const;
    const NamedParam* find(std::string_view name) const;
    std::int64_t numel() const;
    /// Total of all parameters whose name starts with `prefix`.
    std::int64_t numel_with_prefix(std::string_view prefix) const;
    std::size_t size() const noexcept { return items_.size(); }

private:
    std::vector<NamedParam> items_;
};

std::string join_name(std::string_view prefix, std::string_view leaf);

} // namespace mlit
