#include "mlit/nn.hpp"

#include "mlit/ops.hpp"

#include <cmath>

namespace mlit {

Tensor uniform_tensor(Shape shape, double lo, double hi, DType dtype, RngStream& stream) {
    std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : values)
        v = stream.uniform(lo, hi);
    return Tensor::from_values(std::move(shape), values, dtype);
}

Tensor normal_tensor(Shape shape, double stddev, DType dtype, RngStream& stream) {
    std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : values)
        v = stream.normal() * stddev;
    return Tensor::from_values(std::move(shape), values, dtype);
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

Linear make_linear(std::int64_t in, std::int64_t out, bool bias, DType dtype, RngStream& init) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear layer;
    layer.weight = uniform_tensor({in, out}, -bound, bound, dtype, init).set_requires_grad();
    if (bias)
        layer.bias = uniform_tensor({out}, -bound, bound, dtype, init).set_requires_grad();
    return layer;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

LayerNorm make_layer_norm(std::int64_t features, DType dtype) {
    LayerNorm norm;
    norm.gamma = Tensor::ones({features}, dtype).set_requires_grad();
    norm.beta = Tensor::zeros({features}, dtype).set_requires_grad();
    return norm;
}

std::string join_name(std::string_view prefix, std::string_view leaf) {
    if (prefix.empty())
        return std::string(leaf);
    std::string s(prefix);
    s += '.';
    s += leaf;
    return s;
}

void ParamList::add(std::string name, const Tensor& tensor, bool decay) {
    items_.push_back(NamedParam{std::move(name), tensor, decay});
}

void ParamList::add(std::string_view prefix, const Linear& layer) {
    add(join_name(prefix, "weight"), layer.weight, true);
    if (layer.bias.defined())
        add(join_name(prefix, "bias"), layer.bias, false);
}

void ParamList::add(std::string_view prefix, const LayerNorm& norm) {
    add(join_name(prefix, "gamma"), norm.gamma, false);
    add(join_name(prefix, "beta"), norm.beta, false);
}

std::vector<Tensor> ParamList::tensors() const {
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& p : items_)
        out.push_back(p.tensor);
    return out;
}

const NamedParam* ParamList::find(std::string_view name) const {
    for (const auto& p : items_)
        if (p.name == name)
            return &p;
    return nullptr;
}

std::int64_t ParamList::numel() const {
    std::int64_t n = 0;
    for (const auto& p : items_)
        n += p.tensor.numel();
    return n;
}

std::int64_t ParamList::numel_with_prefix(std::string_view prefix) const {
    std::int64_t n = 0;
    for (const auto& p : items_)
        if (std::string_view(p.name).starts_with(prefix))
            n += p.tensor.numel();
    return n;
}

} // namespace mlit
