#include "mlit/tensor.hpp"

#include "mlit/autodiff.hpp"

#include <algorithm>

namespace mlit {

std::string_view dtype_name(DType dtype) {
    return dtype == DType::f64 ? "f64" : "f32";
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape)
        n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i)
            s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {

detail::Storage make_storage(DType dtype, std::size_t n, double value) {
    if (dtype == DType::f64)
        return std::vector<double>(n, value);
    return std::vector<float>(n, static_cast<float>(value));
}

} // namespace

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    for (auto d : shape)
        if (d < 0)
            throw ShapeError("negative dimension in " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->storage = make_storage(dtype, static_cast<std::size_t>(shape_numel(shape)), value);
    impl->shape = std::move(shape);
    impl->dtype = dtype;
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::ones(Shape shape, DType dtype) { return full(std::move(shape), 1.0, dtype); }

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("from_values: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    Tensor t = zeros(std::move(shape), dtype);
    dispatch(dtype, [&]<class T>() {
        auto out = t.mutable_data<T>();
        std::transform(values.begin(), values.end(), out.begin(),
                       [](double v) { return static_cast<T>(v); });
    });
    return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
    return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

void Tensor::require_defined() const {
    if (!impl_)
        throw ContractError("use of undefined tensor");
}

const Shape& Tensor::shape() const {
    require_defined();
    return impl_->shape;
}

std::int64_t Tensor::dim(int axis) const {
    const auto& s = shape();
    const int r = static_cast<int>(s.size());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r)
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[static_cast<std::size_t>(a)];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
    require_defined();
    return impl_->dtype;
}

double Tensor::at(std::int64_t flat_index) const {
    if (flat_index < 0 || flat_index >= numel())
        throw ShapeError("index " + std::to_string(flat_index) + " out of range for " + shape_str(shape()));
    return dispatch(dtype(), [&]<class T>() {
        return static_cast<double>(data<T>()[static_cast<std::size_t>(flat_index)]);
    });
}

double Tensor::item() const {
    if (numel() != 1)
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return at(0);
}

std::vector<double> Tensor::to_vector() const {
    return dispatch(dtype(), [&]<class T>() {
        auto d = data<T>();
        return std::vector<double>(d.begin(), d.end());
    });
}

bool Tensor::requires_grad() const {
    if (!impl_)
        return false;
    if (impl_->leaf_requires_grad)
        return true;
    return impl_->tape_serial != 0 && impl_->tape_serial == autodiff::active_tape_serial();
}

Tensor& Tensor::set_requires_grad(bool on) {
    require_defined();
    if (impl_->tape_serial != 0)
        throw ContractError("set_requires_grad on a non-leaf tensor");
    impl_->leaf_requires_grad = on;
    return *this;
}

Tensor Tensor::detach() const {
    require_defined();
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->dtype = impl_->dtype;
    impl->storage = impl_->storage;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(DType target) const {
    require_defined();
    if (target == dtype())
        return detach();
    return dispatch(dtype(), [&]<class S>() {
        return dispatch(target, [&]<class D>() {
            auto src = data<S>();
            std::vector<D> out(src.size());
            std::transform(src.begin(), src.end(), out.begin(), [](S v) { return static_cast<D>(v); });
            return Tensor::adopt<D>(shape(), std::move(out));
        });
    });
}

} // namespace mlit
