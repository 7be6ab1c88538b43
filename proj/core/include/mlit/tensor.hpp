#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace mlit {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::string_view dtype_name(DType dtype);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

namespace detail {

using Storage = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl {
    Shape shape;
    DType dtype = DType::f32;
    Storage storage;
    bool leaf_requires_grad = false;
    // Set when the tensor was produced by an op recorded on a tape.
    std::uint64_t tape_serial = 0;
    std::size_t node = 0;
};

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

} // namespace detail

/// Runs `f.template operator()<T>()` with T matching `dtype`.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
    if (dtype == DType::f64)
        return f.template operator()<double>();
    return f.template operator()<float>();
}

/// Dense row-major n-dimensional array. Copies share storage; ops never mutate
/// their inputs, so sharing is only observable through `mutable_data()`.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, DType dtype = DType::f32);
    static Tensor ones(Shape shape, DType dtype = DType::f32);
    static Tensor full(Shape shape, double value, DType dtype = DType::f32);
    static Tensor from_values(Shape shape, std::span<const double> values, DType dtype = DType::f32);
    static Tensor from_values(Shape shape, std::initializer_list<double> values, DType dtype = DType::f32);
    static Tensor scalar(double value, DType dtype = DType::f32);

    template <class T>
    static Tensor adopt(Shape shape, std::vector<T> values);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    /// Negative axes count from the back.
    std::int64_t dim(int axis) const;
    std::int64_t numel() const;
    DType dtype() const;

    template <class T>
    std::span<const T> data() const;
    template <class T>
    std::span<T> mutable_data();

    double item() const;
    double at(std::int64_t flat_index) const;
    std::vector<double> to_vector() const;

    /// True for leaves marked trainable and for outputs recorded on the active tape.
    bool requires_grad() const;
    Tensor& set_requires_grad(bool on = true);

    Tensor detach() const;
    Tensor clone() const;
    Tensor to(DType dtype) const;

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

    const std::shared_ptr<detail::TensorImpl>& impl() const noexcept { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    void require_defined() const;

    std::shared_ptr<detail::TensorImpl> impl_;
};

template <class T>
Tensor Tensor::adopt(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("adopt: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    for (auto d : shape)
        if (d < 0)
            throw ShapeError("adopt: negative dimension in " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = detail::dtype_of<T>();
    impl->storage = std::move(values);
    return Tensor(std::move(impl));
}

template <class T>
std::span<const T> Tensor::data() const {
    require_defined();
    const auto* v = std::get_if<std::vector<T>>(&impl_->storage);
    if (!v)
        throw ContractError("tensor dtype is " + std::string(dtype_name(impl_->dtype)));
    return {v->data(), v->size()};
}

template <class T>
std::span<T> Tensor::mutable_data() {
    require_defined();
    auto* v = std::get_if<std::vector<T>>(&impl_->storage);
    if (!v)
        throw ContractError("tensor dtype is " + std::string(dtype_name(impl_->dtype)));
    return {v->data(), v->size()};
}

} // namespace mlit
