#include "mlit/ops.hpp"

#include "mlit/autodiff.hpp"
#include "mlit/kernels.hpp"
#include "mlit/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace mlit {

namespace scalar {

double sigmoid(double x) {
    if (x >= 0)
        return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double silu(double x) { return x * sigmoid(x); }

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 * 0.5); }

double normal_pdf(double x) { return std::exp(-0.5 * x * x) * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2); }

} // namespace scalar

namespace {

using Index = std::int64_t;
using IndexVec = std::vector<Index>;

void check_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw ShapeError(std::string(op) + ": dtype mismatch " + std::string(dtype_name(a.dtype())) + " vs " +
                         std::string(dtype_name(b.dtype())));
}

void check_same(const Tensor& a, const Tensor& b, const char* op) {
    check_dtype(a, b, op);
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <class T, class F>
Tensor map1(const Tensor& x, F f) {
    auto in = x.data<T>();
    std::vector<T> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i)
        out[i] = static_cast<T>(f(in[i]));
    return Tensor::adopt<T>(x.shape(), std::move(out));
}

template <class F>
Tensor unary(const Tensor& x, F f) {
    return dispatch(x.dtype(), [&]<class T>() { return map1<T>(x, f); });
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, F f) {
    return dispatch(a.dtype(), [&]<class T>() {
        auto x = a.data<T>();
        auto y = b.data<T>();
        std::vector<T> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
            out[i] = static_cast<T>(f(x[i], y[i]));
        return Tensor::adopt<T>(a.shape(), std::move(out));
    });
}

template <class F>
Tensor ternary(const Tensor& a, const Tensor& b, const Tensor& c, F f) {
    return dispatch(a.dtype(), [&]<class T>() {
        auto x = a.data<T>();
        auto y = b.data<T>();
        auto z = c.data<T>();
        std::vector<T> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
            out[i] = static_cast<T>(f(x[i], y[i], z[i]));
        return Tensor::adopt<T>(a.shape(), std::move(out));
    });
}

Index last_dim(const Tensor& x, const char* op) {
    if (x.rank() == 0)
        throw ShapeError(std::string(op) + ": scalar input");
    return x.dim(-1);
}

Index rows_of(const Tensor& x, Index cols) { return cols == 0 ? 0 : x.numel() / cols; }

Tensor slice_rows(const Tensor& x, Index begin, Index count) {
    const Index m = x.dim(1);
    return dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        std::vector<T> out(in.begin() + begin * m, in.begin() + (begin + count) * m);
        return Tensor::adopt<T>({count, m}, std::move(out));
    });
}

} // namespace

// ---- shape ops --------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        return Tensor::adopt<T>(shape, std::vector<T>(in.begin(), in.end()));
    });
    Shape original = x.shape();
    record_op("reshape", out, {x}, [original](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{reshape(g, original)};
    });
    return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    const auto& in_shape = x.shape();
    const std::size_t r = in_shape.size();
    if (axes.size() != r)
        throw ShapeError("permute: axes rank mismatch for " + shape_str(in_shape));
    std::vector<bool> seen(r, false);
    for (int a : axes) {
        if (a < 0 || static_cast<std::size_t>(a) >= r || seen[static_cast<std::size_t>(a)])
            throw ShapeError("permute: invalid axes for " + shape_str(in_shape));
        seen[static_cast<std::size_t>(a)] = true;
    }
    std::vector<Index> in_strides(r, 1);
    for (std::size_t d = r; d-- > 1;)
        in_strides[d - 1] = in_strides[d] * in_shape[d];
    Shape out_shape(r);
    std::vector<Index> strides(r);
    for (std::size_t d = 0; d < r; ++d) {
        out_shape[d] = in_shape[static_cast<std::size_t>(axes[d])];
        strides[d] = in_strides[static_cast<std::size_t>(axes[d])];
    }
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        std::vector<T> o(in.size());
        if (o.empty())
            return Tensor::adopt<T>(out_shape, std::move(o));
        // Leading axes fixed and the last two swapped: blocked transposes.
        bool swap_last = r >= 2 && axes[r - 1] == static_cast<int>(r - 2) && axes[r - 2] == static_cast<int>(r - 1);
        for (std::size_t d = 0; swap_last && d + 2 < r; ++d)
            swap_last = axes[d] == static_cast<int>(d);
        if (swap_last) {
            const Index rows = in_shape[r - 2], cols = in_shape[r - 1];
            const Index plane = rows * cols;
            for (Index off = 0; off < static_cast<Index>(o.size()); off += plane)
                kernels::transpose(in.data() + off, o.data() + off, rows, cols);
            return Tensor::adopt<T>(out_shape, std::move(o));
        }
        // Innermost output axis copied in a tight loop.
        const Index inner = r ? out_shape[r - 1] : 1;
        const Index inner_stride = r ? strides[r - 1] : 1;
        std::vector<Index> counter(r, 0);
        Index src = 0;
        const Index outer = static_cast<Index>(o.size()) / std::max<Index>(inner, 1);
        T* dst = o.data();
        for (Index it = 0; it < outer; ++it) {
            for (Index j = 0; j < inner; ++j)
                dst[j] = in[static_cast<std::size_t>(src + j * inner_stride)];
            dst += inner;
            for (std::size_t d = r - 1; d-- > 0;) {
                src += strides[d];
                if (++counter[d] < out_shape[d])
                    break;
                src -= strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        return Tensor::adopt<T>(out_shape, std::move(o));
    });
    std::vector<int> inverse(r);
    for (std::size_t d = 0; d < r; ++d)
        inverse[static_cast<std::size_t>(axes[d])] = static_cast<int>(d);
    record_op("permute", out, {x}, [inverse](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{permute(g, inverse)};
    });
    return out;
}

// ---- products ---------------------------------------------------------------

Tensor matmul(const Tensor& x, const Tensor& w) {
    check_dtype(x, w, "matmul");
    if (x.rank() < 2 || w.rank() != 2)
        throw ShapeError("matmul: expected [..,m,k] x [k,n], got " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()));
    const Index k = x.dim(-1);
    if (w.dim(0) != k)
        throw ShapeError("matmul: inner dimensions differ " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    const Index n = w.dim(1);
    const Index m = rows_of(x, k);
    Shape out_shape = x.shape();
    out_shape.back() = n;
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
        std::vector<T> c(static_cast<std::size_t>(m * n));
        kernels::gemm(x.data<T>().data(), w.data<T>().data(), c.data(), m, k, n);
        return Tensor::adopt<T>(out_shape, std::move(c));
    });
    record_op("matmul", out, {x, w}, [x, w, m, k, n](const Tensor& g, const std::vector<bool>& needed) {
        std::vector<Tensor> grads(2);
        dispatch(x.dtype(), [&]<class T>() {
            auto gd = g.data<T>();
            if (needed[0]) {
                std::vector<T> gx(static_cast<std::size_t>(m * k));
                kernels::gemm(gd.data(), w.data<T>().data(), gx.data(), m, n, k, false, true);
                grads[0] = Tensor::adopt<T>(x.shape(), std::move(gx));
            }
            if (needed[1]) {
                std::vector<T> gw(static_cast<std::size_t>(k * n));
                kernels::gemm(x.data<T>().data(), gd.data(), gw.data(), k, m, n, true, false);
                grads[1] = Tensor::adopt<T>(w.shape(), std::move(gw));
            }
        });
        return grads;
    });
    return out;
}

namespace {

// Untracked op(a) · op(b) per batch; a is [B, m, k] or [B, k, m] with ta.
Tensor batched_gemm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    const Index B = a.dim(0);
    const Index m = ta ? a.dim(2) : a.dim(1), k = ta ? a.dim(1) : a.dim(2);
    const Index n = tb ? b.dim(1) : b.dim(2);
    return dispatch(a.dtype(), [&]<class T>() {
        auto ad = a.data<T>();
        auto bd = b.data<T>();
        std::vector<T> c(static_cast<std::size_t>(B * m * n));
        for (Index i = 0; i < B; ++i)
            kernels::gemm(ad.data() + i * m * k, bd.data() + i * k * n, c.data() + i * m * n, m, k, n, ta, tb);
        return Tensor::adopt<T>({B, m, n}, std::move(c));
    });
}

} // namespace

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    check_dtype(a, b, "batched_matmul");
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw ShapeError("batched_matmul: expected [B,m,k] x [B,k,n], got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const Index k = a.dim(2);
    const Index bk = transpose_b ? b.dim(2) : b.dim(1);
    if (bk != k)
        throw ShapeError("batched_matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Tensor out = batched_gemm(a, b, false, transpose_b);
    record_op("batched_matmul", out, {a, b}, [a, b, transpose_b](const Tensor& g, const std::vector<bool>& needed) {
        std::vector<Tensor> grads(2);
        if (needed[0])
            grads[0] = batched_gemm(g, b, false, !transpose_b);
        if (needed[1])
            grads[1] = transpose_b ? batched_gemm(g, a, true, false) : batched_gemm(a, g, true, false);
        return grads;
    });
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    Tensor y = matmul(x, w);
    return bias.defined() ? add_bias(y, bias) : y;
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same(a, b, "add");
    Tensor out = binary(a, b, [](auto x, auto y) { return x + y; });
    record_op("add", out, {a, b}, [](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{g, g};
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same(a, b, "sub");
    Tensor out = binary(a, b, [](auto x, auto y) { return x - y; });
    record_op("sub", out, {a, b}, [](const Tensor& g, const std::vector<bool>& needed) {
        return std::vector<Tensor>{g, needed[1] ? scale(g, -1.0) : Tensor()};
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same(a, b, "mul");
    Tensor out = binary(a, b, [](auto x, auto y) { return x * y; });
    record_op("mul", out, {a, b}, [a, b](const Tensor& g, const std::vector<bool>& needed) {
        return std::vector<Tensor>{needed[0] ? mul(g, b) : Tensor(), needed[1] ? mul(g, a) : Tensor()};
    });
    return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same(a, b, "div");
    Tensor out = binary(a, b, [](auto x, auto y) { return x / y; });
    record_op("div", out, {a, b}, [a, b](const Tensor& g, const std::vector<bool>& needed) {
        std::vector<Tensor> grads(2);
        if (needed[0])
            grads[0] = binary(g, b, [](auto gv, auto bv) { return gv / bv; });
        if (needed[1])
            grads[1] = ternary(g, a, b, [](auto gv, auto av, auto bv) { return -gv * av / (bv * bv); });
        return grads;
    });
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    check_dtype(x, bias, "add_bias");
    const Index n = last_dim(x, "add_bias");
    if (bias.rank() != 1 || bias.dim(0) != n)
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
    const Index rows = rows_of(x, n);
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        auto bd = bias.data<T>();
        std::vector<T> o(in.size());
        for (Index r = 0; r < rows; ++r)
            for (Index j = 0; j < n; ++j)
                o[static_cast<std::size_t>(r * n + j)] = in[static_cast<std::size_t>(r * n + j)] + bd[static_cast<std::size_t>(j)];
        return Tensor::adopt<T>(x.shape(), std::move(o));
    });
    record_op("add_bias", out, {x, bias}, [rows, n](const Tensor& g, const std::vector<bool>& needed) {
        return std::vector<Tensor>{g, needed[1] ? sum_rows(reshape(g, {rows, n})) : Tensor()};
    });
    return out;
}

Tensor mul_rows(const Tensor& x, const Tensor& w) {
    check_dtype(x, w, "mul_rows");
    if (x.rank() < 1 || w.rank() != 1 || w.dim(0) != x.dim(0))
        throw ShapeError("mul_rows: weights " + shape_str(w.shape()) + " do not match " + shape_str(x.shape()));
    const Index rows = x.dim(0);
    const Index inner = rows == 0 ? 0 : x.numel() / rows;
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        auto wd = w.data<T>();
        std::vector<T> o(in.size());
        for (Index r = 0; r < rows; ++r)
            for (Index j = 0; j < inner; ++j)
                o[static_cast<std::size_t>(r * inner + j)] = in[static_cast<std::size_t>(r * inner + j)] * wd[static_cast<std::size_t>(r)];
        return Tensor::adopt<T>(x.shape(), std::move(o));
    });
    record_op("mul_rows", out, {x, w}, [x, w, rows, inner](const Tensor& g, const std::vector<bool>& needed) {
        std::vector<Tensor> grads(2);
        if (needed[0])
            grads[0] = mul_rows(g, w);
        if (needed[1]) {
            grads[1] = dispatch(x.dtype(), [&]<class T>() {
                auto gd = g.data<T>();
                auto xd = x.data<T>();
                std::vector<T> gw(static_cast<std::size_t>(rows));
                for (Index r = 0; r < rows; ++r) {
                    T acc = 0;
                    for (Index j = 0; j < inner; ++j)
                        acc += gd[static_cast<std::size_t>(r * inner + j)] * xd[static_cast<std::size_t>(r * inner + j)];
                    gw[static_cast<std::size_t>(r)] = acc;
                }
                return Tensor::adopt<T>({rows}, std::move(gw));
            });
        }
        return grads;
    });
    return out;
}

Tensor scale(const Tensor& x, double s) {
    Tensor out = unary(x, [s](auto v) { return v * static_cast<decltype(v)>(s); });
    record_op("scale", out, {x}, [s](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{scale(g, s)};
    });
    return out;
}

Tensor add_scalar(const Tensor& x, double s) {
    Tensor out = unary(x, [s](auto v) { return v + static_cast<decltype(v)>(s); });
    record_op("add_scalar", out, {x}, [](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{g};
    });
    return out;
}

Tensor square(const Tensor& x) {
    Tensor out = unary(x, [](auto v) { return v * v; });
    record_op("square", out, {x}, [x](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{binary(g, x, [](auto gv, auto xv) { return 2 * gv * xv; })};
    });
    return out;
}

Tensor clamp_min(const Tensor& x, double lo) {
    Tensor out = unary(x, [lo](auto v) { return std::max(v, static_cast<decltype(v)>(lo)); });
    record_op("clamp_min", out, {x}, [x, lo](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{binary(g, x, [lo](auto gv, auto xv) {
            return xv > static_cast<decltype(xv)>(lo) ? gv : decltype(gv)(0);
        })};
    });
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = unary(x, [](auto v) { return scalar::sigmoid(v); });
    record_op("sigmoid", out, {x}, [out_data = out.detach()](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{binary(g, out_data, [](auto gv, auto y) { return gv * y * (1 - y); })};
    });
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = unary(x, [](auto v) { return scalar::silu(v); });
    record_op("silu", out, {x}, [x](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{binary(g, x, [](auto gv, auto xv) {
            using T = decltype(xv);
            const T s = static_cast<T>(scalar::sigmoid(xv));
            return gv * (s + xv * s * (1 - s));
        })};
    });
    return out;
}

Tensor softplus(const Tensor& x) {
    Tensor out = unary(x, [](auto v) { return scalar::softplus(v); });
    record_op("softplus", out, {x}, [x](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{binary(g, x, [](auto gv, auto xv) { return gv * scalar::sigmoid(xv); })};
    });
    return out;
}

Tensor normal_cdf(const Tensor& x) {
    Tensor out = unary(x, [](auto v) { return scalar::normal_cdf(v); });
    record_op("normal_cdf", out, {x}, [x](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{binary(g, x, [](auto gv, auto xv) { return gv * scalar::normal_pdf(xv); })};
    });
    return out;
}

// ---- normalizations ---------------------------------------------------------

namespace {

// exp(x) for x <= 0. The float path is branch-free so row loops vectorize:
// x = k ln2 + r with |r| <= ln2 / 2, then a degree-6 polynomial for e^r.
// Relative error stays within a few float ulp.
inline double exp_nonpositive(double x) { return std::exp(x); }

inline float exp_nonpositive(float x) {
    x = x < -87.0f ? -87.0f : x;
    // Adding and removing 1.5 * 2^23 rounds to the nearest integer.
    const float k = (x * 1.44269504088896341f + 12582912.0f) - 12582912.0f;
    const float r = (x - k * 0.693145751953125f) - k * 1.42860682030941723212e-6f;
    float p = 1.0f / 720;
    p = p * r + 1.0f / 120;
    p = p * r + 1.0f / 24;
    p = p * r + 1.0f / 6;
    p = p * r + 0.5f;
    p = p * r + 1.0f;
    p = p * r + 1.0f;
    const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(k) + 127) << 23;
    return p * std::bit_cast<float>(bits);
}

// Reductions over independent lanes combined in a fixed order, so the result
// is reproducible and the loop is not bound by one dependency chain.
constexpr Index kLanes = 16;

template <class T>
T lane_sum(const T* x, Index n) {
    T acc[kLanes] = {};
    Index j = 0;
    for (; j + kLanes <= n; j += kLanes)
        for (Index l = 0; l < kLanes; ++l)
            acc[l] += x[j + l];
    T total = 0;
    for (Index l = 0; l < kLanes; ++l)
        total += acc[l];
    for (; j < n; ++j)
        total += x[j];
    return total;
}

template <class T>
T lane_max(const T* x, Index n) {
    T acc[kLanes];
    std::fill(acc, acc + kLanes, -std::numeric_limits<T>::infinity());
    Index j = 0;
    for (; j + kLanes <= n; j += kLanes)
        for (Index l = 0; l < kLanes; ++l)
            acc[l] = acc[l] > x[j + l] ? acc[l] : x[j + l];
    T mx = -std::numeric_limits<T>::infinity();
    for (Index l = 0; l < kLanes; ++l)
        mx = std::max(mx, acc[l]);
    for (; j < n; ++j)
        mx = std::max(mx, x[j]);
    return mx;
}

template <class T>
void softmax_row(const T* in, T* out, Index n, const std::uint8_t* keep) {
    T mx = -std::numeric_limits<T>::infinity();
    if (keep) {
        for (Index j = 0; j < n; ++j)
            if (keep[j])
                mx = std::max(mx, in[j]);
    } else {
        mx = lane_max(in, n);
    }
    T total = 0;
    if (keep) {
        for (Index j = 0; j < n; ++j) {
            const T e = keep[j] ? exp_nonpositive(in[j] - mx) : T(0);
            out[j] = e;
            total += e;
        }
    } else {
        for (Index j = 0; j < n; ++j)
            out[j] = exp_nonpositive(in[j] - mx);
        total = lane_sum(out, n);
    }
    const T inv = T(1) / total;
    for (Index j = 0; j < n; ++j)
        out[j] *= inv;
}

Tensor softmax_backward(const Tensor& g, const Tensor& y) {
    const Index n = y.dim(-1);
    const Index rows = rows_of(y, n);
    return dispatch(y.dtype(), [&]<class T>() {
        auto gd = g.data<T>();
        auto yd = y.data<T>();
        std::vector<T> gx(yd.size());
        for (Index r = 0; r < rows; ++r) {
            const std::size_t o = static_cast<std::size_t>(r * n);
            T prod[kLanes] = {};
            Index j0 = 0;
            for (; j0 + kLanes <= n; j0 += kLanes)
                for (Index l = 0; l < kLanes; ++l)
                    prod[l] += gd[o + j0 + l] * yd[o + j0 + l];
            T dot = 0;
            for (Index l = 0; l < kLanes; ++l)
                dot += prod[l];
            for (; j0 < n; ++j0)
                dot += gd[o + j0] * yd[o + j0];
            for (Index j = 0; j < n; ++j)
                gx[o + j] = yd[o + j] * (gd[o + j] - dot);
        }
        return Tensor::adopt<T>(y.shape(), std::move(gx));
    });
}

Tensor softmax_impl(const Tensor& x, const std::uint8_t* keep, const char* op) {
    const Index n = last_dim(x, op);
    const Index rows = rows_of(x, n);
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        std::vector<T> o(in.size());
        for (Index r = 0; r < rows; ++r)
            softmax_row(in.data() + r * n, o.data() + r * n, n, keep ? keep + r * n : nullptr);
        return Tensor::adopt<T>(x.shape(), std::move(o));
    });
    record_op(op, out, {x}, [y = out.detach()](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{softmax_backward(g, y)};
    });
    return out;
}

} // namespace

Tensor softmax_rows(const Tensor& x) { return softmax_impl(x, nullptr, "softmax_rows"); }

Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> keep) {
    if (static_cast<Index>(keep.size()) != x.numel())
        throw ShapeError("masked_softmax_rows: mask size does not match " + shape_str(x.shape()));
    const Index n = last_dim(x, "masked_softmax_rows");
    for (Index r = 0; r < rows_of(x, n); ++r)
        if (std::none_of(keep.begin() + r * n, keep.begin() + (r + 1) * n, [](std::uint8_t k) { return k != 0; }))
            throw ContractError("masked_softmax_rows: row " + std::to_string(r) + " keeps no entries");
    return softmax_impl(x, keep.data(), "masked_softmax_rows");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    check_dtype(x, gamma, "layer_norm");
    check_dtype(x, beta, "layer_norm");
    const Index m = last_dim(x, "layer_norm");
    if (gamma.shape() != Shape{m} || beta.shape() != Shape{m})
        throw ShapeError("layer_norm: affine parameters must be [" + std::to_string(m) + "]");
    if (!(eps > 0))
        throw ContractError("layer_norm: eps must be positive");
    const Index rows = rows_of(x, m);
    Tensor xhat, rstd;
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        auto gd = gamma.data<T>();
        auto bd = beta.data<T>();
        std::vector<T> o(in.size()), xh(in.size()), rs(static_cast<std::size_t>(rows));
        for (Index r = 0; r < rows; ++r) {
            const T* row = in.data() + r * m;
            double mu = 0;
            for (Index j = 0; j < m; ++j)
                mu += row[j];
            mu /= static_cast<double>(m);
            double var = 0;
            for (Index j = 0; j < m; ++j)
                var += (row[j] - mu) * (row[j] - mu);
            var /= static_cast<double>(m);
            const double inv = 1.0 / std::sqrt(var + eps);
            rs[static_cast<std::size_t>(r)] = static_cast<T>(inv);
            for (Index j = 0; j < m; ++j) {
                const T h = static_cast<T>((row[j] - mu) * inv);
                xh[static_cast<std::size_t>(r * m + j)] = h;
                o[static_cast<std::size_t>(r * m + j)] = h * gd[static_cast<std::size_t>(j)] + bd[static_cast<std::size_t>(j)];
            }
        }
        xhat = Tensor::adopt<T>(x.shape(), std::move(xh));
        rstd = Tensor::adopt<T>({rows}, std::move(rs));
        return Tensor::adopt<T>(x.shape(), std::move(o));
    });
    record_op("layer_norm", out, {x, gamma, beta},
              [xhat, rstd, gamma, rows, m](const Tensor& g, const std::vector<bool>& needed) {
                  std::vector<Tensor> grads(3);
                  dispatch(g.dtype(), [&]<class T>() {
                      auto gd = g.data<T>();
                      auto xh = xhat.data<T>();
                      auto rs = rstd.data<T>();
                      auto gm = gamma.data<T>();
                      if (needed[0]) {
                          std::vector<T> gx(gd.size());
                          for (Index r = 0; r < rows; ++r) {
                              const std::size_t o = static_cast<std::size_t>(r * m);
                              double s1 = 0, s2 = 0;
                              for (Index j = 0; j < m; ++j) {
                                  const double gh = gd[o + j] * gm[static_cast<std::size_t>(j)];
                                  s1 += gh;
                                  s2 += gh * xh[o + j];
                              }
                              s1 /= static_cast<double>(m);
                              s2 /= static_cast<double>(m);
                              for (Index j = 0; j < m; ++j) {
                                  const double gh = gd[o + j] * gm[static_cast<std::size_t>(j)];
                                  gx[o + j] = static_cast<T>(rs[static_cast<std::size_t>(r)] * (gh - s1 - xh[o + j] * s2));
                              }
                          }
                          grads[0] = Tensor::adopt<T>(g.shape(), std::move(gx));
                      }
                      if (needed[1] || needed[2]) {
                          std::vector<T> gg(static_cast<std::size_t>(m), 0), gb(static_cast<std::size_t>(m), 0);
                          for (Index r = 0; r < rows; ++r)
                              for (Index j = 0; j < m; ++j) {
                                  const std::size_t o = static_cast<std::size_t>(r * m + j);
                                  gg[static_cast<std::size_t>(j)] += gd[o] * xh[o];
                                  gb[static_cast<std::size_t>(j)] += gd[o];
                              }
                          if (needed[1])
                              grads[1] = Tensor::adopt<T>({m}, std::move(gg));
                          if (needed[2])
                              grads[2] = Tensor::adopt<T>({m}, std::move(gb));
                      }
                  });
                  return grads;
              });
    return out;
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x) {
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        double acc = 0;
        for (T v : in)
            acc += v;
        return Tensor::scalar(acc, x.dtype());
    });
    Shape s = x.shape();
    record_op("sum", out, {x}, [s](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{Tensor::full(s, g.item(), g.dtype())};
    });
    return out;
}

Tensor mean(const Tensor& x) {
    const Index n = x.numel();
    if (n == 0)
        throw ShapeError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(n));
}

Tensor sum_rows(const Tensor& x) {
    if (x.rank() != 2)
        throw ShapeError("sum_rows: expected rank-2 input, got " + shape_str(x.shape()));
    const Index r = x.dim(0), c = x.dim(1);
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        std::vector<T> o(static_cast<std::size_t>(c), 0);
        for (Index i = 0; i < r; ++i)
            for (Index j = 0; j < c; ++j)
                o[static_cast<std::size_t>(j)] += in[static_cast<std::size_t>(i * c + j)];
        return Tensor::adopt<T>({c}, std::move(o));
    });
    record_op("sum_rows", out, {x}, [r, c](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
            auto gd = g.data<T>();
            std::vector<T> o(static_cast<std::size_t>(r * c));
            for (Index i = 0; i < r; ++i)
                std::copy(gd.begin(), gd.end(), o.begin() + i * c);
            return Tensor::adopt<T>({r, c}, std::move(o));
        })};
    });
    return out;
}

// ---- indexing ---------------------------------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> idx) {
    if (x.rank() != 2)
        throw ShapeError("gather_rows: expected rank-2 input, got " + shape_str(x.shape()));
    const Index R = x.dim(0), m = x.dim(1);
    const Index q = static_cast<Index>(idx.size());
    for (Index i : idx)
        if (i < 0 || i >= R)
            throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range " + std::to_string(R));
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        std::vector<T> o(static_cast<std::size_t>(q * m));
        for (Index r = 0; r < q; ++r)
            std::copy_n(in.begin() + idx[static_cast<std::size_t>(r)] * m, m, o.begin() + r * m);
        return Tensor::adopt<T>({q, m}, std::move(o));
    });
    if (autodiff::any_requires_grad({x})) {
        IndexVec saved(idx.begin(), idx.end());
        record_op("gather_rows", out, {x}, [saved = std::move(saved), R, m](const Tensor& g, const std::vector<bool>&) {
            return std::vector<Tensor>{index_add_rows(Tensor::zeros({R, m}, g.dtype()), saved, g)};
        });
    }
    return out;
}

Tensor index_add_rows(const Tensor& base, std::span<const std::int64_t> idx, const Tensor& src) {
    check_dtype(base, src, "index_add_rows");
    if (base.rank() != 2 || src.rank() != 2 || base.dim(1) != src.dim(1) ||
        src.dim(0) != static_cast<Index>(idx.size()))
        throw ShapeError("index_add_rows: incompatible " + shape_str(base.shape()) + " <- " + shape_str(src.shape()));
    const Index R = base.dim(0), m = base.dim(1);
    for (Index i : idx)
        if (i < 0 || i >= R)
            throw ShapeError("index_add_rows: index " + std::to_string(i) + " out of range " + std::to_string(R));
    Tensor out = dispatch(base.dtype(), [&]<class T>() {
        auto b = base.data<T>();
        auto s = src.data<T>();
        std::vector<T> o(b.begin(), b.end());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            T* dst = o.data() + idx[r] * m;
            const T* from = s.data() + static_cast<Index>(r) * m;
            for (Index j = 0; j < m; ++j)
                dst[j] += from[j];
        }
        return Tensor::adopt<T>({R, m}, std::move(o));
    });
    if (autodiff::any_requires_grad({base, src})) {
        IndexVec saved(idx.begin(), idx.end());
        record_op("index_add_rows", out, {base, src}, [saved = std::move(saved)](const Tensor& g, const std::vector<bool>& needed) {
            return std::vector<Tensor>{g, needed[1] ? gather_rows(g, saved) : Tensor()};
        });
    }
    return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    check_dtype(a, b, "concat_rows");
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("concat_rows: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const Index r1 = a.dim(0), r2 = b.dim(0), m = a.dim(1);
    Tensor out = dispatch(a.dtype(), [&]<class T>() {
        auto ad = a.data<T>();
        auto bd = b.data<T>();
        std::vector<T> o;
        o.reserve(ad.size() + bd.size());
        o.insert(o.end(), ad.begin(), ad.end());
        o.insert(o.end(), bd.begin(), bd.end());
        return Tensor::adopt<T>({r1 + r2, m}, std::move(o));
    });
    record_op("concat_rows", out, {a, b}, [r1, r2](const Tensor& g, const std::vector<bool>& needed) {
        return std::vector<Tensor>{needed[0] ? slice_rows(g, 0, r1) : Tensor(),
                                   needed[1] ? slice_rows(g, r1, r2) : Tensor()};
    });
    return out;
}

Tensor gather_elements(const Tensor& x, std::span<const std::int64_t> idx) {
    const Index n = x.numel();
    for (Index i : idx)
        if (i < 0 || i >= n)
            throw ShapeError("gather_elements: index " + std::to_string(i) + " out of range " + std::to_string(n));
    Tensor out = dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        std::vector<T> o(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i)
            o[i] = in[static_cast<std::size_t>(idx[i])];
        return Tensor::adopt<T>({static_cast<Index>(idx.size())}, std::move(o));
    });
    if (autodiff::any_requires_grad({x})) {
        IndexVec saved(idx.begin(), idx.end());
        Shape s = x.shape();
        record_op("gather_elements", out, {x}, [saved = std::move(saved), s](const Tensor& g, const std::vector<bool>&) {
            return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
                auto gd = g.data<T>();
                std::vector<T> o(static_cast<std::size_t>(shape_numel(s)), 0);
                for (std::size_t i = 0; i < saved.size(); ++i)
                    o[static_cast<std::size_t>(saved[i])] += gd[i];
                return Tensor::adopt<T>(s, std::move(o));
            })};
        });
    }
    return out;
}

Tensor take_along_rows(const Tensor& x, std::span<const std::int64_t> idx, std::int64_t cols) {
    if (x.rank() != 2)
        throw ShapeError("take_along_rows: expected rank-2 input, got " + shape_str(x.shape()));
    const Index r = x.dim(0), c = x.dim(1);
    if (static_cast<Index>(idx.size()) != r * cols)
        throw ShapeError("take_along_rows: index count does not match rows x cols");
    IndexVec flat(idx.size());
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < cols; ++j) {
            const Index col = idx[static_cast<std::size_t>(i * cols + j)];
            if (col < 0 || col >= c)
                throw ShapeError("take_along_rows: column " + std::to_string(col) + " out of range");
            flat[static_cast<std::size_t>(i * cols + j)] = i * c + col;
        }
    return reshape(gather_elements(x, flat), {r, cols});
}

// ---- regularization and losses ---------------------------------------------

Tensor dropout(const Tensor& x, double p, bool train, RngStream* stream) {
    if (!train || p <= 0.0)
        return x;
    if (p >= 1.0)
        throw ContractError("dropout: p must be < 1");
    if (!stream)
        throw ContractError("dropout: training mode requires an RNG stream");
    const double keep_scale = 1.0 / (1.0 - p);
    Tensor mask = dispatch(x.dtype(), [&]<class T>() {
        std::vector<T> m(static_cast<std::size_t>(x.numel()));
        for (auto& v : m)
            v = stream->uniform() < p ? T(0) : static_cast<T>(keep_scale);
        return Tensor::adopt<T>(x.shape(), std::move(m));
    });
    Tensor out = binary(x, mask, [](auto a, auto b) { return a * b; });
    record_op("dropout", out, {x}, [mask](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{binary(g, mask, [](auto a, auto b) { return a * b; })};
    });
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<Index>(labels.size()) || labels.empty())
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    const Index b = logits.dim(0), c = logits.dim(1);
    for (int y : labels)
        if (y < 0 || y >= c)
            throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range");
    Tensor probs;
    Tensor out = dispatch(logits.dtype(), [&]<class T>() {
        auto in = logits.data<T>();
        std::vector<T> p(in.size());
        double total = 0;
        for (Index i = 0; i < b; ++i) {
            softmax_row(in.data() + i * c, p.data() + i * c, c, nullptr);
            const T* row = in.data() + i * c;
            const T mx = *std::max_element(row, row + c);
            double s = 0;
            for (Index j = 0; j < c; ++j)
                s += std::exp(static_cast<double>(row[j] - mx));
            total += std::log(s) + mx - row[labels[static_cast<std::size_t>(i)]];
        }
        probs = Tensor::adopt<T>(logits.shape(), std::move(p));
        return Tensor::scalar(total / static_cast<double>(b), logits.dtype());
    });
    std::vector<int> saved(labels.begin(), labels.end());
    record_op("cross_entropy", out, {logits}, [probs, saved, b, c](const Tensor& g, const std::vector<bool>&) {
        const double gv = g.item() / static_cast<double>(b);
        return std::vector<Tensor>{dispatch(probs.dtype(), [&]<class T>() {
            auto pd = probs.data<T>();
            std::vector<T> o(pd.size());
            for (Index i = 0; i < b; ++i)
                for (Index j = 0; j < c; ++j) {
                    const std::size_t k = static_cast<std::size_t>(i * c + j);
                    o[k] = static_cast<T>(gv * (pd[k] - (j == saved[static_cast<std::size_t>(i)] ? 1.0 : 0.0)));
                }
            return Tensor::adopt<T>(probs.shape(), std::move(o));
        })};
    });
    return out;
}

Tensor mse(const Tensor& prediction, const Tensor& target) {
    check_same(prediction, target, "mse");
    return mean(square(sub(prediction, target)));
}

Tensor coefficient_of_variation(const Tensor& v, bool squared) {
    if (v.rank() != 1 || v.dim(0) < 2)
        throw ShapeError("coefficient_of_variation: expected a vector of length >= 2, got " + shape_str(v.shape()));
    constexpr double kEps = 1e-10;
    const auto values = v.to_vector();
    const double t = static_cast<double>(values.size());
    const double mu = std::accumulate(values.begin(), values.end(), 0.0) / t;
    double var = 0;
    for (double x : values)
        var += (x - mu) * (x - mu);
    var /= t;
    const double sd = std::sqrt(var);
    const double cv = sd / (mu + kEps);
    Tensor out = Tensor::scalar(squared ? cv * cv : cv, v.dtype());
    record_op("coefficient_of_variation", out, {v}, [values, mu, sd, cv, squared, t](const Tensor& g, const std::vector<bool>&) {
        std::vector<double> grad(values.size());
        const double denom = mu + kEps;
        const double outer = g.item() * (squared ? 2.0 * cv : 1.0);
        for (std::size_t i = 0; i < values.size(); ++i) {
            // Zero spread has no defined derivative of the std; use the zero subgradient.
            const double dsd = sd > 0 ? (values[i] - mu) / (t * sd) : 0.0;
            grad[i] = outer * (dsd / denom - sd / (denom * denom) / t);
        }
        return std::vector<Tensor>{Tensor::from_values({static_cast<Index>(grad.size())}, grad, g.dtype())};
    });
    return out;
}

} // namespace mlit
