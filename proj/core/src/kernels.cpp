#include "mlit/kernels.hpp"

#include <cblas.h>

#include <algorithm>
#include <mutex>
#include <type_traits>
#include <vector>

namespace mlit::kernels {

namespace {

// Results must not depend on the thread count of the host.
void single_threaded() {
    static std::once_flag once;
    std::call_once(once, [] { openblas_set_num_threads(1); });
}

// Plain loop: each output sums its products in ascending inner index from
// zero, exactly as a textbook triple loop does.
template <class T>
void gemm_loop(const T* __restrict a, const T* __restrict b, T* __restrict c, std::int64_t M, std::int64_t K,
               std::int64_t N) {
    std::fill(c, c + M * N, T(0));
    for (std::int64_t i = 0; i < M; ++i) {
        T* __restrict ci = c + i * N;
        for (std::int64_t p = 0; p < K; ++p) {
            const T s = a[i * K + p];
            const T* __restrict bp = b + p * N;
            for (std::int64_t j = 0; j < N; ++j)
                ci[j] += s * bp[j];
        }
    }
}

// Below this many multiply-adds the BLAS call overhead dominates.
constexpr std::int64_t kSmallProduct = 4096;

} // namespace

template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t M, std::int64_t K, std::int64_t N, bool trans_a,
          bool trans_b) {
    if (M == 0 || N == 0)
        return;
    if (K == 0) {
        std::fill(c, c + M * N, T(0));
        return;
    }
    if (M * K * N <= kSmallProduct) {
        std::vector<T> at, bt;
        if (trans_a) {
            at.resize(static_cast<std::size_t>(M * K));
            transpose(a, at.data(), K, M);
            a = at.data();
        }
        if (trans_b) {
            bt.resize(static_cast<std::size_t>(K * N));
            transpose(b, bt.data(), N, K);
            b = bt.data();
        }
        gemm_loop(a, b, c, M, K, N);
        return;
    }
    single_threaded();
    const auto ta = trans_a ? CblasTrans : CblasNoTrans;
    const auto tb = trans_b ? CblasTrans : CblasNoTrans;
    const auto lda = static_cast<blasint>(trans_a ? M : K);
    const auto ldb = static_cast<blasint>(trans_b ? K : N);
    const auto m = static_cast<blasint>(M), n = static_cast<blasint>(N), k = static_cast<blasint>(K);
    if constexpr (std::is_same_v<T, float>)
        cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, 1.0f, a, lda, b, ldb, 0.0f, c, n);
    else
        cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, 1.0, a, lda, b, ldb, 0.0, c, n);
}

template <class T>
void transpose(const T* __restrict in, T* __restrict out, std::int64_t rows, std::int64_t cols) {
    constexpr std::int64_t kBlock = 32;
    for (std::int64_t r0 = 0; r0 < rows; r0 += kBlock)
        for (std::int64_t c0 = 0; c0 < cols; c0 += kBlock) {
            const std::int64_t r1 = std::min(rows, r0 + kBlock);
            const std::int64_t c1 = std::min(cols, c0 + kBlock);
            for (std::int64_t r = r0; r < r1; ++r)
                for (std::int64_t q = c0; q < c1; ++q)
                    out[q * rows + r] = in[r * cols + q];
        }
}

template void gemm<float>(const float*, const float*, float*, std::int64_t, std::int64_t, std::int64_t, bool,
                          bool);
template void gemm<double>(const double*, const double*, double*, std::int64_t, std::int64_t, std::int64_t, bool,
                           bool);
template void transpose<float>(const float*, float*, std::int64_t, std::int64_t);
template void transpose<double>(const double*, double*, std::int64_t, std::int64_t);

} // namespace mlit::kernels
