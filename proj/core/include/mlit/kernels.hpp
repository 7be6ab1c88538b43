#pragma once

#include <cstdint>

namespace mlit::kernels {

// Row-major dense kernels. Small products run a plain loop that matches a
// naive triple loop bit for bit; larger ones go to single-threaded BLAS.

/// c[M, N] = op(a) · op(b), op(a) [M, K], op(b) [K, N]. With trans_a the
/// buffer a holds [K, M]; with trans_b the buffer b holds [N, K].
template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t M, std::int64_t K, std::int64_t N, bool trans_a = false,
          bool trans_b = false);

/// out[cols, rows] = in[rows, cols]^T
template <class T>
void transpose(const T* in, T* out, std::int64_t rows, std::int64_t cols);

extern template void gemm<float>(const float*, const float*, float*, std::int64_t, std::int64_t, std::int64_t,
                                 bool, bool);
extern template void gemm<double>(const double*, const double*, double*, std::int64_t, std::int64_t,
                                  std::int64_t, bool, bool);
extern template void transpose<float>(const float*, float*, std::int64_t, std::int64_t);
extern template void transpose<double>(const double*, double*, std::int64_t, std::int64_t);

} // namespace mlit::kernels
