#pragma once

// Dense row-major kernels used by the tensor ops.
//
// Two implementations share one signature: `serial` is the reference and
// `omp` distributes output rows across OpenMP threads. Each output element is
// accumulated in the same order in both, so results are bit-identical and the
// parallel path can be checked against the serial one with exact equality.

#include <cstddef>
#include <span>

namespace conslide::kernels {

/// Problem size (rows*inner*cols) below which the OpenMP path stays serial.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

namespace serial {

/// c[p,r] = a[p,q] * b[q,r]
void gemm_nn(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c);
/// c[p,r] = a[p,q] * b[r,q]^T
void gemm_nt(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c);
/// c[q,r] = a[p,q]^T * b[p,r]
void gemm_tn(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c);

/// Row-wise max-subtracted softmax over rows of length `cols`.
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> y);

/// Normalized rows xhat and per-row inverse standard deviation.
void layer_norm_rows(std::size_t rows, std::size_t cols, double eps, std::span<const double> x,
                     std::span<double> xhat, std::span<double> inv_std);

}  // namespace serial

namespace omp {

void gemm_nn(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c);
void gemm_nt(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c);
void gemm_tn(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c);
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> y);
void layer_norm_rows(std::size_t rows, std::size_t cols, double eps, std::span<const double> x,
                     std::span<double> xhat, std::span<double> inv_std);

}  // namespace omp

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace conslide::kernels
