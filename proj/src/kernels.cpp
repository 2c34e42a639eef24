#include "conslide/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace conslide::kernels {
namespace {

inline void gemm_nn_row(std::size_t i, std::size_t q, std::size_t r, const double* a,
                        const double* b, double* c) {
  double* ci = c + i * r;
  std::fill(ci, ci + r, 0.0);
  for (std::size_t k = 0; k < q; ++k) {
    const double aik = a[i * q + k];
    const double* bk = b + k * r;
    for (std::size_t j = 0; j < r; ++j) ci[j] += aik * bk[j];
  }
}

inline void gemm_nt_row(std::size_t i, std::size_t q, std::size_t r, const double* a,
                        const double* b, double* c) {
  const double* ai = a + i * q;
  for (std::size_t j = 0; j < r; ++j) {
    const double* bj = b + j * q;
    double s = 0.0;
    for (std::size_t k = 0; k < q; ++k) s += ai[k] * bj[k];
    c[i * r + j] = s;
  }
}

// Output row k of a^T b.
inline void gemm_tn_row(std::size_t k, std::size_t p, std::size_t q, std::size_t r,
                        const double* a, const double* b, double* c) {
  double* ck = c + k * r;
  std::fill(ck, ck + r, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    const double aik = a[i * q + k];
    const double* bi = b + i * r;
    for (std::size_t j = 0; j < r; ++j) ck[j] += aik * bi[j];
  }
}

inline void softmax_row(std::size_t i, std::size_t cols, const double* x, double* y) {
  const double* xi = x + i * cols;
  double* yi = y + i * cols;
  const double mx = *std::max_element(xi, xi + cols);
  double sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    yi[j] = std::exp(xi[j] - mx);
    sum += yi[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < cols; ++j) yi[j] *= inv;
}

inline void layer_norm_row(std::size_t i, std::size_t cols, double eps, const double* x,
                           double* xhat, double* inv_std) {
  const double* xi = x + i * cols;
  double mean = 0.0;
  for (std::size_t j = 0; j < cols; ++j) mean += xi[j];
  mean /= static_cast<double>(cols);
  double var = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    const double d = xi[j] - mean;
    var += d * d;
  }
  var /= static_cast<double>(cols);
  const double is = 1.0 / std::sqrt(var + eps);
  inv_std[i] = is;
  for (std::size_t j = 0; j < cols; ++j) xhat[i * cols + j] = (xi[j] - mean) * is;
}

inline bool worth_parallel(std::size_t work) { return work >= kParallelThreshold; }

}  // namespace

namespace serial {

void gemm_nn(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c) {
  for (std::size_t i = 0; i < p; ++i) gemm_nn_row(i, q, r, a.data(), b.data(), c.data());
}

void gemm_nt(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c) {
  for (std::size_t i = 0; i < p; ++i) gemm_nt_row(i, q, r, a.data(), b.data(), c.data());
}

void gemm_tn(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c) {
  for (std::size_t k = 0; k < q; ++k) gemm_tn_row(k, p, q, r, a.data(), b.data(), c.data());
}

void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> y) {
  for (std::size_t i = 0; i < rows; ++i) softmax_row(i, cols, x.data(), y.data());
}

void layer_norm_rows(std::size_t rows, std::size_t cols, double eps, std::span<const double> x,
                     std::span<double> xhat, std::span<double> inv_std) {
  for (std::size_t i = 0; i < rows; ++i)
    layer_norm_row(i, cols, eps, x.data(), xhat.data(), inv_std.data());
}

}  // namespace serial

namespace omp {

void gemm_nn(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c) {
  const auto rows = static_cast<std::int64_t>(p);
#pragma omp parallel for schedule(static) if (worth_parallel(p * q * r))
  for (std::int64_t i = 0; i < rows; ++i)
    gemm_nn_row(static_cast<std::size_t>(i), q, r, a.data(), b.data(), c.data());
}

void gemm_nt(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c) {
  const auto rows = static_cast<std::int64_t>(p);
#pragma omp parallel for schedule(static) if (worth_parallel(p * q * r))
  for (std::int64_t i = 0; i < rows; ++i)
    gemm_nt_row(static_cast<std::size_t>(i), q, r, a.data(), b.data(), c.data());
}

void gemm_tn(std::size_t p, std::size_t q, std::size_t r, std::span<const double> a,
             std::span<const double> b, std::span<double> c) {
  const auto rows = static_cast<std::int64_t>(q);
#pragma omp parallel for schedule(static) if (worth_parallel(p * q * r))
  for (std::int64_t k = 0; k < rows; ++k)
    gemm_tn_row(static_cast<std::size_t>(k), p, q, r, a.data(), b.data(), c.data());
}

void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> y) {
  const auto n = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (worth_parallel(rows * cols * 8))
  for (std::int64_t i = 0; i < n; ++i)
    softmax_row(static_cast<std::size_t>(i), cols, x.data(), y.data());
}

void layer_norm_rows(std::size_t rows, std::size_t cols, double eps, std::span<const double> x,
                     std::span<double> xhat, std::span<double> inv_std) {
  const auto n = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (worth_parallel(rows * cols * 8))
  for (std::int64_t i = 0; i < n; ++i)
    layer_norm_row(static_cast<std::size_t>(i), cols, eps, x.data(), xhat.data(),
                   inv_std.data());
}

}  // namespace omp

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace conslide::kernels
