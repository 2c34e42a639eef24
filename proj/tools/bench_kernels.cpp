// Serial reference kernels against their OpenMP counterparts.
//
// Sizes follow the shapes the model produces: token rows times channel width
// for the projections, and token-by-token score matrices for attention.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "conslide/kernels.hpp"

namespace {

namespace k = conslide::kernels;

std::vector<double> filled(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

template <auto Kernel>
void gemm(benchmark::State& state) {
  const auto p = static_cast<std::size_t>(state.range(0));
  const auto q = static_cast<std::size_t>(state.range(1));
  const auto r = static_cast<std::size_t>(state.range(2));
  // Kernel shapes differ per layout; size both inputs for the largest case.
  const auto a = filled(p * q + q * r, 1), b = filled(q * r + p * r, 2);
  std::vector<double> c(p * r + q * r);
  for (auto _ : state) {
    Kernel(p, q, r, a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(p * q * r));
}

template <auto Kernel>
void softmax(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = filled(n * n, 3);
  std::vector<double> y(n * n);
  for (auto _ : state) {
    Kernel(n, n, x, y);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}

template <auto Kernel>
void layer_norm(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto cols = static_cast<std::size_t>(state.range(1));
  const auto x = filled(rows * cols, 4);
  std::vector<double> xhat(rows * cols), inv_std(rows);
  for (auto _ : state) {
    Kernel(rows, cols, 1e-5, x, xhat, inv_std);
    benchmark::DoNotOptimize(xhat.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows * cols));
}

void gemm_sizes(benchmark::internal::Benchmark* b) {
  b->Args({64, 16, 16})->Args({256, 64, 64})->Args({512, 128, 128});
}
void square_sizes(benchmark::internal::Benchmark* b) { b->Arg(64)->Arg(256)->Arg(512); }
void row_sizes(benchmark::internal::Benchmark* b) { b->Args({256, 64})->Args({4096, 128}); }

BENCHMARK(gemm<k::serial::gemm_nn>)->Name("gemm_nn/serial")->Apply(gemm_sizes);
BENCHMARK(gemm<k::omp::gemm_nn>)->Name("gemm_nn/omp")->Apply(gemm_sizes);
BENCHMARK(gemm<k::serial::gemm_nt>)->Name("gemm_nt/serial")->Apply(gemm_sizes);
BENCHMARK(gemm<k::omp::gemm_nt>)->Name("gemm_nt/omp")->Apply(gemm_sizes);
BENCHMARK(gemm<k::serial::gemm_tn>)->Name("gemm_tn/serial")->Apply(gemm_sizes);
BENCHMARK(gemm<k::omp::gemm_tn>)->Name("gemm_tn/omp")->Apply(gemm_sizes);
BENCHMARK(softmax<k::serial::softmax_rows>)->Name("softmax_rows/serial")->Apply(square_sizes);
BENCHMARK(softmax<k::omp::softmax_rows>)->Name("softmax_rows/omp")->Apply(square_sizes);
BENCHMARK(layer_norm<k::serial::layer_norm_rows>)->Name("layer_norm_rows/serial")->Apply(row_sizes);
BENCHMARK(layer_norm<k::omp::layer_norm_rows>)->Name("layer_norm_rows/omp")->Apply(row_sizes);

}  // namespace

BENCHMARK_MAIN();
