// Serial reference vs OpenMP kernels. Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <vector>

#include "aniscert/kernels.hpp"
#include "aniscert/rng.hpp"

namespace {

using namespace aniscert;

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

template <auto Kernel>
void BM_dense(benchmark::State& state) {
  const kernels::DenseShape s{static_cast<std::size_t>(state.range(0)), 196, 128};
  const auto x = random_vector(s.batch * s.in, 1), w = random_vector(s.out * s.in, 2), b = random_vector(s.out, 3);
  std::vector<double> y(s.batch * s.out);
  for (auto _ : state) {
    Kernel(s, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.batch));
}

template <auto Kernel>
void BM_conv(benchmark::State& state) {
  const kernels::ConvShape s{static_cast<std::size_t>(state.range(0)), 16, 16, 14, 14, 3};
  const auto x = random_vector(s.batch * s.in_channels * 196, 4);
  const auto w = random_vector(s.out_channels * s.in_channels * 9, 5);
  const auto b = random_vector(s.out_channels, 6);
  std::vector<double> y(s.batch * s.out_channels * 196);
  for (auto _ : state) {
    Kernel(s, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.batch));
}

template <auto Kernel>
void BM_superball(benchmark::State& state) {
  const auto samples = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(Kernel(3, 2.0, samples, 17));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(samples));
}

}  // namespace

BENCHMARK(BM_dense<kernels::dense_forward_serial>)->Arg(64)->Arg(1000);
BENCHMARK(BM_dense<kernels::dense_forward_omp>)->Arg(64)->Arg(1000);
BENCHMARK(BM_conv<kernels::conv2d_forward_serial>)->Arg(8)->Arg(64);
BENCHMARK(BM_conv<kernels::conv2d_forward_omp>)->Arg(8)->Arg(64);
BENCHMARK(BM_superball<kernels::superball_hits_serial>)->Arg(1 << 20);
BENCHMARK(BM_superball<kernels::superball_hits_omp>)->Arg(1 << 20);

BENCHMARK_MAIN();
