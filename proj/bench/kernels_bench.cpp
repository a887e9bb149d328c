#include <benchmark/benchmark.h>

#include "fsens/kernels.hpp"
#include "fsens/rng.hpp"

namespace {

fsens::Matrix random_matrix(std::size_t rows, std::size_t cols) {
  fsens::Rng rng(7);
  fsens::Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = rng.normal();
  }
  return m;
}

void BM_ColumnMeansSerial(benchmark::State& state) {
  const auto m = random_matrix(static_cast<std::size_t>(state.range(0)), 4);
  for (auto _ : state) benchmark::DoNotOptimize(fsens::kernels::serial::column_means(m));
}

void BM_ColumnMeansParallel(benchmark::State& state) {
  const auto m = random_matrix(static_cast<std::size_t>(state.range(0)), 4);
  for (auto _ : state) benchmark::DoNotOptimize(fsens::kernels::column_means(m));
}

void BM_SoftmaxSerial(benchmark::State& state) {
  const auto m = random_matrix(static_cast<std::size_t>(state.range(0)), 4);
  for (auto _ : state) benchmark::DoNotOptimize(fsens::kernels::serial::softmax_rows(m));
}

void BM_SoftmaxParallel(benchmark::State& state) {
  const auto m = random_matrix(static_cast<std::size_t>(state.range(0)), 4);
  for (auto _ : state) benchmark::DoNotOptimize(fsens::kernels::softmax_rows(m));
}

void BM_OffsetArgmaxSerial(benchmark::State& state) {
  const auto m = random_matrix(static_cast<std::size_t>(state.range(0)), 4);
  const auto means = fsens::kernels::serial::column_means(m);
  for (auto _ : state) benchmark::DoNotOptimize(fsens::kernels::serial::offset_argmax(m, means));
}

void BM_OffsetArgmaxParallel(benchmark::State& state) {
  const auto m = random_matrix(static_cast<std::size_t>(state.range(0)), 4);
  const auto means = fsens::kernels::column_means(m);
  for (auto _ : state) benchmark::DoNotOptimize(fsens::kernels::offset_argmax(m, means));
}

}  // namespace

BENCHMARK(BM_ColumnMeansSerial)->Range(1 << 10, 1 << 20);
BENCHMARK(BM_ColumnMeansParallel)->Range(1 << 10, 1 << 20);
BENCHMARK(BM_SoftmaxSerial)->Range(1 << 10, 1 << 20);
BENCHMARK(BM_SoftmaxParallel)->Range(1 << 10, 1 << 20);
BENCHMARK(BM_OffsetArgmaxSerial)->Range(1 << 10, 1 << 20);
BENCHMARK(BM_OffsetArgmaxParallel)->Range(1 << 10, 1 << 20);

BENCHMARK_MAIN();
