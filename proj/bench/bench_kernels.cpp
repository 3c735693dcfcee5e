// Convolution throughput of the im2col/GEMM kernels against the direct-loop
// reference, at desk-scale layer sizes.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "afvae/kernels.hpp"

using namespace afvae;

namespace {

struct ConvCase {
  Tensor x, w;
  std::vector<double> b;
  kernels::ConvParams p;
};

ConvCase make_case(const benchmark::State& state) {
  const int batch = 4, channels = static_cast<int>(state.range(0)), side = static_cast<int>(state.range(1));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  ConvCase c{Tensor(Shape{batch, channels, side, side}), Tensor(Shape{2 * channels, channels, 4, 4}),
             std::vector<double>(2 * channels, 0.1), {2, 1}};
  for (double& v : c.x.vec()) v = g(rng);
  for (double& v : c.w.vec()) v = 0.1 * g(rng);
  return c;
}

void BM_Conv2d(benchmark::State& state) {
  const auto c = make_case(state);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d(c.x, c.w, c.b, c.p));
}

void BM_Conv2dReference(benchmark::State& state) {
  const auto c = make_case(state);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::reference::conv2d(c.x, c.w, c.b, c.p));
}

void BM_PixelShuffle(benchmark::State& state) {
  Tensor x(Shape{4, static_cast<int>(state.range(0)) * 4, 16, 16}, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::pixel_shuffle(x, 2));
}

}  // namespace

BENCHMARK(BM_Conv2d)->Args({32, 64})->Args({64, 32})->Args({128, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv2dReference)->Args({32, 64})->Args({64, 32})->Args({128, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PixelShuffle)->Arg(32)->Arg(128);
BENCHMARK_MAIN();
