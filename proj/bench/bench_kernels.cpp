// Serial reference kernels against the OpenMP versions on backbone-sized
// activations. Run with OMP_NUM_THREADS set to compare thread counts.

#include <benchmark/benchmark.h>

#include "probgrowth/kernels.hpp"
#include "probgrowth/model.hpp"
#include "probgrowth/rng.hpp"

using namespace probgrowth;
namespace k = probgrowth::kernels;

namespace {

struct ConvFixture {
  k::ConvGeometry g;
  Tensor input, grad_output;
  std::vector<double> weights, bias;

  ConvFixture(int channels, int size, int dims) {
    const Extent e = Extent::cube(dims, size);
    g = {channels, channels, 3, e};
    Rng rng(1);
    input = Tensor(channels, e);
    grad_output = Tensor(channels, e);
    for (auto& x : input.data) x = rng.normal();
    for (auto& x : grad_output.data) x = rng.normal();
    weights.resize(g.weight_count());
    bias.resize(channels);
    for (auto& x : weights) x = 0.1 * rng.normal();
  }
};

template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
  ConvFixture f(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)),
                static_cast<int>(state.range(2)));
  Tensor out;
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::conv_forward(f.g, f.input, f.weights, f.bias, out);
    } else {
      k::reference::conv_forward(f.g, f.input, f.weights, f.bias, out);
    }
    benchmark::DoNotOptimize(out.data.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.g.weight_count()) *
                          static_cast<std::int64_t>(f.g.extent.voxels()));
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& state) {
  ConvFixture f(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)),
                static_cast<int>(state.range(2)));
  std::vector<double> gw(f.weights.size()), gb(f.bias.size());
  Tensor gi;
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::conv_backward(f.g, f.input, f.weights, f.grad_output, gw, gb, gi);
    } else {
      k::reference::conv_backward(f.g, f.input, f.weights, f.grad_output, gw, gb, gi);
    }
    benchmark::DoNotOptimize(gi.data.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(f.g.weight_count()) *
                          static_cast<std::int64_t>(f.g.extent.voxels()));
}

template <bool Parallel>
void BM_AvgPool(benchmark::State& state) {
  ConvFixture f(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)),
                static_cast<int>(state.range(2)));
  Tensor out;
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::avg_pool2_forward(f.input, out);
    } else {
      k::reference::avg_pool2_forward(f.input, out);
    }
    benchmark::DoNotOptimize(out.data.data());
  }
}

void BM_BackboneForward(benchmark::State& state) {
  NetworkConfig cfg;
  cfg.base_channels = 8;
  cfg.depth = 3;
  const ProbUNet net(cfg);
  Rng rng(2);
  Tensor in(cfg.input_channels(), Extent{1, 64, 64});
  for (auto& x : in.data) x = rng.normal();
  const std::vector<double> z(cfg.latent_dim, 0.0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(net.backbone_forward(in, z).class_probabilities.data.data());
  }
}

// channels, spatial size, spatial dims
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({8, 64, 2})->Args({32, 16, 2})->Args({8, 16, 3})->Unit(benchmark::kMicrosecond);
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference")->Apply(conv_args);
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/parallel")->Apply(conv_args);
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/reference")->Apply(conv_args);
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/parallel")->Apply(conv_args);
BENCHMARK(BM_AvgPool<false>)->Name("avg_pool/reference")->Apply(conv_args);
BENCHMARK(BM_AvgPool<true>)->Name("avg_pool/parallel")->Apply(conv_args);
BENCHMARK(BM_BackboneForward)->Name("backbone_forward/64x64")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
