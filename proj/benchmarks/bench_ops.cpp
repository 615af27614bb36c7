#include <benchmark/benchmark.h>

#include "bda/backbone.hpp"
#include "bda/cda.hpp"
#include "bda/nn_ops.hpp"
#include "bda/rng.hpp"

namespace {

bda::Tensor random_image(int c, int h, int w, std::uint64_t seed) {
  bda::Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(c) * h * w);
  for (double& x : v) x = rng.uniform();
  return bda::Tensor::from_values({c, h, w}, std::move(v));
}

void BM_Conv2dStemForward(benchmark::State& state) {
  bda::NoGradGuard ng;
  const auto x = random_image(3, 64, 64, 1);
  bda::Conv2dParams p{bda::init_conv_kernel(8, 3, 5, 1, "bench.stem"), bda::Tensor::zeros({8}), 2,
                      2};
  for (auto _ : state) {
    benchmark::DoNotOptimize(bda::conv2d(x, p));
  }
}
BENCHMARK(BM_Conv2dStemForward);

void BM_Conv2dBackward(benchmark::State& state) {
  auto x = random_image(8, 32, 32, 2);
  bda::Conv2dParams p{bda::init_conv_kernel(16, 8, 3, 2, "bench.conv"), bda::Tensor::zeros({16}),
                      1, 1};
  p.kernel.set_requires_grad(true);
  p.bias.set_requires_grad(true);
  for (auto _ : state) {
    auto loss = bda::sum(bda::conv2d(x, p));
    benchmark::DoNotOptimize(bda::backward(loss));
  }
}
BENCHMARK(BM_Conv2dBackward);

void BM_CdaForward(benchmark::State& state) {
  bda::NoGradGuard ng;
  const auto a = random_image(64, 16, 16, 3);
  const auto b = random_image(64, 16, 16, 4);
  bda::ParamStore ps;
  const auto w = bda::make_cda_weights(ps, "bench.cda", 64, 5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(bda::cda_forward(a, b, w));
  }
}
BENCHMARK(BM_CdaForward);

void BM_EncoderForwardDesk(benchmark::State& state) {
  bda::NoGradGuard ng;
  const auto model = bda::build(bda::BackboneConfig::desk(), bda::BranchMode::single, 7);
  const auto x = random_image(3, 64, 64, 6);
  for (auto _ : state) {
    benchmark::DoNotOptimize(bda::forward_encoder(model, x));
  }
}
BENCHMARK(BM_EncoderForwardDesk);

}  // namespace

BENCHMARK_MAIN();
