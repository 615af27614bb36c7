#pragma once

#include "bda/class_map.hpp"
#include "bda/tensor.hpp"

namespace bda {

struct Conv2dParams {
  Tensor kernel;  // {outC, inC, k, k}
  Tensor bias;    // {outC}
  int stride = 1;
  int padding = 0;

  bool defined() const { return kernel.defined(); }
  int out_channels() const { return kernel.shape()[0]; }
  int in_channels() const { return kernel.shape()[1]; }
  int kernel_size() const { return kernel.shape()[2]; }
};

struct DenseParams {
  Tensor weight;  // {out, in}
  Tensor bias;    // {out}
};

// Per-channel affine over a whole-map normalization (group norm, one group).
// Deterministic at batch size 1; no running statistics.
struct NormParams {
  Tensor gamma;  // {C}
  Tensor beta;   // {C}
};

// floor((in + 2*padding - k)/stride) + 1
int conv_output_extent(int in, int k, int stride, int padding);

// Cross-correlation with zero padding; gradients for input, kernel and bias.
Tensor conv2d(const Tensor& x, const Conv2dParams& p);

// {C,h,w} -> {C}: per-channel mean.
Tensor global_avg_pool(const Tensor& x);

// Non-overlapping factor x factor mean pooling; factor in {2,4};
// extents must divide evenly.
Tensor downsample_avg(const Tensor& x, int factor);

// Each pixel replicated factor x factor.
Tensor upsample_nearest(const Tensor& x, int factor = 2);

// {in} -> {out}: weight . x + bias
Tensor dense(const Tensor& x, const DenseParams& p);

Tensor group_norm(const Tensor& x, const NormParams& p, double eps = 1e-5);

enum class Reduction { mean, sum };

inline constexpr double kProbClampEps = 1e-7;

// pred, target: {1,h,w}; target values must be exactly 0 or 1.
// Predictions are clamped to [eps, 1-eps] before the logs.
Tensor binary_cross_entropy(const Tensor& pred, const Tensor& target,
                            Reduction reduction = Reduction::mean);

// logits: {C,h,w}, C >= 2; target: class ids in [0, C).
// Mean over pixels of -log softmax(logits)[target], computed with
// max-subtraction.
Tensor categorical_cross_entropy(const Tensor& logits, const ClassMap& target);

}  // namespace bda
