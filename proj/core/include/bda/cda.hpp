#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "bda/backbone.hpp"
#include "bda/tensor.hpp"

namespace bda {

// Cross-directional attention over a pair of {E,h,w} branch features:
// a channel gate computed from both branches scales the *other* branch into
// each residual, then a spatial gate does the same at pixel granularity.
struct CdaWeights {
  DenseParams channel_reduce;  // 2E -> E
  Conv2dParams spatial_conv;   // 1x1, 2E -> 1
};

struct CdaOutputs {
  Tensor u_pre_spa;   // {E,h,w}
  Tensor u_post_spa;  // {E,h,w}
  Tensor i_cha;       // {E}, gate values in (0,1)
  Tensor i_spa;       // {1,h,w}, gate values in (0,1)
};

CdaWeights make_cda_weights(ParamStore& ps, const std::string& prefix, int width,
                            std::uint64_t seed);

// I_cha = sigmoid(reduce(gap(concat(u_pre, u_post)))), length E.
Tensor channel_gate(const Tensor& u_pre, const Tensor& u_post, const CdaWeights& w);

// u_pre_cha = i_cha * u_post + u_pre; u_post_cha = i_cha * u_pre + u_post.
std::pair<Tensor, Tensor> channel_fuse(const Tensor& u_pre, const Tensor& u_post,
                                       const Tensor& i_cha);

// I_spa = sigmoid(conv1x1(concat(u_pre_cha, u_post_cha))), {1,h,w}.
Tensor spatial_gate(const Tensor& u_pre_cha, const Tensor& u_post_cha, const CdaWeights& w);

// Full composition; the final residuals add the *original* inputs:
// u_pre_spa = I_spa . u_post_cha + u_pre, u_post_spa = I_spa . u_pre_cha + u_post.
CdaOutputs cda_forward(const Tensor& u_pre, const Tensor& u_post, const CdaWeights& w);

// Single-stream squeeze-excitation blocks, kept as the ablation counterpart
// of CDA. Form (documented, tests hand-evaluate it):
//   channel: out = sigmoid(dense_ExE(gap(u))) * u + u
//   spatial: out = sigmoid(conv1x1_E->1(u)) * u + u
//   both:    spatial applied to the channel output
enum class SeVariant { channel, spatial, both };

struct SeWeights {
  DenseParams channel_dense;  // E -> E
  Conv2dParams spatial_conv;  // 1x1, E -> 1
};

SeWeights make_se_weights(ParamStore& ps, const std::string& prefix, int width,
                          std::uint64_t seed);

Tensor se_block(const Tensor& u, SeVariant variant, const SeWeights& w);

}  // namespace bda
