#pragma once

#include <cstdint>
#include <utility>

#include "bda/backbone.hpp"
#include "bda/tensor.hpp"

namespace bda {

// Multi-scale feature fusion: the 0.5x and 0.25x image streams are pushed
// through a conv block and merged into the first two encoder levels with a
// 1x1 reduction back to the level's width.
struct MffWeights {
  ConvBlock stream2;  // 3 -> enc[0], 3x3, operates on the 0.5x image
  ConvBlock reduce1;  // 1x1, 2*enc[0] -> enc[0]
  ConvBlock stream3;  // 3 -> enc[1], 3x3, operates on the 0.25x image
  ConvBlock reduce2;  // 1x1, 2*enc[1] -> enc[1]

  bool defined() const { return stream2.conv.kernel.defined(); }
};

MffWeights make_mff_weights(ParamStore& ps, const BackboneConfig& config, std::uint64_t seed);

Tensor mff_fuse_level1(const Tensor& image, const Tensor& level1_feat, const MffWeights& w);
Tensor mff_fuse_level2(const Tensor& image, const Tensor& level2_feat, const MffWeights& w);

// (fused1, fused2); shapes equal the incoming features.
std::pair<Tensor, Tensor> mff_forward(const Tensor& image, const Tensor& level1_feat,
                                      const Tensor& level2_feat, const MffWeights& w);

// Encoder attachment; levels other than 0 and 1 pass through unchanged.
EncoderHook make_mff_hook(const MffWeights& w, Tensor image);

}  // namespace bda
