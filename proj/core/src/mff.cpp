#include "bda/mff.hpp"

#include <stdexcept>

namespace bda {

namespace {

ConvBlock add_block(ParamStore& ps, const std::string& prefix, int in_c, int out_c, int k,
                    std::uint64_t seed) {
  ConvBlock b;
  b.conv.kernel =
      ps.add(prefix + ".conv.kernel", init_conv_kernel(out_c, in_c, k, seed, prefix + ".conv.kernel"));
  b.conv.bias = ps.add(prefix + ".conv.bias", Tensor::zeros({out_c}));
  b.conv.stride = 1;
  b.conv.padding = k / 2;
  b.norm.gamma = ps.add(prefix + ".norm.gamma", Tensor::full({out_c}, 1.0));
  b.norm.beta = ps.add(prefix + ".norm.beta", Tensor::zeros({out_c}));
  return b;
}

Tensor stream_forward(const Tensor& x, const ConvBlock& b) {
  return relu(group_norm(conv2d(x, b.conv), b.norm));
}

Tensor fuse(const Tensor& image, const Tensor& feat, const ConvBlock& stream,
            const ConvBlock& reduce, int factor) {
  const Shape& is = image.shape();
  if (is.size() != 3 || is[1] % 4 != 0 || is[2] % 4 != 0) {
    throw std::invalid_argument("mff: image extents of " + shape_str(is) +
                                " must divide by 4");
  }
  Tensor s = downsample_avg(image, factor);
  s = stream_forward(s, stream);
  if (s.shape() != feat.shape()) {
    throw std::invalid_argument("mff: stream output " + shape_str(s.shape()) +
                                " does not match encoder feature " + shape_str(feat.shape()));
  }
  Tensor f = concat_channels(feat, s);
  f = stream_forward(f, reduce);
  return f;
}

}  // namespace

MffWeights make_mff_weights(ParamStore& ps, const BackboneConfig& config, std::uint64_t seed) {
  const int e0 = config.encoder_channels[0];
  const int e1 = config.encoder_channels[1];
  MffWeights w;
  w.stream2 = add_block(ps, "mff.stream2", config.input_channels, e0, config.other_kernel, seed);
  w.reduce1 = add_block(ps, "mff.reduce1", 2 * e0, e0, 1, seed);
  w.stream3 = add_block(ps, "mff.stream3", config.input_channels, e1, config.other_kernel, seed);
  w.reduce2 = add_block(ps, "mff.reduce2", 2 * e1, e1, 1, seed);
  return w;
}

Tensor mff_fuse_level1(const Tensor& image, const Tensor& level1_feat, const MffWeights& w) {
  return fuse(image, level1_feat, w.stream2, w.reduce1, 2);
}

Tensor mff_fuse_level2(const Tensor& image, const Tensor& level2_feat, const MffWeights& w) {
  return fuse(image, level2_feat, w.stream3, w.reduce2, 4);
}

std::pair<Tensor, Tensor> mff_forward(const Tensor& image, const Tensor& level1_feat,
                                      const Tensor& level2_feat, const MffWeights& w) {
  return {mff_fuse_level1(image, level1_feat, w), mff_fuse_level2(image, level2_feat, w)};
}

EncoderHook make_mff_hook(const MffWeights& w, Tensor image) {
  return [w, image = std::move(image)](int level, const Tensor& feat) {
    if (level == 0) return mff_fuse_level1(image, feat, w);
    if (level == 1) return mff_fuse_level2(image, feat, w);
    return feat;
  };
}

}  // namespace bda
