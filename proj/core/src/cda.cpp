#include "bda/cda.hpp"

#include <stdexcept>

namespace bda {

namespace {

void check_pair(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 3) {
    throw std::invalid_argument(std::string(op) + ": branch features must share a {E,h,w} shape, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
}

}  // namespace

CdaWeights make_cda_weights(ParamStore& ps, const std::string& prefix, int width,
                            std::uint64_t seed) {
  CdaWeights w;
  w.channel_reduce.weight = ps.add(
      prefix + ".reduce.weight", init_dense_weight(width, 2 * width, seed, prefix + ".reduce.weight"));
  w.channel_reduce.bias = ps.add(prefix + ".reduce.bias", Tensor::zeros({width}));
  w.spatial_conv.kernel = ps.add(
      prefix + ".spatial.kernel", init_conv_kernel(1, 2 * width, 1, seed, prefix + ".spatial.kernel"));
  w.spatial_conv.bias = ps.add(prefix + ".spatial.bias", Tensor::zeros({1}));
  w.spatial_conv.stride = 1;
  w.spatial_conv.padding = 0;
  return w;
}

Tensor channel_gate(const Tensor& u_pre, const Tensor& u_post, const CdaWeights& w) {
  check_pair("channel_gate", u_pre, u_post);
  const int e = u_pre.shape()[0];
  if (w.channel_reduce.weight.shape() != Shape{e, 2 * e}) {
    throw std::invalid_argument("channel_gate: reduction weight " +
                                shape_str(w.channel_reduce.weight.shape()) +
                                " does not match feature width " + std::to_string(e));
  }
  Tensor pooled = global_avg_pool(concat_channels(u_pre, u_post));  // {2E}
  return sigmoid(dense(pooled, w.channel_reduce));
}

std::pair<Tensor, Tensor> channel_fuse(const Tensor& u_pre, const Tensor& u_post,
                                       const Tensor& i_cha) {
  check_pair("channel_fuse", u_pre, u_post);
  const int e = u_pre.shape()[0];
  if (i_cha.shape() != Shape{e}) {
    throw std::invalid_argument("channel_fuse: gate shape " + shape_str(i_cha.shape()) +
                                " does not match width " + std::to_string(e));
  }
  Tensor gate = reshape(i_cha, {e, 1, 1});
  Tensor pre_out = add(mul(gate, u_post), u_pre);
  Tensor post_out = add(mul(gate, u_pre), u_post);
  return {pre_out, post_out};
}

Tensor spatial_gate(const Tensor& u_pre_cha, const Tensor& u_post_cha, const CdaWeights& w) {
  check_pair("spatial_gate", u_pre_cha, u_post_cha);
  return sigmoid(conv2d(concat_channels(u_pre_cha, u_post_cha), w.spatial_conv));
}

CdaOutputs cda_forward(const Tensor& u_pre, const Tensor& u_post, const CdaWeights& w) {
  CdaOutputs out;
  out.i_cha = channel_gate(u_pre, u_post, w);
  auto [pre_cha, post_cha] = channel_fuse(u_pre, u_post, out.i_cha);
  out.i_spa = spatial_gate(pre_cha, post_cha, w);
  out.u_pre_spa = add(mul(out.i_spa, post_cha), u_pre);
  out.u_post_spa = add(mul(out.i_spa, pre_cha), u_post);
  return out;
}

SeWeights make_se_weights(ParamStore& ps, const std::string& prefix, int width,
                          std::uint64_t seed) {
  SeWeights w;
  w.channel_dense.weight =
      ps.add(prefix + ".cha.weight", init_dense_weight(width, width, seed, prefix + ".cha.weight"));
  w.channel_dense.bias = ps.add(prefix + ".cha.bias", Tensor::zeros({width}));
  w.spatial_conv.kernel =
      ps.add(prefix + ".spa.kernel", init_conv_kernel(1, width, 1, seed, prefix + ".spa.kernel"));
  w.spatial_conv.bias = ps.add(prefix + ".spa.bias", Tensor::zeros({1}));
  w.spatial_conv.stride = 1;
  w.spatial_conv.padding = 0;
  return w;
}

namespace {

Tensor se_channel(const Tensor& u, const SeWeights& w) {
  const int e = u.shape()[0];
  Tensor gate = sigmoid(dense(global_avg_pool(u), w.channel_dense));
  return add(mul(reshape(gate, {e, 1, 1}), u), u);
}

Tensor se_spatial(const Tensor& u, const SeWeights& w) {
  Tensor gate = sigmoid(conv2d(u, w.spatial_conv));
  return add(mul(gate, u), u);
}

}  // namespace

Tensor se_block(const Tensor& u, SeVariant variant, const SeWeights& w) {
  if (u.rank() != 3) {
    throw std::invalid_argument("se_block: expected a {E,h,w} feature map, got " +
                                shape_str(u.shape()));
  }
  switch (variant) {
    case SeVariant::channel:
      return se_channel(u, w);
    case SeVariant::spatial:
      return se_spatial(u, w);
    case SeVariant::both:
      return se_spatial(se_channel(u, w), w);
  }
  throw std::invalid_argument("se_block: unknown variant");
}

}  // namespace bda
