#include "bda/backbone.hpp"

#include <cmath>
#include <stdexcept>

#include "bda/rng.hpp"

namespace bda {

void BackboneConfig::validate() const {
  for (int c : encoder_channels) {
    if (c <= 0) throw std::invalid_argument("BackboneConfig: non-positive encoder width");
  }
  for (int c : decoder_channels) {
    if (c <= 0) throw std::invalid_argument("BackboneConfig: non-positive decoder width");
  }
  if (first_kernel < 1 || other_kernel < 1 || input_channels < 1 || stage1_out_channels < 1 ||
      stage2_out_channels < 2) {
    throw std::invalid_argument("BackboneConfig: invalid kernel or channel setting");
  }
}

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  if (has(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  t.set_requires_grad(true);
  index_.emplace(name, items_.size());
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
  return items_[it->second].second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
  return items_[it->second].second;
}

long ParamStore::total_values() const {
  long n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

Tensor init_conv_kernel(int out_c, int in_c, int k, std::uint64_t seed, const std::string& name) {
  Rng rng(mix_seed(seed, fnv1a(name)));
  const double std_dev = std::sqrt(2.0 / (static_cast<double>(in_c) * k * k));
  std::vector<double> v(static_cast<std::size_t>(out_c) * in_c * k * k);
  for (double& x : v) x = rng.normal() * std_dev;
  return Tensor::from_values({out_c, in_c, k, k}, std::move(v));
}

Tensor init_dense_weight(int out_n, int in_n, std::uint64_t seed, const std::string& name) {
  Rng rng(mix_seed(seed, fnv1a(name)));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in_n));
  std::vector<double> v(static_cast<std::size_t>(out_n) * in_n);
  for (double& x : v) x = rng.normal() * std_dev;
  return Tensor::from_values({out_n, in_n}, std::move(v));
}

namespace {

ConvBlock add_conv_block(ParamStore& ps, const std::string& prefix, int in_c, int out_c, int k,
                         int stride, std::uint64_t seed) {
  ConvBlock b;
  b.conv.kernel = ps.add(prefix + ".conv.kernel", init_conv_kernel(out_c, in_c, k, seed, prefix + ".conv.kernel"));
  b.conv.bias = ps.add(prefix + ".conv.bias", Tensor::zeros({out_c}));
  b.conv.stride = stride;
  b.conv.padding = k / 2;
  b.norm.gamma = ps.add(prefix + ".norm.gamma", Tensor::full({out_c}, 1.0));
  b.norm.beta = ps.add(prefix + ".norm.beta", Tensor::zeros({out_c}));
  return b;
}

EncoderBlock add_encoder_block(ParamStore& ps, const std::string& prefix, int in_c, int out_c,
                               int k, std::uint64_t seed) {
  EncoderBlock b;
  b.c1 = add_conv_block(ps, prefix + ".c1", in_c, out_c, k, 2, seed);
  b.c2 = add_conv_block(ps, prefix + ".c2", out_c, out_c, k, 1, seed);
  b.proj.kernel = ps.add(prefix + ".proj.kernel",
                         init_conv_kernel(out_c, in_c, 1, seed, prefix + ".proj.kernel"));
  b.proj.bias = ps.add(prefix + ".proj.bias", Tensor::zeros({out_c}));
  b.proj.stride = 2;
  b.proj.padding = 0;
  return b;
}

}  // namespace

int UNetModel::decoder_width(int level) const {
  const int w = config.decoder_channels[static_cast<std::size_t>(level)];
  return (mode == BranchMode::dual_shared && level < 3) ? 2 * w : w;
}

UNetModel build(const BackboneConfig& config, BranchMode mode, std::uint64_t seed) {
  config.validate();
  UNetModel m;
  m.config = config;
  m.mode = mode;
  m.out_channels =
      mode == BranchMode::single ? config.stage1_out_channels : config.stage2_out_channels;

  const auto& ec = config.encoder_channels;
  m.stem = add_conv_block(m.params, "enc.stem", config.input_channels, ec[0], config.first_kernel,
                          2, seed);
  for (int l = 0; l < 4; ++l) {
    m.enc[l] = add_encoder_block(m.params, "enc.l" + std::to_string(l + 1), ec[l], ec[l + 1],
                                 config.other_kernel, seed);
  }

  // dconv input widths: upsampled previous level plus the encoder skip
  int prev = ec[4];
  for (int l = 0; l < 4; ++l) {
    const int skip = ec[3 - l];
    const int out_w = m.decoder_width(l);
    m.dec[l] = add_conv_block(m.params, "dec.l" + std::to_string(l), prev + skip, out_w,
                              config.other_kernel, 1, seed);
    prev = out_w;
  }

  int head_in = prev;
  if (mode == BranchMode::dual_shared) {
    head_in = 2 * prev;
    m.fuse = add_conv_block(m.params, "fuse", head_in, head_in, config.other_kernel, 1, seed);
  }
  m.head.kernel = m.params.add("head.conv.kernel", init_conv_kernel(m.out_channels, head_in,
                                                                    config.other_kernel, seed,
                                                                    "head.conv.kernel"));
  m.head.bias = m.params.add("head.conv.bias", Tensor::zeros({m.out_channels}));
  m.head.stride = 1;
  m.head.padding = config.other_kernel / 2;
  return m;
}

namespace {

Tensor conv_norm_relu(const Tensor& x, const ConvBlock& b) {
  return relu(group_norm(conv2d(x, b.conv), b.norm));
}

Tensor encoder_block_forward(const Tensor& x, const EncoderBlock& b) {
  Tensor y = conv_norm_relu(x, b.c1);
  y = group_norm(conv2d(y, b.c2.conv), b.c2.norm);
  Tensor s = conv2d(x, b.proj);
  return relu(add(y, s));
}

}  // namespace

std::vector<Tensor> forward_encoder(const UNetModel& m, const Tensor& image,
                                    const EncoderHook& hook) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != m.config.input_channels) {
    throw std::invalid_argument("forward_encoder: expected {" +
                                std::to_string(m.config.input_channels) + ",H,W} image, got " +
                                shape_str(s));
  }
  if (s[1] % 32 != 0 || s[2] % 32 != 0) {
    throw std::invalid_argument("forward_encoder: extents of " + shape_str(s) +
                                " not divisible by 32");
  }
  std::vector<Tensor> feats;
  feats.reserve(5);
  Tensor f = conv_norm_relu(image, m.stem);
  if (hook) f = hook(0, f);
  feats.push_back(f);
  for (int l = 0; l < 4; ++l) {
    f = encoder_block_forward(f, m.enc[l]);
    if (hook) f = hook(l + 1, f);
    feats.push_back(f);
  }
  return feats;
}

namespace {

Tensor decoder_block_forward(const UNetModel& m, int level, const Tensor& below,
                             const Tensor& skip) {
  Tensor f = upsample_nearest(below, 2);
  f = concat_channels(f, skip);  // decoder features first, encoder skip second
  return conv_norm_relu(f, m.dec[level]);
}

void check_feats(const UNetModel& m, const std::vector<Tensor>& feats, const char* who) {
  if (feats.size() != 5) {
    throw std::invalid_argument(std::string(who) + ": expected 5 encoder features, got " +
                                std::to_string(feats.size()));
  }
  for (int i = 0; i < 5; ++i) {
    if (feats[i].shape()[0] != m.config.encoder_channels[static_cast<std::size_t>(i)]) {
      throw std::invalid_argument(std::string(who) + ": feature " + std::to_string(i) +
                                  " has shape " + shape_str(feats[i].shape()) +
                                  ", which does not match the configuration");
    }
  }
}

}  // namespace

Tensor forward_decoder(const UNetModel& m, const std::vector<Tensor>& enc_feats,
                       const DecoderHook& hook) {
  check_feats(m, enc_feats, "forward_decoder");
  Tensor f = enc_feats[4];
  for (int l = 0; l < 4; ++l) {
    f = decoder_block_forward(m, l, f, enc_feats[3 - l]);
    if (hook) f = hook(l, f);
  }
  f = upsample_nearest(f, 2);
  return conv2d(f, m.head);
}

Tensor forward_decoder_dual(const UNetModel& m, const std::vector<Tensor>& pre_feats,
                            const std::vector<Tensor>& post_feats, const DualDecoderHook& hook) {
  if (m.mode != BranchMode::dual_shared) {
    throw std::invalid_argument("forward_decoder_dual: model was built in single mode");
  }
  check_feats(m, pre_feats, "forward_decoder_dual");
  check_feats(m, post_feats, "forward_decoder_dual");
  Tensor a = pre_feats[4];
  Tensor b = post_feats[4];
  for (int l = 0; l < 4; ++l) {
    a = decoder_block_forward(m, l, a, pre_feats[3 - l]);
    b = decoder_block_forward(m, l, b, post_feats[3 - l]);
    if (hook && l < 3) {
      auto [na, nb] = hook(l, a, b);
      a = std::move(na);
      b = std::move(nb);
    }
  }
  Tensor f = concat_channels(a, b);
  f = conv_norm_relu(f, m.fuse);
  f = upsample_nearest(f, 2);
  return conv2d(f, m.head);
}

int transfer_weights(const UNetModel& src, UNetModel& dst) {
  int copied = 0;
  for (const auto& [name, t] : src.params) {
    if (!dst.params.has(name)) continue;
    Tensor& d = dst.params.at(name);
    if (d.shape() != t.shape()) continue;
    auto dv = d.values_mut();
    auto sv = t.values();
    std::copy(sv.begin(), sv.end(), dv.begin());
    ++copied;
  }
  if (copied == 0) {
    throw std::invalid_argument("transfer_weights: no overlapping parameters between models");
  }
  return copied;
}

long param_count(const BackboneConfig& config, BranchMode mode) {
  config.validate();
  const auto conv_block = [](int in_c, int out_c, int k) {
    return static_cast<long>(out_c) * in_c * k * k + out_c  // kernel + bias
           + 2L * out_c;                                    // gamma + beta
  };
  const auto& ec = config.encoder_channels;
  const int k = config.other_kernel;
  long n = conv_block(config.input_channels, ec[0], config.first_kernel);
  for (int l = 0; l < 4; ++l) {
    n += conv_block(ec[l], ec[l + 1], k);           // c1
    n += conv_block(ec[l + 1], ec[l + 1], k);       // c2
    n += static_cast<long>(ec[l + 1]) * ec[l] + ec[l + 1];  // proj
  }
  int prev = ec[4];
  for (int l = 0; l < 4; ++l) {
    int out_w = config.decoder_channels[static_cast<std::size_t>(l)];
    if (mode == BranchMode::dual_shared && l < 3) out_w *= 2;
    n += conv_block(prev + ec[3 - l], out_w, k);
    prev = out_w;
  }
  int head_in = prev;
  int out_c = config.stage1_out_channels;
  if (mode == BranchMode::dual_shared) {
    head_in = 2 * prev;
    out_c = config.stage2_out_channels;
    n += conv_block(head_in, head_in, k);  // fuse
  }
  n += static_cast<long>(out_c) * head_in * k * k + out_c;  // head
  return n;
}

std::vector<Shape> encoder_feature_shapes(const BackboneConfig& config, int h, int w) {
  if (h % 32 != 0 || w % 32 != 0) {
    throw std::invalid_argument("encoder_feature_shapes: extents must divide by 32");
  }
  std::vector<Shape> out;
  for (int i = 0; i < 5; ++i) {
    out.push_back({config.encoder_channels[static_cast<std::size_t>(i)], h >> (i + 1), w >> (i + 1)});
  }
  return out;
}

}  // namespace bda
