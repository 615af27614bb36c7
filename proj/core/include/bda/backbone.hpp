#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bda/nn_ops.hpp"
#include "bda/tensor.hpp"

namespace bda {

struct BackboneConfig {
  std::array<int, 5> encoder_channels{8, 16, 32, 64, 128};
  std::array<int, 4> decoder_channels{64, 32, 16, 8};
  int first_kernel = 5;
  int other_kernel = 3;
  int input_channels = 3;
  int stage1_out_channels = 1;
  int stage2_out_channels = 5;

  static BackboneConfig desk() { return {}; }
  static BackboneConfig paper() {
    BackboneConfig c;
    c.encoder_channels = {64, 256, 512, 1024, 2048};
    c.decoder_channels = {512, 256, 96, 32};
    return c;
  }

  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

enum class BranchMode { single, dual_shared };

// Ordered, named parameter collection. Iteration order is insertion order,
// which is fixed by construction, so checkpoints and optimizer sweeps are
// deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  std::size_t size() const { return items_.size(); }
  long total_values() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Initializers; each parameter is seeded from (seed, name) so the values do
// not depend on construction order or on which optional modules exist.
Tensor init_conv_kernel(int out_c, int in_c, int k, std::uint64_t seed, const std::string& name);
Tensor init_dense_weight(int out_n, int in_n, std::uint64_t seed, const std::string& name);

struct ConvBlock {
  Conv2dParams conv;
  NormParams norm;
};

// Two 3x3 convolutions with a strided 1x1 projection shortcut.
struct EncoderBlock {
  ConvBlock c1;  // stride 2
  ConvBlock c2;  // stride 1
  Conv2dParams proj;
};

struct UNetModel {
  BackboneConfig config;
  BranchMode mode = BranchMode::single;
  int out_channels = 1;

  ParamStore params;
  ConvBlock stem;
  std::array<EncoderBlock, 4> enc;
  std::array<ConvBlock, 4> dec;
  ConvBlock fuse;       // dual_shared only: after branch concat at dconv4
  Conv2dParams head;

  // dconv widths; in dual_shared mode the first three are doubled.
  int decoder_width(int level) const;
};

UNetModel build(const BackboneConfig& config, BranchMode mode, std::uint64_t seed);

// Called after every encoder level (0 = stem output); may replace the
// feature map (multi-scale fusion attaches here).
using EncoderHook = std::function<Tensor(int level, const Tensor& feat)>;
// Called after decoder levels 0..2 (dconv1..dconv3) on both branch features.
using DualDecoderHook =
    std::function<std::pair<Tensor, Tensor>(int level, const Tensor& a, const Tensor& b)>;
// Single-branch counterpart (ablation blocks attach here).
using DecoderHook = std::function<Tensor(int level, const Tensor& feat)>;

// Five feature maps at strides 2,4,8,16,32. Input extents must divide by 32.
std::vector<Tensor> forward_encoder(const UNetModel& m, const Tensor& image,
                                    const EncoderHook& hook = {});

// Four upsample+concat(skip)+conv blocks, then the head at input resolution.
Tensor forward_decoder(const UNetModel& m, const std::vector<Tensor>& enc_feats,
                       const DecoderHook& hook = {});

// Shared-parameter dual decode: both branches run the same blocks, the hook
// may fuse them at dconv1..3, and the outputs are concatenated at dconv4
// before the 5-channel head.
Tensor forward_decoder_dual(const UNetModel& m, const std::vector<Tensor>& pre_feats,
                            const std::vector<Tensor>& post_feats,
                            const DualDecoderHook& hook = {});

// Copies every parameter whose name and shape match; parameters unique to the
// destination keep their initialization. Returns the number of tensors
// copied; throws if nothing overlaps.
int transfer_weights(const UNetModel& src, UNetModel& dst);

// Pure functions of the configuration.
long param_count(const BackboneConfig& config, BranchMode mode);
std::vector<Shape> encoder_feature_shapes(const BackboneConfig& config, int h, int w);

}  // namespace bda
