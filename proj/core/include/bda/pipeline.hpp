#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bda/augment.hpp"
#include "bda/backbone.hpp"
#include "bda/cda.hpp"
#include "bda/checkpoint.hpp"
#include "bda/dataset.hpp"
#include "bda/metrics.hpp"
#include "bda/mff.hpp"

namespace bda {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  struct Moments {
    std::vector<double> m, v;
  };
  std::unordered_map<std::string, Moments> moments;
  long t = 0;
};

// Standard Adam with bias correction; parameters without a gradient entry
// are skipped. Deterministic: sweeps the store in insertion order.
void adam_step(ParamStore& params, const GradientMap& grads, AdamState& state,
               const AdamConfig& config);

struct TrainFlags {
  bool mff = true;                     // stage-2 multi-scale fusion
  bool mff_stage1 = false;             // override: also build MFF into stage 1
  std::array<bool, 3> cda = {true, true, true};  // attachments at dconv1..3
  bool cutmix = true;
  std::vector<int> difficult_classes = {2, 3};
  double cutmix_probability = 0.5;
  double area_ratio_min = 0.1;
  double area_ratio_max = 0.4;
  bool basic_augment = true;
};

struct TrainConfig {
  int stage = 1;
  double learning_rate = 0.00015;
  int epochs = 20;
  int crop = 64;    // divisible by 32
  int batch_size = 4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  BackboneConfig backbone = BackboneConfig::desk();
  TrainFlags flags;

  // desk defaults; paper-scale values are 0.00015/120 and 0.0002/25 at crop 512
  static TrainConfig stage1_desk();
  static TrainConfig stage2_desk();

  void validate() const;
  std::string serialize() const;                  // key=value lines
  static TrainConfig parse_text(const std::string& text);
  static TrainConfig parse_file(const std::filesystem::path& path);

  AugmentConfig augment_config() const;
  AdamConfig adam_config() const;
};

struct SegModel {
  UNetModel net;
  MffWeights mff;  // defined only when flags.mff_stage1
  TrainConfig config;
};

struct DamageModel {
  UNetModel net;
  MffWeights mff;
  std::array<CdaWeights, 3> cda;
  TrainConfig config;
};

SegModel build_stage1(const TrainConfig& config);
DamageModel build_stage2(const TrainConfig& config);

Tensor stage1_forward(const SegModel& m, const Tensor& image);
Tensor stage2_forward(const DamageModel& m, const Tensor& pre, const Tensor& post);

struct TrainResult {
  std::vector<double> epoch_loss;
  std::filesystem::path checkpoint_path;
  std::filesystem::path loss_curve_path;
};

// Stage 1: pre-image only, binary cross-entropy against the building mask
// (label > 0). Writes <out>/stage1.bdack and <out>/stage1_loss.csv.
TrainResult train_stage1(const DatasetManifest& data, const TrainConfig& config,
                         const std::filesystem::path& out_dir);

// Stage 2: shared-kernel dual branch on (pre, post) with MFF/CDA/CutMix per
// flags, categorical cross-entropy against the full label map. Writes
// <out>/stage2.bdack and <out>/stage2_loss.csv.
TrainResult train_stage2(const DatasetManifest& data, const TrainConfig& config,
                         const std::filesystem::path& out_dir,
                         const std::optional<std::filesystem::path>& stage1_checkpoint);

SegModel load_stage1(const std::filesystem::path& checkpoint);
DamageModel load_stage2(const std::filesystem::path& checkpoint);

struct InferenceOutputs {
  Tensor p_b_logits;  // {1,H,W} stage-1 raw output
  ClassMap p_B;       // 1 exactly where sigmoid(p_b_logits) >= 0.5
  Tensor p_d;         // {5,H,W} softmax class scores
  ClassMap p_final;   // argmax(p_B * p_d); masked pixels resolve to background
};

InferenceOutputs predict(const SegModel& stage1, const DamageModel& stage2,
                         const SamplePair& sample);

// Micro-aggregation: counts are summed across the manifest before the F1s.
MetricsReport evaluate(const DatasetManifest& data, const SegModel& stage1,
                       const DamageModel& stage2);

// --- report artifacts --------------------------------------------------------
void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& epoch_loss);
std::vector<double> read_loss_csv(const std::filesystem::path& path);
std::string loss_curves_svg(
    const std::vector<std::pair<std::string, std::vector<double>>>& series);

}  // namespace bda
