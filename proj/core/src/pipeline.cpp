#include "bda/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "bda/errors.hpp"
#include "bda/nn_ops.hpp"
#include "bda/rng.hpp"

namespace bda {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// adam
// ---------------------------------------------------------------------------

void adam_step(ParamStore& params, const GradientMap& grads, AdamState& state,
               const AdamConfig& config) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    if (!grads.contains(p)) continue;
    const Tensor& g = grads.at(p);
    if (g.shape() != p.shape()) {
      throw std::invalid_argument("adam_step: gradient shape " + shape_str(g.shape()) +
                                  " does not match parameter " + name);
    }
    auto& mom = state.moments[name];
    if (mom.m.empty()) {
      mom.m.assign(static_cast<std::size_t>(p.size()), 0.0);
      mom.v.assign(static_cast<std::size_t>(p.size()), 0.0);
    }
    auto pv = p.values_mut();
    const auto gv = g.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mom.m[i] = config.beta1 * mom.m[i] + (1.0 - config.beta1) * gv[i];
      mom.v[i] = config.beta2 * mom.v[i] + (1.0 - config.beta2) * gv[i] * gv[i];
      const double m_hat = mom.m[i] / bc1;
      const double v_hat = mom.v[i] / bc2;
      pv[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
      if (!std::isfinite(pv[i])) {
        throw NumericalError("adam_step: parameter " + name + " became non-finite");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

TrainConfig TrainConfig::stage1_desk() {
  TrainConfig c;
  c.stage = 1;
  c.learning_rate = 0.00015;
  c.epochs = 20;
  return c;
}

TrainConfig TrainConfig::stage2_desk() {
  TrainConfig c;
  c.stage = 2;
  c.learning_rate = 0.0002;
  c.epochs = 10;
  return c;
}

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw std::invalid_argument("TrainConfig: stage must be 1 or 2");
  if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: learning rate must be positive");
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: epochs and batch size must be positive");
  if (crop < 32 || crop % 32 != 0) {
    throw std::invalid_argument("TrainConfig: crop " + std::to_string(crop) +
                                " must be a positive multiple of 32");
  }
  backbone.validate();
  augment_config().validate();
}

AugmentConfig TrainConfig::augment_config() const {
  AugmentConfig a;
  a.difficult_classes = flags.difficult_classes;
  a.cutmix_probability = flags.cutmix_probability;
  a.area_ratio_min = flags.area_ratio_min;
  a.area_ratio_max = flags.area_ratio_max;
  a.seed = seed;
  return a;
}

AdamConfig TrainConfig::adam_config() const { return {learning_rate, beta1, beta2, adam_eps}; }

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<int> split_ints(const std::string& s, const std::string& key) {
  std::vector<int> out;
  if (s.empty()) return out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw DataError("config: cannot parse integer list for " + key + ": '" + s + "'");
    }
  }
  return out;
}

std::string on_off(bool b) { return b ? "on" : "off"; }

bool parse_on_off(const std::string& v, const std::string& key) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw DataError("config: " + key + " must be on or off, got '" + v + "'");
}

std::string cda_to_string(const std::array<bool, 3>& cda) {
  std::string s;
  for (int l = 0; l < 3; ++l) {
    if (!cda[static_cast<std::size_t>(l)]) continue;
    if (!s.empty()) s += ',';
    s += "dconv" + std::to_string(l + 1);
  }
  return s.empty() ? "none" : s;
}

std::array<bool, 3> cda_from_string(const std::string& s) {
  std::array<bool, 3> out{false, false, false};
  if (s == "none" || s.empty()) return out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    if (tok == "dconv1") {
      out[0] = true;
    } else if (tok == "dconv2") {
      out[1] = true;
    } else if (tok == "dconv3") {
      out[2] = true;
    } else {
      throw DataError("config: unknown cda attachment '" + tok +
                      "' (expected dconv1, dconv2, dconv3 or none)");
    }
  }
  return out;
}

}  // namespace

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  os << "stage=" << stage << '\n';
  os << "learning_rate=" << fmt_double(learning_rate) << '\n';
  os << "epochs=" << epochs << '\n';
  os << "crop=" << crop << '\n';
  os << "batch_size=" << batch_size << '\n';
  os << "beta1=" << fmt_double(beta1) << '\n';
  os << "beta2=" << fmt_double(beta2) << '\n';
  os << "adam_eps=" << fmt_double(adam_eps) << '\n';
  os << "seed=" << seed << '\n';
  os << "encoder_channels="
     << join_ints({backbone.encoder_channels.begin(), backbone.encoder_channels.end()}) << '\n';
  os << "decoder_channels="
     << join_ints({backbone.decoder_channels.begin(), backbone.decoder_channels.end()}) << '\n';
  os << "first_kernel=" << backbone.first_kernel << '\n';
  os << "other_kernel=" << backbone.other_kernel << '\n';
  os << "mff=" << on_off(flags.mff) << '\n';
  os << "mff_stage1=" << on_off(flags.mff_stage1) << '\n';
  os << "cda=" << cda_to_string(flags.cda) << '\n';
  os << "cutmix=" << on_off(flags.cutmix) << '\n';
  os << "cutmix_probability=" << fmt_double(flags.cutmix_probability) << '\n';
  os << "difficult_classes=" << join_ints(flags.difficult_classes) << '\n';
  os << "area_ratio_min=" << fmt_double(flags.area_ratio_min) << '\n';
  os << "area_ratio_max=" << fmt_double(flags.area_ratio_max) << '\n';
  os << "basic_augment=" << on_off(flags.basic_augment) << '\n';
  return os.str();
}

TrainConfig TrainConfig::parse_text(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError("config line " + std::to_string(line_no) + ": expected key=value, got '" +
                      line + "'");
    }
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "stage") {
        c.stage = std::stoi(value);
      } else if (key == "learning_rate") {
        c.learning_rate = std::stod(value);
      } else if (key == "epochs") {
        c.epochs = std::stoi(value);
      } else if (key == "crop") {
        c.crop = std::stoi(value);
      } else if (key == "batch_size") {
        c.batch_size = std::stoi(value);
      } else if (key == "beta1") {
        c.beta1 = std::stod(value);
      } else if (key == "beta2") {
        c.beta2 = std::stod(value);
      } else if (key == "adam_eps") {
        c.adam_eps = std::stod(value);
      } else if (key == "seed") {
        c.seed = std::stoull(value);
      } else if (key == "widths") {
        if (value == "desk") {
          c.backbone = BackboneConfig::desk();
        } else if (value == "paper") {
          c.backbone = BackboneConfig::paper();
        } else {
          throw DataError("config: widths must be desk or paper");
        }
      } else if (key == "encoder_channels") {
        const auto v = split_ints(value, key);
        if (v.size() != 5) throw DataError("config: encoder_channels needs 5 entries");
        std::copy(v.begin(), v.end(), c.backbone.encoder_channels.begin());
      } else if (key == "decoder_channels") {
        const auto v = split_ints(value, key);
        if (v.size() != 4) throw DataError("config: decoder_channels needs 4 entries");
        std::copy(v.begin(), v.end(), c.backbone.decoder_channels.begin());
      } else if (key == "first_kernel") {
        c.backbone.first_kernel = std::stoi(value);
      } else if (key == "other_kernel") {
        c.backbone.other_kernel = std::stoi(value);
      } else if (key == "mff") {
        c.flags.mff = parse_on_off(value, key);
      } else if (key == "mff_stage1") {
        c.flags.mff_stage1 = parse_on_off(value, key);
      } else if (key == "cda") {
        c.flags.cda = cda_from_string(value);
      } else if (key == "cutmix") {
        c.flags.cutmix = parse_on_off(value, key);
      } else if (key == "cutmix_probability") {
        c.flags.cutmix_probability = std::stod(value);
      } else if (key == "difficult_classes") {
        c.flags.difficult_classes = split_ints(value, key);
      } else if (key == "area_ratio_min") {
        c.flags.area_ratio_min = std::stod(value);
      } else if (key == "area_ratio_max") {
        c.flags.area_ratio_max = std::stod(value);
      } else if (key == "basic_augment") {
        c.flags.basic_augment = parse_on_off(value, key);
      } else {
        throw DataError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
      }
    } catch (const DataError&) {
      throw;
    } catch (const std::exception&) {
      throw DataError("config line " + std::to_string(line_no) + ": cannot parse value '" +
                      value + "' for key '" + key + "'");
    }
  }
  return c;
}

TrainConfig TrainConfig::parse_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str());
}

// ---------------------------------------------------------------------------
// models
// ---------------------------------------------------------------------------

SegModel build_stage1(const TrainConfig& config) {
  config.validate();
  SegModel m{build(config.backbone, BranchMode::single, config.seed), {}, config};
  if (config.flags.mff_stage1) {
    m.mff = make_mff_weights(m.net.params, config.backbone, config.seed);
  }
  return m;
}

DamageModel build_stage2(const TrainConfig& config) {
  config.validate();
  DamageModel m{build(config.backbone, BranchMode::dual_shared, config.seed), {}, {}, config};
  m.mff = make_mff_weights(m.net.params, config.backbone, config.seed);
  for (int l = 0; l < 3; ++l) {
    m.cda[static_cast<std::size_t>(l)] = make_cda_weights(
        m.net.params, "cda.dconv" + std::to_string(l + 1), m.net.decoder_width(l), config.seed);
  }
  return m;
}

Tensor stage1_forward(const SegModel& m, const Tensor& image) {
  EncoderHook hook;
  if (m.config.flags.mff_stage1 && m.mff.defined()) hook = make_mff_hook(m.mff, image);
  return forward_decoder(m.net, forward_encoder(m.net, image, hook));
}

Tensor stage2_forward(const DamageModel& m, const Tensor& pre, const Tensor& post) {
  EncoderHook pre_hook, post_hook;
  if (m.config.flags.mff) {
    pre_hook = make_mff_hook(m.mff, pre);
    post_hook = make_mff_hook(m.mff, post);
  }
  const auto pre_feats = forward_encoder(m.net, pre, pre_hook);
  const auto post_feats = forward_encoder(m.net, post, post_hook);

  DualDecoderHook dual;
  const auto& cda_on = m.config.flags.cda;
  if (cda_on[0] || cda_on[1] || cda_on[2]) {
    dual = [&m, &cda_on](int level, const Tensor& a, const Tensor& b) {
      if (!cda_on[static_cast<std::size_t>(level)]) return std::pair<Tensor, Tensor>{a, b};
      CdaOutputs out = cda_forward(a, b, m.cda[static_cast<std::size_t>(level)]);
      return std::pair<Tensor, Tensor>{out.u_pre_spa, out.u_post_spa};
    };
  }
  return forward_decoder_dual(m.net, pre_feats, post_feats, dual);
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

namespace {

void seeded_shuffle(std::vector<int>& v, Rng& rng) {
  for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
    std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  }
}

Tensor batch_mean_loss(std::vector<Tensor> losses) {
  Tensor total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  return scale(total, 1.0 / static_cast<double>(losses.size()));
}

CheckpointMeta make_meta(const TrainConfig& config, int epoch) {
  CheckpointMeta meta;
  meta.stage = static_cast<std::uint32_t>(config.stage);
  meta.epoch = static_cast<std::uint32_t>(epoch);
  meta.seed = config.seed;
  meta.config_text = config.serialize();
  return meta;
}

template <typename StepFn>
std::vector<double> run_epochs(const SampleDataset& dataset, const TrainConfig& config,
                               const char* stage_name, const StepFn& sample_loss) {
  if (dataset.size() == 0) throw DataError(std::string(stage_name) + ": dataset is empty");
  AdamState state;
  const AdamConfig adam = config.adam_config();
  std::vector<double> epoch_losses;
  std::vector<int> order(static_cast<std::size_t>(dataset.size()));
  for (int i = 0; i < dataset.size(); ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)),
                             fnv1a("shuffle")));
    seeded_shuffle(order, shuffle_rng);
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<Tensor> losses;
      losses.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const int idx = order[k];
        Rng rng(mix_seed(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)),
                         static_cast<std::uint64_t>(idx)));
        try {
          losses.push_back(sample_loss(idx, rng));
        } catch (const NumericalError& e) {
          throw NumericalError(std::string(stage_name) + " epoch " + std::to_string(epoch) +
                               " sample " + std::to_string(idx) + ": " + e.what());
        }
      }
      Tensor loss = batch_mean_loss(std::move(losses));
      const GradientMap grads = backward(loss);
      loss_sum += loss.item();
      ++steps;
      sample_loss.apply_update(grads, state, adam, stage_name, epoch);
    }
    epoch_losses.push_back(loss_sum / steps);
    std::cout << stage_name << " epoch " << epoch << " loss " << epoch_losses.back() << std::endl;
  }
  return epoch_losses;
}

}  // namespace

TrainResult train_stage1(const DatasetManifest& data, const TrainConfig& config,
                         const fs::path& out_dir) {
  config.validate();
  if (config.stage != 1) throw std::invalid_argument("train_stage1: config.stage must be 1");
  SampleDataset dataset(data);
  SegModel model = build_stage1(config);

  struct Step {
    const SampleDataset& dataset;
    SegModel& model;
    const TrainConfig& config;
    Tensor operator()(int idx, Rng& rng) const {
      SamplePair s = random_crop(dataset.sample(idx), config.crop, rng);
      if (config.flags.basic_augment) s = basic_augment(s, rng);
      const Tensor x = to_tensor(s.pre);  // post image never read in stage 1
      const Tensor target = building_mask_tensor(s.label);
      const Tensor pred = sigmoid(stage1_forward(model, x));
      return binary_cross_entropy(pred, target);
    }
    void apply_update(const GradientMap& grads, AdamState& state, const AdamConfig& adam,
                      const char* stage_name, int epoch) const {
      try {
        adam_step(model.net.params, grads, state, adam);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(stage_name) + " epoch " + std::to_string(epoch) + ": " +
                             e.what());
      }
    }
  };

  Step step{dataset, model, config};
  TrainResult result;
  result.epoch_loss = run_epochs(dataset, config, "stage1", step);

  fs::create_directories(out_dir);
  result.checkpoint_path = out_dir / "stage1.bdack";
  save_checkpoint(result.checkpoint_path, model.net.params, make_meta(config, config.epochs - 1));
  result.loss_curve_path = out_dir / "stage1_loss.csv";
  write_loss_csv(result.loss_curve_path, result.epoch_loss);
  return result;
}

TrainResult train_stage2(const DatasetManifest& data, const TrainConfig& config,
                         const fs::path& out_dir,
                         const std::optional<fs::path>& stage1_checkpoint) {
  config.validate();
  if (config.stage != 2) throw std::invalid_argument("train_stage2: config.stage must be 2");
  SampleDataset dataset(data);
  DamageModel model = build_stage2(config);
  if (stage1_checkpoint) {
    SegModel donor = load_stage1(*stage1_checkpoint);
    if (!(donor.config.backbone == config.backbone)) {
      throw DataError(stage1_checkpoint->string() +
                      ": backbone configuration differs from the stage-2 model; refusing a "
                      "partial transfer");
    }
    const int copied = transfer_weights(donor.net, model.net);
    std::cout << "stage2: transferred " << copied << " parameter tensors from "
              << stage1_checkpoint->string() << std::endl;
  }

  struct Step {
    const SampleDataset& dataset;
    DamageModel& model;
    const TrainConfig& config;
    AugmentConfig aug;
    mutable bool cutmix_available = true;

    Tensor operator()(int idx, Rng& rng) const {
      SamplePair s = random_crop(dataset.sample(idx), config.crop, rng);
      if (config.flags.basic_augment) s = basic_augment(s, rng);
      if (config.flags.cutmix && cutmix_available && rng.bernoulli(aug.cutmix_probability)) {
        auto source = sample_difficult_source(dataset, aug, rng, config.crop);
        if (source) {
          s = cutmix(s, source->sample, source->mask);
        } else {
          cutmix_available = false;
          std::cerr << "[stage2] no sample contains a difficult class; CutMix disabled\n";
        }
      }
      const Tensor logits = stage2_forward(model, to_tensor(s.pre), to_tensor(s.post));
      return categorical_cross_entropy(logits, s.label);
    }
    void apply_update(const GradientMap& grads, AdamState& state, const AdamConfig& adam,
                      const char* stage_name, int epoch) const {
      try {
        adam_step(model.net.params, grads, state, adam);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(stage_name) + " epoch " + std::to_string(epoch) + ": " +
                             e.what());
      }
    }
  };

  Step step{dataset, model, config, config.augment_config()};
  TrainResult result;
  result.epoch_loss = run_epochs(dataset, config, "stage2", step);

  fs::create_directories(out_dir);
  result.checkpoint_path = out_dir / "stage2.bdack";
  save_checkpoint(result.checkpoint_path, model.net.params, make_meta(config, config.epochs - 1));
  result.loss_curve_path = out_dir / "stage2_loss.csv";
  write_loss_csv(result.loss_curve_path, result.epoch_loss);
  return result;
}

SegModel load_stage1(const fs::path& checkpoint) {
  LoadedCheckpoint ck = read_checkpoint(checkpoint);
  TrainConfig config = TrainConfig::parse_text(ck.meta.config_text);
  if (config.stage != 1) {
    throw DataError(checkpoint.string() + ": holds a stage-" + std::to_string(config.stage) +
                    " model, expected stage 1");
  }
  SegModel m = build_stage1(config);
  apply_checkpoint(ck, m.net.params);
  return m;
}

DamageModel load_stage2(const fs::path& checkpoint) {
  LoadedCheckpoint ck = read_checkpoint(checkpoint);
  TrainConfig config = TrainConfig::parse_text(ck.meta.config_text);
  if (config.stage != 2) {
    throw DataError(checkpoint.string() + ": holds a stage-" + std::to_string(config.stage) +
                    " model, expected stage 2");
  }
  DamageModel m = build_stage2(config);
  apply_checkpoint(ck, m.net.params);
  return m;
}

// ---------------------------------------------------------------------------
// inference and evaluation
// ---------------------------------------------------------------------------

InferenceOutputs predict(const SegModel& stage1, const DamageModel& stage2,
                         const SamplePair& sample) {
  NoGradGuard ng;
  validate_sample(sample);
  const int h = sample.pre.h, w = sample.pre.w;

  InferenceOutputs out;
  const Tensor x_pre = to_tensor(sample.pre);
  out.p_b_logits = stage1_forward(stage1, x_pre);
  const Tensor sig = sigmoid(out.p_b_logits);
  out.p_B = ClassMap(h, w);
  for (std::size_t i = 0; i < out.p_B.v.size(); ++i) {
    out.p_B.v[i] = sig.values()[i] >= 0.5 ? 1 : 0;
  }

  const Tensor logits = stage2_forward(stage2, x_pre, to_tensor(sample.post));
  out.p_d = softmax_channels(logits);

  out.p_final = ClassMap(h, w);
  const auto scores = out.p_d.values();
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < hw; ++i) {
    if (out.p_B.v[i] == 0) {
      out.p_final.v[i] = kBackground;  // masked: every channel is zeroed
      continue;
    }
    int best = 0;
    double best_score = scores[i];
    for (int c = 1; c < kNumClasses; ++c) {
      const double sc = scores[static_cast<std::size_t>(c) * hw + i];
      if (sc > best_score) {
        best_score = sc;
        best = c;
      }
    }
    out.p_final.v[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

MetricsReport evaluate(const DatasetManifest& data, const SegModel& stage1,
                       const DamageModel& stage2) {
  if (data.records.empty()) throw DataError("evaluate: dataset is empty");
  ScoreCounts total;
  for (const auto& record : data.records) {
    const SamplePair sample = load_sample(data, record);
    const InferenceOutputs out = predict(stage1, stage2, sample);
    ClassMap building_truth(sample.label.h, sample.label.w);
    for (std::size_t i = 0; i < sample.label.v.size(); ++i) {
      building_truth.v[i] = sample.label.v[i] > 0 ? 1 : 0;
    }
    total.accumulate(out.p_final, sample.label, out.p_B, building_truth);
  }
  return finalize_scores(total);
}

}  // namespace bda
