#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bda/augment.hpp"
#include "bda/dataset.hpp"
#include "bda/errors.hpp"
#include "bda/gradcheck.hpp"
#include "bda/metrics.hpp"
#include "bda/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct CommonTrainArgs {
  std::string data;
  std::string out = "out";
  std::string config_file;
  std::uint64_t seed = 0;
  int epochs = -1;
  double lr = -1.0;
  int crop = -1;
  int batch = -1;
  std::string widths;
  std::string mff, cutmix, cda, difficult;
  bool seed_set = false;
};

void add_train_options(CLI::App* cmd, CommonTrainArgs& a) {
  cmd->add_option("--data", a.data, "dataset root (contains manifest.tsv)")->required();
  cmd->add_option("--out", a.out, "output directory for checkpoint and loss curve");
  cmd->add_option("--config", a.config_file, "key=value config file");
  cmd->add_option("--seed", a.seed, "training seed");
  cmd->add_option("--epochs", a.epochs, "epoch count override");
  cmd->add_option("--lr", a.lr, "learning rate override");
  cmd->add_option("--crop", a.crop, "training crop extent (multiple of 32)");
  cmd->add_option("--batch", a.batch, "batch size");
  cmd->add_option("--widths", a.widths, "channel preset: desk or paper");
  cmd->add_option("--mff", a.mff, "multi-scale fusion: on|off");
  cmd->add_option("--cda", a.cda, "attention attachments: dconv1,dconv2,dconv3 or none");
  cmd->add_option("--cutmix", a.cutmix, "class-targeted cutmix: on|off");
  cmd->add_option("--difficult-classes", a.difficult, "cutmix source classes, e.g. 2,3");
}

bda::TrainConfig resolve_config(const CLI::App* cmd, const CommonTrainArgs& a,
                                bda::TrainConfig base) {
  if (!a.config_file.empty()) base = bda::TrainConfig::parse_file(a.config_file);
  if (cmd->count("--seed")) base.seed = a.seed;
  if (cmd->count("--epochs")) base.epochs = a.epochs;
  if (cmd->count("--lr")) base.learning_rate = a.lr;
  if (cmd->count("--crop")) base.crop = a.crop;
  if (cmd->count("--batch")) base.batch_size = a.batch;
  if (cmd->count("--widths")) {
    if (a.widths == "desk") {
      base.backbone = bda::BackboneConfig::desk();
    } else if (a.widths == "paper") {
      base.backbone = bda::BackboneConfig::paper();
    } else {
      throw bda::DataError("--widths must be desk or paper");
    }
  }
  const auto on_off = [](const std::string& v, const char* flag) {
    if (v == "on") return true;
    if (v == "off") return false;
    throw bda::DataError(std::string(flag) + " must be on or off");
  };
  if (cmd->count("--mff")) base.flags.mff = on_off(a.mff, "--mff");
  if (cmd->count("--cutmix")) base.flags.cutmix = on_off(a.cutmix, "--cutmix");
  if (cmd->count("--cda")) {
    // reuse the config-file syntax
    base = [&] {
      bda::TrainConfig tmp = base;
      auto parsed = bda::TrainConfig::parse_text("cda=" + a.cda);
      tmp.flags.cda = parsed.flags.cda;
      return tmp;
    }();
  }
  if (cmd->count("--difficult-classes")) {
    auto parsed = bda::TrainConfig::parse_text("difficult_classes=" + a.difficult);
    base.flags.difficult_classes = parsed.flags.difficult_classes;
  }
  return base;
}

int cmd_synth(const std::string& out, int train_n, int test_n, int extent,
              const std::vector<int>& buildings, const std::vector<double>& mix,
              std::uint64_t seed) {
  bda::SynthConfig cfg;
  cfg.extent = extent;
  cfg.seed = seed;
  if (!buildings.empty()) {
    if (buildings.size() != 2) throw bda::DataError("--buildings needs two values: min,max");
    cfg.buildings_min = buildings[0];
    cfg.buildings_max = buildings[1];
  }
  if (!mix.empty()) {
    if (mix.size() != 4) throw bda::DataError("--class-mix needs four values");
    std::copy(mix.begin(), mix.end(), cfg.class_mix.begin());
  }
  cfg.split = "train";
  cfg.num_samples = train_n;
  auto train = bda::synth_generate(fs::path(out) / "train", cfg);
  cfg.split = "test";
  cfg.num_samples = test_n;
  auto test = bda::synth_generate(fs::path(out) / "test", cfg);
  std::cout << "synth: wrote " << train.records.size() << " train and " << test.records.size()
            << " test pairs under " << out << std::endl;
  return kExitOk;
}

int cmd_predict(const std::string& data, const std::string& s1, const std::string& s2,
                const std::string& out) {
  const auto manifest = bda::DatasetManifest::load(data);
  const bda::SegModel seg = bda::load_stage1(s1);
  const bda::DamageModel dmg = bda::load_stage2(s2);
  fs::create_directories(out);
  for (const auto& record : manifest.records) {
    const bda::SamplePair sample = bda::load_sample(manifest, record);
    const bda::InferenceOutputs res = bda::predict(seg, dmg, sample);
    bda::write_label_pgm(fs::path(out) / (record.id + "_damage.pgm"), res.p_final);
    bda::ClassMap mask_vis = res.p_B;
    for (auto& v : mask_vis.v) v = v ? 255 : 0;
    bda::write_label_pgm(fs::path(out) / (record.id + "_building.pgm"), mask_vis);
  }
  std::cout << "predict: wrote maps for " << manifest.records.size() << " samples to " << out
            << std::endl;
  return kExitOk;
}

int cmd_evaluate(const std::string& data, const std::string& s1, const std::string& s2,
                 const std::string& out) {
  const auto manifest = bda::DatasetManifest::load(data);
  const bda::SegModel seg = bda::load_stage1(s1);
  const bda::DamageModel dmg = bda::load_stage2(s2);
  const bda::MetricsReport report = bda::evaluate(manifest, seg, dmg);
  const std::string doc = report.to_json();
  if (out.empty()) {
    std::cout << doc;
  } else {
    bda::atomic_write(out, doc);
  }
  std::printf("evaluate: f1_b %.4f  f1_d %.4f  f1_s %.4f over %ld pixels\n", report.f1_b,
              report.f1_d, report.f1_s, report.pixels);
  return kExitOk;
}

int cmd_gradcheck(int seeds, std::uint64_t seed, double tolerance) {
  const auto results = bda::run_gradient_checks(seeds, seed, tolerance);
  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("%-28s max rel err %.3e  %s\n", r.name.c_str(), r.max_rel_err,
                r.pass ? "ok" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  if (!all_pass) {
    std::cerr << "gradcheck: at least one operation exceeded tolerance " << tolerance << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}

int cmd_report(const std::string& metrics, const std::vector<std::string>& losses,
               const std::string& out) {
  fs::create_directories(out);
  std::string text;
  if (!metrics.empty()) {
    std::ifstream in(metrics);
    if (!in) throw bda::DataError("cannot open metrics report " + metrics);
    std::stringstream ss;
    ss << in.rdbuf();
    const bda::MetricsReport report = bda::MetricsReport::from_json(ss.str());
    bda::atomic_write(fs::path(out) / "metrics.json", report.to_json());
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "f1_b  %.4f\nf1_d  %.4f\nf1_s  %.4f\npixels %ld\n\n", report.f1_b, report.f1_d,
                  report.f1_s, report.pixels);
    text += buf;
    for (int c = 0; c < 4; ++c) {
      std::snprintf(buf, sizeof(buf), "F1 C%d  %.4f%s\n", c + 1, report.per_class_f1[c],
                    report.class_scored[c] ? "" : "  (absent, excluded)");
      text += buf;
    }
    text += "\n" + bda::confusion_table(report.confusion);
  }
  std::vector<std::pair<std::string, std::vector<double>>> series;
  std::string merged = "epoch";
  for (const auto& path : losses) {
    series.emplace_back(fs::path(path).stem().string(), bda::read_loss_csv(path));
    merged += "," + series.back().first;
  }
  if (!series.empty()) {
    merged += "\n";
    std::size_t max_n = 0;
    for (const auto& [name, v] : series) max_n = std::max(max_n, v.size());
    for (std::size_t e = 0; e < max_n; ++e) {
      merged += std::to_string(e);
      for (const auto& [name, v] : series) {
        merged += ",";
        if (e < v.size()) {
          char buf[40];
          std::snprintf(buf, sizeof(buf), "%.17g", v[e]);
          merged += buf;
        }
      }
      merged += "\n";
    }
    bda::atomic_write(fs::path(out) / "loss_curves.csv", merged);
    bda::atomic_write(fs::path(out) / "loss_curves.svg", bda::loss_curves_svg(series));
  }
  if (!text.empty()) {
    bda::atomic_write(fs::path(out) / "report.txt", text);
    std::cout << text;
  }
  std::cout << "report: artifacts written to " << out << std::endl;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage building damage assessment pipeline"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic pre/post dataset");
  std::string synth_out = "data";
  int train_n = 200, test_n = 50, extent = 64;
  std::vector<int> buildings;
  std::vector<double> mix;
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "dataset root to create");
  synth->add_option("--train", train_n, "number of training pairs");
  synth->add_option("--test", test_n, "number of test pairs");
  synth->add_option("--extent", extent, "image extent (multiple of 32)");
  synth->add_option("--buildings", buildings, "min,max buildings per image")->delimiter(',');
  synth->add_option("--class-mix", mix, "C1..C4 building-level shares")->delimiter(',');
  synth->add_option("--seed", synth_seed, "generator seed");

  // train-seg
  auto* tseg = app.add_subcommand("train-seg", "train the stage-1 building segmentation model");
  CommonTrainArgs seg_args;
  add_train_options(tseg, seg_args);

  // train-damage
  auto* tdmg = app.add_subcommand("train-damage", "train the stage-2 damage assessment model");
  CommonTrainArgs dmg_args;
  add_train_options(tdmg, dmg_args);
  std::string stage1_ckpt;
  tdmg->add_option("--stage1-checkpoint", stage1_ckpt,
                   "stage-1 checkpoint used to initialize shared weights");

  // predict
  auto* pred = app.add_subcommand("predict", "write damage and building maps for a dataset");
  std::string p_data, p_s1, p_s2, p_out = "predictions";
  pred->add_option("--data", p_data)->required();
  pred->add_option("--stage1-checkpoint", p_s1)->required();
  pred->add_option("--checkpoint", p_s2, "stage-2 checkpoint")->required();
  pred->add_option("--out", p_out);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "score a dataset and emit the metrics report");
  std::string e_data, e_s1, e_s2, e_out;
  eval->add_option("--data", e_data)->required();
  eval->add_option("--stage1-checkpoint", e_s1)->required();
  eval->add_option("--checkpoint", e_s2, "stage-2 checkpoint")->required();
  eval->add_option("--out", e_out, "report path (stdout when omitted)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every operation");
  int gc_seeds = 10;
  std::uint64_t gc_seed = 0;
  double gc_tol = bda::kGradCheckTolerance;
  gc->add_option("--seeds", gc_seeds, "random seeds per operation");
  gc->add_option("--seed", gc_seed, "base seed");
  gc->add_option("--tolerance", gc_tol, "max relative error");

  // report
  auto* rep = app.add_subcommand("report", "render metrics and loss curves (csv + svg)");
  std::string r_metrics, r_out = "report";
  std::vector<std::string> r_losses;
  rep->add_option("--metrics", r_metrics, "metrics report json (from evaluate)");
  rep->add_option("--losses", r_losses, "loss curve csv (repeatable)")->take_all();
  rep->add_option("--out", r_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) {
      return cmd_synth(synth_out, train_n, test_n, extent, buildings, mix, synth_seed);
    }
    if (*tseg) {
      bda::TrainConfig cfg = resolve_config(tseg, seg_args, bda::TrainConfig::stage1_desk());
      cfg.stage = 1;
      const auto manifest = bda::DatasetManifest::load(seg_args.data);
      const auto result = bda::train_stage1(manifest, cfg, seg_args.out);
      std::cout << "train-seg: checkpoint " << result.checkpoint_path.string() << std::endl;
      return kExitOk;
    }
    if (*tdmg) {
      bda::TrainConfig cfg = resolve_config(tdmg, dmg_args, bda::TrainConfig::stage2_desk());
      cfg.stage = 2;
      const auto manifest = bda::DatasetManifest::load(dmg_args.data);
      std::optional<fs::path> s1;
      if (!stage1_ckpt.empty()) s1 = stage1_ckpt;
      const auto result = bda::train_stage2(manifest, cfg, dmg_args.out, s1);
      std::cout << "train-damage: checkpoint " << result.checkpoint_path.string() << std::endl;
      return kExitOk;
    }
    if (*pred) return cmd_predict(p_data, p_s1, p_s2, p_out);
    if (*eval) return cmd_evaluate(e_data, e_s1, e_s2, e_out);
    if (*gc) return cmd_gradcheck(gc_seeds, gc_seed, gc_tol);
    if (*rep) return cmd_report(r_metrics, r_losses, r_out);
  } catch (const bda::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << std::endl;
    return kExitNumerical;
  } catch (const bda::DataError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitData;
  }
  return kExitOk;
}
