// Acceptance suite: runs every pipeline-level criterion and prints one
// PASS/FAIL line per criterion. Exits nonzero if any fail. The first
// argument must be the path to the CLI binary; everything end-to-end goes
// through it.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "bda/augment.hpp"
#include "bda/cda.hpp"
#include "bda/gradcheck.hpp"
#include "bda/metrics.hpp"
#include "bda/pipeline.hpp"
#include "bda/rng.hpp"

namespace fs = std::filesystem;
using namespace bda;

namespace {

struct Criterion {
  bool pass = false;
  std::string detail;
};

std::array<Criterion, 10> g_results;  // 1-based

void record(int n, bool pass, const std::string& detail) {
  g_results[static_cast<std::size_t>(n)] = {pass, detail};
}

std::string g_cli;

int run_cli(const std::string& args) {
  const std::string cmd = g_cli + " " + args + " >/dev/null 2>&1";
  return std::system(cmd.c_str());
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "<missing:" + p.string() + ">";
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor rand_tensor(Shape shape, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_values(std::move(shape), std::move(v));
}

char fmt_buf[512];
std::string fmt(const char* f, auto... args) {
  std::snprintf(fmt_buf, sizeof(fmt_buf), f, args...);
  return fmt_buf;
}

// --- criterion 1: metric fixtures -------------------------------------------

void criterion_metric_fixtures() {
  const std::array<double, 4> ours = {0.925, 0.616, 0.788, 0.876};
  const std::array<double, 4> vanilla = {0.923, 0.578, 0.760, 0.869};
  const double d_ours = f1_harmonic(ours);
  const double s_ours = overall_score(0.864, d_ours);
  const double d_van = f1_harmonic(vanilla);
  const double s_van = overall_score(0.864, d_van);
  const double weber = overall_score(0.840, 0.740);

  const bool pass = std::fabs(d_ours - 0.782) <= 0.001 && std::fabs(s_ours - 0.806) <= 0.001 &&
                    std::fabs(d_van - 0.757) <= 0.001 && std::fabs(s_van - 0.789) <= 0.001 &&
                    std::fabs(weber - 0.770) < 1e-12;
  record(1, pass,
         fmt("f1_d %.4f/%.4f  f1_s %.4f/%.4f  weighted %.4f", d_ours, d_van, s_ours, s_van,
             weber));
}

// --- criterion 2: gradient oracle suite --------------------------------------

void criterion_gradient_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradient_checks(10, 0, 1e-4);
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  bool all = true;
  for (const auto& r : results) {
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_name = r.name;
    }
    all = all && r.pass;
  }
  const bool pass = all && elapsed < 120.0;
  record(2, pass,
         fmt("%zu ops, 10 seeds each, worst %.2e (%s), %.1fs", results.size(), worst,
             worst_name.c_str(), elapsed));
}

// --- criterion 3: CDA algebraic properties -----------------------------------

void criterion_cda_properties() {
  bool pass = true;
  std::string why;

  // zero fixed point, exactly zero
  {
    CdaWeights w;
    w.channel_reduce = {Tensor::zeros({3, 6}), Tensor::zeros({3})};
    w.spatial_conv = {Tensor::zeros({1, 6, 1, 1}), Tensor::zeros({1}), 1, 0};
    const Tensor z({3, 4, 4});
    const CdaOutputs out = cda_forward(z, z, w);
    for (int i = 0; i < z.size(); ++i) {
      if (out.u_pre_spa.at(i) != 0.0 || out.u_post_spa.at(i) != 0.0) {
        pass = false;
        why = "zero fixed point violated";
      }
    }
  }

  // gate boundedness over 1000 random inputs
  long gates_checked = 0;
  for (std::uint64_t s = 0; s < 1000 && pass; ++s) {
    const Tensor a = rand_tensor({3, 3, 3}, 10'000 + s, -4.0, 4.0);
    const Tensor b = rand_tensor({3, 3, 3}, 20'000 + s, -4.0, 4.0);
    ParamStore ps;
    const auto w = make_cda_weights(ps, "c", 3, 30'000 + s);
    const CdaOutputs out = cda_forward(a, b, w);
    for (const Tensor* g : {&out.i_cha, &out.i_spa}) {
      for (int i = 0; i < g->size(); ++i) {
        ++gates_checked;
        if (!(g->at(i) > 0.0 && g->at(i) < 1.0)) {
          pass = false;
          why = "gate outside (0,1)";
        }
      }
    }
  }

  // swap property under block-symmetric weights, to 1e-12
  double worst_swap = 0.0;
  for (std::uint64_t s = 0; s < 20 && pass; ++s) {
    const int e = 4;
    Rng rng(40'000 + s);
    CdaWeights w;
    w.channel_reduce = {Tensor::zeros({e, 2 * e}), Tensor::zeros({e})};
    w.spatial_conv = {Tensor::zeros({1, 2 * e, 1, 1}), Tensor::zeros({1}), 1, 0};
    auto wv = w.channel_reduce.weight.values_mut();
    for (int i = 0; i < e; ++i) {
      for (int j = 0; j < e; ++j) {
        const double v = rng.uniform(-0.5, 0.5);
        wv[static_cast<std::size_t>(i * 2 * e + j)] = v;
        wv[static_cast<std::size_t>(i * 2 * e + e + j)] = v;
      }
    }
    auto kv = w.spatial_conv.kernel.values_mut();
    for (int j = 0; j < e; ++j) {
      const double v = rng.uniform(-0.5, 0.5);
      kv[static_cast<std::size_t>(j)] = v;
      kv[static_cast<std::size_t>(e + j)] = v;
    }
    const Tensor a = rand_tensor({e, 3, 3}, 50'000 + s, -1.0, 1.0);
    const Tensor b = rand_tensor({e, 3, 3}, 60'000 + s, -1.0, 1.0);
    const CdaOutputs ab = cda_forward(a, b, w);
    const CdaOutputs ba = cda_forward(b, a, w);
    for (int i = 0; i < a.size(); ++i) {
      worst_swap = std::max(worst_swap, std::fabs(ab.u_pre_spa.at(i) - ba.u_post_spa.at(i)));
      worst_swap = std::max(worst_swap, std::fabs(ab.u_post_spa.at(i) - ba.u_pre_spa.at(i)));
    }
    if (worst_swap > 1e-12) {
      pass = false;
      why = "swap property violated";
    }
  }

  record(3, pass,
         pass ? fmt("fixed point exact, %ld gates in (0,1), swap dev %.1e", gates_checked,
                    worst_swap)
              : why);
}

// --- criterion 4: CutMix properties ------------------------------------------

SamplePair random_sample(int h, int w, std::uint8_t label, std::uint64_t seed,
                         const std::string& id) {
  Rng rng(seed);
  SamplePair s;
  s.id = id;
  s.pre = Raster8(3, h, w);
  s.post = Raster8(3, h, w);
  s.label = ClassMap(h, w, label);
  for (auto& v : s.pre.v) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  for (auto& v : s.post.v) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return s;
}

void criterion_cutmix_properties() {
  bool pass = true;
  std::string why;
  const SamplePair a = random_sample(24, 24, 1, 1, "a");
  const SamplePair b = random_sample(24, 24, 3, 2, "b");

  // identity masks
  {
    const SamplePair keep = cutmix(a, b, CutMixMask{0, 0, 0, 0});
    const SamplePair take = cutmix(a, b, CutMixMask{0, 0, 24, 24});
    if (!(keep.pre == a.pre && keep.post == a.post && keep.label == a.label)) {
      pass = false;
      why = "empty mask not identity";
    }
    if (!(take.pre == b.pre && take.post == b.post && take.label == b.label)) {
      pass = false;
      why = "full mask not sample b";
    }
  }

  // conservation and histogram oracle over many rectangles
  for (std::uint64_t s = 0; s < 200 && pass; ++s) {
    Rng rng(100 + s);
    CutMixMask m;
    m.height = rng.uniform_int(1, 24);
    m.width = rng.uniform_int(1, 24);
    m.top = rng.uniform_int(0, 24 - m.height);
    m.left = rng.uniform_int(0, 24 - m.width);
    const SamplePair out = cutmix(a, b, m);
    long from_b = 0;
    for (auto v : out.label.v) {
      if (v == 3) ++from_b;
    }
    if (from_b != m.area()) {
      pass = false;
      why = "pixel count not conserved";
    }
    std::array<long, kNumClasses> expect{}, got{};
    for (int r = 0; r < 24; ++r) {
      for (int c = 0; c < 24; ++c) {
        ++expect[(m.contains(r, c) ? b : a).label.at(r, c)];
      }
    }
    for (auto v : out.label.v) ++got[v];
    if (expect != got) {
      pass = false;
      why = "class histogram mismatch";
    }
  }

  // pairwise consistency via planted markers
  for (std::uint64_t s = 0; s < 50 && pass; ++s) {
    Rng rng(300 + s);
    SamplePair src = random_sample(24, 24, 2, 400 + s, "m");
    const int mr = rng.uniform_int(0, 23), mc = rng.uniform_int(0, 23);
    for (int ch = 0; ch < 3; ++ch) {
      src.pre.at(ch, mr, mc) = 255;
      src.post.at(ch, mr, mc) = 254;
    }
    src.label.at(mr, mc) = 4;
    CutMixMask m{mr, mc, 1, 1};  // transplant exactly the marker pixel
    const SamplePair out = cutmix(a, src, m);
    const bool img_ok = out.pre.at(0, mr, mc) == 255 && out.post.at(0, mr, mc) == 254;
    const bool label_ok = out.label.at(mr, mc) == 4;
    if (!img_ok || !label_ok) {
      pass = false;
      why = "marker moved inconsistently";
    }
  }

  record(4, pass, pass ? "identity, conservation, markers, histogram: all exact" : why);
}

// --- criterion 6: weight transfer equality ------------------------------------

void criterion_transfer_equality() {
  const BackboneConfig cfg = BackboneConfig::desk();
  UNetModel s1 = build(cfg, BranchMode::single, 1001);
  UNetModel s2 = build(cfg, BranchMode::dual_shared, 2002);
  transfer_weights(s1, s2);
  NoGradGuard ng;
  bool pass = true;
  for (std::uint64_t s = 0; s < 10 && pass; ++s) {
    const Tensor img = rand_tensor({3, 64, 64}, 70'000 + s, 0.0, 1.0);
    const auto fa = forward_encoder(s1, img);
    const auto fb = forward_encoder(s2, img);  // pre branch shares the encoder
    for (int lvl = 0; lvl < 5; ++lvl) {
      const auto& a = fa[static_cast<std::size_t>(lvl)];
      const auto& b = fb[static_cast<std::size_t>(lvl)];
      for (int i = 0; i < a.size(); ++i) {
        if (a.at(i) != b.at(i)) pass = false;
      }
    }
  }
  record(6, pass, pass ? "10 images, 5 levels each: bitwise equal" : "encoder outputs diverged");
}

// --- criteria 5, 7, 8, 9: end-to-end desk runs --------------------------------

struct E2EPaths {
  fs::path root, data_train, data_test, run, report;
};

int run_e2e(const E2EPaths& p) {
  fs::create_directories(p.root);
  int rc = run_cli("synth --out " + (p.root / "data").string() + " --train 200 --test 50 --extent 64 --seed 7");
  if (rc != 0) return rc;
  rc = run_cli("train-seg --data " + p.data_train.string() + " --out " + p.run.string() + " --seed 7");
  if (rc != 0) return rc;
  rc = run_cli("train-damage --data " + p.data_train.string() + " --out " + p.run.string() +
               " --stage1-checkpoint " + (p.run / "stage1.bdack").string() + " --seed 7");
  if (rc != 0) return rc;
  return run_cli("evaluate --data " + p.data_test.string() + " --stage1-checkpoint " +
                 (p.run / "stage1.bdack").string() + " --checkpoint " +
                 (p.run / "stage2.bdack").string() + " --out " + p.report.string());
}

E2EPaths make_paths(const fs::path& root) {
  return {root, root / "data" / "train", root / "data" / "test", root / "run",
          root / "report.json"};
}

void criteria_end_to_end(const fs::path& work) {
  const E2EPaths a = make_paths(work / "run_a");

  // criterion 7: timed run and thresholds
  const auto t0 = std::chrono::steady_clock::now();
  const int rc = run_e2e(a);
  const double elapsed = seconds_since(t0);
  if (rc != 0) {
    const std::string why = fmt("pipeline exited with %d", rc);
    record(5, false, why);
    record(7, false, why);
    record(8, false, why);
    record(9, false, why);
    return;
  }
  const MetricsReport report = MetricsReport::from_json(file_bytes(a.report));
  const bool pass7 = elapsed < 600.0 && report.f1_b >= 0.80 && report.f1_s >= 0.60;
  record(7, pass7,
         fmt("%.0fs, f1_b %.4f (>=0.80), f1_s %.4f (>=0.60), f1_d %.4f", elapsed, report.f1_b,
             report.f1_s, report.f1_d));

  // criterion 5: mask guiding on the trained model over the test split
  {
    const SegModel seg = load_stage1(a.run / "stage1.bdack");
    const DamageModel dmg = load_stage2(a.run / "stage2.bdack");
    const DatasetManifest test = DatasetManifest::load(a.data_test);
    long violations = 0, masked = 0;
    for (const auto& rec : test.records) {
      const InferenceOutputs out = predict(seg, dmg, load_sample(test, rec));
      for (std::size_t i = 0; i < out.p_final.v.size(); ++i) {
        if (out.p_B.v[i] == 0) {
          ++masked;
          if (out.p_final.v[i] != 0) ++violations;
        }
      }
    }
    record(5, violations == 0,
           fmt("%ld masked pixels, %ld predicted non-background", masked, violations));
  }

  // criterion 8: paired cutmix-off run on the same data and stage-1 checkpoint
  {
    const fs::path off_dir = work / "cutmix_off";
    int rc8 = run_cli("train-damage --data " + a.data_train.string() + " --out " +
                      off_dir.string() + " --stage1-checkpoint " +
                      (a.run / "stage1.bdack").string() + " --seed 7 --cutmix off");
    if (rc8 == 0) {
      rc8 = run_cli("evaluate --data " + a.data_test.string() + " --stage1-checkpoint " +
                    (a.run / "stage1.bdack").string() + " --checkpoint " +
                    (off_dir / "stage2.bdack").string() + " --out " +
                    (off_dir / "report.json").string());
    }
    if (rc8 != 0) {
      record(8, false, fmt("cutmix-off run exited with %d", rc8));
    } else {
      const MetricsReport off = MetricsReport::from_json(file_bytes(off_dir / "report.json"));
      const bool pass8 = report.f1_d >= off.f1_d - 0.02;
      record(8, pass8,
             fmt("f1_d with cutmix %.4f vs without %.4f (allowed drop 0.02)", report.f1_d,
                 off.f1_d));
    }
  }

  // criterion 9: full rerun must be bitwise identical
  {
    const E2EPaths b = make_paths(work / "run_b");
    const int rc9 = run_e2e(b);
    if (rc9 != 0) {
      record(9, false, fmt("second run exited with %d", rc9));
    } else {
      const bool ck1 = file_bytes(a.run / "stage1.bdack") == file_bytes(b.run / "stage1.bdack");
      const bool ck2 = file_bytes(a.run / "stage2.bdack") == file_bytes(b.run / "stage2.bdack");
      const bool rep = file_bytes(a.report) == file_bytes(b.report);
      record(9, ck1 && ck2 && rep,
             fmt("stage1 %s, stage2 %s, report %s", ck1 ? "identical" : "DIFFERS",
                 ck2 ? "identical" : "DIFFERS", rep ? "identical" : "DIFFERS"));
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <path-to-cli>\n";
    return 2;
  }
  g_cli = argv[1];
  const fs::path work = fs::current_path() / "acceptance_work";
  fs::remove_all(work);
  fs::create_directories(work);

  criterion_metric_fixtures();
  criterion_gradient_oracle();
  criterion_cda_properties();
  criterion_cutmix_properties();
  criterion_transfer_equality();
  criteria_end_to_end(work);

  int failures = 0;
  for (int n = 1; n <= 9; ++n) {
    const Criterion& c = g_results[static_cast<std::size_t>(n)];
    std::printf("criterion %d: %s - %s\n", n, c.pass ? "PASS" : "FAIL", c.detail.c_str());
    if (!c.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
