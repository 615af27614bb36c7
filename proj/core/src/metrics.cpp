#include "bda/metrics.hpp"

#include <cstdio>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

#include "bda/errors.hpp"

namespace bda {

long ConfusionMatrix::row_sum(int truth) const {
  long n = 0;
  for (long c : counts[static_cast<std::size_t>(truth)]) n += c;
  return n;
}

long ConfusionMatrix::total() const {
  long n = 0;
  for (int t = 0; t < kNumClasses; ++t) n += row_sum(t);
  return n;
}

double ConfusionMatrix::row_percent(int truth, int pred) const {
  const long rs = row_sum(truth);
  if (rs == 0) return 0.0;
  return 100.0 * counts[static_cast<std::size_t>(truth)][static_cast<std::size_t>(pred)] / rs;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  for (int t = 0; t < kNumClasses; ++t) {
    for (int p = 0; p < kNumClasses; ++p) {
      counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)] +=
          o.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
    }
  }
  return *this;
}

double f1_binary(long tp, long fp, long fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw std::invalid_argument("f1_binary: negative count");
  const long denom = 2 * tp + fp + fn;
  if (denom == 0) return 0.0;
  return 2.0 * tp / static_cast<double>(denom);
}

double f1_harmonic(std::span<const double> per_class) {
  if (per_class.empty()) throw std::invalid_argument("f1_harmonic: empty input");
  double inv_sum = 0.0;
  for (double f : per_class) {
    if (f < 0.0 || f > 1.0) throw std::invalid_argument("f1_harmonic: value outside [0,1]");
    if (f == 0.0) return 0.0;
    inv_sum += 1.0 / f;
  }
  return static_cast<double>(per_class.size()) / inv_sum;
}

double overall_score(double f1_b, double f1_d) {
  if (f1_b < 0.0 || f1_b > 1.0 || f1_d < 0.0 || f1_d > 1.0) {
    throw std::invalid_argument("overall_score: inputs outside [0,1]");
  }
  return 0.3 * f1_b + 0.7 * f1_d;
}

void ScoreCounts::accumulate(const ClassMap& pred, const ClassMap& truth,
                             const ClassMap& building_pred, const ClassMap& building_truth) {
  if (pred.h != truth.h || pred.w != truth.w || building_pred.h != truth.h ||
      building_truth.h != truth.h || building_pred.w != truth.w || building_truth.w != truth.w) {
    throw std::invalid_argument("score: map extents differ");
  }
  for (std::size_t i = 0; i < truth.v.size(); ++i) {
    const int t = truth.v[i], p = pred.v[i];
    if (t >= kNumClasses || p >= kNumClasses) {
      throw std::invalid_argument("score: class id out of range at pixel " + std::to_string(i));
    }
    confusion.add(t, p);
    for (int cls = 1; cls < kNumClasses; ++cls) {
      const bool in_t = t == cls, in_p = p == cls;
      if (in_t && in_p) ++tp[static_cast<std::size_t>(cls)];
      if (!in_t && in_p) ++fp[static_cast<std::size_t>(cls)];
      if (in_t && !in_p) ++fn[static_cast<std::size_t>(cls)];
    }
    const bool bt = building_truth.v[i] != 0, bp = building_pred.v[i] != 0;
    if (bt && bp) ++b_tp;
    if (!bt && bp) ++b_fp;
    if (bt && !bp) ++b_fn;
    ++pixels;
  }
}

ScoreCounts& ScoreCounts::operator+=(const ScoreCounts& o) {
  for (int c = 0; c < kNumClasses; ++c) {
    tp[static_cast<std::size_t>(c)] += o.tp[static_cast<std::size_t>(c)];
    fp[static_cast<std::size_t>(c)] += o.fp[static_cast<std::size_t>(c)];
    fn[static_cast<std::size_t>(c)] += o.fn[static_cast<std::size_t>(c)];
  }
  b_tp += o.b_tp;
  b_fp += o.b_fp;
  b_fn += o.b_fn;
  confusion += o.confusion;
  pixels += o.pixels;
  return *this;
}

MetricsReport finalize_scores(const ScoreCounts& counts) {
  MetricsReport r;
  r.confusion = counts.confusion;
  r.pixels = counts.pixels;
  r.f1_b = f1_binary(counts.b_tp, counts.b_fp, counts.b_fn);

  std::vector<double> scored;
  for (int cls = 1; cls < kNumClasses; ++cls) {
    const std::size_t i = static_cast<std::size_t>(cls);
    const bool present = counts.tp[i] + counts.fp[i] + counts.fn[i] > 0;
    r.class_scored[i - 1] = present;
    r.per_class_f1[i - 1] = present ? f1_binary(counts.tp[i], counts.fp[i], counts.fn[i]) : 0.0;
    if (present) {
      scored.push_back(r.per_class_f1[i - 1]);
    } else {
      std::cerr << "[metrics] class C" << cls
                << " absent from truth and prediction; excluded from the harmonic mean\n";
    }
  }
  r.f1_d = scored.empty() ? 0.0 : f1_harmonic(scored);
  r.f1_s = overall_score(r.f1_b, r.f1_d);
  return r;
}

MetricsReport score_predictions(const ClassMap& pred, const ClassMap& truth,
                                const ClassMap& building_pred, const ClassMap& building_truth) {
  ScoreCounts counts;
  counts.accumulate(pred, truth, building_pred, building_truth);
  return finalize_scores(counts);
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["f1_b"] = f1_b;
  j["f1_d"] = f1_d;
  j["f1_s"] = f1_s;
  nlohmann::ordered_json pc;
  for (int c = 0; c < 4; ++c) {
    const std::string key = "C" + std::to_string(c + 1);
    pc[key]["f1"] = per_class_f1[static_cast<std::size_t>(c)];
    pc[key]["scored"] = class_scored[static_cast<std::size_t>(c)];
  }
  j["per_class"] = pc;
  j["pixels"] = pixels;
  nlohmann::ordered_json counts_rows = nlohmann::ordered_json::array();
  nlohmann::ordered_json pct_rows = nlohmann::ordered_json::array();
  for (int t = 0; t < kNumClasses; ++t) {
    nlohmann::ordered_json crow = nlohmann::ordered_json::array();
    nlohmann::ordered_json prow = nlohmann::ordered_json::array();
    for (int p = 0; p < kNumClasses; ++p) {
      crow.push_back(confusion.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)]);
      prow.push_back(confusion.row_percent(t, p));
    }
    counts_rows.push_back(crow);
    pct_rows.push_back(prow);
  }
  j["confusion"]["counts"] = counts_rows;
  j["confusion"]["row_percent"] = pct_rows;
  return j.dump(2) + "\n";
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("metrics report: ") + e.what());
  }
  MetricsReport r;
  try {
    r.f1_b = j.at("f1_b").get<double>();
    r.f1_d = j.at("f1_d").get<double>();
    r.f1_s = j.at("f1_s").get<double>();
    r.pixels = j.at("pixels").get<long>();
    for (int c = 0; c < 4; ++c) {
      const auto& e = j.at("per_class").at("C" + std::to_string(c + 1));
      r.per_class_f1[static_cast<std::size_t>(c)] = e.at("f1").get<double>();
      r.class_scored[static_cast<std::size_t>(c)] = e.at("scored").get<bool>();
    }
    const auto& rows = j.at("confusion").at("counts");
    for (int t = 0; t < kNumClasses; ++t) {
      for (int p = 0; p < kNumClasses; ++p) {
        r.confusion.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)] =
            rows.at(static_cast<std::size_t>(t)).at(static_cast<std::size_t>(p)).get<long>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("metrics report: missing field: ") + e.what());
  }
  return r;
}

std::string confusion_table(const ConfusionMatrix& m) {
  static const char* kNames[kNumClasses] = {"background", "no damage", "minor", "major",
                                            "destroyed"};
  std::ostringstream os;
  os << "confusion (counts | row %)\n";
  char buf[64];
  os << "            ";
  for (int p = 0; p < kNumClasses; ++p) {
    std::snprintf(buf, sizeof(buf), " %16s", kNames[p]);
    os << buf;
  }
  os << '\n';
  for (int t = 0; t < kNumClasses; ++t) {
    std::snprintf(buf, sizeof(buf), "%-12s", kNames[t]);
    os << buf;
    for (int p = 0; p < kNumClasses; ++p) {
      std::snprintf(buf, sizeof(buf), " %9ld | %4.1f",
                    m.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)],
                    m.row_percent(t, p));
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace bda
