#pragma once

#include <array>
#include <span>
#include <string>

#include "bda/class_map.hpp"

namespace bda {

// 5x5 pixel counts, rows = true class, columns = predicted class.
struct ConfusionMatrix {
  std::array<std::array<long, kNumClasses>, kNumClasses> counts{};

  void add(int truth, int pred, long n = 1) {
    counts[static_cast<std::size_t>(truth)][static_cast<std::size_t>(pred)] += n;
  }
  long row_sum(int truth) const;
  long total() const;
  double row_percent(int truth, int pred) const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
  bool operator==(const ConfusionMatrix&) const = default;
};

struct MetricsReport {
  double f1_b = 0.0;
  std::array<double, 4> per_class_f1{};   // damage levels C1..C4
  std::array<bool, 4> class_scored{};     // false when absent from truth and prediction
  double f1_d = 0.0;
  double f1_s = 0.0;
  ConfusionMatrix confusion;
  long pixels = 0;

  // Key-value JSON document; confusion emitted as counts and row percentages.
  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

// 2TP / (2TP + FP + FN); 0 when the denominator is 0.
double f1_binary(long tp, long fp, long fn);

// n / sum(1/F1_i); 0 if any entry is 0.
double f1_harmonic(std::span<const double> per_class);

// 0.3 * f1_b + 0.7 * f1_d
double overall_score(double f1_b, double f1_d);

// Count accumulator for micro-aggregation across images.
struct ScoreCounts {
  std::array<long, kNumClasses> tp{}, fp{}, fn{};
  long b_tp = 0, b_fp = 0, b_fn = 0;
  ConfusionMatrix confusion;
  long pixels = 0;

  void accumulate(const ClassMap& pred, const ClassMap& truth, const ClassMap& building_pred,
                  const ClassMap& building_truth);
  ScoreCounts& operator+=(const ScoreCounts& o);
};

// Classes absent from both truth and prediction are excluded from the
// harmonic mean (with a notice on stderr).
MetricsReport finalize_scores(const ScoreCounts& counts);

MetricsReport score_predictions(const ClassMap& pred, const ClassMap& truth,
                                const ClassMap& building_pred, const ClassMap& building_truth);

// Plain-text confusion table (counts and row percentages).
std::string confusion_table(const ConfusionMatrix& m);

}  // namespace bda
