#pragma once

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonguard/data/dataset.hpp"

namespace poisonguard {

enum class AccuracyMode { clean, poisoned };

/// Percent of predictions equal to the dataset labels. In poisoned mode the
/// labels must already be the attacker's targets, so every sample has to be
/// flagged as poisoned.
inline double accuracy(std::span<const int> preds, const LabeledDataset& ds, AccuracyMode mode) {
  if (preds.size() != ds.size()) {
    throw std::invalid_argument("accuracy: " + std::to_string(preds.size()) + " predictions for " +
                                std::to_string(ds.size()) + " samples");
  }
  if (ds.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
  if (mode == AccuracyMode::poisoned &&
      !std::all_of(ds.poisoned.begin(), ds.poisoned.end(), [](bool b) { return b; })) {
    throw std::invalid_argument("accuracy: poisoned mode needs a fully triggered, relabelled set");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == ds.labels[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(ds.size());
}

/// Detection scores (higher = more anomalous) with ground truth.
struct Scorecard {
  std::vector<double> scores;
  std::vector<bool> is_poisoned;
  std::string method;
  std::string dataset;
  double fraction = 0.0;

  std::size_t positives() const { return static_cast<std::size_t>(std::count(is_poisoned.begin(), is_poisoned.end(), true)); }

  void validate() const {
    if (scores.empty() || scores.size() != is_poisoned.size()) {
      throw std::invalid_argument("scorecard: need equal, non-zero numbers of scores and flags");
    }
    const std::size_t p = positives();
    if (p == 0 || p == scores.size()) throw std::invalid_argument("scorecard: both classes must be present");
    for (double s : scores) {
      if (std::isnan(s)) throw std::domain_error("scorecard: NaN score");
    }
  }
};

/// Point of the descending-threshold sweep: everything scoring >= threshold
/// is flagged.
struct CurvePoint {
  double threshold;
  std::size_t true_pos;
  std::size_t false_pos;
};

/// One point per distinct score, highest threshold first.
inline std::vector<CurvePoint> threshold_sweep(const Scorecard& sc) {
  sc.validate();
  std::vector<std::size_t> order(sc.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sc.scores[a] > sc.scores[b]; });
  std::vector<CurvePoint> pts;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (sc.is_poisoned[order[i]] ? tp : fp) += 1;
    const bool group_end = i + 1 == order.size() || sc.scores[order[i + 1]] != sc.scores[order[i]];
    if (group_end) pts.push_back({sc.scores[order[i]], tp, fp});
  }
  return pts;
}

/// Area under the precision-recall curve (poisoned = positive), step form:
/// sum over thresholds of (recall gain) * precision. Percent.
inline double aupr(const Scorecard& sc) {
  const auto pts = threshold_sweep(sc);
  const long double P = static_cast<long double>(sc.positives());
  long double area = 0, prev_recall = 0;
  for (const auto& pt : pts) {
    const long double recall = pt.true_pos / P;
    const long double precision = static_cast<long double>(pt.true_pos) / (pt.true_pos + pt.false_pos);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return static_cast<double>(100 * area);
}

/// Mann-Whitney estimate of P(score_poisoned > score_clean), ties counted
/// half. Percent.
inline double auroc(const Scorecard& sc) {
  sc.validate();
  const std::size_t n = sc.scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sc.scores[a] < sc.scores[b]; });
  long double rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && sc.scores[order[j]] == sc.scores[order[i]]) ++j;
    const long double mid_rank = (static_cast<long double>(i + 1) + j) / 2;  // 1-based average
    for (std::size_t k = i; k < j; ++k)
      if (sc.is_poisoned[order[k]]) rank_sum += mid_rank;
    i = j;
  }
  const long double P = sc.positives(), N = n - sc.positives();
  return static_cast<double>(100 * (rank_sum - P * (P + 1) / 2) / (P * N));
}

/// CSV threshold,precision,recall,fpr for external plotting.
inline std::string format_curve_csv(const Scorecard& sc) {
  const auto pts = threshold_sweep(sc);
  const double P = static_cast<double>(sc.positives()), N = static_cast<double>(sc.scores.size()) - P;
  std::ostringstream os;
  os << "threshold,precision,recall,fpr\n" << std::setprecision(17);
  for (const auto& pt : pts) {
    os << pt.threshold << ',' << static_cast<double>(pt.true_pos) / (pt.true_pos + pt.false_pos) << ','
       << pt.true_pos / P << ',' << pt.false_pos / N << '\n';
  }
  return os.str();
}

}  // namespace poisonguard
