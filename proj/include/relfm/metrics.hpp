#pragma once

// Binary classification metrics.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "relfm/error.hpp"

namespace relfm {

/// Average-rank Mann-Whitney U normalized by n_pos * n_neg; ties count 1/2.
/// Integer half-rank arithmetic keeps the result exact.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error("roc_auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // twice the rank sum of positives; tied block i..j-1 gets rank (i+1+j)/2 each
  unsigned long long rank2_sum = 0, n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      int y = labels[order[k]];
      if (y != 0 && y != 1) throw Error("roc_auc: labels must be 0 or 1");
      if (y == 1) {
        rank2_sum += i + 1 + j;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) throw Error("undefined AUC (single-class input)");
  const unsigned long long u2 = rank2_sum - n_pos * (n_pos + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct ThresholdMetrics {
  std::optional<double> precision;  // nullopt when nothing is predicted positive
  double accuracy = 0.0;
  std::optional<double> f1;         // nullopt when there are neither positives nor predicted positives
};

/// Predicted positive iff score >= threshold.
inline ThresholdMetrics precision_accuracy_f1(std::span<const double> scores, std::span<const int> labels,
                                              double threshold = 0.5) {
  if (scores.size() != labels.size()) throw Error("metrics: scores and labels differ in length");
  if (scores.empty()) throw Error("metrics: empty input");
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool pred = scores[i] >= threshold;
    bool pos = labels[i] == 1;
    (pred ? (pos ? tp : fp) : (pos ? fn : tn))++;
  }
  ThresholdMetrics m;
  m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
  if (tp + fp > 0) m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (2 * tp + fp + fn > 0) m.f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  return m;
}

}  // namespace relfm
