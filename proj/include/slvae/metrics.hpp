#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvae/matrix.hpp"

namespace slvae {

struct Classification {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

/// Entries >= 0.5 count as positive in both vectors.
inline Classification precision_recall_f1(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size())
    throw ShapeError("precision_recall_f1: " + std::to_string(pred.size()) + " predictions vs " +
                     std::to_string(truth.size()) + " labels");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= 0.5, t = truth[i] >= 0.5;
    tp += p && t;
    fp += p && !t;
    fn += !p && t;
  }
  if (tp + fn == 0) throw std::invalid_argument("precision_recall_f1: truth has no positive entry");
  Classification c;
  c.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  c.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  c.f1 = f1_score(c.precision, c.recall);
  return c;
}

/// Mann-Whitney form: average ranks over tied scores, ties worth one half.
inline double roc_auc(std::span<const double> scores, std::span<const double> truth) {
  if (scores.size() != truth.size()) throw ShapeError("roc_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // ranks doubled so tied groups stay integral: 2*avg rank = first + last (1-based)
  std::uint64_t rank_sum2 = 0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t twice_rank = (i + 1) + j;
    for (std::size_t k = i; k < j; ++k)
      if (truth[order[k]] >= 0.5) {
        rank_sum2 += twice_rank;
        ++positives;
      }
    i = j;
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) throw std::invalid_argument("roc_auc: labels need both classes");
  // U = sum of positive ranks - P(P+1)/2, all doubled
  const std::uint64_t u2 = rank_sum2 - static_cast<std::uint64_t>(positives) * (positives + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // population
  double min = 0.0;
  double max = 0.0;
};

inline Summary summarize(std::span<const double> v) {
  Summary s;
  if (v.empty()) return s;
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.stddev += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(v.size()));
  s.mean = std::clamp(s.mean, s.min, s.max);
  return s;
}

}  // namespace slvae
