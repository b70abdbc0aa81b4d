#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>

namespace slvae {

/// max(v) + log sum_j exp(v_j - max(v)). Finite for any finite input.
inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("log_sum_exp of an empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  if (std::isinf(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace slvae
