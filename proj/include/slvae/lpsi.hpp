#pragma once

// Label-propagation source identification, used as the comparison baseline.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvae/graph.hpp"
#include "slvae/log.hpp"

namespace slvae {

struct LpsiConfig {
  double alpha = 0.5;
  double tolerance = 1e-6;
  std::size_t max_sweeps = 1000;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("lpsi.alpha must lie in (0, 1)");
    if (!(tolerance > 0.0)) throw std::invalid_argument("lpsi.tolerance must be > 0");
  }
};

struct LpsiResult {
  DenseVector scores;
  DenseVector prediction;  // binary
  std::size_t sweeps = 0;
  double residual = 0.0;  // max |x - (alpha S x + (1 - alpha) x0)| at exit
  bool converged = false;
};

/// x <- alpha * S x + (1 - alpha) * x0 with x0 = +1 on infected nodes and -1
/// elsewhere. Sources are nodes with a positive score no smaller than any
/// neighbour's.
inline LpsiResult lpsi_baseline(const Graph& g, std::span<const double> observation, const LpsiConfig& cfg = {}) {
  cfg.validate();
  const std::size_t n = g.num_nodes();
  if (observation.size() != n)
    throw ShapeError("lpsi: observation has " + std::to_string(observation.size()) + " entries, graph has " +
                     std::to_string(n));
  const SparseMatrix& s = g.norm_adjacency();
  DenseVector x0(n), x(n), sx(n);
  for (std::size_t i = 0; i < n; ++i) x0[i] = observation[i] >= 0.5 ? 1.0 : -1.0;
  x = x0;
  LpsiResult r;
  for (r.sweeps = 0; r.sweeps < cfg.max_sweeps; ++r.sweeps) {
    s.multiply(x, sx);
    double change = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double next = cfg.alpha * sx[i] + (1.0 - cfg.alpha) * x0[i];
      change = std::max(change, std::abs(next - x[i]));
      x[i] = next;
    }
    if (change < cfg.tolerance) {
      ++r.sweeps;
      break;
    }
  }
  s.multiply(x, sx);
  for (std::size_t i = 0; i < n; ++i)
    r.residual = std::max(r.residual, std::abs(x[i] - (cfg.alpha * sx[i] + (1.0 - cfg.alpha) * x0[i])));
  // one more contraction step shrinks the residual by alpha, so tol bounds it
  r.converged = r.residual <= cfg.tolerance;
  if (!r.converged)
    log::warn("lpsi did not converge after " + std::to_string(r.sweeps) + " sweeps, residual " +
              std::to_string(r.residual));

  r.prediction.assign(n, 0.0);
  for (std::size_t v = 0; v < n; ++v) {
    if (!(x[v] > 0.0)) continue;
    bool peak = true;
    for (NodeId u : g.neighbors(v))
      if (x[u] > x[v]) {
        peak = false;
        break;
      }
    if (peak) r.prediction[v] = 1.0;
  }
  r.scores = std::move(x);
  return r;
}

}  // namespace slvae
