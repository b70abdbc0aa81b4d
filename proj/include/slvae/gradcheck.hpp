#pragma once

// Generic gradient evaluation and a central-difference checker for any
// scalar expression that can be rebuilt on a fresh tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "slvae/matrix.hpp"
#include "slvae/tape.hpp"

namespace slvae {

/// Builds a scalar from the given leaves. Called once per evaluation.
using ScalarExpression = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradientResult {
  double value = 0.0;
  std::vector<Matrix> gradients;  // one per input, same shapes
};

inline double evaluate(const ScalarExpression& f, const std::vector<Matrix>& point) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Matrix& m : point) leaves.push_back(tape.constant(m));
  Var out = f(tape, leaves);
  if (out.value().size() != 1) throw std::invalid_argument("expression is not scalar: " + out.value().shape_string());
  return out.scalar();
}

/// Exact reverse-mode gradient of f with respect to every input.
inline GradientResult grad(const ScalarExpression& f, const std::vector<Matrix>& wrt) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Matrix& m : wrt) leaves.push_back(tape.leaf(m, true));
  Var out = f(tape, leaves);
  tape.backward(out);
  GradientResult r;
  r.value = out.scalar();
  for (const Var& v : leaves) r.gradients.push_back(v.grad());
  return r;
}

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

/// Compares grad() with central differences coordinate by coordinate. The
/// error of one coordinate is |a - n| / max(|a|, |n|, floor); the floor keeps
/// coordinates whose true derivative is ~0 from reporting roundoff as error.
/// `stride` > 1 checks every stride-th coordinate of large inputs.
inline FiniteDiffReport finite_diff_check(const ScalarExpression& f, const std::vector<Matrix>& point,
                                          double step = 1e-5, double floor = 1e-6, std::size_t stride = 1) {
  const GradientResult g = grad(f, point);
  FiniteDiffReport rep;
  std::vector<Matrix> probe = point;
  for (std::size_t t = 0; t < point.size(); ++t) {
    for (std::size_t i = 0; i < point[t].size(); i += std::max<std::size_t>(stride, 1)) {
      const double orig = probe[t][i];
      probe[t][i] = orig + step;
      const double up = evaluate(f, probe);
      probe[t][i] = orig - step;
      const double down = evaluate(f, probe);
      probe[t][i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = g.gradients[t][i];
      const double err =
          std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++rep.coordinates_checked;
      if (err > rep.max_relative_error || !std::isfinite(err)) {
        rep.max_relative_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
        rep.worst_input = t;
        rep.worst_index = i;
        rep.analytic = analytic;
        rep.numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace slvae
