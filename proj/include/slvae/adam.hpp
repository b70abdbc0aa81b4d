#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "slvae/matrix.hpp"

namespace slvae {

struct AdamConfig {
  double learning_rate = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment accumulators mirror the parameter tensors one to one.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t skipped_steps = 0;

  AdamState() = default;
  AdamState(AdamConfig cfg, std::span<const Matrix* const> params) : config(cfg) {
    for (const Matrix* p : params) {
      first_moment.emplace_back(p->rows(), p->cols(), 0.0);
      second_moment.emplace_back(p->rows(), p->cols(), 0.0);
    }
  }
};

inline AdamState make_adam(AdamConfig cfg, std::span<Matrix* const> params) {
  std::vector<const Matrix*> c(params.begin(), params.end());
  return AdamState(cfg, c);
}

/// One bias-corrected Adam update, in place. Returns false (and leaves
/// everything untouched) if any gradient entry is non-finite.
inline bool adam_step(AdamState& s, std::span<Matrix* const> params, std::span<const Matrix* const> grads) {
  if (params.size() != grads.size() || params.size() != s.first_moment.size())
    throw ShapeError("adam_step: parameter/gradient/state counts differ");
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (!params[t]->same_shape(*grads[t]) || !params[t]->same_shape(s.first_moment[t]))
      throw ShapeError("adam_step: tensor " + std::to_string(t) + " shape " + params[t]->shape_string() +
                       " vs gradient " + grads[t]->shape_string());
    if (!grads[t]->all_finite()) {
      ++s.skipped_steps;
      return false;
    }
  }
  ++s.step;
  const auto& c = s.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    Matrix& p = *params[t];
    const Matrix& g = *grads[t];
    Matrix& m = s.first_moment[t];
    Matrix& v = s.second_moment[t];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
  return true;
}

}  // namespace slvae
