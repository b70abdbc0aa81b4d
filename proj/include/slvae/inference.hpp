#pragma once

// Two-stage projected-gradient MAP search for the source vector: first against
// the decoder at the mean latent code, then against a log-sum-exp mixture over
// a bank of latent samples of the training sources.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvae/adam.hpp"
#include "slvae/forward_model.hpp"
#include "slvae/log.hpp"
#include "slvae/vae.hpp"

namespace slvae {

class InferenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class InferenceVariant { full, init_only, no_init };

inline const char* to_string(InferenceVariant v) {
  switch (v) {
    case InferenceVariant::full: return "full";
    case InferenceVariant::init_only: return "init_only";
    case InferenceVariant::no_init: return "no_init";
  }
  return "?";
}

inline InferenceVariant parse_variant(const std::string& s) {
  if (s == "full") return InferenceVariant::full;
  if (s == "init_only") return InferenceVariant::init_only;
  if (s == "no_init") return InferenceVariant::no_init;
  throw std::invalid_argument("unknown inference variant '" + s + "' (full, init_only, no_init)");
}

/// gradient: x <- x - step * grad, as written in the algorithm. adam: the
/// same step size fed to Adam, reset at the start of each stage.
enum class InferenceOptimizer { gradient, adam };

inline const char* to_string(InferenceOptimizer o) { return o == InferenceOptimizer::adam ? "adam" : "gradient"; }

inline InferenceOptimizer parse_optimizer(const std::string& s) {
  if (s == "gradient") return InferenceOptimizer::gradient;
  if (s == "adam") return InferenceOptimizer::adam;
  throw std::invalid_argument("unknown inference optimizer '" + s + "' (gradient, adam)");
}

inline constexpr double kProbClamp = 1e-7;

struct InferenceConfig {
  double tau = 0.5;
  double delta = 0.5;
  std::size_t n_init = 20;
  std::size_t n_opt = 50;
  double step_size = 0.5;
  std::size_t bank_limit = 2000;
  bool project_every_step = true;  // false: trim only inside the loop, threshold once at the end
  InferenceOptimizer optimizer = InferenceOptimizer::gradient;
  double forward_weight = 1.0;  // 1 / (2 sigma^2) for a Gaussian observation model; 1 keeps plain MSE
  InferenceVariant variant = InferenceVariant::full;

  void validate() const {
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("inference.tau must lie in (0, 1)");
    if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("inference.delta must lie in (0, 1)");
    if (!(step_size > 0.0)) throw std::invalid_argument("inference.step_size must be > 0");
    if (!(forward_weight > 0.0)) throw std::invalid_argument("inference.forward_weight must be > 0");
    if (bank_limit < 1) throw std::invalid_argument("inference.bank_limit must be >= 1");
    // both zero is the passthrough case; the ablations drop one stage
    if (variant == InferenceVariant::full && !(n_init == 0 && n_opt == 0) && n_init >= n_opt)
      throw std::invalid_argument("inference.n_init (" + std::to_string(n_init) + ") must be below inference.n_opt (" +
                                  std::to_string(n_opt) + ")");
  }
};

// ---------------------------------------------------------------------------
// Latent bank

struct LatentBank {
  std::vector<DenseVector> samples;  // one z per (possibly subsampled) training source
  DenseVector mean;                  // average posterior mean over all training sources

  std::size_t size() const { return samples.size(); }
};

inline LatentBank build_latent_bank(const VaeParams& vae, const std::vector<SeedVector>& sources, Rng& rng,
                                    std::size_t limit = 2000) {
  if (sources.empty()) throw std::invalid_argument("build_latent_bank: no training sources");
  if (limit < 1) throw std::invalid_argument("build_latent_bank: limit must be >= 1");
  LatentBank bank;
  bank.mean.assign(vae.latent_dim, 0.0);
  std::vector<Posterior> post;
  post.reserve(sources.size());
  for (const auto& x : sources) {
    post.push_back(encode(vae, x));
    for (std::size_t d = 0; d < vae.latent_dim; ++d) bank.mean[d] += post.back().mean[d];
  }
  for (double& m : bank.mean) m /= static_cast<double>(sources.size());

  std::vector<std::size_t> keep(sources.size());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
  if (keep.size() > limit) {
    log::info("latent bank subsampled from " + std::to_string(keep.size()) + " to " + std::to_string(limit));
    for (std::size_t i = 0; i < limit; ++i) std::swap(keep[i], keep[i + uniform_index(rng, keep.size() - i)]);
    keep.resize(limit);
    std::sort(keep.begin(), keep.end());
  }
  for (std::size_t j : keep)
    bank.samples.push_back(
        reparameterize(post[j].mean, post[j].stddev, standard_normal_vector(vae.latent_dim, rng)));
  return bank;
}

// ---------------------------------------------------------------------------
// Projections

inline DenseVector trim(std::span<const double> x) {
  DenseVector out(x.begin(), x.end());
  for (double& v : out) v = std::clamp(v, 0.0, 1.0);
  return out;
}

/// 1 where entry >= delta.
inline DenseVector threshold(std::span<const double> x, double delta) {
  DenseVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= delta ? 1.0 : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Decoder outputs as constants for the x-search: the prior at the mean code
/// and, per bank sample, the per-node log-odds plus the all-zero log-likelihood.
struct DecodedBank {
  Matrix prior;      // 1 x n, clamped f(z mean)
  Matrix log_odds;   // n x N, log f - log(1 - f)
  Matrix log_zero;   // 1 x N, sum_i log(1 - f_i)
  Matrix probs;      // N x n, clamped f(z_j), kept for oracles
};

inline DenseVector clamped_decode(const VaeParams& vae, std::span<const double> z) {
  DenseVector f = decode(vae, z);
  for (double& v : f) v = std::clamp(v, kProbClamp, 1.0 - kProbClamp);
  return f;
}

inline DecodedBank decode_bank(const VaeParams& vae, const LatentBank& bank) {
  if (bank.samples.empty()) throw std::invalid_argument("decode_bank: empty latent bank");
  const std::size_t n = vae.num_nodes(), N = bank.size();
  DecodedBank d;
  d.prior = Matrix::row(clamped_decode(vae, bank.mean));
  d.log_odds = Matrix(n, N);
  d.log_zero = Matrix(1, N);
  d.probs = Matrix(N, n);
  for (std::size_t j = 0; j < N; ++j) {
    const DenseVector f = clamped_decode(vae, bank.samples[j]);
    double z0 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d.probs(j, i) = f[i];
      d.log_odds(i, j) = std::log(f[i]) - std::log1p(-f[i]);
      z0 += std::log1p(-f[i]);
    }
    d.log_zero[j] = z0;
  }
  return d;
}

/// ||y - fwd(x)||^2 + BCE(x against prior). x is a 1 x n row.
inline Var loss_init_expr(Var x, const Matrix& y, const ForwardModel& fwd, const Graph& g, const Matrix& prior,
                          double forward_weight = 1.0) {
  Tape& t = x.tape();
  Var mse = ad::scale(ad::squared_norm(ad::sub(t.constant(y), fwd.predict(g, x))), forward_weight);
  Var p = t.constant(prior);
  // -sum[x log p + (1 - x) log(1 - p)], p already clamped
  Var bce = ad::scale(ad::sum(ad::add(ad::mul(x, ad::log(p)), ad::mul(ad::one_minus(x), ad::log(ad::one_minus(p))))),
                      -1.0);
  return ad::add(mse, bce);
}

/// log p_j(x) for every bank sample, as a 1 x N row.
inline Var bank_log_likelihoods(Var x, const DecodedBank& bank) {
  Tape& t = x.tape();
  return ad::add(ad::matmul(x, t.constant(bank.log_odds)), t.constant(bank.log_zero));
}

/// ||y - fwd(x)||^2 - logsumexp_j log p_j(x).
inline Var loss_pred_expr(Var x, const Matrix& y, const ForwardModel& fwd, const Graph& g, const DecodedBank& bank,
                          double forward_weight = 1.0) {
  Tape& t = x.tape();
  Var mse = ad::scale(ad::squared_norm(ad::sub(t.constant(y), fwd.predict(g, x))), forward_weight);
  return ad::sub(mse, ad::log_sum_exp(bank_log_likelihoods(x, bank)));
}

namespace detail {
inline void check_query(const Graph& g, std::span<const double> x, std::span<const double> y) {
  if (x.size() != g.num_nodes() || y.size() != g.num_nodes())
    throw ShapeError("inference: x has " + std::to_string(x.size()) + " entries, y has " + std::to_string(y.size()) +
                     ", graph has " + std::to_string(g.num_nodes()) + " nodes");
}
}  // namespace detail

inline double loss_init(std::span<const double> x, std::span<const double> y, const ForwardModel& fwd,
                        const VaeParams& vae, std::span<const double> z_mean, const Graph& g) {
  detail::check_query(g, x, y);
  Tape tape;
  return loss_init_expr(tape.constant(Matrix::row(x)), Matrix::row(y), fwd, g,
                        Matrix::row(clamped_decode(vae, z_mean)))
      .scalar();
}

/// The mixture log-likelihood term L_pmf (log-sum-exp form).
inline double log_pmf(std::span<const double> x, const DecodedBank& bank) {
  Tape tape;
  return ad::log_sum_exp(bank_log_likelihoods(tape.constant(Matrix::row(x)), bank)).scalar();
}

inline double loss_pred(std::span<const double> x, std::span<const double> y, const ForwardModel& fwd,
                        const VaeParams& vae, const LatentBank& bank, const Graph& g) {
  detail::check_query(g, x, y);
  const DecodedBank d = decode_bank(vae, bank);
  Tape tape;
  return loss_pred_expr(tape.constant(Matrix::row(x)), Matrix::row(y), fwd, g, d).scalar();
}

// ---------------------------------------------------------------------------
// Search

struct TraceEntry {
  int stage = 0;  // 1 = initialization objective, 2 = mixture objective
  std::size_t iteration = 0;
  double loss = 0.0;  // at the point the gradient was taken
  std::size_t active = 0;  // entries >= delta after the step
};

struct InferenceResult {
  SeedVector x;          // binary
  DenseVector relaxed;   // last continuous iterate, trimmed, before thresholding
  std::vector<TraceEntry> trace;
};

namespace detail {

using LossBuilder = std::function<Var(Var)>;

inline void run_stage(int stage, std::size_t iterations, const LossBuilder& loss, const InferenceConfig& cfg,
                      Matrix& x, DenseVector& relaxed, std::vector<TraceEntry>& trace) {
  if (iterations == 0) return;
  std::vector<Matrix*> params{&x};
  AdamState adam = make_adam(AdamConfig{cfg.step_size}, params);
  for (std::size_t it = 0; it < iterations; ++it) {
    Tape tape;
    Var xv = tape.leaf(x, true);
    Var l = loss(xv);
    if (!std::isfinite(l.scalar()))
      throw InferenceError("inference stage " + std::to_string(stage) + ": non-finite loss at iteration " +
                           std::to_string(it));
    tape.backward(l);
    Matrix gx = xv.grad();
    std::vector<const Matrix*> grads{&gx};
    if (!gx.all_finite())
      throw InferenceError("inference stage " + std::to_string(stage) + ": non-finite gradient at iteration " +
                           std::to_string(it));
    if (cfg.optimizer == InferenceOptimizer::gradient) {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] -= cfg.step_size * gx[i];
    } else {
      adam_step(adam, params, grads);
    }
    relaxed = trim(x.span());
    std::copy(relaxed.begin(), relaxed.end(), x.span().begin());
    if (cfg.project_every_step) {
      const DenseVector b = threshold(relaxed, cfg.delta);
      std::copy(b.begin(), b.end(), x.span().begin());
    }
    std::size_t active = 0;
    for (double v : relaxed) active += v >= cfg.delta;
    trace.push_back(TraceEntry{stage, it, l.scalar(), active});
  }
}

}  // namespace detail

/// Starts from an independent Bernoulli(tau) draw, runs the initialization
/// stage against the decoder at the mean code, then the mixture stage, and
/// thresholds at delta.
inline InferenceResult infer(std::span<const double> y, const ForwardModel& fwd, const DecodedBank& bank,
                             const Graph& g, const InferenceConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t n = g.num_nodes();
  if (y.size() != n)
    throw ShapeError("infer: observation has " + std::to_string(y.size()) + " entries, graph has " +
                     std::to_string(n) + " nodes");
  if (bank.prior.cols() != n) throw ShapeError("infer: decoder width does not match the graph");
  const Matrix ym = Matrix::row(y);

  Matrix x(1, n);
  for (std::size_t i = 0; i < n; ++i) x[i] = bernoulli(rng, cfg.tau) ? 1.0 : 0.0;
  InferenceResult res;
  res.relaxed.assign(x.span().begin(), x.span().end());

  const std::size_t n_init = cfg.variant == InferenceVariant::no_init ? 0 : cfg.n_init;
  const std::size_t n_opt = cfg.variant == InferenceVariant::init_only ? 0 : cfg.n_opt;
  detail::run_stage(
      1, n_init, [&](Var xv) { return loss_init_expr(xv, ym, fwd, g, bank.prior, cfg.forward_weight); }, cfg, x, res.relaxed,
      res.trace);
  detail::run_stage(
      2, n_opt, [&](Var xv) { return loss_pred_expr(xv, ym, fwd, g, bank, cfg.forward_weight); }, cfg, x, res.relaxed, res.trace);
  res.x = threshold(res.relaxed, cfg.delta);
  return res;
}

inline InferenceResult infer(std::span<const double> y, const ForwardModel& fwd, const VaeParams& vae,
                             const LatentBank& bank, const Graph& g, const InferenceConfig& cfg, Rng& rng) {
  return infer(y, fwd, decode_bank(vae, bank), g, cfg, rng);
}

}  // namespace slvae
