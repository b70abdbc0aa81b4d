#pragma once

// Differentiable forward diffusion estimators: map a (relaxed) source vector
// to per-node infection probabilities, with gradients to the input.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvae/adam.hpp"
#include "slvae/diffusion.hpp"
#include "slvae/graph.hpp"
#include "slvae/log.hpp"
#include "slvae/mlp.hpp"
#include "slvae/serialize.hpp"
#include "slvae/tape.hpp"

namespace slvae {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Any estimator that can run on a tape. Rows of `x` are independent source
/// vectors; the result has the same shape. Implementations are immutable
/// after construction and safe to share between threads.
class ForwardModel {
 public:
  virtual ~ForwardModel() = default;
  virtual Var predict(const Graph& g, Var x) const = 0;
  virtual std::string name() const = 0;
};

inline void require_width(const Graph& g, std::size_t width, const char* what) {
  if (width != g.num_nodes())
    throw ShapeError(std::string(what) + ": vector of length " + std::to_string(width) + " on a graph with " +
                     std::to_string(g.num_nodes()) + " nodes");
}

inline Observation forward_predict(const ForwardModel& m, const Graph& g, std::span<const double> x) {
  require_width(g, x.size(), "forward_predict");
  Tape tape;
  return m.predict(g, tape.constant(Matrix::row(x))).value().data();
}

/// d(upstream . predict(x)) / dx.
inline DenseVector forward_grad_x(const ForwardModel& m, const Graph& g, std::span<const double> x,
                                  std::span<const double> upstream) {
  require_width(g, x.size(), "forward_grad_x");
  require_width(g, upstream.size(), "forward_grad_x upstream");
  Tape tape;
  Var xv = tape.leaf(Matrix::row(x));
  Var out = ad::sum(ad::mul(m.predict(g, xv), tape.constant(Matrix::row(upstream))));
  tape.backward(out);
  return xv.grad().data();
}

// ---------------------------------------------------------------------------
// Learned surrogate: per-node features [x_i, (Ax)_i, ..., (A^T x)_i, deg_i/max_deg]
// through one MLP shared by all nodes.

struct ForwardParams {
  MlpParams mlp;
  std::size_t depth = 3;

  bool operator==(const ForwardParams&) const = default;
};

inline ForwardParams init_forward(std::size_t depth, std::size_t hidden, Rng& rng) {
  const std::vector<std::size_t> dims{depth + 2, hidden, hidden, 1};
  const std::vector<Activation> acts{Activation::relu, Activation::relu, Activation::sigmoid};
  return ForwardParams{init_mlp(dims, acts, rng), depth};
}

inline ForwardParams zero_forward(std::size_t depth, std::size_t hidden) {
  const std::vector<std::size_t> dims{depth + 2, hidden, hidden, 1};
  const std::vector<Activation> acts{Activation::relu, Activation::relu, Activation::sigmoid};
  return ForwardParams{zero_mlp(dims, acts), depth};
}

inline Matrix degree_feature(const Graph& g, std::size_t batch) {
  const std::size_t n = g.num_nodes();
  const double mx = std::max<double>(1.0, static_cast<double>(g.max_degree()));
  Matrix d(batch, n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i) d(b, i) = static_cast<double>(g.degree(static_cast<NodeId>(i))) / mx;
  return d;
}

/// Surrogate forward pass with an already-bound MLP (trainable or not).
inline Var surrogate_predict(const MlpVars& net, std::size_t depth, const Graph& g, Var x) {
  require_width(g, x.cols(), "surrogate forward");
  if (!net.weights.empty() && net.weights.front().cols() != depth + 2)
    throw ShapeError("forward MLP input width does not match propagation depth");
  Tape& tape = x.tape();
  std::vector<Var> features{x};
  Var cur = x;
  for (std::size_t t = 0; t < depth; ++t) {
    cur = ad::propagate(cur, g.norm_adjacency());
    features.push_back(cur);
  }
  features.push_back(tape.constant(degree_feature(g, x.rows())));
  Var per_node = apply(net, ad::interleave(features));  // (B*n) x 1
  return ad::reshape(per_node, x.rows(), x.cols());
}

class SurrogateForward : public ForwardModel {
 public:
  explicit SurrogateForward(ForwardParams p) : params_(std::move(p)) {
    if (params_.mlp.input_dim() != params_.depth + 2 || params_.mlp.output_dim() != 1)
      throw ShapeError("forward MLP must map depth+2 features to 1 output");
  }
  Var predict(const Graph& g, Var x) const override {
    return surrogate_predict(bind(x.tape(), params_.mlp, false), params_.depth, g, x);
  }
  std::string name() const override { return "surrogate(T=" + std::to_string(params_.depth) + ")"; }
  const ForwardParams& params() const { return params_; }

 private:
  ForwardParams params_;
};

inline Observation forward_predict(const ForwardParams& p, const Graph& g, std::span<const double> x) {
  return forward_predict(SurrogateForward(p), g, x);
}

/// Mean-field SI applied `steps` times. With beta = 1 on binary input this is
/// the exact deterministic-SI closure after `steps` steps, so it serves as an
/// exactly monotone reference model.
class MeanFieldSi : public ForwardModel {
 public:
  MeanFieldSi(double beta, std::size_t steps) : beta_(beta), steps_(steps) {}
  Var predict(const Graph& g, Var x) const override {
    require_width(g, x.cols(), "mean-field SI");
    Var y = x;
    for (std::size_t s = 0; s < steps_; ++s) y = ad::mean_field_si_step(y, g, beta_);
    return y;
  }
  std::string name() const override {
    return "mean-field-si(beta=" + std::to_string(beta_) + ",steps=" + std::to_string(steps_) + ")";
  }

 private:
  double beta_;
  std::size_t steps_;
};

// ---------------------------------------------------------------------------
// Training

struct ForwardTrainConfig {
  std::size_t epochs = 200;
  double learning_rate = 0.002;
  std::size_t hidden = 32;
  std::size_t depth = 3;
  std::size_t batch_size = 64;
  double holdout_fraction = 0.1;
};

struct ForwardTrainResult {
  ForwardParams params;         // lowest held-out MSE seen
  std::vector<double> train_mse;  // entry e: after e epochs, so epochs + 1 entries
  std::vector<double> holdout_mse;
  std::size_t best_epoch = 0;
  double best_holdout_mse = 0.0;
};

/// Every (source, observation) pair in the dataset, subsets included.
inline std::vector<const SubsetSample*> forward_samples(const std::vector<EpisodePair>& data,
                                                        std::vector<SubsetSample>& storage) {
  storage.clear();
  for (const auto& e : data) {
    storage.push_back(SubsetSample{e.source, e.observation});
    for (const auto& s : e.subsets) storage.push_back(s);
  }
  std::vector<const SubsetSample*> out;
  for (const auto& s : storage) out.push_back(&s);
  return out;
}

inline Matrix stack_rows(const std::vector<const DenseVector*>& rows) {
  Matrix m(rows.size(), rows.empty() ? 0 : rows.front()->size());
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r]->begin(), rows[r]->end(), m.row_span(r).begin());
  return m;
}

/// Mean squared error of the surrogate over the given samples.
inline double forward_mse(const ForwardParams& p, const Graph& g, const std::vector<const SubsetSample*>& samples) {
  if (samples.empty()) return 0.0;
  std::vector<const DenseVector*> xs, ys;
  for (const auto* s : samples) {
    xs.push_back(&s->source);
    ys.push_back(&s->observation);
  }
  Tape tape;
  Var pred = SurrogateForward(p).predict(g, tape.constant(stack_rows(xs)));
  const Matrix target = stack_rows(ys);
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) s += (pred.value()[i] - target[i]) * (pred.value()[i] - target[i]);
  return s / static_cast<double>(target.size());
}

/// Adam on the mean squared error between the surrogate and the Monte-Carlo
/// observations of every source and subset in `data`.
inline ForwardTrainResult train_forward(const Graph& g, const std::vector<EpisodePair>& data,
                                        const ForwardTrainConfig& cfg, Rng& rng) {
  if (data.empty()) throw std::invalid_argument("train_forward: empty dataset");
  if (cfg.batch_size < 1) throw std::invalid_argument("train_forward: batch_size must be >= 1");
  std::vector<SubsetSample> storage;
  auto samples = forward_samples(data, storage);
  for (const auto* s : samples) {
    require_width(g, s->source.size(), "train_forward source");
    require_width(g, s->observation.size(), "train_forward observation");
  }
  // deterministic shuffle, then split off the held-out tail
  for (std::size_t i = samples.size(); i > 1; --i) std::swap(samples[i - 1], samples[uniform_index(rng, i)]);
  std::size_t held = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(samples.size())));
  if (held >= samples.size()) held = samples.size() - 1;
  std::vector<const SubsetSample*> holdout(samples.end() - static_cast<std::ptrdiff_t>(held), samples.end());
  std::vector<const SubsetSample*> train(samples.begin(), samples.end() - static_cast<std::ptrdiff_t>(held));
  // with no held-out set the training MSE selects the best epoch
  const auto& select = holdout.empty() ? train : holdout;

  ForwardTrainResult res;
  ForwardParams p = init_forward(cfg.depth, cfg.hidden, rng);
  AdamState adam = make_adam(AdamConfig{cfg.learning_rate}, p.mlp.tensors());
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch <= cfg.epochs; ++epoch) {
    const double tr = forward_mse(p, g, train);
    const double ho = forward_mse(p, g, select);
    if (!std::isfinite(tr) || !std::isfinite(ho))
      throw TrainingError("forward training diverged at epoch " + std::to_string(epoch) +
                          " (train mse " + std::to_string(tr) + ")");
    res.train_mse.push_back(tr);
    res.holdout_mse.push_back(ho);
    if (ho < best) {
      best = ho;
      res.params = p;
      res.best_epoch = epoch;
      res.best_holdout_mse = ho;
    }
    if (epoch == cfg.epochs) break;
    for (std::size_t i = train.size(); i > 1; --i) std::swap(train[i - 1], train[uniform_index(rng, i)]);
    for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(train.size(), start + cfg.batch_size);
      std::vector<const DenseVector*> xs, ys;
      for (std::size_t i = start; i < end; ++i) {
        xs.push_back(&train[i]->source);
        ys.push_back(&train[i]->observation);
      }
      Tape tape;
      MlpVars net = bind(tape, p.mlp, true);
      Var pred = surrogate_predict(net, p.depth, g, tape.constant(stack_rows(xs)));
      Var loss = ad::mean(ad::square(ad::sub(pred, tape.constant(stack_rows(ys)))));
      tape.backward(loss);
      MlpParams grads = gradients(net, p.mlp);
      if (!adam_step(adam, p.mlp.tensors(), grads.tensors()))
        throw TrainingError("forward training produced a non-finite gradient at epoch " + std::to_string(epoch));
    }
  }
  log::info("forward model: best held-out mse " + std::to_string(best) + " at epoch " +
            std::to_string(res.best_epoch));
  return res;
}

// ---------------------------------------------------------------------------
// Persistence: magic, depth, then the MLP block.

inline constexpr std::string_view kForwardMagic = "SLVAEFWD";

inline void write_forward(ByteWriter& w, const ForwardParams& p) {
  const std::size_t start = w.size();
  begin_block(w, kForwardMagic);
  w.u32(static_cast<std::uint32_t>(p.depth));
  w.checksum_since(start);
  write_mlp(w, p.mlp);
}

inline ForwardParams read_forward(ByteReader& r) {
  const std::size_t start = r.position();
  expect_block(r, kForwardMagic);
  ForwardParams p;
  p.depth = r.u32();
  r.verify_checksum_since(start, "forward header");
  p.mlp = read_mlp(r);
  if (p.mlp.input_dim() != p.depth + 2) throw FormatError("forward MLP width does not match recorded depth");
  return p;
}

}  // namespace slvae
