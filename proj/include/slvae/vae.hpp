#pragma once

// Variational autoencoder over source vectors, trained together with a
// forward diffusion model and a penalty that pushes the forward model to be
// monotone in the source set.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvae/adam.hpp"
#include "slvae/diffusion.hpp"
#include "slvae/forward_model.hpp"
#include "slvae/log.hpp"
#include "slvae/mlp.hpp"
#include "slvae/serialize.hpp"
#include "slvae/tape.hpp"

namespace slvae {

struct VaeParams {
  MlpParams encoder;  // |V| -> h -> h -> 2k (mean, log-variance)
  MlpParams decoder;  // k -> h -> h -> |V|, sigmoid
  std::size_t latent_dim = 0;

  std::size_t num_nodes() const { return decoder.output_dim(); }
  bool operator==(const VaeParams&) const = default;
};

namespace detail {
inline void check_vae_dims(std::size_t n, std::size_t k) {
  if (k == 0 || k >= n)
    throw std::invalid_argument("latent dimension " + std::to_string(k) + " must lie in [1, " + std::to_string(n) +
                                ")");
}
inline const std::vector<Activation>& encoder_acts() {
  static const std::vector<Activation> a{Activation::relu, Activation::relu, Activation::identity};
  return a;
}
inline const std::vector<Activation>& decoder_acts() {
  static const std::vector<Activation> a{Activation::relu, Activation::relu, Activation::sigmoid};
  return a;
}
}  // namespace detail

inline VaeParams init_vae(std::size_t num_nodes, std::size_t latent, std::size_t hidden, Rng& rng) {
  detail::check_vae_dims(num_nodes, latent);
  const std::vector<std::size_t> enc{num_nodes, hidden, hidden, 2 * latent};
  const std::vector<std::size_t> dec{latent, hidden, hidden, num_nodes};
  VaeParams p;
  p.encoder = init_mlp(enc, detail::encoder_acts(), rng);
  p.decoder = init_mlp(dec, detail::decoder_acts(), rng);
  p.latent_dim = latent;
  return p;
}

inline VaeParams zero_vae(std::size_t num_nodes, std::size_t latent, std::size_t hidden) {
  detail::check_vae_dims(num_nodes, latent);
  const std::vector<std::size_t> enc{num_nodes, hidden, hidden, 2 * latent};
  const std::vector<std::size_t> dec{latent, hidden, hidden, num_nodes};
  return VaeParams{zero_mlp(enc, detail::encoder_acts()), zero_mlp(dec, detail::decoder_acts()), latent};
}

struct Posterior {
  DenseVector mean;
  DenseVector stddev;  // always > 0
};

inline Posterior encode(const VaeParams& p, std::span<const double> x) {
  if (x.size() != p.encoder.input_dim())
    throw ShapeError("encode: input of length " + std::to_string(x.size()) + ", encoder expects " +
                     std::to_string(p.encoder.input_dim()));
  const DenseVector h = mlp_forward(p.encoder, x);
  Posterior q;
  q.mean.assign(h.begin(), h.begin() + static_cast<std::ptrdiff_t>(p.latent_dim));
  for (std::size_t d = 0; d < p.latent_dim; ++d) q.stddev.push_back(std::exp(0.5 * h[p.latent_dim + d]));
  return q;
}

/// z = mean + stddev * eps.
inline DenseVector reparameterize(std::span<const double> mean, std::span<const double> stddev,
                                  std::span<const double> eps) {
  if (mean.size() != stddev.size() || mean.size() != eps.size())
    throw ShapeError("reparameterize: mean, stddev and noise lengths differ");
  DenseVector z(mean.size());
  for (std::size_t d = 0; d < z.size(); ++d) z[d] = mean[d] + stddev[d] * eps[d];
  return z;
}

inline DenseVector standard_normal_vector(std::size_t k, Rng& rng) {
  DenseVector e(k);
  for (double& v : e) v = standard_normal(rng);
  return e;
}

/// Per-node source probability for a latent code.
inline DenseVector decode(const VaeParams& p, std::span<const double> z) {
  if (z.size() != p.latent_dim)
    throw ShapeError("decode: latent of length " + std::to_string(z.size()) + ", expected " +
                     std::to_string(p.latent_dim));
  return mlp_forward(p.decoder, z);
}

/// KL( N(mean, diag stddev^2) || N(0, I) ).
inline double kl_normal(std::span<const double> mean, std::span<const double> stddev) {
  if (mean.size() != stddev.size()) throw ShapeError("kl_normal: length mismatch");
  double s = 0.0;
  for (std::size_t d = 0; d < mean.size(); ++d) {
    if (!(stddev[d] > 0.0)) throw std::invalid_argument("kl_normal: stddev must be positive");
    const double var = stddev[d] * stddev[d];
    s += 1.0 + std::log(var) - mean[d] * mean[d] - var;
  }
  return -0.5 * s;
}

/// || max(0, y_subset - y_superset) ||^2, before weighting.
inline double monotonicity_penalty(std::span<const double> y_superset, std::span<const double> y_subset) {
  if (y_superset.size() != y_subset.size()) throw ShapeError("monotonicity_penalty: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < y_subset.size(); ++i) {
    const double d = std::max(0.0, y_subset[i] - y_superset[i]);
    s += d * d;
  }
  return s;
}

struct TrainConfig {
  double lambda = 1.0;  // monotonicity penalty weight
  double learning_rate = 0.002;
  std::size_t epochs = 1000;
  std::size_t batch_size = 32;
  std::size_t latent_dim = 16;
  std::size_t hidden = 64;
  bool joint = false;  // also update the forward model

  void validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("train.lambda must be >= 0");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train.learning_rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
    if (hidden < 1) throw std::invalid_argument("train.hidden must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Loss on a tape

/// Maps rows of sources to rows of predicted observations.
using ForwardFn = std::function<Var(Var)>;

struct ElboTerms {
  Var reconstruction;  // mean over the batch of BCE(x, decoder(z))
  Var kl;              // mean over the batch
  std::optional<Var> forward;  // mean over the batch of ||y - fwd(x)||^2
  std::optional<Var> penalty;  // mean over subset pairs, unweighted
  Var total;
};

/// Batch rows are examples. `subsets` holds one row per (superset, subset)
/// pair and `owner[s]` names the batch row of its superset. `eps` is the
/// standard-normal noise, one row per example. A null `fwd` drops the forward
/// and penalty terms.
inline ElboTerms elbo_terms(const MlpVars& encoder, const MlpVars& decoder, std::size_t latent, const ForwardFn* fwd,
                            Var x, Var y, std::optional<Var> subsets, const std::vector<std::size_t>& owner, Var eps,
                            double lambda) {
  const double inv_batch = 1.0 / static_cast<double>(x.rows());
  ElboTerms t;
  Var h = apply(encoder, x);
  Var mean = ad::slice_cols(h, 0, latent);
  Var log_var = ad::slice_cols(h, latent, 2 * latent);
  Var z = ad::add(mean, ad::mul(ad::exp(ad::scale(log_var, 0.5)), eps));
  t.reconstruction = ad::scale(ad::binary_cross_entropy(x, apply(decoder, z)), inv_batch);
  // -1/2 sum(1 + log var - mean^2 - var)
  Var kl_inner = ad::sub(ad::add_scalar(log_var, 1.0), ad::add(ad::square(mean), ad::exp(log_var)));
  t.kl = ad::scale(ad::sum(kl_inner), -0.5 * inv_batch);
  t.total = ad::add(t.reconstruction, t.kl);
  if (!fwd) return t;

  Var y_hat = (*fwd)(x);
  t.forward = ad::scale(ad::squared_norm(ad::sub(y, y_hat)), inv_batch);
  t.total = ad::add(t.total, *t.forward);
  if (subsets && subsets->rows() > 0) {
    if (owner.size() != subsets->rows()) throw ShapeError("elbo: one owner per subset row required");
    Var y_sub = (*fwd)(*subsets);
    Var y_sup = ad::gather_rows(y_hat, owner);
    Var viol = ad::relu(ad::sub(y_sub, y_sup));
    t.penalty = ad::scale(ad::squared_norm(viol), 1.0 / static_cast<double>(owner.size()));
    t.total = ad::add(t.total, ad::scale(*t.penalty, lambda));
  }
  return t;
}

struct LossTerms {
  double forward = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  double penalty = 0.0;  // unweighted
  double total = 0.0;
};

struct PackedBatch {
  Matrix x, y, subsets;
  std::vector<std::size_t> owner;
};

/// Stacks sources, observations and the non-degenerate subset pairs.
inline PackedBatch pack_batch(const std::vector<const EpisodePair*>& batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const std::size_t n = batch.front()->source.size();
  PackedBatch b;
  b.x = Matrix(batch.size(), n);
  b.y = Matrix(batch.size(), n);
  std::vector<const SeedVector*> subs;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const EpisodePair& e = *batch[r];
    if (e.source.size() != n || e.observation.size() != n) throw ShapeError("batch rows differ in length");
    std::copy(e.source.begin(), e.source.end(), b.x.row_span(r).begin());
    std::copy(e.observation.begin(), e.observation.end(), b.y.row_span(r).begin());
    if (e.degenerate) continue;
    for (const auto& s : e.subsets) {
      subs.push_back(&s.source);
      b.owner.push_back(r);
    }
  }
  b.subsets = Matrix(subs.size(), n);
  for (std::size_t s = 0; s < subs.size(); ++s) std::copy(subs[s]->begin(), subs[s]->end(), b.subsets.row_span(s).begin());
  return b;
}

inline Matrix noise_matrix(std::size_t rows, std::size_t k, Rng& rng) {
  Matrix e(rows, k);
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = standard_normal(rng);
  return e;
}

struct ElboResult {
  LossTerms terms;
  VaeParams vae_grad;
  std::optional<ForwardParams> forward_grad;  // only when the forward model is trainable
};

/// Training objective of one batch with a single reparameterized draw per
/// example. Gradients flow to the VAE, and to the forward surrogate when
/// `forward_trainable` is given (it then replaces `fwd`). A null `fwd` with no
/// trainable surrogate leaves only reconstruction and KL.
inline ElboResult elbo_loss(const VaeParams& vae, const ForwardModel* fwd, const Graph& g,
                            const std::vector<const EpisodePair*>& batch, double lambda, Rng& rng,
                            const ForwardParams* forward_trainable = nullptr) {
  PackedBatch b = pack_batch(batch);
  require_width(g, b.x.cols(), "elbo_loss");
  Tape tape;
  MlpVars enc = bind(tape, vae.encoder, true);
  MlpVars dec = bind(tape, vae.decoder, true);
  std::optional<MlpVars> fnet;
  ForwardFn f;
  if (forward_trainable) {
    fnet = bind(tape, forward_trainable->mlp, true);
    const std::size_t depth = forward_trainable->depth;
    f = [&, depth](Var v) { return surrogate_predict(*fnet, depth, g, v); };
  } else if (fwd) {
    f = [&](Var v) { return fwd->predict(g, v); };
  }
  std::optional<Var> subs;
  if (b.subsets.rows() > 0) subs = tape.constant(b.subsets);
  Var eps = tape.constant(noise_matrix(b.x.rows(), vae.latent_dim, rng));
  ElboTerms t = elbo_terms(enc, dec, vae.latent_dim, f ? &f : nullptr, tape.constant(b.x), tape.constant(b.y), subs,
                           b.owner, eps, lambda);
  ElboResult r;
  r.terms = LossTerms{t.forward ? t.forward->scalar() : 0.0, t.reconstruction.scalar(), t.kl.scalar(),
                      t.penalty ? t.penalty->scalar() : 0.0, t.total.scalar()};
  if (!std::isfinite(r.terms.total)) throw TrainingError("elbo_loss: non-finite loss");
  tape.backward(t.total);
  r.vae_grad = VaeParams{gradients(enc, vae.encoder), gradients(dec, vae.decoder), vae.latent_dim};
  if (fnet) r.forward_grad = ForwardParams{gradients(*fnet, forward_trainable->mlp), forward_trainable->depth};
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct VaeTrainResult {
  VaeParams vae;
  std::optional<ForwardParams> forward;  // fine-tuned copy in joint mode
  std::vector<double> loss_trace;        // mean total loss per epoch
};

namespace detail {

/// Forward and penalty terms of every episode under a frozen forward model.
struct FrozenTerms {
  std::vector<double> forward;  // ||y - fwd(x)||^2 per episode
  std::vector<double> penalty;  // summed penalty per episode
  std::vector<std::size_t> pairs;
};

inline FrozenTerms frozen_terms(const ForwardModel& fwd, const Graph& g, const std::vector<EpisodePair>& data) {
  FrozenTerms ft;
  for (const auto& e : data) {
    const Observation yi = forward_predict(fwd, g, e.source);
    double f = 0.0;
    for (std::size_t v = 0; v < yi.size(); ++v) f += (e.observation[v] - yi[v]) * (e.observation[v] - yi[v]);
    ft.forward.push_back(f);
    double pen = 0.0;
    std::size_t pairs = 0;
    if (!e.degenerate)
      for (const auto& s : e.subsets) {
        pen += monotonicity_penalty(yi, forward_predict(fwd, g, s.source));
        ++pairs;
      }
    ft.penalty.push_back(pen);
    ft.pairs.push_back(pairs);
  }
  return ft;
}

}  // namespace detail

/// Adam over encoder and decoder (and the forward surrogate when cfg.joint).
/// With a frozen forward model the forward and penalty terms do not depend on
/// the trained parameters; they are evaluated once and added to the trace.
inline VaeTrainResult train_vae(const Graph& g, const std::vector<EpisodePair>& data, const ForwardModel& fwd,
                                const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_vae: empty dataset");
  const std::size_t n = g.num_nodes();
  for (const auto& e : data) require_width(g, e.source.size(), "train_vae");

  VaeTrainResult res;
  res.vae = init_vae(n, cfg.latent_dim, cfg.hidden, rng);
  const auto* surrogate = dynamic_cast<const SurrogateForward*>(&fwd);
  if (cfg.joint) {
    if (!surrogate) throw std::invalid_argument("joint training needs the learned forward surrogate");
    res.forward = surrogate->params();
  }

  std::vector<Matrix*> params = res.vae.encoder.tensors();
  for (Matrix* m : res.vae.decoder.tensors()) params.push_back(m);
  if (res.forward)
    for (Matrix* m : res.forward->mlp.tensors()) params.push_back(m);
  AdamState adam = make_adam(AdamConfig{cfg.learning_rate}, params);

  std::optional<detail::FrozenTerms> frozen;
  if (!cfg.joint) frozen = detail::frozen_terms(fwd, g, data);

  std::vector<const EpisodePair*> order;
  for (const auto& e : data) order.push_back(&e);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const EpisodePair*> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                            order.begin() + static_cast<std::ptrdiff_t>(end));
      ElboResult r;
      try {
        r = cfg.joint ? elbo_loss(res.vae, &fwd, g, batch, cfg.lambda, rng, &*res.forward)
                      : elbo_loss(res.vae, nullptr, g, batch, cfg.lambda, rng);
      } catch (const TrainingError& e) {
        throw TrainingError("VAE training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      double total = r.terms.total;
      if (frozen) {
        double f = 0.0, pen = 0.0;
        std::size_t pairs = 0;
        for (const auto* e : batch) {
          const auto idx = static_cast<std::size_t>(e - data.data());
          f += frozen->forward[idx];
          pen += frozen->penalty[idx];
          pairs += frozen->pairs[idx];
        }
        total += f / static_cast<double>(batch.size()) + (pairs ? cfg.lambda * pen / static_cast<double>(pairs) : 0.0);
      }
      std::vector<const Matrix*> grads;
      for (const Matrix* m : r.vae_grad.encoder.tensors()) grads.push_back(m);
      for (const Matrix* m : r.vae_grad.decoder.tensors()) grads.push_back(m);
      if (res.forward) {
        for (const Matrix* m : r.forward_grad->mlp.tensors()) grads.push_back(m);
      }
      if (!adam_step(adam, params, grads))
        throw TrainingError("VAE training hit a non-finite gradient at epoch " + std::to_string(epoch));
      epoch_loss += total;
      ++batches;
    }
    res.loss_trace.push_back(epoch_loss / static_cast<double>(batches));
    if (!std::isfinite(res.loss_trace.back()))
      throw TrainingError("VAE training diverged at epoch " + std::to_string(epoch));
  }
  return res;
}

/// Mean over latent dimensions of the variance of the posterior mean across
/// the given sources. Near zero means the encoder ignores its input.
inline double posterior_mean_spread(const VaeParams& vae, const std::vector<SeedVector>& sources) {
  if (sources.size() < 2) return 0.0;
  std::vector<DenseVector> mu;
  for (const auto& x : sources) mu.push_back(encode(vae, x).mean);
  double total = 0.0;
  for (std::size_t d = 0; d < vae.latent_dim; ++d) {
    double m = 0.0;
    for (const auto& v : mu) m += v[d];
    m /= static_cast<double>(mu.size());
    double var = 0.0;
    for (const auto& v : mu) var += (v[d] - m) * (v[d] - m);
    total += var / static_cast<double>(mu.size());
  }
  return total / static_cast<double>(vae.latent_dim);
}

// ---------------------------------------------------------------------------
// Model bundle: magic, latent dim, forward block, encoder block, decoder block.

inline constexpr std::string_view kBundleMagic = "SLVAEBND";

struct ModelBundle {
  ForwardParams forward;
  VaeParams vae;
  bool operator==(const ModelBundle&) const = default;
};

inline std::string serialize_bundle(const ModelBundle& b) {
  ByteWriter w;
  begin_block(w, kBundleMagic);
  w.u32(static_cast<std::uint32_t>(b.vae.latent_dim));
  w.checksum_since(0);
  write_forward(w, b.forward);
  write_mlp(w, b.vae.encoder);
  write_mlp(w, b.vae.decoder);
  return w.str();
}

inline ModelBundle deserialize_bundle(std::string bytes) {
  ByteReader r(std::move(bytes));
  expect_block(r, kBundleMagic);
  ModelBundle b;
  b.vae.latent_dim = r.u32();
  r.verify_checksum_since(0, "bundle header");
  b.forward = read_forward(r);
  b.vae.encoder = read_mlp(r);
  b.vae.decoder = read_mlp(r);
  if (!r.at_end()) throw FormatError("trailing bytes after model bundle");
  if (b.vae.encoder.output_dim() != 2 * b.vae.latent_dim || b.vae.decoder.input_dim() != b.vae.latent_dim ||
      b.vae.encoder.input_dim() != b.vae.decoder.output_dim())
    throw FormatError("model bundle: encoder/decoder widths are inconsistent");
  return b;
}

inline void save_bundle(const ModelBundle& b, const std::filesystem::path& path) {
  write_file(path, serialize_bundle(b));
}

inline ModelBundle load_bundle(const std::filesystem::path& path) { return deserialize_bundle(read_file(path)); }

}  // namespace slvae
