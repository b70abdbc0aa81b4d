#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "slvae/gradcheck.hpp"
#include "slvae/inference.hpp"
#include "slvae/metrics.hpp"

using namespace slvae;

namespace {

const std::filesystem::path kKarate = std::filesystem::path(SLVAE_DATA_DIR) / "karate.txt";

LatentBank random_bank(std::size_t k, std::size_t count, Rng& rng) {
  LatentBank b;
  b.mean.assign(k, 0.0);
  for (std::size_t j = 0; j < count; ++j) b.samples.push_back(standard_normal_vector(k, rng));
  return b;
}

// log sum_j prod_i p_ji^x_i (1 - p_ji)^(1 - x_i), straight from the probabilities
double naive_log_pmf(std::span<const double> x, const Matrix& probs) {
  double total = 0.0;
  for (std::size_t j = 0; j < probs.rows(); ++j) {
    double prod = 1.0;
    for (std::size_t i = 0; i < probs.cols(); ++i) prod *= x[i] * probs(j, i) + (1.0 - x[i]) * (1.0 - probs(j, i));
    total += prod;
  }
  return std::log(total);
}

DenseVector random_binary(std::size_t n, double p, Rng& rng) {
  DenseVector x(n);
  for (double& v : x) v = bernoulli(rng, p) ? 1.0 : 0.0;
  return x;
}

DenseVector random_interior(std::size_t n, Rng& rng) {
  DenseVector x(n);
  for (double& v : x) v = 0.05 + 0.9 * uniform01(rng);
  return x;
}

// Produces NaN on purpose so the guard can be observed.
class PoisonForward : public ForwardModel {
 public:
  Var predict(const Graph&, Var x) const override {
    return ad::scale(x, std::numeric_limits<double>::quiet_NaN());
  }
  std::string name() const override { return "poison"; }
};

struct Trained {
  Graph g;
  VaeParams vae;
  DecodedBank bank;
};

// VAE trained on karate SI sources (10% seeds); shared by the slower tests.
const Trained& trained_karate() {
  static const Trained t = [] {
    Trained r;
    r.g = load_edge_list(kKarate);
    SimConfig sc;
    sc.beta = 0.2;
    sc.max_iterations = 3;
    DatasetConfig dc;
    dc.episodes = 200;
    dc.subsets_per_episode = 2;
    dc.mc_runs = 5;
    Rng rng(2024);
    const auto data = build_dataset(r.g, sc, dc, rng);
    TrainConfig tc;
    tc.epochs = 150;
    tc.latent_dim = 8;
    tc.hidden = 64;
    r.vae = train_vae(r.g, data, MeanFieldSi(0.2, 3), tc, rng).vae;
    std::vector<SeedVector> sources;
    for (const auto& e : data) sources.push_back(e.source);
    r.bank = decode_bank(r.vae, build_latent_bank(r.vae, sources, rng));
    return r;
  }();
  return t;
}

InferenceConfig deferred_adam() {
  InferenceConfig c;
  c.optimizer = InferenceOptimizer::adam;
  c.step_size = 0.05;
  c.project_every_step = false;
  c.forward_weight = 100.0;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(LatentBank, OneSamplePerSourceAndMeanOfPosteriorMeans) {
  Rng rng(3);
  VaeParams vae = init_vae(12, 3, 8, rng);
  std::vector<SeedVector> sources;
  for (int s = 0; s < 7; ++s) sources.push_back(random_binary(12, 0.3, rng));
  Rng brng(9);
  LatentBank b = build_latent_bank(vae, sources, brng);
  ASSERT_EQ(b.size(), 7U);
  DenseVector mean(3, 0.0);
  for (const auto& x : sources) {
    const Posterior q = encode(vae, x);
    for (std::size_t d = 0; d < 3; ++d) mean[d] += q.mean[d] / 7.0;
  }
  for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(b.mean[d], mean[d], 1e-12);
  for (const auto& z : b.samples) EXPECT_EQ(z.size(), 3U);
}

TEST(LatentBank, SubsamplesToLimitAndIsDeterministic) {
  Rng rng(4);
  VaeParams vae = init_vae(8, 2, 8, rng);
  std::vector<SeedVector> sources;
  for (int s = 0; s < 50; ++s) sources.push_back(random_binary(8, 0.4, rng));
  Rng a(1), b(1);
  LatentBank ba = build_latent_bank(vae, sources, a, 10), bb = build_latent_bank(vae, sources, b, 10);
  EXPECT_EQ(ba.size(), 10U);
  EXPECT_EQ(ba.samples, bb.samples);
}

TEST(LatentBank, Errors) {
  Rng rng(5);
  VaeParams vae = init_vae(8, 2, 8, rng);
  EXPECT_THROW(build_latent_bank(vae, {}, rng), std::invalid_argument);
  EXPECT_THROW(build_latent_bank(vae, {SeedVector(8, 0.0)}, rng, 0), std::invalid_argument);
}

TEST(Projection, TrimClampsToUnitInterval) {
  const DenseVector x{-0.5, 0.0, 0.3, 1.0, 1.7};
  EXPECT_EQ(trim(x), (DenseVector{0.0, 0.0, 0.3, 1.0, 1.0}));
}

TEST(Projection, ThresholdIsInclusive) {
  const DenseVector x{0.49, 0.5, 0.51, 0.0, 1.0};
  EXPECT_EQ(threshold(x, 0.5), (DenseVector{0.0, 1.0, 1.0, 0.0, 1.0}));
}

TEST(Projection, ThresholdOfTrimIsIdempotent) {
  Rng rng(6);
  for (int rep = 0; rep < 100; ++rep) {
    DenseVector x(20);
    for (double& v : x) v = 3.0 * uniform01(rng) - 1.0;
    const DenseVector b = threshold(trim(x), 0.4);
    EXPECT_EQ(threshold(trim(b), 0.4), b);
  }
}

TEST(DecodedBank, ClampedAndConsistentWithProbabilities) {
  Rng rng(7);
  VaeParams vae = init_vae(10, 3, 8, rng);
  LatentBank b = random_bank(3, 5, rng);
  const DecodedBank d = decode_bank(vae, b);
  for (std::size_t j = 0; j < 5; ++j) {
    double z0 = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
      const double p = d.probs(j, i);
      EXPECT_GE(p, kProbClamp);
      EXPECT_LE(p, 1.0 - kProbClamp);
      EXPECT_NEAR(d.log_odds(i, j), std::log(p / (1.0 - p)), 1e-12);
      z0 += std::log(1.0 - p);
    }
    EXPECT_NEAR(d.log_zero[j], z0, 1e-12);
  }
}

TEST(LogPmf, MatchesNaiveProductOnSmallGraph) {
  Rng rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    VaeParams vae = init_vae(10, 3, 8, rng);
    const DecodedBank d = decode_bank(vae, random_bank(3, 6, rng));
    const DenseVector x = random_binary(10, 0.3, rng);
    EXPECT_NEAR(log_pmf(x, d), naive_log_pmf(x, d.probs), 1e-10);
  }
}

TEST(LogPmf, MatchesNaiveFormAtRelaxedPoints) {
  // the naive form is multilinear in x, so it extends to fractional x as well
  Rng rng(9);
  VaeParams vae = init_vae(10, 3, 8, rng);
  const DecodedBank d = decode_bank(vae, random_bank(3, 6, rng));
  const DenseVector x{0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0};
  EXPECT_NEAR(log_pmf(x, d), naive_log_pmf(x, d.probs), 1e-10);
}

TEST(LogPmf, FiniteWhereNaiveProductUnderflows) {
  Rng rng(10);
  VaeParams vae = init_vae(2000, 4, 16, rng);
  const DecodedBank d = decode_bank(vae, random_bank(4, 8, rng));
  const DenseVector x = random_binary(2000, 0.1, rng);
  EXPECT_TRUE(std::isinf(naive_log_pmf(x, d.probs)));
  const double v = log_pmf(x, d);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_LT(v, -100.0);
}

TEST(LogPmf, BoundedByMaxComponent) {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    VaeParams vae = init_vae(15, 3, 8, rng);
    const std::size_t count = 1 + uniform_index(rng, 10);
    const DecodedBank d = decode_bank(vae, random_bank(3, count, rng));
    const DenseVector x = random_binary(15, 0.4, rng);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < count; ++j) {
      double l = d.log_zero[j];
      for (std::size_t i = 0; i < 15; ++i) l += x[i] * d.log_odds(i, j);
      best = std::max(best, l);
    }
    const double v = log_pmf(x, d);
    EXPECT_GE(v, best - 1e-12);
    EXPECT_LE(v, best + std::log(static_cast<double>(count)) + 1e-12);
  }
}

TEST(LogPmf, InvariantToBankOrder) {
  Rng rng(12);
  VaeParams vae = init_vae(10, 3, 8, rng);
  LatentBank b = random_bank(3, 7, rng);
  const DenseVector x = random_binary(10, 0.3, rng);
  const double before = log_pmf(x, decode_bank(vae, b));
  std::reverse(b.samples.begin(), b.samples.end());
  std::swap(b.samples[1], b.samples[4]);
  EXPECT_NEAR(log_pmf(x, decode_bank(vae, b)), before, 1e-12);
}

TEST(Losses, LossInitSplitsIntoMseAndPriorBce) {
  Rng rng(13);
  Graph g = load_edge_list(kKarate);
  VaeParams vae = init_vae(34, 4, 16, rng);
  MeanFieldSi fwd(0.3, 2);
  const DenseVector x = random_binary(34, 0.2, rng), y = random_interior(34, rng);
  const DenseVector z(4, 0.0);
  const DenseVector pred = forward_predict(fwd, g, x);
  const DenseVector p = clamped_decode(vae, z);
  double expect = 0.0;
  for (std::size_t i = 0; i < 34; ++i) {
    expect += (y[i] - pred[i]) * (y[i] - pred[i]);
    expect -= x[i] * std::log(p[i]) + (1.0 - x[i]) * std::log(1.0 - p[i]);
  }
  EXPECT_NEAR(loss_init(x, y, fwd, vae, z, g), expect, 1e-9);
}

TEST(Losses, LossPredIsMseMinusLogPmf) {
  Rng rng(14);
  Graph g = load_edge_list(kKarate);
  VaeParams vae = init_vae(34, 4, 16, rng);
  MeanFieldSi fwd(0.3, 2);
  const LatentBank b = random_bank(4, 5, rng);
  const DenseVector x = random_binary(34, 0.2, rng), y = random_interior(34, rng);
  const DenseVector pred = forward_predict(fwd, g, x);
  double mse = 0.0;
  for (std::size_t i = 0; i < 34; ++i) mse += (y[i] - pred[i]) * (y[i] - pred[i]);
  const DecodedBank d = decode_bank(vae, b);
  EXPECT_NEAR(loss_pred(x, y, fwd, vae, b, g), mse - naive_log_pmf(x, d.probs), 1e-9);
}

TEST(Losses, ShapeMismatchThrows) {
  Rng rng(15);
  Graph g = load_edge_list(kKarate);
  VaeParams vae = init_vae(34, 4, 16, rng);
  MeanFieldSi fwd(0.3, 2);
  EXPECT_THROW(loss_init(DenseVector(33, 0.0), DenseVector(34, 0.0), fwd, vae, DenseVector(4, 0.0), g), ShapeError);
  EXPECT_THROW(loss_pred(DenseVector(34, 0.0), DenseVector(30, 0.0), fwd, vae, random_bank(4, 2, rng), g),
               ShapeError);
}

TEST(Losses, GradientsWrtXMatchFiniteDifferences) {
  Rng rng(16);
  Graph g = load_edge_list(kKarate);
  VaeParams vae = init_vae(34, 4, 16, rng);
  const SurrogateForward fwd(init_forward(3, 16, rng));
  const DecodedBank d = decode_bank(vae, random_bank(4, 6, rng));
  for (int point = 0; point < 20; ++point) {
    const Matrix y = Matrix::row(random_interior(34, rng));
    const Matrix x = Matrix::row(random_interior(34, rng));
    const double w = point % 2 ? 1.0 : 37.5;
    auto init = [&](Tape&, const std::vector<Var>& v) { return loss_init_expr(v[0], y, fwd, g, d.prior, w); };
    auto pred = [&](Tape&, const std::vector<Var>& v) { return loss_pred_expr(v[0], y, fwd, g, d, w); };
    const auto ri = finite_diff_check(init, {x}, 1e-6);
    const auto rp = finite_diff_check(pred, {x}, 1e-6);
    EXPECT_LT(ri.max_relative_error, 1e-3) << "init, point " << point;
    EXPECT_LT(rp.max_relative_error, 1e-3) << "pred, point " << point;
  }
}

// ---------------------------------------------------------------------------

TEST(InferenceConfig, Validation) {
  InferenceConfig c;
  EXPECT_NO_THROW(c.validate());
  auto bad = [](auto edit) {
    InferenceConfig c;
    edit(c);
    return c;
  };
  EXPECT_THROW(bad([](auto& c) { c.tau = 0.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](auto& c) { c.delta = 1.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](auto& c) { c.step_size = 0.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](auto& c) { c.forward_weight = -1.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](auto& c) { c.n_init = 50; }).validate(), std::invalid_argument);
  EXPECT_NO_THROW(bad([](auto& c) { c.n_init = c.n_opt = 0; }).validate());
  EXPECT_NO_THROW(bad([](auto& c) {
                    c.n_init = 50;
                    c.variant = InferenceVariant::init_only;
                  }).validate());
}

TEST(InferenceConfig, VariantAndOptimizerNamesRoundTrip) {
  for (auto v : {InferenceVariant::full, InferenceVariant::init_only, InferenceVariant::no_init})
    EXPECT_EQ(parse_variant(to_string(v)), v);
  for (auto o : {InferenceOptimizer::gradient, InferenceOptimizer::adam}) EXPECT_EQ(parse_optimizer(to_string(o)), o);
  EXPECT_THROW(parse_variant("partial"), std::invalid_argument);
  EXPECT_THROW(parse_optimizer("sgd"), std::invalid_argument);
}

TEST(Infer, ZeroIterationsReturnsTheBernoulliStart) {
  Rng rng(17);
  Graph g = load_edge_list(kKarate);
  VaeParams vae = init_vae(34, 4, 16, rng);
  const LatentBank b = random_bank(4, 3, rng);
  InferenceConfig c;
  c.n_init = c.n_opt = 0;
  c.tau = 0.3;
  Rng run(99), mirror(99);
  const auto r = infer(DenseVector(34, 0.1), MeanFieldSi(0.3, 2), vae, b, g, c, run);
  for (std::size_t i = 0; i < 34; ++i) EXPECT_EQ(r.x[i], bernoulli(mirror, 0.3) ? 1.0 : 0.0);
  EXPECT_TRUE(r.trace.empty());
}

TEST(Infer, OutputIsBinaryAndTraceCoversBothStages) {
  Rng rng(18);
  Graph g = load_edge_list(kKarate);
  VaeParams vae = init_vae(34, 4, 16, rng);
  const LatentBank b = random_bank(4, 3, rng);
  for (bool every : {true, false}) {
    InferenceConfig c;
    c.project_every_step = every;
    const auto r = infer(random_interior(34, rng), MeanFieldSi(0.3, 2), vae, b, g, c, rng);
    ASSERT_EQ(r.trace.size(), c.n_init + c.n_opt);
    EXPECT_EQ(r.trace.front().stage, 1);
    EXPECT_EQ(r.trace[c.n_init].stage, 2);
    for (double v : r.x) EXPECT_TRUE(v == 0.0 || v == 1.0);
    for (double v : r.relaxed) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(r.x, threshold(r.relaxed, c.delta));
  }
}

TEST(Infer, AblationVariantsSkipAStage) {
  Rng rng(19);
  Graph g = load_edge_list(kKarate);
  VaeParams vae = init_vae(34, 4, 16, rng);
  const LatentBank b = random_bank(4, 3, rng);
  InferenceConfig c;
  c.variant = InferenceVariant::init_only;
  auto r = infer(DenseVector(34, 0.2), MeanFieldSi(0.3, 2), vae, b, g, c, rng);
  EXPECT_EQ(r.trace.size(), c.n_init);
  for (const auto& t : r.trace) EXPECT_EQ(t.stage, 1);
  c.variant = InferenceVariant::no_init;
  r = infer(DenseVector(34, 0.2), MeanFieldSi(0.3, 2), vae, b, g, c, rng);
  EXPECT_EQ(r.trace.size(), c.n_opt);
  for (const auto& t : r.trace) EXPECT_EQ(t.stage, 2);
}

TEST(Infer, DeterministicForAFixedStream) {
  Rng rng(20);
  Graph g = load_edge_list(kKarate);
  VaeParams vae = init_vae(34, 4, 16, rng);
  const LatentBank b = random_bank(4, 5, rng);
  const DenseVector y = random_interior(34, rng);
  Rng r1(5), r2(5);
  const auto a = infer(y, MeanFieldSi(0.3, 2), vae, b, g, deferred_adam(), r1);
  const auto c = infer(y, MeanFieldSi(0.3, 2), vae, b, g, deferred_adam(), r2);
  EXPECT_EQ(a.x, c.x);
  EXPECT_EQ(a.relaxed, c.relaxed);
  ASSERT_EQ(a.trace.size(), c.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].loss, c.trace[i].loss);
}

TEST(Infer, Errors) {
  Rng rng(21);
  Graph g = load_edge_list(kKarate);
  VaeParams vae = init_vae(34, 4, 16, rng);
  const LatentBank b = random_bank(4, 3, rng);
  InferenceConfig c;
  EXPECT_THROW(infer(DenseVector(33, 0.0), MeanFieldSi(0.3, 2), vae, b, g, c, rng), ShapeError);
  VaeParams narrow = init_vae(20, 4, 16, rng);
  EXPECT_THROW(infer(DenseVector(34, 0.0), MeanFieldSi(0.3, 2), narrow, b, g, c, rng), ShapeError);
  try {
    infer(DenseVector(34, 0.5), PoisonForward(), vae, b, g, c, rng);
    FAIL() << "expected InferenceError";
  } catch (const InferenceError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
  }
}

TEST(Infer, PlainGradientStepMovesAgainstTheGradient) {
  // one deferred step from a known start: x1 = trim(x0 - alpha * grad)
  Rng rng(22);
  Graph g = load_edge_list(kKarate);
  VaeParams vae = init_vae(34, 4, 16, rng);
  const DecodedBank d = decode_bank(vae, random_bank(4, 3, rng));
  const DenseVector y = random_interior(34, rng);
  InferenceConfig c;
  c.n_init = 1;
  c.n_opt = 0;
  c.variant = InferenceVariant::init_only;
  c.project_every_step = false;
  c.step_size = 0.01;
  Rng run(3), mirror(3);
  const auto r = infer(y, MeanFieldSi(0.3, 2), d, g, c, run);
  Matrix x0(1, 34);
  for (std::size_t i = 0; i < 34; ++i) x0[i] = bernoulli(mirror, c.tau) ? 1.0 : 0.0;
  const MeanFieldSi fwd(0.3, 2);
  const Matrix ym = Matrix::row(y);
  const auto gr = grad([&](Tape&, const std::vector<Var>& v) { return loss_init_expr(v[0], ym, fwd, g, d.prior); },
                       {x0});
  for (std::size_t i = 0; i < 34; ++i)
    EXPECT_NEAR(r.relaxed[i], std::clamp(x0[i] - 0.01 * gr.gradients[0][i], 0.0, 1.0), 1e-12);
}

TEST(Infer, RecoversSourcesUnderTheOracleForwardModel) {
  const Trained& t = trained_karate();
  const MeanFieldSi fwd(0.2, 3);
  Rng rng(31);
  double f1_full = 0.0, f1_init = 0.0;
  const int queries = 10;
  for (int q = 0; q < queries; ++q) {
    const SeedVector truth = sample_sources(t.g, 0.1, rng);
    const DenseVector y = forward_predict(fwd, t.g, truth);
    InferenceConfig c = deferred_adam();
    Rng a(100 + q), b(100 + q);
    f1_full += precision_recall_f1(infer(y, fwd, t.bank, t.g, c, a).x, truth).f1 / queries;
    c.variant = InferenceVariant::init_only;
    f1_init += precision_recall_f1(infer(y, fwd, t.bank, t.g, c, b).x, truth).f1 / queries;
  }
  RecordProperty("f1_full", std::to_string(f1_full));
  RecordProperty("f1_init_only", std::to_string(f1_init));
  EXPECT_GE(f1_full, 0.6);
  EXPECT_GE(f1_full, f1_init);
}
