#pragma once

// End-to-end pipeline pieces shared by the CLI and the acceptance suite:
// dataset construction, model training with caching, query generation,
// threshold calibration, repeated trials, reports and runtime scaling.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <thread>
#include <unordered_set>

#include "slvae/config.hpp"
#include "slvae/metrics.hpp"

namespace slvae {

// ---------------------------------------------------------------------------
// Sub-seeds. Every random stage draws from derive_seed(master, <stage>[, index]).

namespace stage {
inline constexpr std::string_view dataset = "dataset";
inline constexpr std::string_view split = "split";
inline constexpr std::string_view forward = "forward";
inline constexpr std::string_view vae = "vae";
inline constexpr std::string_view bank = "bank";
inline constexpr std::string_view calibrate = "calibrate";
inline constexpr std::string_view query = "query";
inline constexpr std::string_view infer = "infer";
inline constexpr std::string_view scale = "scale";
}  // namespace stage

inline Rng stage_rng(std::uint64_t master, std::string_view name) { return Rng(derive_seed(master, name)); }
inline Rng stage_rng(std::uint64_t master, std::string_view name, std::uint64_t i) {
  return Rng(derive_seed(master, name, i));
}

inline SimConfig sim_config(const RunConfig& c) {
  SimConfig s = c.sim;
  s.pattern = c.pattern == PatternKind::sir ? DiffusionPattern::sir : DiffusionPattern::si;
  return s;
}

inline Graph load_run_graph(const RunConfig& c) { return load_edge_list(c.graph, c.normalization); }

/// Simulated episodes for SI/SIR; for cascades, every cascade in the file.
inline std::vector<EpisodePair> make_dataset(const RunConfig& c, const Graph& g) {
  if (c.pattern == PatternKind::cascade) return load_cascades(c.cascades, g, c.cascade);
  Rng rng = stage_rng(c.seed, stage::dataset);
  return build_dataset(g, sim_config(c), c.data, rng);
}

struct CascadeSplit {
  std::vector<EpisodePair> train;
  std::vector<EpisodePair> held_out;
};

/// Seeded shuffle, then the last `queries` cascades are held out.
inline CascadeSplit split_cascades(std::vector<EpisodePair> all, std::size_t queries, std::uint64_t master) {
  if (all.size() <= queries)
    throw std::invalid_argument("cascade file has " + std::to_string(all.size()) +
                                " cascades, need more than the " + std::to_string(queries) + " held out");
  Rng rng = stage_rng(master, stage::split);
  for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[uniform_index(rng, i)]);
  CascadeSplit s;
  s.held_out.assign(all.end() - static_cast<std::ptrdiff_t>(queries), all.end());
  all.resize(all.size() - queries);
  s.train = std::move(all);
  return s;
}

// ---------------------------------------------------------------------------
// Training

struct TrainedModels {
  ForwardTrainResult forward;
  VaeTrainResult vae;
  LatentBank bank;
  DecodedBank decoded;
  std::uint64_t dataset_hash = 0;
  double train_seconds = 0.0;

  /// The forward surrogate used at inference (fine-tuned copy in joint mode).
  const ForwardParams& forward_params() const { return vae.forward ? *vae.forward : forward.params; }
  ModelBundle bundle() const { return ModelBundle{forward_params(), vae.vae}; }
};

inline std::vector<SeedVector> sources_of(const std::vector<EpisodePair>& data) {
  std::vector<SeedVector> s;
  s.reserve(data.size());
  for (const auto& e : data) s.push_back(e.source);
  return s;
}

inline LatentBank make_bank(const RunConfig& c, const VaeParams& vae, const std::vector<EpisodePair>& data) {
  Rng rng = stage_rng(c.seed, stage::bank);
  return build_latent_bank(vae, sources_of(data), rng, c.inference.bank_limit);
}

inline TrainedModels train_models(const RunConfig& c, const Graph& g, const std::vector<EpisodePair>& data) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainedModels m;
  m.dataset_hash = dataset_hash(data, g.num_nodes());
  ForwardTrainConfig fc = c.forward;
  Rng frng = stage_rng(c.seed, stage::forward);
  m.forward = train_forward(g, data, fc, frng);
  log::info("forward surrogate: held-out MSE " + std::to_string(m.forward.best_holdout_mse));
  Rng vrng = stage_rng(c.seed, stage::vae);
  m.vae = train_vae(g, data, SurrogateForward(m.forward.params), c.vae, vrng);
  log::info("vae: final loss " + std::to_string(m.vae.loss_trace.back()));
  m.bank = make_bank(c, m.vae.vae, data);
  m.decoded = decode_bank(m.vae.vae, m.bank);
  m.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

/// Sections of the config that determine trained parameters.
inline std::uint64_t training_key(const RunConfig& c, const Graph& g, std::uint64_t data_hash) {
  const Json j = to_json(c);
  Json k;
  k["seed"] = j["seed"];
  k["graph_normalization"] = j["graph_normalization"];
  k["forward"] = j["forward"];
  k["vae"] = j["vae"];
  k["bank_limit"] = j["inference"]["bank_limit"];
  return fnv1a(k.dump(), g.hash() ^ data_hash);
}

/// Trained models keyed by (graph, dataset hash, training config). Lets
/// several experiments over the same data share one training run.
class ModelCache {
 public:
  std::shared_ptr<const TrainedModels> get(const RunConfig& c, const Graph& g, const std::vector<EpisodePair>& data) {
    const std::uint64_t key = training_key(c, g, dataset_hash(data, g.num_nodes()));
    std::lock_guard lock(mu_);
    auto it = cache_.find(key);
    if (it != cache_.end()) {
      ++hits_;
      return it->second;
    }
    auto m = std::make_shared<const TrainedModels>(train_models(c, g, data));
    cache_.emplace(key, m);
    return m;
  }
  std::size_t hits() const { return hits_; }

 private:
  std::mutex mu_;
  std::map<std::uint64_t, std::shared_ptr<const TrainedModels>> cache_;
  std::size_t hits_ = 0;
};

// ---------------------------------------------------------------------------
// Queries and calibration

struct Query {
  SeedVector truth;
  Observation observation;
};

/// Fresh random sources and their observation: the Monte-Carlo infection
/// frequency over the dataset's run count, or one binary realization.
inline Query make_query(const RunConfig& c, const Graph& g, Rng& rng) {
  Query q;
  q.truth = sample_sources(g, c.sim.source_fraction, rng);
  const SimConfig s = sim_config(c);
  q.observation = c.experiment.query == QueryObservation::mc
                      ? estimate_mc_observation(g, q.truth, s, c.data.mc_runs, rng, c.data.threads)
                      : simulate(g, q.truth, s, rng);
  return q;
}

inline Query query_from(const EpisodePair& e) { return Query{e.source, e.observation}; }

inline InferenceConfig variant_config(const RunConfig& c, Method m) {
  InferenceConfig ic = c.resolved_inference();
  if (m == Method::slvae_init_only) ic.variant = InferenceVariant::init_only;
  if (m == Method::slvae_no_init) ic.variant = InferenceVariant::no_init;
  if (m == Method::slvae) ic.variant = InferenceVariant::full;
  return ic;
}

inline std::vector<double> delta_grid() {
  std::vector<double> grid;
  for (int k = 1; k < 20; ++k) grid.push_back(0.05 * k);
  return grid;
}

/// Threshold maximizing mean F1 over calibration queries. Ties resolve to the
/// middle of the best candidates. With deferred thresholding one inference per
/// query serves every candidate; otherwise each candidate reruns inference.
inline double calibrate_delta(const Graph& g, const ForwardModel& fwd, const DecodedBank& bank, InferenceConfig ic,
                              const std::vector<Query>& queries, std::uint64_t master) {
  if (queries.empty()) throw std::invalid_argument("calibrate_delta: no calibration queries");
  const auto grid = delta_grid();
  std::vector<double> score(grid.size(), 0.0);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (!ic.project_every_step) {
      Rng rng = stage_rng(master, stage::calibrate, q);
      const auto res = infer(queries[q].observation, fwd, bank, g, ic, rng);
      for (std::size_t k = 0; k < grid.size(); ++k)
        score[k] += precision_recall_f1(threshold(res.relaxed, grid[k]), queries[q].truth).f1;
    } else {
      for (std::size_t k = 0; k < grid.size(); ++k) {
        InferenceConfig c = ic;
        c.delta = grid[k];
        Rng rng = stage_rng(master, stage::calibrate, q);
        score[k] += precision_recall_f1(infer(queries[q].observation, fwd, bank, g, c, rng).x, queries[q].truth).f1;
      }
    }
  }
  const double best = *std::max_element(score.begin(), score.end());
  std::vector<double> ties;
  for (std::size_t k = 0; k < grid.size(); ++k)
    if (score[k] >= best - 1e-12) ties.push_back(grid[k]);
  return ties[ties.size() / 2];
}

inline std::vector<Query> calibration_queries(const RunConfig& c, const Graph& g,
                                              const std::vector<EpisodePair>& train) {
  std::vector<Query> qs;
  if (c.pattern == PatternKind::cascade) {
    for (std::size_t i = 0; i < std::min(train.size(), c.experiment.calibration_queries); ++i)
      qs.push_back(query_from(train[i]));
    return qs;
  }
  Rng rng = stage_rng(c.seed, stage::calibrate);
  for (std::size_t i = 0; i < c.experiment.calibration_queries; ++i) qs.push_back(make_query(c, g, rng));
  return qs;
}

// ---------------------------------------------------------------------------
// Experiment

struct TrialResult {
  std::size_t trial = 0;
  bool ok = false;
  std::string error;
  Classification cls;
  double auc = 0.0;
  DenseVector scores;
  DenseVector decision;
};

struct MethodReport {
  Method method = Method::slvae;
  double delta = 0.0;  // SL-VAE variants only
  std::vector<TrialResult> trials;
  Summary precision, recall, f1, auc;
  std::size_t successes = 0;
  bool flagged = false;  // fewer successful trials than requested
};

struct ExperimentReport {
  RunConfig config;
  std::vector<MethodReport> methods;
  std::vector<SeedVector> truths;
  std::uint64_t dataset_hash = 0;
  double forward_holdout_mse = 0.0;
  double vae_final_loss = 0.0;
  double train_seconds = 0.0;  // wall clock, left out of the written reports
  double infer_seconds = 0.0;

  const MethodReport& method(Method m) const {
    for (const auto& r : methods)
      if (r.method == m) return r;
    throw std::out_of_range(std::string("method not in report: ") + to_string(m));
  }
};

inline bool is_slvae(Method m) { return m != Method::lpsi; }

inline void summarize_method(MethodReport& r, std::size_t requested) {
  std::vector<double> pr, re, f1, auc;
  for (const auto& t : r.trials) {
    if (!t.ok) continue;
    pr.push_back(t.cls.precision);
    re.push_back(t.cls.recall);
    f1.push_back(t.cls.f1);
    auc.push_back(t.auc);
  }
  r.successes = f1.size();
  r.flagged = r.successes < requested;
  r.precision = summarize(pr);
  r.recall = summarize(re);
  r.f1 = summarize(f1);
  r.auc = summarize(auc);
}

inline ExperimentReport run_experiment(const RunConfig& c, ModelCache* cache = nullptr) {
  c.validate();
  const Graph g = load_run_graph(c);
  std::vector<EpisodePair> data = make_dataset(c, g);
  std::vector<Query> queries;
  if (c.pattern == PatternKind::cascade) {
    CascadeSplit s = split_cascades(std::move(data), c.experiment.trials, c.seed);
    data = std::move(s.train);
    for (const auto& e : s.held_out) queries.push_back(query_from(e));
  } else {
    for (std::size_t t = 0; t < c.experiment.trials; ++t) {
      Rng rng = stage_rng(c.seed, stage::query, t);
      queries.push_back(make_query(c, g, rng));
    }
  }

  ExperimentReport rep;
  rep.config = c;
  const bool any_slvae = std::any_of(c.experiment.methods.begin(), c.experiment.methods.end(), is_slvae);
  std::shared_ptr<const TrainedModels> models;
  if (any_slvae) {
    ModelCache local;
    models = (cache ? cache : &local)->get(c, g, data);
    rep.dataset_hash = models->dataset_hash;
    rep.forward_holdout_mse = models->forward.best_holdout_mse;
    rep.vae_final_loss = models->vae.loss_trace.back();
    rep.train_seconds = models->train_seconds;
  } else {
    rep.dataset_hash = dataset_hash(data, g.num_nodes());
  }
  std::optional<SurrogateForward> fwd;
  if (models) fwd.emplace(models->forward_params());

  for (Method m : c.experiment.methods) {
    MethodReport r;
    r.method = m;
    if (is_slvae(m)) {
      r.delta = c.inference.delta;
      if (c.experiment.delta_mode == DeltaMode::calibrated)
        r.delta = calibrate_delta(g, *fwd, models->decoded, variant_config(c, m), calibration_queries(c, g, data),
                                  c.seed);
    }
    r.trials.resize(queries.size());
    rep.methods.push_back(std::move(r));
  }
  for (const auto& q : queries) rep.truths.push_back(q.truth);

  const auto t0 = std::chrono::steady_clock::now();
  auto run_trial = [&](std::size_t t) {
    const Query& q = queries[t];
    for (auto& r : rep.methods) {
      TrialResult& tr = r.trials[t];
      tr.trial = t;
      try {
        if (r.method == Method::lpsi) {
          LpsiResult l = lpsi_baseline(g, q.observation, c.lpsi);
          tr.scores = std::move(l.scores);
          tr.decision = std::move(l.prediction);
        } else {
          InferenceConfig ic = variant_config(c, r.method);
          ic.delta = r.delta;
          Rng rng = stage_rng(c.seed, stage::infer, t);
          InferenceResult res = infer(q.observation, *fwd, models->decoded, g, ic, rng);
          tr.scores = std::move(res.relaxed);
          tr.decision = std::move(res.x);
        }
        tr.cls = precision_recall_f1(tr.decision, q.truth);
        tr.auc = roc_auc(tr.scores, q.truth);
        tr.ok = true;
      } catch (const std::exception& e) {
        tr.error = e.what();
        log::warn(std::string(to_string(r.method)) + " trial " + std::to_string(t) + " failed: " + e.what());
      }
    }
  };
  const unsigned threads = std::max(1U, std::min<unsigned>(c.experiment.threads ? c.experiment.threads
                                                                                 : std::thread::hardware_concurrency(),
                                                           static_cast<unsigned>(queries.size())));
  if (threads <= 1) {
    for (std::size_t t = 0; t < queries.size(); ++t) run_trial(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w)
      pool.emplace_back([&] {
        for (std::size_t t; (t = next.fetch_add(1)) < queries.size();) run_trial(t);
      });
  }
  rep.infer_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (auto& r : rep.methods) summarize_method(r, c.experiment.trials);
  return rep;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
  if (!out) throw std::runtime_error("write failed: " + p.string());
}

inline std::string results_csv(const ExperimentReport& r) {
  std::string s = "method,trial,precision,recall,f1,auc,status\n";
  for (const auto& m : r.methods)
    for (const auto& t : m.trials)
      s += std::string(to_string(m.method)) + "," + std::to_string(t.trial) + "," + fmt(t.cls.precision) + "," +
           fmt(t.cls.recall) + "," + fmt(t.cls.f1) + "," + fmt(t.auc) + "," + (t.ok ? "ok" : "failed") + "\n";
  return s;
}

inline std::string scores_csv(const TrialResult& t, const SeedVector& truth) {
  std::string s = "node,score,decision,truth\n";
  for (std::size_t i = 0; i < t.scores.size(); ++i)
    s += std::to_string(i) + "," + fmt(t.scores[i]) + "," + fmt(t.decision[i]) + "," + fmt(truth[i]) + "\n";
  return s;
}

inline Json summary_json(const Summary& s) {
  return Json{{"mean", s.mean}, {"std", s.stddev}, {"min", s.min}, {"max", s.max}};
}

inline std::vector<std::string> experiment_artifacts(const ExperimentReport& r) {
  std::vector<std::string> a{"results.csv", "summary.json"};
  for (const auto& m : r.methods)
    for (const auto& t : m.trials)
      if (t.ok) a.push_back("scores/" + std::string(to_string(m.method)) + "_trial" + std::to_string(t.trial) + ".csv");
  return a;
}

inline Json experiment_summary(const ExperimentReport& r) {
  Json j;
  j["config"] = to_json(r.config);
  j["resolved"] = {{"forward_weight", r.config.resolved_forward_weight()},
                   {"query_runs", r.config.query_runs()},
                   {"dataset_hash", r.dataset_hash}};
  j["training"] = {{"forward_holdout_mse", r.forward_holdout_mse}, {"vae_final_loss", r.vae_final_loss}};
  Json methods = Json::object();
  for (const auto& m : r.methods) {
    Json mj{{"trials", m.trials.size()},
            {"successes", m.successes},
            {"flagged", m.flagged},
            {"precision", summary_json(m.precision)},
            {"recall", summary_json(m.recall)},
            {"f1", summary_json(m.f1)},
            {"auc", summary_json(m.auc)}};
    if (is_slvae(m.method)) mj["delta"] = m.delta;
    Json errors = Json::array();
    for (const auto& t : m.trials)
      if (!t.ok) errors.push_back({{"trial", t.trial}, {"error", t.error}});
    if (!errors.empty()) mj["errors"] = errors;
    methods[to_string(m.method)] = mj;
  }
  j["methods"] = methods;
  j["artifacts"] = experiment_artifacts(r);
  return j;
}

/// Writes results.csv, summary.json and one score dump per successful trial.
/// Returns the declared artifact paths.
inline std::vector<std::filesystem::path> write_experiment_reports(const ExperimentReport& r,
                                                                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "results.csv", results_csv(r));
  write_text(dir / "summary.json", experiment_summary(r).dump(2) + "\n");
  for (const auto& m : r.methods)
    for (const auto& t : m.trials)
      if (t.ok)
        write_text(dir / "scores" / (std::string(to_string(m.method)) + "_trial" + std::to_string(t.trial) + ".csv"),
                   scores_csv(t, r.truths[t.trial]));
  std::vector<std::filesystem::path> out;
  for (const auto& a : experiment_artifacts(r)) out.push_back(dir / a);
  return out;
}

// ---------------------------------------------------------------------------
// Runtime scaling

/// Uniform-ish random d-regular simple graph by sequential stub pairing with
/// restarts when the remaining stubs admit no valid pair.
inline Graph random_regular_graph(std::size_t n, std::size_t d, Rng& rng) {
  if (d >= n || (n * d) % 2 != 0)
    throw std::invalid_argument("no " + std::to_string(d) + "-regular graph on " + std::to_string(n) + " nodes");
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<NodeId> stubs;
    for (std::size_t v = 0; v < n; ++v)
      for (std::size_t k = 0; k < d; ++k) stubs.push_back(static_cast<NodeId>(v));
    std::unordered_set<std::uint64_t> used;
    auto key = [n](NodeId a, NodeId b) {
      return static_cast<std::uint64_t>(std::min(a, b)) * n + std::max(a, b);
    };
    std::vector<Edge> edges;
    bool stuck = false;
    while (!stubs.empty() && !stuck) {
      bool placed = false;
      for (int tries = 0; tries < 200 && !placed; ++tries) {
        const std::size_t i = uniform_index(rng, stubs.size()), j = uniform_index(rng, stubs.size());
        const NodeId a = stubs[i], b = stubs[j];
        if (i == j || a == b || used.count(key(a, b))) continue;
        used.insert(key(a, b));
        edges.emplace_back(a, b);
        const std::size_t hi = std::max(i, j), lo = std::min(i, j);
        std::swap(stubs[hi], stubs.back());
        stubs.pop_back();
        std::swap(stubs[lo], stubs.back());
        stubs.pop_back();
        placed = true;
      }
      if (!placed) {
        // exhaustive check before giving up on this attempt
        stuck = true;
        for (std::size_t i = 0; i < stubs.size() && stuck; ++i)
          for (std::size_t j = i + 1; j < stubs.size() && stuck; ++j)
            if (stubs[i] != stubs[j] && !used.count(key(stubs[i], stubs[j]))) stuck = false;
      }
    }
    if (!stuck) return Graph::from_edges(n, edges);
  }
  throw std::runtime_error("random_regular_graph: pairing kept getting stuck");
}

struct ScalingRow {
  std::size_t nodes = 0;
  std::size_t edges = 0;
  double train_seconds = 0.0;  // median
  double infer_seconds = 0.0;  // median, bank decoding plus one inference
};

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Per size: a random regular graph, a dataset from the configured process,
/// then timed training and inference, each repeated and reduced to a median.
inline std::vector<ScalingRow> time_scaling(const RunConfig& c) {
  c.validate();
  std::vector<ScalingRow> rows;
  using clock = std::chrono::steady_clock;
  for (std::size_t n : c.scale.sizes) {
    Rng grng = stage_rng(c.seed, stage::scale, n);
    const Graph g = random_regular_graph(n, c.scale.degree, grng);
    RunConfig rc = c;
    rc.pattern = c.pattern == PatternKind::cascade ? PatternKind::si : c.pattern;
    const auto data = make_dataset(rc, g);
    std::vector<double> train_t, infer_t;
    std::shared_ptr<TrainedModels> models;
    for (std::size_t rep = 0; rep < c.scale.repeats; ++rep) {
      const auto t0 = clock::now();
      models = std::make_shared<TrainedModels>(train_models(rc, g, data));
      train_t.push_back(std::chrono::duration<double>(clock::now() - t0).count());
    }
    Rng qrng = stage_rng(c.seed, stage::query, n);
    const Query q = make_query(rc, g, qrng);
    SurrogateForward fwd(models->forward_params());
    for (std::size_t rep = 0; rep < c.scale.repeats; ++rep) {
      Rng irng = stage_rng(c.seed, stage::infer, rep);
      const auto t0 = clock::now();
      const DecodedBank bank = decode_bank(models->vae.vae, models->bank);
      infer(q.observation, fwd, bank, g, rc.resolved_inference(), irng);
      infer_t.push_back(std::chrono::duration<double>(clock::now() - t0).count());
    }
    rows.push_back(ScalingRow{n, g.num_edges(), median(train_t), median(infer_t)});
    log::info("scale: " + std::to_string(n) + " nodes, train " + fmt(rows.back().train_seconds) + " s, infer " +
              fmt(rows.back().infer_seconds) + " s");
  }
  return rows;
}

inline std::string scaling_csv(const std::vector<ScalingRow>& rows) {
  std::string s = "nodes,edges,train_seconds,infer_seconds\n";
  for (const auto& r : rows)
    s += std::to_string(r.nodes) + "," + std::to_string(r.edges) + "," + fmt(r.train_seconds) + "," +
         fmt(r.infer_seconds) + "\n";
  return s;
}

}  // namespace slvae
