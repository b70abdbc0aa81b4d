#pragma once

// Run configuration: every module config plus paths and the master seed, read
// from strict JSON (unknown keys are errors) and echoed back in full.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "slvae/diffusion.hpp"
#include "slvae/forward_model.hpp"
#include "slvae/inference.hpp"
#include "slvae/lpsi.hpp"
#include "slvae/vae.hpp"

namespace slvae {

using Json = nlohmann::ordered_json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class PatternKind { si, sir, cascade };
enum class Method { slvae, slvae_init_only, slvae_no_init, lpsi };
enum class DeltaMode { fixed, calibrated };
enum class QueryObservation { mc, binary };

inline const char* to_string(PatternKind p) {
  switch (p) {
    case PatternKind::si: return "si";
    case PatternKind::sir: return "sir";
    case PatternKind::cascade: return "cascade";
  }
  return "?";
}
inline const char* to_string(Method m) {
  switch (m) {
    case Method::slvae: return "slvae";
    case Method::slvae_init_only: return "slvae_init_only";
    case Method::slvae_no_init: return "slvae_no_init";
    case Method::lpsi: return "lpsi";
  }
  return "?";
}
inline const char* to_string(DeltaMode d) { return d == DeltaMode::fixed ? "fixed" : "calibrated"; }
inline const char* to_string(QueryObservation q) { return q == QueryObservation::mc ? "mc" : "binary"; }
inline const char* to_string(CascadeLabeling l) {
  return l == CascadeLabeling::all_participants ? "all_participants" : "bottom_only";
}

struct ExperimentOptions {
  std::vector<Method> methods{Method::slvae, Method::lpsi};
  std::size_t trials = 10;
  unsigned threads = 1;
  DeltaMode delta_mode = DeltaMode::fixed;
  std::size_t calibration_queries = 8;
  QueryObservation query = QueryObservation::mc;
};

struct ScaleOptions {
  std::vector<std::size_t> sizes{1000, 2000, 4000};
  std::size_t repeats = 3;
  std::size_t degree = 10;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string dataset_name = "karate";
  std::filesystem::path graph;
  Normalization normalization = Normalization::row_stochastic;
  PatternKind pattern = PatternKind::si;
  std::filesystem::path cascades;      // cascade pattern only
  std::filesystem::path dataset_path;  // empty: <out>/dataset.bin
  std::filesystem::path bundle_path;   // empty: <out>/model.bundle
  std::filesystem::path out = "out";

  SimConfig sim;
  DatasetConfig data;
  CascadeConfig cascade;
  ForwardTrainConfig forward;
  TrainConfig vae;
  InferenceConfig inference;
  std::optional<double> forward_weight;  // empty: twice the query's Monte-Carlo run count
  LpsiConfig lpsi;
  ExperimentOptions experiment;
  ScaleOptions scale;

  std::filesystem::path resolved_dataset() const { return dataset_path.empty() ? out / "dataset.bin" : dataset_path; }
  std::filesystem::path resolved_bundle() const { return bundle_path.empty() ? out / "model.bundle" : bundle_path; }

  /// Monte-Carlo runs behind one query observation.
  std::size_t query_runs() const {
    return pattern != PatternKind::cascade && experiment.query == QueryObservation::mc ? data.mc_runs : 1;
  }
  double resolved_forward_weight() const {
    return forward_weight ? *forward_weight : 2.0 * static_cast<double>(query_runs());
  }
  InferenceConfig resolved_inference() const {
    InferenceConfig c = inference;
    c.forward_weight = resolved_forward_weight();
    return c;
  }

  void validate() const {
    if (graph.empty()) throw ConfigError("graph: path is required");
    if (pattern == PatternKind::cascade && cascades.empty())
      throw ConfigError("cascades: path is required for the cascade pattern");
    if (!(sim.beta >= 0.0 && sim.beta <= 1.0)) throw ConfigError("simulation.beta must lie in [0, 1]");
    if (!(sim.gamma >= 0.0 && sim.gamma <= 1.0)) throw ConfigError("simulation.gamma must lie in [0, 1]");
    if (sim.max_iterations < 1) throw ConfigError("simulation.max_iterations must be >= 1");
    if (!(sim.source_fraction > 0.0 && sim.source_fraction < 1.0))
      throw ConfigError("simulation.source_fraction must lie in (0, 1)");
    if (data.episodes < 1) throw ConfigError("dataset.episodes must be >= 1");
    if (data.mc_runs < 1) throw ConfigError("dataset.mc_runs must be >= 1");
    if (forward.epochs < 1) throw ConfigError("forward.epochs must be >= 1");
    if (forward.hidden < 1 || forward.depth < 1 || forward.batch_size < 1)
      throw ConfigError("forward.hidden, forward.depth and forward.batch_size must be >= 1");
    if (!(forward.learning_rate > 0.0)) throw ConfigError("forward.learning_rate must be > 0");
    if (!(forward.holdout_fraction >= 0.0 && forward.holdout_fraction < 1.0))
      throw ConfigError("forward.holdout_fraction must lie in [0, 1)");
    if (vae.epochs < 1) throw ConfigError("vae.epochs must be >= 1");
    if (vae.latent_dim < 1) throw ConfigError("vae.latent_dim must be >= 1");
    try {
      sim.validate();
      vae.validate();
      resolved_inference().validate();
      lpsi.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (forward_weight && !(*forward_weight > 0.0)) throw ConfigError("inference.forward_weight must be > 0");
    if (experiment.trials < 1) throw ConfigError("experiment.trials must be >= 1");
    if (experiment.methods.empty()) throw ConfigError("experiment.methods must not be empty");
    if (experiment.delta_mode == DeltaMode::calibrated && experiment.calibration_queries < 1)
      throw ConfigError("experiment.calibration_queries must be >= 1");
    if (scale.sizes.empty()) throw ConfigError("scale.sizes must not be empty");
    if (!std::is_sorted(scale.sizes.begin(), scale.sizes.end()))
      throw ConfigError("scale.sizes must be sorted ascending");
    if (scale.repeats < 1) throw ConfigError("scale.repeats must be >= 1");
    if (scale.degree < 1) throw ConfigError("scale.degree must be >= 1");
    for (std::size_t n : scale.sizes)
      if (n <= scale.degree || (n * scale.degree) % 2 != 0)
        throw ConfigError("scale.sizes: " + std::to_string(n) + " nodes cannot carry a " +
                          std::to_string(scale.degree) + "-regular graph");
  }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

class Reader {
 public:
  Reader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(label("") + "must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("expected true or false");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("expected an integer");
        if (std::is_unsigned_v<T> && it->template get<long long>() < 0) throw ConfigError("must be >= 0");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("expected a number");
      } else {
        if (!it->is_string()) throw ConfigError("expected a string");
      }
      out = it->template get<T>();
    } catch (const std::exception& e) {
      throw ConfigError(label(key) + e.what());
    }
  }

  void path(const char* key, std::filesystem::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }

  template <typename E, typename Parse>
  void choice(const char* key, E& out, Parse parse) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_string()) throw ConfigError(label(key) + "expected a string");
    try {
      out = parse(it->template get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(label(key) + e.what());
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  std::string label(const std::string& key) const {
    const std::string full = where_.empty() ? key : key.empty() ? where_ : where_ + "." + key;
    return full.empty() ? "config: " : full + ": ";
  }
  std::string sub(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(label(it.key()) + "unknown key");
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline Normalization parse_normalization(const std::string& s) {
  if (s == "row_stochastic") return Normalization::row_stochastic;
  if (s == "symmetric") return Normalization::symmetric;
  throw std::invalid_argument("unknown normalization '" + s + "' (row_stochastic, symmetric)");
}
inline PatternKind parse_pattern(const std::string& s) {
  if (s == "si") return PatternKind::si;
  if (s == "sir") return PatternKind::sir;
  if (s == "cascade") return PatternKind::cascade;
  throw std::invalid_argument("unknown pattern '" + s + "' (si, sir, cascade)");
}
inline Method parse_method(const std::string& s) {
  for (Method m : {Method::slvae, Method::slvae_init_only, Method::slvae_no_init, Method::lpsi})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown method '" + s + "' (slvae, slvae_init_only, slvae_no_init, lpsi)");
}
inline DeltaMode parse_delta_mode(const std::string& s) {
  if (s == "fixed") return DeltaMode::fixed;
  if (s == "calibrated") return DeltaMode::calibrated;
  throw std::invalid_argument("unknown delta mode '" + s + "' (fixed, calibrated)");
}
inline QueryObservation parse_query(const std::string& s) {
  if (s == "mc") return QueryObservation::mc;
  if (s == "binary") return QueryObservation::binary;
  throw std::invalid_argument("unknown query observation '" + s + "' (mc, binary)");
}
inline CascadeLabeling parse_labeling(const std::string& s) {
  if (s == "all_participants") return CascadeLabeling::all_participants;
  if (s == "bottom_only") return CascadeLabeling::bottom_only;
  throw std::invalid_argument("unknown labeling '" + s + "' (all_participants, bottom_only)");
}

template <typename T>
std::vector<T> read_list(const Json& j, const std::string& where, auto convert) {
  if (!j.is_array()) throw ConfigError(where + ": expected a list");
  std::vector<T> out;
  for (const auto& e : j) {
    try {
      out.push_back(convert(e));
    } catch (const std::exception& ex) {
      throw ConfigError(where + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace detail

/// Fills `cfg` from `j`; keys absent from `j` keep their current value.
inline void apply_json(RunConfig& cfg, const Json& j) {
  detail::Reader r(j, "");
  r.get("seed", cfg.seed);
  r.get("dataset_name", cfg.dataset_name);
  r.path("graph", cfg.graph);
  r.choice("graph_normalization", cfg.normalization, detail::parse_normalization);
  r.choice("pattern", cfg.pattern, detail::parse_pattern);
  r.path("cascades", cfg.cascades);
  r.path("dataset_path", cfg.dataset_path);
  r.path("bundle_path", cfg.bundle_path);
  r.path("out", cfg.out);

  if (const Json* s = r.child("simulation")) {
    detail::Reader q(*s, "simulation");
    q.get("beta", cfg.sim.beta);
    q.get("gamma", cfg.sim.gamma);
    q.get("max_iterations", cfg.sim.max_iterations);
    q.get("source_fraction", cfg.sim.source_fraction);
    q.finish();
  }
  if (const Json* s = r.child("dataset")) {
    detail::Reader q(*s, "dataset");
    q.get("episodes", cfg.data.episodes);
    q.get("subsets_per_episode", cfg.data.subsets_per_episode);
    q.get("mc_runs", cfg.data.mc_runs);
    q.get("threads", cfg.data.threads);
    q.finish();
  }
  if (const Json* s = r.child("cascade")) {
    detail::Reader q(*s, "cascade");
    q.get("top_fraction", cfg.cascade.top_fraction);
    q.get("bottom_fraction", cfg.cascade.bottom_fraction);
    q.choice("labeling", cfg.cascade.labeling, detail::parse_labeling);
    q.finish();
  }
  if (const Json* s = r.child("forward")) {
    detail::Reader q(*s, "forward");
    q.get("epochs", cfg.forward.epochs);
    q.get("learning_rate", cfg.forward.learning_rate);
    q.get("hidden", cfg.forward.hidden);
    q.get("depth", cfg.forward.depth);
    q.get("batch_size", cfg.forward.batch_size);
    q.get("holdout_fraction", cfg.forward.holdout_fraction);
    q.finish();
  }
  if (const Json* s = r.child("vae")) {
    detail::Reader q(*s, "vae");
    q.get("lambda", cfg.vae.lambda);
    q.get("learning_rate", cfg.vae.learning_rate);
    q.get("epochs", cfg.vae.epochs);
    q.get("batch_size", cfg.vae.batch_size);
    q.get("latent_dim", cfg.vae.latent_dim);
    q.get("hidden", cfg.vae.hidden);
    q.get("joint", cfg.vae.joint);
    q.finish();
  }
  if (const Json* s = r.child("inference")) {
    detail::Reader q(*s, "inference");
    q.get("tau", cfg.inference.tau);
    q.get("delta", cfg.inference.delta);
    q.get("n_init", cfg.inference.n_init);
    q.get("n_opt", cfg.inference.n_opt);
    q.get("step_size", cfg.inference.step_size);
    q.get("bank_limit", cfg.inference.bank_limit);
    q.get("project_every_step", cfg.inference.project_every_step);
    q.choice("optimizer", cfg.inference.optimizer, parse_optimizer);
    q.choice("variant", cfg.inference.variant, parse_variant);
    if (const Json* w = q.child("forward_weight")) {
      if (w->is_string() && *w == "auto") {
        cfg.forward_weight.reset();
      } else if (w->is_number()) {
        cfg.forward_weight = w->get<double>();
      } else {
        throw ConfigError("inference.forward_weight: expected a number or \"auto\"");
      }
    }
    q.finish();
  }
  if (const Json* s = r.child("lpsi")) {
    detail::Reader q(*s, "lpsi");
    q.get("alpha", cfg.lpsi.alpha);
    q.get("tolerance", cfg.lpsi.tolerance);
    q.get("max_sweeps", cfg.lpsi.max_sweeps);
    q.finish();
  }
  if (const Json* s = r.child("experiment")) {
    detail::Reader q(*s, "experiment");
    if (const Json* m = q.child("methods"))
      cfg.experiment.methods = detail::read_list<Method>(
          *m, "experiment.methods", [](const Json& e) { return detail::parse_method(e.get<std::string>()); });
    q.get("trials", cfg.experiment.trials);
    q.get("threads", cfg.experiment.threads);
    q.choice("delta", cfg.experiment.delta_mode, detail::parse_delta_mode);
    q.get("calibration_queries", cfg.experiment.calibration_queries);
    q.choice("query_observation", cfg.experiment.query, detail::parse_query);
    q.finish();
  }
  if (const Json* s = r.child("scale")) {
    detail::Reader q(*s, "scale");
    if (const Json* m = q.child("sizes"))
      cfg.scale.sizes = detail::read_list<std::size_t>(*m, "scale.sizes", [](const Json& e) {
        if (!e.is_number_integer() || e.get<long long>() < 0) throw ConfigError("expected non-negative integers");
        return e.get<std::size_t>();
      });
    q.get("repeats", cfg.scale.repeats);
    q.get("degree", cfg.scale.degree);
    q.finish();
  }
  r.finish();
}

inline RunConfig parse_config(const Json& j) {
  RunConfig cfg;
  apply_json(cfg, j);
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

/// Every field, defaults included, in the same layout the parser accepts.
inline Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["dataset_name"] = c.dataset_name;
  j["graph"] = c.graph.string();
  j["graph_normalization"] = c.normalization == Normalization::row_stochastic ? "row_stochastic" : "symmetric";
  j["pattern"] = to_string(c.pattern);
  j["cascades"] = c.cascades.string();
  j["dataset_path"] = c.dataset_path.string();
  j["bundle_path"] = c.bundle_path.string();
  j["out"] = c.out.string();
  j["simulation"] = {{"beta", c.sim.beta},
                     {"gamma", c.sim.gamma},
                     {"max_iterations", c.sim.max_iterations},
                     {"source_fraction", c.sim.source_fraction}};
  j["dataset"] = {{"episodes", c.data.episodes},
                  {"subsets_per_episode", c.data.subsets_per_episode},
                  {"mc_runs", c.data.mc_runs},
                  {"threads", c.data.threads}};
  j["cascade"] = {{"top_fraction", c.cascade.top_fraction},
                  {"bottom_fraction", c.cascade.bottom_fraction},
                  {"labeling", to_string(c.cascade.labeling)}};
  j["forward"] = {{"epochs", c.forward.epochs},         {"learning_rate", c.forward.learning_rate},
                  {"hidden", c.forward.hidden},         {"depth", c.forward.depth},
                  {"batch_size", c.forward.batch_size}, {"holdout_fraction", c.forward.holdout_fraction}};
  j["vae"] = {{"lambda", c.vae.lambda},         {"learning_rate", c.vae.learning_rate},
              {"epochs", c.vae.epochs},         {"batch_size", c.vae.batch_size},
              {"latent_dim", c.vae.latent_dim}, {"hidden", c.vae.hidden},
              {"joint", c.vae.joint}};
  j["inference"] = {{"tau", c.inference.tau},
                    {"delta", c.inference.delta},
                    {"n_init", c.inference.n_init},
                    {"n_opt", c.inference.n_opt},
                    {"step_size", c.inference.step_size},
                    {"bank_limit", c.inference.bank_limit},
                    {"project_every_step", c.inference.project_every_step},
                    {"optimizer", to_string(c.inference.optimizer)},
                    {"variant", to_string(c.inference.variant)}};
  if (c.forward_weight)
    j["inference"]["forward_weight"] = *c.forward_weight;
  else
    j["inference"]["forward_weight"] = "auto";
  j["lpsi"] = {{"alpha", c.lpsi.alpha}, {"tolerance", c.lpsi.tolerance}, {"max_sweeps", c.lpsi.max_sweeps}};
  Json methods = Json::array();
  for (Method m : c.experiment.methods) methods.push_back(to_string(m));
  j["experiment"] = {{"methods", methods},
                     {"trials", c.experiment.trials},
                     {"threads", c.experiment.threads},
                     {"delta", to_string(c.experiment.delta_mode)},
                     {"calibration_queries", c.experiment.calibration_queries},
                     {"query_observation", to_string(c.experiment.query)}};
  j["scale"] = {{"sizes", c.scale.sizes}, {"repeats", c.scale.repeats}, {"degree", c.scale.degree}};
  return j;
}

inline std::uint64_t config_hash(const Json& j) { return fnv1a(j.dump()); }

}  // namespace slvae
