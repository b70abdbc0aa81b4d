#pragma once

// Ground-truth diffusion: discrete-time SI and SIR on an undirected graph,
// source sampling, Monte-Carlo infection probabilities, monotone subset
// sampling and the training dataset built from them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "slvae/graph.hpp"
#include "slvae/log.hpp"
#include "slvae/matrix.hpp"
#include "slvae/rng.hpp"
#include "slvae/serialize.hpp"

namespace slvae {

/// Per-node source indicator. Binary for ground truth, relaxed into [0,1]
/// during inference.
using SeedVector = DenseVector;
/// Per-node infection probability (or 0/1 state for a single realization).
using Observation = DenseVector;

enum class DiffusionPattern { si, sir };

inline const char* to_string(DiffusionPattern p) { return p == DiffusionPattern::si ? "SI" : "SIR"; }

struct SimConfig {
  DiffusionPattern pattern = DiffusionPattern::si;
  double beta = 0.1;   // infection probability per contact per step
  double gamma = 0.1;  // recovery probability per step (SIR)
  std::size_t max_iterations = 200;
  double source_fraction = 0.10;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("sim.beta must lie in [0,1]");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("sim.gamma must lie in [0,1]");
    if (max_iterations < 1) throw std::invalid_argument("sim.max_iterations must be >= 1");
    if (!(source_fraction > 0.0 && source_fraction <= 1.0))
      throw std::invalid_argument("sim.source_fraction must lie in (0,1]");
  }
};

enum class NodeState : std::uint8_t { susceptible = 0, infected = 1, recovered = 2 };

namespace detail {
// p == 0 and p == 1 consume no randomness, so SIR with gamma = 0 walks the
// same stream as SI and beta = 1 is fully deterministic.
inline bool coin(Rng& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return uniform01(rng) < p;
}
}  // namespace detail

inline std::size_t seed_count(std::span<const double> x) {
  return static_cast<std::size_t>(std::count_if(x.begin(), x.end(), [](double v) { return v > 0.5; }));
}

inline void require_seeds(const Graph& g, std::span<const double> seeds) {
  if (seeds.size() != g.num_nodes())
    throw std::invalid_argument("seed vector has length " + std::to_string(seeds.size()) + ", graph has " +
                                std::to_string(g.num_nodes()) + " nodes");
  if (seed_count(seeds) == 0) throw std::invalid_argument("seed set is empty");
}

/// Exactly round(fraction * |V|) distinct sources, drawn uniformly (at least one).
inline SeedVector sample_sources(const Graph& g, double fraction, Rng& rng) {
  const std::size_t n = g.num_nodes();
  if (n == 0) throw std::invalid_argument("cannot sample sources on an empty graph");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("source fraction must lie in (0,1]");
  auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (k == 0) {
    log::warn("source fraction " + std::to_string(fraction) + " rounds to zero seeds; using one");
    k = 1;
  }
  k = std::min(k, n);
  std::vector<NodeId> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<NodeId>(i);
  for (std::size_t i = 0; i < k; ++i) std::swap(perm[i], perm[i + uniform_index(rng, n - i)]);
  SeedVector x(n, 0.0);
  for (std::size_t i = 0; i < k; ++i) x[perm[i]] = 1.0;
  return x;
}

/// Called after every completed step with the node states.
using StepObserver = std::function<void(std::size_t step, std::span<const NodeState>)>;

namespace detail {

/// Shared SI/SIR loop. Each step: every node infected at the start of the
/// step tries each susceptible neighbor with probability beta; afterwards
/// (SIR only) every node that was infected at the start recovers with
/// probability gamma.
inline std::vector<NodeState> run_epidemic(const Graph& g, std::span<const double> seeds, const SimConfig& cfg,
                                           bool recover, Rng& rng, const StepObserver& observer) {
  require_seeds(g, seeds);
  const std::size_t n = g.num_nodes();
  std::vector<NodeState> state(n, NodeState::susceptible);
  std::vector<NodeId> active;
  for (std::size_t v = 0; v < n; ++v)
    if (seeds[v] > 0.5) {
      state[v] = NodeState::infected;
      active.push_back(static_cast<NodeId>(v));
    }
  if (observer) observer(0, state);
  std::vector<NodeId> fresh;
  for (std::size_t step = 1; step <= cfg.max_iterations && !active.empty(); ++step) {
    fresh.clear();
    bool contact = false;
    for (NodeId u : active)
      for (NodeId v : g.neighbors(u)) {
        if (state[v] != NodeState::susceptible) continue;
        contact = true;
        if (coin(rng, cfg.beta)) {
          state[v] = NodeState::infected;
          fresh.push_back(v);
        }
      }
    if (recover) {
      std::vector<NodeId> still;
      for (NodeId u : active) {
        if (coin(rng, cfg.gamma))
          state[u] = NodeState::recovered;
        else
          still.push_back(u);
      }
      active = std::move(still);
    }
    if (!recover) {
      // Nodes whose neighbors are all infected can never act again.
      std::vector<NodeId> still;
      for (NodeId u : active) {
        auto nb = g.neighbors(u);
        if (std::any_of(nb.begin(), nb.end(), [&](NodeId v) { return state[v] == NodeState::susceptible; }))
          still.push_back(u);
      }
      active = std::move(still);
    }
    for (NodeId v : fresh) {
      auto nb = g.neighbors(v);
      if (recover || std::any_of(nb.begin(), nb.end(), [&](NodeId w) { return state[w] == NodeState::susceptible; }))
        active.push_back(v);
    }
    std::sort(active.begin(), active.end());
    if (observer) observer(step, state);
    if (!recover && !contact) break;  // SI fixpoint
  }
  return state;
}

}  // namespace detail

/// Binary infection vector after SI diffusion.
inline Observation simulate_si(const Graph& g, std::span<const double> seeds, const SimConfig& cfg, Rng& rng,
                               const StepObserver& observer = {}) {
  auto state = detail::run_epidemic(g, seeds, cfg, false, rng, observer);
  Observation y(state.size());
  for (std::size_t v = 0; v < state.size(); ++v) y[v] = state[v] == NodeState::infected ? 1.0 : 0.0;
  return y;
}

struct SirResult {
  std::vector<NodeState> status;
  Observation observation;  // 1 only for currently infected nodes
};

inline SirResult simulate_sir(const Graph& g, std::span<const double> seeds, const SimConfig& cfg, Rng& rng,
                              const StepObserver& observer = {}) {
  SirResult r;
  r.status = detail::run_epidemic(g, seeds, cfg, true, rng, observer);
  r.observation.resize(r.status.size());
  for (std::size_t v = 0; v < r.status.size(); ++v)
    r.observation[v] = r.status[v] == NodeState::infected ? 1.0 : 0.0;
  return r;
}

/// One binary realization under cfg.pattern.
inline Observation simulate(const Graph& g, std::span<const double> seeds, const SimConfig& cfg, Rng& rng) {
  return cfg.pattern == DiffusionPattern::si ? simulate_si(g, seeds, cfg, rng)
                                             : simulate_sir(g, seeds, cfg, rng).observation;
}

/// Per-node infection frequency over `runs` independent realizations. Run r
/// uses its own stream derived from one draw of `rng`, so the result does not
/// depend on `threads`.
inline Observation estimate_mc_observation(const Graph& g, std::span<const double> seeds, const SimConfig& cfg,
                                           std::size_t runs, Rng& rng, unsigned threads = 0) {
  if (runs < 1) throw std::invalid_argument("Monte-Carlo estimate needs at least one run");
  require_seeds(g, seeds);
  const std::uint64_t base = rng();
  const std::size_t n = g.num_nodes();
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, runs));
  std::vector<std::vector<std::uint32_t>> counts(threads, std::vector<std::uint32_t>(n, 0));
  auto work = [&](unsigned t) {
    for (std::size_t r = t; r < runs; r += threads) {
      Rng run_rng(derive_seed(base, "mc-run", r));
      const Observation y = simulate(g, seeds, cfg, run_rng);
      for (std::size_t v = 0; v < n; ++v) counts[t][v] += y[v] > 0.5 ? 1U : 0U;
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t);
  }
  Observation y(n, 0.0);
  for (std::size_t v = 0; v < n; ++v) {
    std::uint64_t c = 0;
    for (unsigned t = 0; t < threads; ++t) c += counts[t][v];
    y[v] = static_cast<double>(c) / static_cast<double>(runs);
  }
  return y;
}

struct MonotoneSubsets {
  std::vector<SeedVector> subsets;
  bool degenerate = false;  // single-seed input: subsets are copies
};

/// Each subset drops k seeds, k uniform in [1, s-1], the dropped seeds chosen
/// uniformly. A single-seed vector has no nonempty strict subset; it is
/// returned unchanged and flagged.
inline MonotoneSubsets sample_monotone_subsets(std::span<const double> x, std::size_t count, Rng& rng) {
  std::vector<NodeId> support;
  for (std::size_t v = 0; v < x.size(); ++v) {
    if (x[v] != 0.0 && x[v] != 1.0) throw std::invalid_argument("sample_monotone_subsets needs a binary vector");
    if (x[v] == 1.0) support.push_back(static_cast<NodeId>(v));
  }
  if (support.empty()) throw std::invalid_argument("sample_monotone_subsets needs at least one seed");
  MonotoneSubsets out;
  if (support.size() == 1) {
    out.degenerate = true;
    out.subsets.assign(count, SeedVector(x.begin(), x.end()));
    return out;
  }
  const std::size_t s = support.size();
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t drop = 1 + uniform_index(rng, s - 1);
    std::vector<NodeId> perm = support;
    for (std::size_t i = 0; i < drop; ++i) std::swap(perm[i], perm[i + uniform_index(rng, s - i)]);
    SeedVector sub(x.begin(), x.end());
    for (std::size_t i = 0; i < drop; ++i) sub[perm[i]] = 0.0;
    out.subsets.push_back(std::move(sub));
  }
  return out;
}

struct SubsetSample {
  SeedVector source;
  Observation observation;
};

/// One training sample: a source, its observation, and sampled sub-sources.
struct EpisodePair {
  SeedVector source;
  Observation observation;
  std::vector<SubsetSample> subsets;
  bool degenerate = false;
};

/// True iff every subset's support lies inside the source's support.
inline bool subsets_contained(const EpisodePair& e) {
  for (const auto& s : e.subsets)
    for (std::size_t v = 0; v < s.source.size(); ++v)
      if (s.source[v] > 0.5 && e.source[v] <= 0.5) return false;
  return true;
}

struct DatasetConfig {
  std::size_t episodes = 300;
  std::size_t subsets_per_episode = 4;
  std::size_t mc_runs = 200;
  unsigned threads = 0;
};

inline std::vector<EpisodePair> build_dataset(const Graph& g, const SimConfig& cfg, const DatasetConfig& dcfg,
                                              Rng& rng) {
  cfg.validate();
  if (dcfg.episodes < 1) throw std::invalid_argument("dataset needs at least one episode");
  std::vector<EpisodePair> data;
  data.reserve(dcfg.episodes);
  for (std::size_t e = 0; e < dcfg.episodes; ++e) {
    EpisodePair ep;
    ep.source = sample_sources(g, cfg.source_fraction, rng);
    ep.observation = estimate_mc_observation(g, ep.source, cfg, dcfg.mc_runs, rng, dcfg.threads);
    auto subs = sample_monotone_subsets(ep.source, dcfg.subsets_per_episode, rng);
    ep.degenerate = subs.degenerate;
    for (auto& s : subs.subsets) {
      Observation y = estimate_mc_observation(g, s, cfg, dcfg.mc_runs, rng, dcfg.threads);
      ep.subsets.push_back(SubsetSample{std::move(s), std::move(y)});
    }
    data.push_back(std::move(ep));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Real cascades

enum class CascadeLabeling {
  all_participants,  // every listed node is infected in y
  bottom_only,       // only the latest bottom_fraction are infected in y
};

struct CascadeConfig {
  double top_fraction = 0.05;
  double bottom_fraction = 0.30;
  CascadeLabeling labeling = CascadeLabeling::all_participants;
};

inline std::size_t fraction_count(double fraction, std::size_t m) {
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(fraction * static_cast<double>(m))), 1, m);
}

/// Reads "cascade_id node_id timestamp" records. Per cascade (ordered by time,
/// ties by node ID) the earliest top_fraction nodes are the source and the
/// latest bottom_fraction are infected; see CascadeLabeling for the rest.
inline std::vector<EpisodePair> load_cascades(const std::filesystem::path& path, const Graph& g,
                                              const CascadeConfig& cfg = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open cascade file '" + path.string() + "'");
  std::map<std::string, std::vector<std::pair<double, NodeId>>> cascades;
  std::vector<std::string> order;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    std::string id;
    long long node = -1;
    double ts = 0.0;
    if (!(ss >> id >> node >> ts) || node < 0)
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected 'cascade node time'");
    const auto dense = g.dense_index(static_cast<std::uint64_t>(node));
    if (dense < 0)
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": unknown node id " +
                               std::to_string(node));
    auto [it, inserted] = cascades.try_emplace(id);
    if (inserted) order.push_back(id);
    it->second.emplace_back(ts, static_cast<NodeId>(dense));
  }
  std::vector<EpisodePair> out;
  for (const auto& id : order) {
    auto records = cascades[id];
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first < b.first : a.second < b.second;
    });
    // a node listed twice keeps its earliest time
    std::vector<std::uint8_t> seen(g.num_nodes(), 0);
    std::vector<NodeId> nodes;
    for (auto [t, v] : records)
      if (!seen[v]) {
        seen[v] = 1;
        nodes.push_back(v);
      }
    if (nodes.empty()) throw std::runtime_error("cascade '" + id + "' is empty");
    const std::size_t m = nodes.size();
    const std::size_t top = fraction_count(cfg.top_fraction, m);
    const std::size_t bottom = fraction_count(cfg.bottom_fraction, m);
    EpisodePair ep;
    ep.source.assign(g.num_nodes(), 0.0);
    ep.observation.assign(g.num_nodes(), 0.0);
    for (std::size_t i = 0; i < top; ++i) ep.source[nodes[i]] = 1.0;
    if (cfg.labeling == CascadeLabeling::all_participants)
      for (NodeId v : nodes) ep.observation[v] = 1.0;
    for (std::size_t i = m - bottom; i < m; ++i) ep.observation[nodes[i]] = 1.0;
    out.push_back(std::move(ep));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset persistence: magic, node count, episode count, then per episode the
// packed source bits, the observation, and the subset blocks; checksum last.

inline constexpr std::string_view kDatasetMagic = "SLVAEDS1";

namespace detail {
inline void write_bits(ByteWriter& w, std::span<const double> x) {
  for (std::size_t i = 0; i < x.size(); i += 8) {
    std::uint8_t b = 0;
    for (std::size_t k = 0; k < 8 && i + k < x.size(); ++k)
      if (x[i + k] > 0.5) b |= static_cast<std::uint8_t>(1U << k);
    w.u8(b);
  }
}
inline SeedVector read_bits(ByteReader& r, std::size_t n) {
  SeedVector x(n, 0.0);
  for (std::size_t i = 0; i < n; i += 8) {
    const std::uint8_t b = r.u8();
    for (std::size_t k = 0; k < 8 && i + k < n; ++k) x[i + k] = (b >> k) & 1U ? 1.0 : 0.0;
  }
  return x;
}
}  // namespace detail

inline std::string serialize_dataset(const std::vector<EpisodePair>& data, std::size_t num_nodes) {
  ByteWriter w;
  begin_block(w, kDatasetMagic);
  w.u32(static_cast<std::uint32_t>(num_nodes));
  w.u32(static_cast<std::uint32_t>(data.size()));
  for (const auto& e : data) {
    if (e.source.size() != num_nodes || e.observation.size() != num_nodes)
      throw std::invalid_argument("episode length does not match node count");
    detail::write_bits(w, e.source);
    for (double v : e.observation) w.f64(v);
    w.u8(e.degenerate ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(e.subsets.size()));
    for (const auto& s : e.subsets) {
      detail::write_bits(w, s.source);
      for (double v : s.observation) w.f64(v);
    }
  }
  w.checksum_since(0);
  return w.str();
}

inline std::vector<EpisodePair> deserialize_dataset(std::string bytes, std::size_t* num_nodes_out = nullptr) {
  ByteReader r(std::move(bytes));
  expect_block(r, kDatasetMagic);
  const std::size_t n = r.u32();
  const std::size_t count = r.u32();
  std::vector<EpisodePair> data;
  for (std::size_t e = 0; e < count; ++e) {
    EpisodePair ep;
    ep.source = detail::read_bits(r, n);
    ep.observation.resize(n);
    for (double& v : ep.observation) v = r.f64();
    ep.degenerate = r.u8() != 0;
    const std::size_t subs = r.u32();
    for (std::size_t s = 0; s < subs; ++s) {
      SubsetSample ss;
      ss.source = detail::read_bits(r, n);
      ss.observation.resize(n);
      for (double& v : ss.observation) v = r.f64();
      ep.subsets.push_back(std::move(ss));
    }
    data.push_back(std::move(ep));
  }
  r.verify_checksum_since(0, "dataset");
  if (!r.at_end()) throw FormatError("trailing bytes after dataset");
  if (num_nodes_out) *num_nodes_out = n;
  return data;
}

inline void save_dataset(const std::vector<EpisodePair>& data, std::size_t num_nodes,
                         const std::filesystem::path& path) {
  write_file(path, serialize_dataset(data, num_nodes));
}

inline std::vector<EpisodePair> load_dataset(const std::filesystem::path& path, std::size_t* num_nodes = nullptr) {
  return deserialize_dataset(read_file(path), num_nodes);
}

inline std::uint64_t dataset_hash(const std::vector<EpisodePair>& data, std::size_t num_nodes) {
  return fnv1a(serialize_dataset(data, num_nodes));
}

}  // namespace slvae
