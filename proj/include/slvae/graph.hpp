#pragma once

// Undirected graph with dense 0-based node indices, CSR adjacency and its
// row-stochastic normalization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace slvae {

using NodeId = std::uint32_t;
using Edge = std::pair<NodeId, NodeId>;

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Compressed sparse row matrix.
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<NodeId> col_idx;
  std::vector<double> values;

  std::size_t nnz() const { return col_idx.size(); }

  double row_sum(std::size_t r) const {
    double s = 0.0;
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) s += values[k];
    return s;
  }

  /// y = A x
  void multiply(std::span<const double> x, std::span<double> y) const {
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) s += values[k] * x[col_idx[k]];
      y[r] = s;
    }
  }

  double at(std::size_t r, std::size_t c) const {
    auto first = col_idx.begin() + static_cast<std::ptrdiff_t>(row_ptr[r]);
    auto last = col_idx.begin() + static_cast<std::ptrdiff_t>(row_ptr[r + 1]);
    auto it = std::lower_bound(first, last, static_cast<NodeId>(c));
    if (it == last || *it != c) return 0.0;
    return values[static_cast<std::size_t>(it - col_idx.begin())];
  }
};

enum class Normalization { row_stochastic, symmetric };

/// Divides every nonzero row by its row sum. Zero rows stay zero.
inline SparseMatrix row_normalize(const SparseMatrix& adjacency) {
  SparseMatrix out = adjacency;
  for (std::size_t r = 0; r < out.rows; ++r) {
    const double s = adjacency.row_sum(r);
    if (s == 0.0) continue;
    for (std::size_t k = out.row_ptr[r]; k < out.row_ptr[r + 1]; ++k) out.values[k] = adjacency.values[k] / s;
  }
  return out;
}

/// D^{-1/2} A D^{-1/2}; available as a config alternative to row_normalize.
inline SparseMatrix symmetric_normalize(const SparseMatrix& adjacency) {
  std::vector<double> inv_sqrt(adjacency.rows, 0.0);
  for (std::size_t r = 0; r < adjacency.rows; ++r) {
    const double s = adjacency.row_sum(r);
    if (s > 0.0) inv_sqrt[r] = 1.0 / std::sqrt(s);
  }
  SparseMatrix out = adjacency;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t k = out.row_ptr[r]; k < out.row_ptr[r + 1]; ++k)
      out.values[k] = adjacency.values[k] * inv_sqrt[r] * inv_sqrt[out.col_idx[k]];
  return out;
}

/// Immutable undirected graph. Construct through Graph::from_edges or
/// load_edge_list; every accessor is const and safe to share across threads.
class Graph {
 public:
  Graph() = default;

  /// Builds a graph from an arbitrary edge list: mirrored and repeated edges
  /// are merged, self-loops are dropped.
  static Graph from_edges(std::size_t num_nodes, std::span<const Edge> edges,
                          Normalization norm = Normalization::row_stochastic) {
    Graph g;
    g.num_nodes_ = num_nodes;
    std::vector<Edge> canon;
    canon.reserve(edges.size());
    for (auto [u, v] : edges) {
      if (u >= num_nodes || v >= num_nodes)
        throw GraphError("edge (" + std::to_string(u) + ", " + std::to_string(v) + ") out of range for " +
                         std::to_string(num_nodes) + " nodes");
      if (u == v) {
        ++g.dropped_self_loops_;
        continue;
      }
      canon.emplace_back(std::min(u, v), std::max(u, v));
    }
    std::sort(canon.begin(), canon.end());
    canon.erase(std::unique(canon.begin(), canon.end()), canon.end());
    g.edges_ = std::move(canon);

    g.neighbors_.assign(num_nodes, {});
    for (auto [u, v] : g.edges_) {
      g.neighbors_[u].push_back(v);
      g.neighbors_[v].push_back(u);
    }
    for (auto& n : g.neighbors_) std::sort(n.begin(), n.end());

    g.adjacency_.rows = g.adjacency_.cols = num_nodes;
    g.adjacency_.row_ptr.assign(num_nodes + 1, 0);
    for (std::size_t v = 0; v < num_nodes; ++v) {
      g.adjacency_.row_ptr[v + 1] = g.adjacency_.row_ptr[v] + g.neighbors_[v].size();
      g.adjacency_.col_idx.insert(g.adjacency_.col_idx.end(), g.neighbors_[v].begin(), g.neighbors_[v].end());
    }
    g.adjacency_.values.assign(g.adjacency_.col_idx.size(), 1.0);
    g.normalization_ = norm;
    g.norm_adjacency_ =
        norm == Normalization::row_stochastic ? row_normalize(g.adjacency_) : symmetric_normalize(g.adjacency_);
    g.original_ids_.resize(num_nodes);
    for (std::size_t v = 0; v < num_nodes; ++v) g.original_ids_[v] = v;
    return g;
  }

  std::size_t num_nodes() const { return num_nodes_; }
  std::size_t num_edges() const { return edges_.size(); }
  const std::vector<Edge>& edges() const { return edges_; }
  const SparseMatrix& adjacency() const { return adjacency_; }
  const SparseMatrix& norm_adjacency() const { return norm_adjacency_; }
  Normalization normalization() const { return normalization_; }
  std::size_t dropped_self_loops() const { return dropped_self_loops_; }

  std::size_t degree(std::size_t v) const { return neighbors_.at(v).size(); }

  std::size_t max_degree() const {
    std::size_t m = 0;
    for (const auto& n : neighbors_) m = std::max(m, n.size());
    return m;
  }

  std::vector<std::size_t> degrees() const {
    std::vector<std::size_t> d(num_nodes_);
    for (std::size_t v = 0; v < num_nodes_; ++v) d[v] = neighbors_[v].size();
    return d;
  }

  /// Sorted, duplicate-free neighbor list.
  std::span<const NodeId> neighbors(std::size_t v) const {
    if (v >= num_nodes_)
      throw GraphError("node " + std::to_string(v) + " out of range for " + std::to_string(num_nodes_) + " nodes");
    return neighbors_[v];
  }

  /// External ID of each dense index (identity unless ids were remapped at load).
  const std::vector<std::uint64_t>& original_ids() const { return original_ids_; }
  bool remapped() const { return remapped_; }

  /// Dense index for an external ID, or -1 if unknown.
  std::int64_t dense_index(std::uint64_t original) const {
    if (!remapped_) return original < num_nodes_ ? static_cast<std::int64_t>(original) : -1;
    auto it = std::lower_bound(original_ids_.begin(), original_ids_.end(), original);
    if (it == original_ids_.end() || *it != original) return -1;
    return it - original_ids_.begin();
  }

  /// Stable content hash over node count and edge list (FNV-1a).
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t x) {
      for (int i = 0; i < 8; ++i) {
        h ^= (x >> (8 * i)) & 0xffU;
        h *= 1099511628211ULL;
      }
    };
    mix(num_nodes_);
    for (auto [u, v] : edges_) {
      mix(u);
      mix(v);
    }
    return h;
  }

 private:
  friend Graph load_edge_list(const std::filesystem::path&, Normalization);
  std::size_t num_nodes_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::vector<NodeId>> neighbors_;
  SparseMatrix adjacency_;
  SparseMatrix norm_adjacency_;
  Normalization normalization_ = Normalization::row_stochastic;
  std::vector<std::uint64_t> original_ids_;
  bool remapped_ = false;
  std::size_t dropped_self_loops_ = 0;
};

/// Reads "u v" lines. "#" starts a comment; an optional "# nodes=N" header fixes
/// the node count. Without a header, IDs that are not exactly {0..max} are
/// remapped to dense indices in ascending ID order (see write_id_map).
inline Graph load_edge_list(const std::filesystem::path& path,
                            Normalization norm = Normalization::row_stochastic) {
  std::ifstream in(path);
  if (!in) throw GraphError("cannot open edge list '" + path.string() + "'");

  std::vector<std::pair<std::uint64_t, std::uint64_t>> raw;
  std::int64_t header_nodes = -1;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    if (line[first] == '#') {
      auto pos = line.find("nodes=", first);
      if (pos != std::string::npos) {
        try {
          header_nodes = std::stoll(line.substr(pos + 6));
        } catch (const std::exception&) {
          throw GraphError(path.string() + ":" + std::to_string(line_no) + ": malformed nodes header");
        }
        if (header_nodes <= 0) throw GraphError(path.string() + ":" + std::to_string(line_no) + ": nodes must be > 0");
      }
      continue;
    }
    std::istringstream ss(line);
    long long u = -1, v = -1;
    std::string rest;
    if (!(ss >> u >> v) || u < 0 || v < 0 || (ss >> rest && rest[0] != '#'))
      throw GraphError(path.string() + ":" + std::to_string(line_no) + ": expected two nonnegative integers, got '" +
                       line + "'");
    raw.emplace_back(static_cast<std::uint64_t>(u), static_cast<std::uint64_t>(v));
  }
  if (raw.empty()) throw GraphError("edge list '" + path.string() + "' contains no edges");

  std::vector<std::uint64_t> ids;
  ids.reserve(raw.size() * 2);
  for (auto [u, v] : raw) {
    ids.push_back(u);
    ids.push_back(v);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

  std::vector<Edge> edges;
  edges.reserve(raw.size());
  bool remap = false;
  std::size_t n = 0;
  if (header_nodes > 0) {
    n = static_cast<std::size_t>(header_nodes);
    if (ids.back() >= n)
      throw GraphError("edge list '" + path.string() + "' references node " + std::to_string(ids.back()) +
                       " but header declares " + std::to_string(n) + " nodes");
  } else {
    n = static_cast<std::size_t>(ids.back()) + 1;
    remap = ids.size() != n;
    if (remap) n = ids.size();
  }
  for (auto [u, v] : raw) {
    if (remap) {
      auto du = std::lower_bound(ids.begin(), ids.end(), u) - ids.begin();
      auto dv = std::lower_bound(ids.begin(), ids.end(), v) - ids.begin();
      edges.emplace_back(static_cast<NodeId>(du), static_cast<NodeId>(dv));
    } else {
      edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
    }
  }
  Graph g = Graph::from_edges(n, edges, norm);
  if (g.num_edges() == 0) throw GraphError("edge list '" + path.string() + "' contains only self-loops");
  if (remap) {
    g.original_ids_ = std::move(ids);
    g.remapped_ = true;
  }
  return g;
}

/// Writes the "original_id dense_index" sidecar for a remapped graph.
inline void write_id_map(const Graph& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw GraphError("cannot write id map '" + path.string() + "'");
  const auto& ids = g.original_ids();
  for (std::size_t v = 0; v < ids.size(); ++v) out << ids[v] << ' ' << v << '\n';
}

}  // namespace slvae
