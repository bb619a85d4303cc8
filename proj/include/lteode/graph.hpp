#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "lteode/tensor.hpp"

namespace lteode {

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  double weight = 0.0;
};

/// Undirected weighted graph over nodes 0..n-1. Edges are stored with
/// src < dst; (u, v) and (v, u) name the same edge and their weights add.
class SpatialGraph {
 public:
  SpatialGraph() = default;
  /// Validates indices and weights, merges duplicates, rejects self-loops.
  SpatialGraph(std::size_t n_nodes, const std::vector<Edge>& edges);

  std::size_t n_nodes() const noexcept { return n_nodes_; }
  const std::vector<Edge>& edges() const noexcept { return edges_; }

  /// Dense weighted adjacency without self-loops.
  std::vector<double> adjacency() const;

 private:
  std::size_t n_nodes_ = 0;
  std::vector<Edge> edges_;
};

/// D^{-1/2} (A + I) D^{-1/2}, D the degree matrix of A + I. Constant tensor.
Tensor normalize_adjacency(const SpatialGraph& graph);

/// row_normalize(relu(E E^T)) for the node-embedding table E[N x d_e].
/// Differentiable with respect to E.
Tensor adaptive_adjacency(const Tensor& embeddings);

/// Parses an edge-list CSV with header `src,dst,weight`.
SpatialGraph load_graph(const std::filesystem::path& path, std::size_t n_nodes);
void save_graph(const SpatialGraph& graph, const std::filesystem::path& path);

/// Ring in which every node links to its `reach` nearest neighbours on each
/// side; used by the synthetic scenarios.
SpatialGraph ring_graph(std::size_t n_nodes, std::size_t reach = 1, double weight = 1.0);

}  // namespace lteode
