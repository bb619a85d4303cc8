#include "lteode/graph.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "lteode/error.hpp"
#include "lteode/ops.hpp"
#include "lteode/textio.hpp"

namespace lteode {

SpatialGraph::SpatialGraph(std::size_t n_nodes, const std::vector<Edge>& edges)
    : n_nodes_(n_nodes) {
  if (n_nodes == 0) throw ValidationError("graph must have at least one node");
  std::map<std::pair<std::size_t, std::size_t>, double> merged;
  for (const Edge& e : edges) {
    if (e.src >= n_nodes || e.dst >= n_nodes) {
      throw ValidationError("edge (" + std::to_string(e.src) + ", " + std::to_string(e.dst) +
                            ") references a node >= " + std::to_string(n_nodes));
    }
    if (e.src == e.dst) {
      throw ValidationError("self-loop on node " + std::to_string(e.src) +
                            " (normalization adds self-loops itself)");
    }
    if (!(e.weight >= 0.0) || !std::isfinite(e.weight)) {
      throw ValidationError("edge (" + std::to_string(e.src) + ", " + std::to_string(e.dst) +
                            ") has invalid weight " + format_double(e.weight));
    }
    merged[{std::min(e.src, e.dst), std::max(e.src, e.dst)}] += e.weight;
  }
  edges_.reserve(merged.size());
  for (const auto& [key, w] : merged) edges_.push_back(Edge{key.first, key.second, w});
}

std::vector<double> SpatialGraph::adjacency() const {
  std::vector<double> a(n_nodes_ * n_nodes_, 0.0);
  for (const Edge& e : edges_) {
    a[e.src * n_nodes_ + e.dst] += e.weight;
    a[e.dst * n_nodes_ + e.src] += e.weight;
  }
  return a;
}

Tensor normalize_adjacency(const SpatialGraph& graph) {
  const std::size_t n = graph.n_nodes();
  std::vector<double> a = graph.adjacency();
  for (std::size_t i = 0; i < n; ++i) a[i * n + i] += 1.0;
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double degree = 0.0;
    for (std::size_t j = 0; j < n; ++j) degree += a[i * n + j];
    inv_sqrt[i] = 1.0 / std::sqrt(degree);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
  }
  return Tensor({n, n}, std::move(a));
}

Tensor adaptive_adjacency(const Tensor& embeddings) {
  if (embeddings.rank() != 2) {
    throw DimensionError("adaptive_adjacency expects [N x d_e], got " + shape_str(embeddings.shape()));
  }
  return ops::row_normalize(ops::relu(ops::matmul(embeddings, ops::transpose(embeddings))));
}

SpatialGraph load_graph(const std::filesystem::path& path, std::size_t n_nodes) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open edge list " + path.string());
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": missing header");
  ++line_no;
  if (trim(line) != "src,dst,weight") {
    throw ParseError(path.string() + ":1: expected header `src,dst,weight`");
  }
  std::vector<Edge> edges;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (cells.size() != 3) throw ParseError(where + ": expected 3 fields, got " + std::to_string(cells.size()));
    Edge e;
    e.src = parse_index(cells[0], where);
    e.dst = parse_index(cells[1], where);
    e.weight = parse_double(cells[2], where);
    edges.push_back(e);
  }
  return SpatialGraph(n_nodes, edges);
}

void save_graph(const SpatialGraph& graph, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "src,dst,weight\n";
  for (const Edge& e : graph.edges()) {
    out << e.src << ',' << e.dst << ',' << format_double(e.weight) << '\n';
  }
  write_text_file(path, out.str());
}

SpatialGraph ring_graph(std::size_t n_nodes, std::size_t reach, double weight) {
  std::vector<Edge> edges;
  if (n_nodes > 1) {
    for (std::size_t i = 0; i < n_nodes; ++i) {
      for (std::size_t k = 1; k <= reach && k < n_nodes; ++k) {
        const std::size_t j = (i + k) % n_nodes;
        // On tiny rings the wrap-around revisits pairs; keep each pair once.
        if (j == i) continue;
        const std::size_t lo = std::min(i, j), hi = std::max(i, j);
        bool seen = false;
        for (const Edge& e : edges) seen = seen || (e.src == lo && e.dst == hi);
        if (!seen) edges.push_back(Edge{lo, hi, weight});
      }
    }
  }
  return SpatialGraph(n_nodes, edges);
}

}  // namespace lteode
