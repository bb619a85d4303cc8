#include "lteode/data.hpp"

#include <json.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

#include "lteode/error.hpp"
#include "lteode/random.hpp"
#include "lteode/textio.hpp"

namespace lteode {

void ShockScenario::validate() const {
  if (n_nodes == 0 || total_t == 0) throw ValidationError("scenario: n_nodes and total_t must be positive");
  if (period <= 0.0 || shock_decay <= 0.0) throw ValidationError("scenario: period and shock_decay must be positive");
  if (amplitude < 0.0 || diffusion < 0.0 || shock_rate < 0.0 || shock_min < 0.0 ||
      shock_max < shock_min) {
    throw ValidationError("scenario: rates and magnitudes must be non-negative with shock_min <= shock_max");
  }
  if (shock_rate > 100.0) throw ValidationError("scenario: shock_rate is per 100 ticks and cannot exceed 100");
}

namespace {

// y += alpha (A_hat - I) x, dense.
void add_diffusion(std::vector<double>& y, const std::vector<double>& x, const std::vector<double>& a_hat,
                   std::size_t n, double alpha) {
  if (alpha == 0.0) return;
  for (std::size_t i = 0; i < n; ++i) {
    double mixed = 0.0;
    for (std::size_t j = 0; j < n; ++j) mixed += a_hat[i * n + j] * x[j];
    y[i] += alpha * (mixed - x[i]);
  }
}

}  // namespace

Tensor simulate_series(const ShockScenario& sc, const SpatialGraph& graph,
                       std::span<const ShockEvent> events) {
  sc.validate();
  const std::size_t n = sc.n_nodes;
  if (graph.n_nodes() != n) throw ValidationError("scenario and graph disagree on the node count");
  const Tensor a = normalize_adjacency(graph);
  const std::vector<double> a_hat(a.data().begin(), a.data().end());

  std::vector<std::vector<std::pair<std::size_t, double>>> arrivals(sc.total_t);
  for (const ShockEvent& e : events) {
    if (e.t >= sc.total_t || e.node >= n) throw ValidationError("shock event outside the series");
    arrivals[e.t].emplace_back(e.node, e.magnitude);
  }

  const double two_pi = 2.0 * std::numbers::pi;
  auto rhythm = [&](std::size_t t, std::size_t node) {
    return sc.amplitude * std::sin(two_pi * static_cast<double>(t) / sc.period +
                                   two_pi * static_cast<double>(node) / static_cast<double>(n));
  };
  const double decay = std::exp(-1.0 / sc.shock_decay);

  std::vector<double> u(n), z(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) u[i] = rhythm(0, i);
  std::vector<double> out(sc.total_t * n);
  for (std::size_t t = 0; t < sc.total_t; ++t) {
    if (t > 0) {
      std::vector<double> u_next = u, z_next = z;
      add_diffusion(u_next, u, a_hat, n, sc.diffusion);
      add_diffusion(z_next, z, a_hat, n, sc.diffusion);
      for (std::size_t i = 0; i < n; ++i) {
        u_next[i] += rhythm(t, i) - rhythm(t - 1, i);
        z_next[i] *= decay;
      }
      u = std::move(u_next);
      z = std::move(z_next);
    }
    for (const auto& [node, magnitude] : arrivals[t]) z[node] += magnitude;
    for (std::size_t i = 0; i < n; ++i) out[t * n + i] = sc.base_level + u[i] + z[i];
  }
  return Tensor({sc.total_t, n, 1}, std::move(out));
}

GeneratedSeries generate_shock_series(const ShockScenario& sc, const SpatialGraph& graph) {
  sc.validate();
  Rng rng(sc.seed);
  const double p = sc.shock_rate / 100.0;
  GeneratedSeries g;
  for (std::size_t t = 0; t < sc.total_t; ++t) {
    for (std::size_t node = 0; node < sc.n_nodes; ++node) {
      // Both draws are taken every tick so the magnitude stream does not
      // depend on which arrivals fired.
      const bool fires = rng.bernoulli(p);
      const double magnitude = rng.uniform(sc.shock_min, sc.shock_max);
      if (fires) g.events.push_back(ShockEvent{t, node, magnitude});
    }
  }
  g.series = simulate_series(sc, graph, g.events);
  return g;
}

std::vector<std::size_t> make_windows(std::size_t begin, std::size_t end, std::size_t window,
                                      std::size_t horizon, std::size_t stride) {
  if (window == 0 || horizon == 0 || stride == 0) {
    throw ValidationError("make_windows: window, horizon and stride must be positive");
  }
  if (end < begin || end - begin < window + horizon) {
    throw ValidationError("make_windows: segment of " + std::to_string(end - begin) +
                          " ticks is shorter than window + horizon = " +
                          std::to_string(window + horizon));
  }
  std::vector<std::size_t> starts;
  for (std::size_t s = begin; s + window + horizon <= end; s += stride) starts.push_back(s);
  return starts;
}

Scaler fit_scaler(const Tensor& raw, std::size_t begin, std::size_t end) {
  if (raw.rank() != 3) throw DimensionError("fit_scaler expects [T x N x D]");
  if (end <= begin || end > raw.dim(0)) throw ValidationError("fit_scaler: empty or invalid train range");
  const std::size_t n = raw.dim(1), d = raw.dim(2);
  const auto v = raw.data();
  Scaler s;
  s.mean.assign(d, 0.0);
  s.std.assign(d, 0.0);
  const double count = static_cast<double>((end - begin) * n);
  for (std::size_t t = begin; t < end; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) s.mean[c] += v[(t * n + i) * d + c];
  for (double& m : s.mean) m /= count;
  for (std::size_t t = begin; t < end; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        const double dev = v[(t * n + i) * d + c] - s.mean[c];
        s.std[c] += dev * dev;
      }
  for (std::size_t c = 0; c < d; ++c) {
    s.std[c] = std::sqrt(s.std[c] / count);
    if (!(s.std[c] > 0.0)) throw ValidationError("channel " + std::to_string(c) + " has zero variance");
  }
  return s;
}

Tensor apply_scaler(const Tensor& raw, const Scaler& scaler) {
  const std::size_t d = raw.dim(2);
  std::vector<double> out(raw.data().begin(), raw.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scaler.scale(out[i], i % d);
  return Tensor(raw.shape(), std::move(out));
}

Tensor invert_scaler(const Tensor& scaled, const Scaler& scaler) {
  const std::size_t d = scaled.dim(2);
  std::vector<double> out(scaled.data().begin(), scaled.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scaler.unscale(out[i], i % d);
  return Tensor(scaled.shape(), std::move(out));
}

SplitBounds split_bounds(std::size_t total, double train_fraction, double val_fraction) {
  if (!(train_fraction > 0.0) || !(val_fraction > 0.0) || train_fraction + val_fraction >= 1.0) {
    throw ValidationError("split fractions must be positive and leave room for a test split");
  }
  SplitBounds b;
  b.total = total;
  b.train_end = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(total)));
  b.val_end = static_cast<std::size_t>(std::floor((train_fraction + val_fraction) * static_cast<double>(total)));
  return b;
}

ForecastDataset::ForecastDataset(SpatialGraph graph, Tensor raw, std::size_t window,
                                 std::size_t horizon, std::size_t stride, double train_fraction,
                                 double val_fraction)
    : graph_(std::move(graph)), raw_(std::move(raw)), window_(window), horizon_(horizon) {
  if (raw_.rank() != 3 || raw_.dim(1) != graph_.n_nodes()) {
    throw DimensionError("dataset: series " + shape_str(raw_.shape()) + " does not match a " +
                         std::to_string(graph_.n_nodes()) + "-node graph");
  }
  bounds_ = split_bounds(raw_.dim(0), train_fraction, val_fraction);
  train_ = make_windows(0, bounds_.train_end, window, horizon, stride);
  val_ = make_windows(bounds_.train_end, bounds_.val_end, window, horizon, stride);
  test_ = make_windows(bounds_.val_end, bounds_.total, window, horizon, stride);
  scaler_ = fit_scaler(raw_, 0, bounds_.train_end);
  scaled_ = apply_scaler(raw_, scaler_);
}

const std::vector<std::size_t>& ForecastDataset::windows(Split split) const {
  switch (split) {
    case Split::train: return train_;
    case Split::val: return val_;
    case Split::test: return test_;
  }
  return test_;
}

Batch ForecastDataset::batch(std::span<const std::size_t> starts) const {
  if (starts.empty()) throw ContractError("dataset: empty batch");
  const std::size_t b = starts.size(), n = n_nodes(), d = in_dim();
  const auto v = scaled_.data();
  std::vector<double> x(b * n * window_ * d), y(b * n * horizon_);
  for (std::size_t k = 0; k < b; ++k) {
    const std::size_t s = starts[k];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < window_; ++t)
        for (std::size_t c = 0; c < d; ++c)
          x[((k * n + i) * window_ + t) * d + c] = v[((s + t) * n + i) * d + c];
      for (std::size_t h = 0; h < horizon_; ++h)
        y[(k * n + i) * horizon_ + h] = v[((s + window_ + h) * n + i) * d];
    }
  }
  return Batch{Tensor({b, n, window_, d}, std::move(x)), Tensor({b, n, horizon_}, std::move(y)),
               std::vector<std::size_t>(starts.begin(), starts.end())};
}

Tensor ForecastDataset::raw_targets(std::span<const std::size_t> starts) const {
  const std::size_t b = starts.size(), n = n_nodes(), d = in_dim();
  const auto v = raw_.data();
  std::vector<double> y(b * n * horizon_);
  for (std::size_t k = 0; k < b; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t h = 0; h < horizon_; ++h)
        y[(k * n + i) * horizon_ + h] = v[((starts[k] + window_ + h) * n + i) * d];
  return Tensor({b, n, horizon_}, std::move(y));
}

void write_series_csv(const Tensor& raw, const std::filesystem::path& path) {
  const std::size_t total = raw.dim(0), n = raw.dim(1), d = raw.dim(2);
  std::ostringstream out;
  out << 't';
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) out << ",node" << i << "_f" << c;
  out << '\n';
  const auto v = raw.data();
  for (std::size_t t = 0; t < total; ++t) {
    out << t;
    for (std::size_t k = 0; k < n * d; ++k) out << ',' << format_double(v[t * n * d + k]);
    out << '\n';
  }
  write_text_file(path, out.str());
}

Tensor read_series_csv(const std::filesystem::path& path, std::size_t n_nodes, std::size_t in_dim) {
  std::istringstream in(read_text_file(path));
  const std::string name = path.string();
  std::string line;
  if (!std::getline(in, line)) throw ParseError(name + ": empty series file");
  const std::size_t columns = 1 + n_nodes * in_dim;
  if (split_csv_line(line).size() != columns) {
    throw ParseError(name + ":1: header has " + std::to_string(split_csv_line(line).size()) +
                     " columns, expected " + std::to_string(columns));
  }
  std::vector<double> values;
  std::size_t row = 1, ticks = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != columns) {
      throw ParseError(name + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                       " columns, expected " + std::to_string(columns));
    }
    for (std::size_t c = 1; c < columns; ++c) {
      values.push_back(parse_double(cells[c], name + ": row " + std::to_string(row) + ", col " + std::to_string(c + 1)));
    }
    ++ticks;
  }
  if (ticks == 0) throw ParseError(name + ": no data rows");
  return Tensor({ticks, n_nodes, in_dim}, std::move(values));
}

void write_events_csv(std::span<const ShockEvent> events, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "t,node,magnitude\n";
  for (const ShockEvent& e : events) out << e.t << ',' << e.node << ',' << format_double(e.magnitude) << '\n';
  write_text_file(path, out.str());
}

std::vector<ShockEvent> read_events_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);
  if (trim(line) != "t,node,magnitude") throw ParseError(path.string() + ":1: expected header `t,node,magnitude`");
  std::vector<ShockEvent> events;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(row);
    if (cells.size() != 3) throw ParseError(where + ": expected 3 fields");
    events.push_back(ShockEvent{parse_index(cells[0], where), parse_index(cells[1], where),
                                parse_double(cells[2], where)});
  }
  return events;
}

void write_meta(const DatasetMeta& meta, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["n_nodes"] = meta.n_nodes;
  j["in_dim"] = meta.in_dim;
  j["tick_seconds"] = meta.tick_seconds;
  j["edge_list_path"] = meta.edge_list_path;
  write_text_file(path, j.dump(2) + "\n");
}

DatasetMeta read_meta(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  DatasetMeta meta;
  for (const char* key : {"n_nodes", "in_dim", "tick_seconds", "edge_list_path"}) {
    if (!j.contains(key)) throw ValidationError(path.string() + ": missing metadata key '" + key + "'");
  }
  try {
    meta.n_nodes = j.at("n_nodes").get<std::size_t>();
    meta.in_dim = j.at("in_dim").get<std::size_t>();
    meta.tick_seconds = j.at("tick_seconds").get<double>();
    meta.edge_list_path = j.at("edge_list_path").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  if (meta.n_nodes == 0 || meta.in_dim == 0) throw ValidationError(path.string() + ": n_nodes and in_dim must be positive");
  return meta;
}

ExternalSeries load_external_csv(const std::filesystem::path& series_path,
                                 const std::filesystem::path& meta_path) {
  ExternalSeries out;
  out.meta = read_meta(meta_path);
  std::filesystem::path edges = out.meta.edge_list_path;
  if (edges.is_relative()) edges = meta_path.parent_path() / edges;
  out.graph = load_graph(edges, out.meta.n_nodes);
  out.raw = read_series_csv(series_path, out.meta.n_nodes, out.meta.in_dim);
  return out;
}

}  // namespace lteode
