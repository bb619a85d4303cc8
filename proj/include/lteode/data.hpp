#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lteode/graph.hpp"
#include "lteode/tensor.hpp"

namespace lteode {

/// Desk-scale ground truth: a diffusing periodic signal plus decaying shocks.
struct ShockScenario {
  std::size_t n_nodes = 20;
  std::size_t total_t = 2000;
  double base_level = 10.0;
  double amplitude = 3.0;
  double period = 48.0;       // ticks
  double diffusion = 0.1;     // alpha
  double shock_rate = 1.0;    // expected shocks per node per 100 ticks
  double shock_min = 4.0;
  double shock_max = 10.0;
  double shock_decay = 6.0;   // e-folding time in ticks
  std::size_t graph_reach = 2;
  std::uint64_t seed = 42;

  void validate() const;
};

struct ShockEvent {
  std::size_t t = 0;
  std::size_t node = 0;
  double magnitude = 0.0;
};

struct GeneratedSeries {
  Tensor series;  // [total_t x N x 1]
  std::vector<ShockEvent> events;
};

/// Deterministic given the explicit event list:
///   u(t+1) = u(t) + alpha (A_hat - I) u(t) + drive(t)
///   z(t+1) = exp(-1/decay) (z(t) + alpha (A_hat - I) z(t)) + shocks(t+1)
///   s(t)   = base_level + u(t) + z(t)
/// where drive(t) is the one-tick increment of amplitude * sin(2 pi t / period
/// + 2 pi n / N). A shock at tick t enters z(t) before it is observed.
Tensor simulate_series(const ShockScenario& scenario, const SpatialGraph& graph,
                       std::span<const ShockEvent> events);

/// Draws Bernoulli(rate / 100) shock arrivals per node and tick with
/// magnitudes uniform in [shock_min, shock_max], then simulates.
GeneratedSeries generate_shock_series(const ShockScenario& scenario, const SpatialGraph& graph);

/// Start ticks of the sliding windows fully inside [begin, end).
std::vector<std::size_t> make_windows(std::size_t begin, std::size_t end, std::size_t window,
                                      std::size_t horizon, std::size_t stride = 1);

/// Per-channel z-score statistics.
struct Scaler {
  std::vector<double> mean;
  std::vector<double> std;

  double scale(double value, std::size_t channel) const { return (value - mean[channel]) / std[channel]; }
  double unscale(double value, std::size_t channel) const { return value * std[channel] + mean[channel]; }
};

/// Statistics over ticks [begin, end) of a [T x N x D] series. Throws
/// ValidationError naming a zero-variance channel.
Scaler fit_scaler(const Tensor& raw, std::size_t begin, std::size_t end);
Tensor apply_scaler(const Tensor& raw, const Scaler& scaler);
Tensor invert_scaler(const Tensor& scaled, const Scaler& scaler);

enum class Split { train, val, test };

struct SplitBounds {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t total = 0;
};

/// Chronological split of `total` ticks by the given train/val fractions.
SplitBounds split_bounds(std::size_t total, double train_fraction = 0.6, double val_fraction = 0.2);

struct Batch {
  Tensor x;  // [B x N x T x D], scaled
  Tensor y;  // [B x N x T'], scaled, channel 0
  std::vector<std::size_t> starts;
};

class ForecastDataset {
 public:
  /// Splits chronologically, windows each split separately and scales every
  /// split with train-split statistics.
  ForecastDataset(SpatialGraph graph, Tensor raw, std::size_t window, std::size_t horizon,
                  std::size_t stride = 1, double train_fraction = 0.6, double val_fraction = 0.2);

  const SpatialGraph& graph() const noexcept { return graph_; }
  const Tensor& raw() const noexcept { return raw_; }
  const Tensor& scaled() const noexcept { return scaled_; }
  const Scaler& scaler() const noexcept { return scaler_; }
  const SplitBounds& bounds() const noexcept { return bounds_; }
  std::size_t window() const noexcept { return window_; }
  std::size_t horizon() const noexcept { return horizon_; }
  std::size_t n_nodes() const noexcept { return graph_.n_nodes(); }
  std::size_t in_dim() const { return raw_.dim(2); }

  const std::vector<std::size_t>& windows(Split split) const;
  Batch batch(std::span<const std::size_t> starts) const;
  /// Raw (unscaled) targets for the given window starts, [B x N x T'].
  Tensor raw_targets(std::span<const std::size_t> starts) const;

 private:
  SpatialGraph graph_;
  Tensor raw_;
  Tensor scaled_;
  std::size_t window_;
  std::size_t horizon_;
  SplitBounds bounds_;
  Scaler scaler_;
  std::vector<std::size_t> train_;
  std::vector<std::size_t> val_;
  std::vector<std::size_t> test_;
};

// Interchange files.

/// Header `t,node0_f0,...`, one row per tick.
void write_series_csv(const Tensor& raw, const std::filesystem::path& path);
Tensor read_series_csv(const std::filesystem::path& path, std::size_t n_nodes, std::size_t in_dim);

void write_events_csv(std::span<const ShockEvent> events, const std::filesystem::path& path);
std::vector<ShockEvent> read_events_csv(const std::filesystem::path& path);

struct DatasetMeta {
  std::size_t n_nodes = 0;
  std::size_t in_dim = 1;
  double tick_seconds = 300.0;
  std::string edge_list_path;  // relative to the metadata file
};

void write_meta(const DatasetMeta& meta, const std::filesystem::path& path);
DatasetMeta read_meta(const std::filesystem::path& path);

struct ExternalSeries {
  DatasetMeta meta;
  SpatialGraph graph;
  Tensor raw;  // [T x N x D]
};

ExternalSeries load_external_csv(const std::filesystem::path& series_path,
                                 const std::filesystem::path& meta_path);

}  // namespace lteode
