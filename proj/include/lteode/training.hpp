#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lteode/data.hpp"
#include "lteode/dynamics.hpp"
#include "lteode/model.hpp"
#include "lteode/tensor.hpp"

namespace lteode {

enum class Variant { full, no_lte, no_compensation, no_mask, manifold_penalty };

inline constexpr Variant kAllVariants[] = {Variant::full, Variant::no_lte, Variant::no_compensation,
                                           Variant::no_mask, Variant::manifold_penalty};

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);
/// full -> lte, no_lte -> learned, no_compensation -> off, no_mask -> uniform_one,
/// manifold_penalty -> lte (plus the penalty term in the loss).
MaskMode mask_mode_for(Variant v);

struct TrainConfig {
  double lr = 3e-3;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  Variant variant = Variant::full;
  double lambda = 0.0;
  std::size_t patience = 10;
  double clip_norm = 5.0;
  /// Caps the shuffled batches visited per epoch; 0 means all of them.
  std::size_t max_batches = 0;
  std::size_t eval_batch_size = 64;

  /// lambda >= 0, and lambda > 0 only for the manifold_penalty variant.
  void validate() const;
};

KeyValues to_key_values(const TrainConfig& config);
TrainConfig train_config_from(const KeyValues& kv);

/// The model config with its mask mode replaced by the variant's.
ModelConfig apply_variant(ModelConfig config, Variant v);

/// MAE + lambda * mean(E) over every step and both streams.
Tensor training_loss(const Tensor& y_hat, const Tensor& y, const ForwardResult& fwd, double lambda);

/// Mean of all E entries of a forward pass (attached).
Tensor mean_lte(const ForwardResult& fwd);

class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor>> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  /// One update from the gradients currently stored on the parameters.
  /// Throws NumericError naming the first parameter with a non-finite gradient.
  void step();
  void zero_grad();
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<const std::pair<std::string, Tensor>> params, double max_norm);

struct MetricReport {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // percent
  std::size_t count = 0;
  std::size_t mape_count = 0;
};

inline constexpr double kMapeFloor = 1e-3;

/// Targets with |y| < mape_floor are left out of the MAPE average only.
MetricReport compute_metrics(std::span<const double> y_hat, std::span<const double> y,
                             double mape_floor = kMapeFloor);

/// Forward pass over a split, un-scaled to original units.
MetricReport evaluate(const ModelParams& params, const ModelConfig& config,
                      const ForecastDataset& data, Split split, std::size_t batch_size = 64);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
  double m_mean = 0.0;
  double m_std = 0.0;
  double m_p95 = 0.0;
};

struct TrainResult {
  ModelParams best;
  ModelConfig model;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_mae = 0.0;
  double initial_val_mae = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const ForecastDataset& data, const ModelConfig& model, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Header `epoch,train_loss,val_mae,m_mean,m_std,m_p95`.
std::string history_csv(std::span<const EpochRecord> history);

/// Gate values over a split. A (window, node) cell is a shock cell when a
/// logged event at that node falls inside the window's last `lookback` input
/// ticks; every gate value of the cell (all steps, streams and channels) is
/// then counted in `shock`, otherwise in `calm`.
struct MaskSurvey {
  MaskAccumulator all;
  MaskAccumulator shock;
  MaskAccumulator calm;
  std::size_t shock_cells = 0;
  std::size_t calm_cells = 0;
};

MaskSurvey survey_masks(const ModelParams& params, const ModelConfig& config,
                        const ForecastDataset& data, Split split,
                        std::span<const ShockEvent> events = {}, std::size_t lookback = 3,
                        std::size_t batch_size = 64);

struct CollapseArm {
  double lambda = 0.0;
  MaskStats stats;
  MetricReport test;
};

struct CollapseReport {
  CollapseArm full;
  std::vector<CollapseArm> penalty;  // one per lambda tried
  std::optional<std::size_t> collapsed;  // index into penalty of the first passing lambda
  MaskStats full_shock;  // full arm, shock cells only
  MaskStats full_calm;

  bool passed() const noexcept {
    return collapsed.has_value() && full_shock.count > 0 && full_shock.mean > full_calm.mean;
  }
};

/// Trains the full and manifold-penalty arms with the same seed and compares
/// their gate distributions on the test split. Lambdas are tried in order
/// until one collapses the mask (mean in [0.48, 0.52], std below the full arm).
/// `trained_full` skips retraining the full arm when the caller already has it.
CollapseReport collapse_experiment(const ForecastDataset& data, const ModelConfig& model,
                                   const TrainConfig& base, std::span<const double> lambdas,
                                   std::span<const ShockEvent> events,
                                   const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                   const ModelParams* trained_full = nullptr);

inline constexpr double kCollapseLow = 0.48;
inline constexpr double kCollapseHigh = 0.52;
inline constexpr std::size_t kShockLookback = 3;

/// Compares the tape gradient of the training loss with central differences
/// for every parameter of a randomly initialized model on a random batch.
struct GradientCheck {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t coordinates = 0;
};

GradientCheck check_model_gradient(const ModelConfig& config, double lambda, std::uint64_t seed,
                                   std::size_t batch = 2, double eps = 1e-5);

/// Header `bin,lo,hi,count`.
std::string histogram_csv(const MaskHistogram& histogram);

}  // namespace lteode
