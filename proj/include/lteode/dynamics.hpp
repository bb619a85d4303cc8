#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lteode/tensor.hpp"

namespace lteode {

/// Counts vector-field evaluations (NFEs).
struct NfeCounter {
  std::size_t count = 0;
};

/// f(h) = (A h) W + b. One instance per stream, shared by every step and by
/// both solver stages.
struct VectorFieldParams {
  Tensor weight;  // [d_h x d_h]
  Tensor bias;    // [d_h]
};

struct AffineMap {
  Tensor weight;  // [d_h x d_h]
  Tensor bias;    // [d_h]
};

/// Per-step jump operators g_k(h) = tanh(h W_k + b_k); entries never alias.
struct CompensatorParams {
  std::vector<AffineMap> per_step;
};

/// Per-step gate sigmoid(h W_k + b_k) replacing the LTE mask in the
/// `learned` ablation.
struct LearnedMaskParams {
  std::vector<AffineMap> per_step;
};

enum class MaskMode {
  lte,          // M = sigmoid(E)
  uniform_one,  // M = 1 everywhere
  learned,      // M = sigmoid(h W + b), no truncation-error input
  off,          // no compensation: pure RK2
};

std::string_view to_string(MaskMode mode);
MaskMode parse_mask_mode(std::string_view name);

inline constexpr std::size_t kMaskBins = 20;
using MaskHistogram = std::array<std::uint64_t, kMaskBins>;

/// Bin of a gate value in the 20 uniform bins over [0, 1]; 1.0 lands in the
/// last bin.
std::size_t mask_bin(double value);

struct MaskStats {
  double mean = 0.0;
  double std = 0.0;
  double p95 = 0.0;
  MaskHistogram histogram{};
  std::uint64_t count = 0;
};

/// Exact statistics; p95 is the nearest-rank 95th percentile.
MaskStats compute_mask_stats(std::span<const double> values);

/// Streaming version for values spread over many steps and batches. The
/// percentile is read from a 1e-4-wide histogram.
class MaskAccumulator {
 public:
  void add(std::span<const double> values);
  void merge(const MaskAccumulator& other);
  MaskStats stats() const;
  std::uint64_t count() const noexcept { return count_; }

 private:
  static constexpr std::size_t kFineBins = 10000;
  std::uint64_t count_ = 0;
  double sum_ = 0.0;
  double sum_sq_ = 0.0;
  std::vector<std::uint64_t> fine_ = std::vector<std::uint64_t>(kFineBins, 0);
};

/// One hybrid step's diagnostics. The mask statistics describe the gate that
/// was applied; with MaskMode::off no gate is applied and they describe
/// sigmoid(E) instead.
struct StepTrace {
  std::size_t step_index = 0;
  std::size_t nfe_count = 0;
  double e_mean = 0.0;
  double e_max = 0.0;
  double m_mean = 0.0;
  double m_std = 0.0;
  double m_p95 = 0.0;
  MaskHistogram mask_histogram{};
  /// Raw gate values, kept only when EvolveOptions::record_masks is set.
  std::vector<double> mask_values;
};

/// One NFE: (a_op h) W + b for h[B x N x d_h].
Tensor vector_field(const Tensor& h, const Tensor& a_op, const VectorFieldParams& params,
                    NfeCounter& nfe);

struct DualStep {
  Tensor euler;
  Tensor rk2;
};

/// Euler and midpoint-RK2 from a shared first stage: exactly two NFEs.
DualStep embedded_dual_step(const Tensor& h, double dt, const Tensor& a_op,
                            const VectorFieldParams& params, NfeCounter& nfe,
                            std::size_t step_index = 0);

/// |rk2 - euler|.
Tensor local_truncation_error(const Tensor& euler, const Tensor& rk2);

/// sigmoid(e) for e >= 0, hence values in [0.5, 1).
Tensor attention_mask(const Tensor& e);

/// h_rk2 + m * tanh(h_t W_step + b_step).
///
/// With `sparsity_tau` set, rows (batch, node) whose gate entries are all
/// below 0.5 + tau skip the jump operator and receive no jump. Since the LTE
/// gate never drops below 0.5 this is an approximation, not an exact
/// shortcut; the default (nullopt) is the exact dense path.
Tensor compensate(const Tensor& h_t, const Tensor& h_rk2, const Tensor& m, std::size_t step,
                  const CompensatorParams& comp,
                  std::optional<double> sparsity_tau = std::nullopt);

struct EvolveOptions {
  MaskMode mask_mode = MaskMode::lte;
  /// When false (default) the gate sees E through a detach, so no gradient
  /// reaches the vector field via the mask.
  bool mask_grad = false;
  std::optional<double> sparsity_tau;
  bool record_masks = false;
  bool record_states = false;
};

struct EvolveResult {
  Tensor h_final;
  std::vector<StepTrace> traces;
  /// E_t per step, still attached to the tape (feeds the manifold penalty).
  std::vector<Tensor> lte;
  /// Detached state after each step when record_states is set.
  std::vector<Tensor> states;
};

/// Runs `steps` hybrid steps of size dt = 1/steps. `comp` is required unless
/// the mode is `off`; `learned` is required for MaskMode::learned.
EvolveResult evolve(const Tensor& h0, std::size_t steps, double dt, const Tensor& a_op,
                    const VectorFieldParams& vf, const CompensatorParams* comp,
                    const LearnedMaskParams* learned, const EvolveOptions& options,
                    NfeCounter& nfe);

/// CSV with header `step,nfe,e_mean,e_max,m_mean,m_std,m_p95,hist_0..hist_19`.
std::string traces_csv(std::span<const StepTrace> traces);

}  // namespace lteode
