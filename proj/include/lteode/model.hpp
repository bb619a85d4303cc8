#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lteode/dynamics.hpp"
#include "lteode/graph.hpp"
#include "lteode/tensor.hpp"

namespace lteode {

struct ModelConfig {
  std::size_t n_nodes = 0;
  std::size_t in_dim = 1;     // D
  std::size_t window = 12;    // T
  std::size_t horizon = 3;    // T'
  std::size_t proj_dim = 30;
  std::size_t embed_dim = 10; // d_e
  std::size_t steps = 4;      // S
  MaskMode mask_mode = MaskMode::lte;
  bool mask_grad = false;
  std::optional<double> sparsity_tau;

  std::size_t hidden() const noexcept { return proj_dim + embed_dim; }
  double dt() const noexcept { return 1.0 / static_cast<double>(steps); }
  void validate() const;
};

using KeyValues = std::map<std::string, std::string>;

KeyValues to_key_values(const ModelConfig& config);
/// Reads the keys written by to_key_values; missing keys keep their defaults.
ModelConfig model_config_from(const KeyValues& kv);

struct ModelParams {
  Tensor w_input;  // [(T*D) x proj_dim]
  Tensor e_node;   // [N x d_e]
  VectorFieldParams vf_s;
  VectorFieldParams vf_k;
  CompensatorParams comp_s;  // empty when the mask mode is `off`
  CompensatorParams comp_k;
  LearnedMaskParams gate_s;  // only for MaskMode::learned
  LearnedMaskParams gate_k;
  Tensor w_out;  // [2 d_h x T']
  Tensor b_out;  // [T']

  /// Handles to every trainable tensor, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::size_t count() const;
  /// Copy with fresh storage.
  ModelParams deep_copy() const;
};

/// Xavier-uniform weights, zero biases. Only the parameters the mask mode uses
/// are allocated.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

struct DualStreamState {
  Tensor h_s;  // [B x N x d_h], static normalized adjacency
  Tensor h_k;  // [B x N x d_h], adaptive adjacency
};

/// x[B x N x T x D] -> both streams start from concat(x W_input, E_node).
DualStreamState initialize_state(const Tensor& x, const ModelParams& params,
                                 const ModelConfig& config);

struct ForwardResult {
  Tensor y_hat;  // [B x N x T'], scaled units
  EvolveResult stream_s;
  EvolveResult stream_k;
  std::size_t nfe_s = 0;
  std::size_t nfe_k = 0;
};

struct ForwardOptions {
  bool record_masks = false;
  bool record_states = false;
};

/// `a_hat` is normalize_adjacency(graph), computed once by the caller.
ForwardResult forward(const Tensor& x, const Tensor& a_hat, const ModelParams& params,
                      const ModelConfig& config, const ForwardOptions& options = {});
ForwardResult forward(const Tensor& x, const SpatialGraph& graph, const ModelParams& params,
                      const ModelConfig& config, const ForwardOptions& options = {});

/// Closed-form cost of one sample's forward pass, in FLOPs (2 x multiply-adds;
/// activations are not counted).
struct FlopReport {
  double input_projection = 0.0;
  double adaptive_adjacency = 0.0;
  double solver = 0.0;  // the 2 vector-field evaluations per step and stream
  double gating = 0.0;  // learned gate only; the LTE gate is elementwise
  double compensator = 0.0;
  double head = 0.0;
  double total = 0.0;
};

FlopReport flop_report(const ModelConfig& config, std::size_t n_nodes);

/// Text checkpoint: magic line, `config key value` lines, then one
/// `param name rank dims...` line followed by the row-major values per tensor.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams& params);
std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path);

inline constexpr const char* kCheckpointMagic = "LTEODE-CHECKPOINT 1";

}  // namespace lteode
