#include "lteode/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "lteode/error.hpp"
#include "lteode/ops.hpp"
#include "lteode/random.hpp"
#include "lteode/textio.hpp"

namespace lteode {

void ModelConfig::validate() const {
  if (n_nodes == 0) throw ValidationError("model: n_nodes must be positive");
  if (in_dim == 0 || window == 0 || horizon == 0) {
    throw ValidationError("model: in_dim, window and horizon must be positive");
  }
  if (proj_dim == 0 || embed_dim == 0) throw ValidationError("model: proj_dim and embed_dim must be positive");
  if (steps == 0) throw ValidationError("model: steps must be at least 1");
  if (sparsity_tau && !(*sparsity_tau >= 0.0 && *sparsity_tau < 0.5)) {
    throw ValidationError("model: sparsity_tau must lie in [0, 0.5)");
  }
}

KeyValues to_key_values(const ModelConfig& c) {
  KeyValues kv;
  kv["n_nodes"] = std::to_string(c.n_nodes);
  kv["in_dim"] = std::to_string(c.in_dim);
  kv["window"] = std::to_string(c.window);
  kv["horizon"] = std::to_string(c.horizon);
  kv["proj_dim"] = std::to_string(c.proj_dim);
  kv["embed_dim"] = std::to_string(c.embed_dim);
  kv["steps"] = std::to_string(c.steps);
  kv["mask_mode"] = std::string(to_string(c.mask_mode));
  kv["mask_grad"] = c.mask_grad ? "true" : "false";
  kv["sparsity_tau"] = c.sparsity_tau ? format_double(*c.sparsity_tau) : "off";
  return kv;
}

namespace {

std::size_t kv_size(const KeyValues& kv, const std::string& key, std::size_t fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  return parse_index(it->second, "config key " + key);
}

bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ValidationError("config key " + key + ": expected true/false, got '" + value + "'");
}

double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Tensor uniform_tensor(Rng& rng, Shape shape, double bound) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

AffineMap square_affine(Rng& rng, std::size_t d) {
  return AffineMap{uniform_tensor(rng, {d, d}, xavier_bound(d, d)), Tensor::zeros({d}, true)};
}

Tensor flat_rows(const Tensor& h) {
  const std::size_t c = h.shape().back();
  return ops::reshape(h, {h.numel() / c, c});
}

}  // namespace

ModelConfig model_config_from(const KeyValues& kv) {
  ModelConfig c;
  c.n_nodes = kv_size(kv, "n_nodes", c.n_nodes);
  c.in_dim = kv_size(kv, "in_dim", c.in_dim);
  c.window = kv_size(kv, "window", c.window);
  c.horizon = kv_size(kv, "horizon", c.horizon);
  c.proj_dim = kv_size(kv, "proj_dim", c.proj_dim);
  c.embed_dim = kv_size(kv, "embed_dim", c.embed_dim);
  c.steps = kv_size(kv, "steps", c.steps);
  if (auto it = kv.find("mask_mode"); it != kv.end()) c.mask_mode = parse_mask_mode(it->second);
  if (auto it = kv.find("mask_grad"); it != kv.end()) c.mask_grad = parse_bool(it->second, "mask_grad");
  if (auto it = kv.find("sparsity_tau"); it != kv.end() && it->second != "off") {
    c.sparsity_tau = parse_double(it->second, "config key sparsity_tau");
  }
  return c;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("w_input", w_input);
  out.emplace_back("e_node", e_node);
  out.emplace_back("vf_s.weight", vf_s.weight);
  out.emplace_back("vf_s.bias", vf_s.bias);
  out.emplace_back("vf_k.weight", vf_k.weight);
  out.emplace_back("vf_k.bias", vf_k.bias);
  auto add_steps = [&](const std::string& prefix, const std::vector<AffineMap>& maps) {
    for (std::size_t i = 0; i < maps.size(); ++i) {
      out.emplace_back(prefix + "." + std::to_string(i) + ".weight", maps[i].weight);
      out.emplace_back(prefix + "." + std::to_string(i) + ".bias", maps[i].bias);
    }
  };
  add_steps("comp_s", comp_s.per_step);
  add_steps("comp_k", comp_k.per_step);
  add_steps("gate_s", gate_s.per_step);
  add_steps("gate_k", gate_k.per_step);
  out.emplace_back("w_out", w_out);
  out.emplace_back("b_out", b_out);
  return out;
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

ModelParams ModelParams::deep_copy() const {
  auto copy_maps = [](const std::vector<AffineMap>& maps) {
    std::vector<AffineMap> out;
    for (const AffineMap& m : maps) out.push_back(AffineMap{m.weight.clone(true), m.bias.clone(true)});
    return out;
  };
  ModelParams p;
  p.w_input = w_input.clone(true);
  p.e_node = e_node.clone(true);
  p.vf_s = VectorFieldParams{vf_s.weight.clone(true), vf_s.bias.clone(true)};
  p.vf_k = VectorFieldParams{vf_k.weight.clone(true), vf_k.bias.clone(true)};
  p.comp_s.per_step = copy_maps(comp_s.per_step);
  p.comp_k.per_step = copy_maps(comp_k.per_step);
  p.gate_s.per_step = copy_maps(gate_s.per_step);
  p.gate_k.per_step = copy_maps(gate_k.per_step);
  p.w_out = w_out.clone(true);
  p.b_out = b_out.clone(true);
  return p;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.hidden();
  const std::size_t td = config.window * config.in_dim;
  ModelParams p;
  p.w_input = uniform_tensor(rng, {td, config.proj_dim}, xavier_bound(td, config.proj_dim));
  p.e_node = uniform_tensor(rng, {config.n_nodes, config.embed_dim},
                            1.0 / std::sqrt(static_cast<double>(config.embed_dim)));
  p.vf_s = VectorFieldParams{uniform_tensor(rng, {d, d}, xavier_bound(d, d)), Tensor::zeros({d}, true)};
  p.vf_k = VectorFieldParams{uniform_tensor(rng, {d, d}, xavier_bound(d, d)), Tensor::zeros({d}, true)};
  if (config.mask_mode != MaskMode::off) {
    for (std::size_t s = 0; s < config.steps; ++s) p.comp_s.per_step.push_back(square_affine(rng, d));
    for (std::size_t s = 0; s < config.steps; ++s) p.comp_k.per_step.push_back(square_affine(rng, d));
  }
  if (config.mask_mode == MaskMode::learned) {
    for (std::size_t s = 0; s < config.steps; ++s) p.gate_s.per_step.push_back(square_affine(rng, d));
    for (std::size_t s = 0; s < config.steps; ++s) p.gate_k.per_step.push_back(square_affine(rng, d));
  }
  p.w_out = uniform_tensor(rng, {2 * d, config.horizon}, xavier_bound(2 * d, config.horizon));
  p.b_out = Tensor::zeros({config.horizon}, true);
  return p;
}

DualStreamState initialize_state(const Tensor& x, const ModelParams& params,
                                 const ModelConfig& config) {
  if (x.rank() != 4 || x.dim(1) != config.n_nodes || x.dim(2) != config.window ||
      x.dim(3) != config.in_dim) {
    throw DimensionError("initialize_state: input " + shape_str(x.shape()) + " does not match [B x " +
                         std::to_string(config.n_nodes) + " x " + std::to_string(config.window) +
                         " x " + std::to_string(config.in_dim) + "]");
  }
  const std::size_t batch = x.dim(0);
  const std::size_t n = config.n_nodes;
  const Tensor flat = ops::reshape(x, {batch * n, config.window * config.in_dim});
  const Tensor projected =
      ops::reshape(ops::matmul(flat, params.w_input), {batch, n, config.proj_dim});
  const Tensor h0 = ops::concat_channels(projected, ops::tile_batch(params.e_node, batch));
  return DualStreamState{h0, h0};
}

ForwardResult forward(const Tensor& x, const Tensor& a_hat, const ModelParams& params,
                      const ModelConfig& config, const ForwardOptions& options) {
  config.validate();
  const DualStreamState state = initialize_state(x, params, config);
  const Tensor a_adaptive = adaptive_adjacency(params.e_node);

  EvolveOptions ev;
  ev.mask_mode = config.mask_mode;
  ev.mask_grad = config.mask_grad;
  ev.sparsity_tau = config.sparsity_tau;
  ev.record_masks = options.record_masks;
  ev.record_states = options.record_states;
  const bool learned = config.mask_mode == MaskMode::learned;

  ForwardResult out;
  NfeCounter nfe_s, nfe_k;
  out.stream_s = evolve(state.h_s, config.steps, config.dt(), a_hat, params.vf_s, &params.comp_s,
                        learned ? &params.gate_s : nullptr, ev, nfe_s);
  out.stream_k = evolve(state.h_k, config.steps, config.dt(), a_adaptive, params.vf_k,
                        &params.comp_k, learned ? &params.gate_k : nullptr, ev, nfe_k);
  out.nfe_s = nfe_s.count;
  out.nfe_k = nfe_k.count;

  const Tensor features = ops::concat_channels(out.stream_s.h_final, out.stream_k.h_final);
  const std::size_t batch = x.dim(0);
  out.y_hat = ops::reshape(ops::add_bias(ops::matmul(flat_rows(features), params.w_out), params.b_out),
                           {batch, config.n_nodes, config.horizon});
  return out;
}

ForwardResult forward(const Tensor& x, const SpatialGraph& graph, const ModelParams& params,
                      const ModelConfig& config, const ForwardOptions& options) {
  if (graph.n_nodes() != config.n_nodes) {
    throw DimensionError("forward: graph has " + std::to_string(graph.n_nodes()) +
                         " nodes, model expects " + std::to_string(config.n_nodes));
  }
  return forward(x, normalize_adjacency(graph), params, config, options);
}

FlopReport flop_report(const ModelConfig& config, std::size_t n_nodes) {
  const double n = static_cast<double>(n_nodes);
  const double d = static_cast<double>(config.hidden());
  const double s = static_cast<double>(config.steps);
  const double streams = 2.0;
  FlopReport r;
  r.input_projection = 2.0 * n * static_cast<double>(config.window * config.in_dim) *
                       static_cast<double>(config.proj_dim);
  r.adaptive_adjacency = 2.0 * n * n * static_cast<double>(config.embed_dim);
  r.solver = 2.0 * streams * s * 2.0 * (n * n * d + n * d * d);
  if (config.mask_mode == MaskMode::learned) r.gating = 2.0 * streams * s * n * d * d;
  if (config.mask_mode != MaskMode::off) r.compensator = 2.0 * streams * s * n * d * d;
  r.head = 2.0 * n * 2.0 * d * static_cast<double>(config.horizon);
  r.total = r.input_projection + r.adaptive_adjacency + r.solver + r.gating + r.compensator + r.head;
  return r;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams& params) {
  std::ostringstream out;
  out << kCheckpointMagic << '\n';
  for (const auto& [key, value] : to_key_values(config)) out << "config " << key << ' ' << value << '\n';
  for (const auto& [name, t] : params.named()) {
    out << "param " << name << ' ' << t.rank();
    for (std::size_t extent : t.shape()) out << ' ' << extent;
    out << '\n';
    const auto values = t.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) out << ' ';
      out << format_double(values[i]);
    }
    out << '\n';
  }
  out << "end\n";
  write_text_file(path, out.str());
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  const std::string where = path.string();
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw ParseError(where + ": not a checkpoint (bad magic line)");
  }
  KeyValues kv;
  std::map<std::string, std::pair<Shape, std::vector<double>>> tensors;
  std::size_t line_no = 1;
  bool ended = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string tag;
    fields >> tag;
    if (tag == "config") {
      std::string key, value;
      fields >> key >> value;
      kv[key] = value;
    } else if (tag == "param") {
      std::string name;
      std::size_t rank = 0;
      fields >> name >> rank;
      Shape shape(rank);
      for (auto& extent : shape) fields >> extent;
      if (!fields || rank == 0) throw ParseError(where + ":" + std::to_string(line_no) + ": bad param header");
      std::string values_line;
      if (!std::getline(in, values_line)) throw ParseError(where + ": truncated values for " + name);
      ++line_no;
      std::vector<double> values;
      std::istringstream vs(values_line);
      std::string cell;
      while (vs >> cell) values.push_back(parse_double(cell, where + ":" + std::to_string(line_no)));
      if (values.size() != shape_numel(shape)) {
        throw ParseError(where + ":" + std::to_string(line_no) + ": " + name + " holds " +
                         std::to_string(values.size()) + " values for shape " + shape_str(shape));
      }
      tensors[name] = {shape, std::move(values)};
    } else if (tag == "end") {
      ended = true;
      break;
    } else if (!tag.empty()) {
      throw ParseError(where + ":" + std::to_string(line_no) + ": unknown record '" + tag + "'");
    }
  }
  if (!ended) throw ParseError(where + ": missing end marker");

  const ModelConfig config = model_config_from(kv);
  ModelParams params = init_params(config, 0);
  for (auto& [name, t] : params.named()) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError(where + ": missing parameter " + name);
    if (it->second.first != t.shape()) {
      throw ValidationError(where + ": parameter " + name + " has shape " +
                            shape_str(it->second.first) + ", expected " + shape_str(t.shape()));
    }
    Tensor handle = t;
    std::copy(it->second.second.begin(), it->second.second.end(), handle.mutable_data().begin());
    tensors.erase(it);
  }
  if (!tensors.empty()) throw ValidationError(where + ": unexpected parameter " + tensors.begin()->first);
  return {config, params};
}

}  // namespace lteode
