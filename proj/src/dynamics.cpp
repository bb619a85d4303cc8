#include "lteode/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "lteode/error.hpp"
#include "lteode/ops.hpp"
#include "lteode/textio.hpp"

namespace lteode {

std::string_view to_string(MaskMode mode) {
  switch (mode) {
    case MaskMode::lte: return "lte";
    case MaskMode::uniform_one: return "uniform_one";
    case MaskMode::learned: return "learned";
    case MaskMode::off: return "off";
  }
  return "unknown";
}

MaskMode parse_mask_mode(std::string_view name) {
  for (MaskMode m : {MaskMode::lte, MaskMode::uniform_one, MaskMode::learned, MaskMode::off}) {
    if (to_string(m) == name) return m;
  }
  throw ValidationError("unknown mask mode '" + std::string(name) + "'");
}

std::size_t mask_bin(double value) {
  if (!(value > 0.0)) return 0;
  const auto bin = static_cast<std::size_t>(value * static_cast<double>(kMaskBins));
  return std::min(bin, kMaskBins - 1);
}

MaskStats compute_mask_stats(std::span<const double> values) {
  MaskStats s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) {
    sum += v;
    ++s.histogram[mask_bin(v)];
  }
  s.mean = sum / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(values.size()));
  std::vector<double> sorted(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(sorted.size())));
  const std::size_t idx = std::max<std::size_t>(rank, 1) - 1;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(idx), sorted.end());
  s.p95 = sorted[idx];
  return s;
}

void MaskAccumulator::add(std::span<const double> values) {
  for (double v : values) {
    ++count_;
    sum_ += v;
    sum_sq_ += v * v;
    const auto bin = static_cast<std::size_t>(std::clamp(v, 0.0, 1.0) * kFineBins);
    ++fine_[std::min(bin, kFineBins - 1)];
  }
}

void MaskAccumulator::merge(const MaskAccumulator& other) {
  count_ += other.count_;
  sum_ += other.sum_;
  sum_sq_ += other.sum_sq_;
  for (std::size_t i = 0; i < kFineBins; ++i) fine_[i] += other.fine_[i];
}

MaskStats MaskAccumulator::stats() const {
  MaskStats s;
  s.count = count_;
  if (count_ == 0) return s;
  const double n = static_cast<double>(count_);
  s.mean = sum_ / n;
  s.std = std::sqrt(std::max(0.0, sum_sq_ / n - s.mean * s.mean));
  const auto target = static_cast<std::uint64_t>(std::ceil(0.95 * n));
  std::uint64_t seen = 0;
  for (std::size_t i = 0; i < kFineBins; ++i) {
    const double lower = static_cast<double>(i) / kFineBins;
    s.histogram[mask_bin(lower)] += fine_[i];
    if (seen < target && seen + fine_[i] >= target) s.p95 = (static_cast<double>(i) + 1.0) / kFineBins;
    seen += fine_[i];
  }
  return s;
}

namespace {

Tensor flat_rows(const Tensor& h) {
  const std::size_t c = h.shape().back();
  return ops::reshape(h, {h.numel() / c, c});
}

Tensor affine(const Tensor& h, const AffineMap& map) {
  return ops::reshape(ops::add_bias(ops::matmul(flat_rows(h), map.weight), map.bias), h.shape());
}

std::string at_step(std::size_t step) { return "step " + std::to_string(step) + ": "; }

}  // namespace

Tensor vector_field(const Tensor& h, const Tensor& a_op, const VectorFieldParams& params,
                    NfeCounter& nfe) {
  if (h.rank() != 3) throw DimensionError("vector_field expects h[B x N x d_h], got " + shape_str(h.shape()));
  const std::size_t c = h.dim(2);
  if (params.weight.rank() != 2 || params.weight.dim(0) != c || params.weight.dim(1) != c ||
      params.bias.numel() != c) {
    throw DimensionError("vector_field: parameters " + shape_str(params.weight.shape()) + "/" +
                         shape_str(params.bias.shape()) + " do not fit state " + shape_str(h.shape()));
  }
  ++nfe.count;
  const Tensor mixed = ops::propagate(a_op, h);
  return ops::reshape(ops::add_bias(ops::matmul(flat_rows(mixed), params.weight), params.bias),
                      h.shape());
}

DualStep embedded_dual_step(const Tensor& h, double dt, const Tensor& a_op,
                            const VectorFieldParams& params, NfeCounter& nfe,
                            std::size_t step_index) {
  if (!(dt > 0.0)) throw ContractError("embedded_dual_step: dt must be positive");
  try {
    const Tensor k1 = vector_field(h, a_op, params, nfe);
    DualStep out;
    out.euler = ops::add(h, ops::scale(k1, dt));
    const Tensor k2 = vector_field(ops::add(h, ops::scale(k1, 0.5 * dt)), a_op, params, nfe);
    out.rk2 = ops::add(h, ops::scale(k2, dt));
    return out;
  } catch (const NumericError& e) {
    throw NumericError(at_step(step_index) + e.what());
  }
}

Tensor local_truncation_error(const Tensor& euler, const Tensor& rk2) {
  return ops::abs(ops::sub(rk2, euler));
}

Tensor attention_mask(const Tensor& e) {
  for (double v : e.data()) {
    if (v < 0.0) throw ContractError("attention_mask: truncation error must be non-negative");
  }
  return ops::sigmoid(e);
}

Tensor compensate(const Tensor& h_t, const Tensor& h_rk2, const Tensor& m, std::size_t step,
                  const CompensatorParams& comp, std::optional<double> sparsity_tau) {
  if (step >= comp.per_step.size()) {
    throw ContractError("compensate: step " + std::to_string(step) + " out of range (" +
                        std::to_string(comp.per_step.size()) + " compensator steps)");
  }
  if (h_t.shape() != h_rk2.shape() || m.shape() != h_rk2.shape()) {
    throw DimensionError("compensate: shapes " + shape_str(h_t.shape()) + ", " +
                         shape_str(h_rk2.shape()) + ", " + shape_str(m.shape()) + " disagree");
  }
  const AffineMap& g = comp.per_step[step];
  if (!sparsity_tau) {
    return ops::add(h_rk2, ops::hadamard(m, ops::tanh(affine(h_t, g))));
  }

  const std::size_t c = h_t.shape().back();
  const std::size_t rows = h_t.numel() / c;
  const double threshold = 0.5 + *sparsity_tau;
  auto mv = m.data();
  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = mv.subspan(r * c, c);
    if (std::any_of(row.begin(), row.end(), [&](double v) { return v >= threshold; })) {
      active.push_back(r);
    }
  }
  if (active.empty()) return h_rk2;
  const Tensor sub = ops::select_rows(flat_rows(h_t), active);
  const Tensor jumps = ops::tanh(ops::add_bias(ops::matmul(sub, g.weight), g.bias));
  const Tensor dense = ops::reshape(ops::scatter_rows(jumps, active, rows), h_t.shape());
  return ops::add(h_rk2, ops::hadamard(m, dense));
}

EvolveResult evolve(const Tensor& h0, std::size_t steps, double dt, const Tensor& a_op,
                    const VectorFieldParams& vf, const CompensatorParams* comp,
                    const LearnedMaskParams* learned, const EvolveOptions& options,
                    NfeCounter& nfe) {
  if (steps == 0) throw ContractError("evolve: at least one step is required");
  if (std::fabs(dt * static_cast<double>(steps) - 1.0) > 1e-12) {
    throw ContractError("evolve: dt must equal 1/steps");
  }
  const MaskMode mode = options.mask_mode;
  if (mode != MaskMode::off && (comp == nullptr || comp->per_step.size() != steps)) {
    throw ContractError("evolve: mask mode " + std::string(to_string(mode)) +
                        " needs one compensator entry per step");
  }
  if (mode == MaskMode::learned && (learned == nullptr || learned->per_step.size() != steps)) {
    throw ContractError("evolve: learned mask needs one gate entry per step");
  }

  EvolveResult result;
  Tensor h = h0;
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t nfe_before = nfe.count;
    try {
      const DualStep dual = embedded_dual_step(h, dt, a_op, vf, nfe, step);
      const Tensor e = local_truncation_error(dual.euler, dual.rk2);

      Tensor gate;
      switch (mode) {
        case MaskMode::lte:
        case MaskMode::off:
          gate = attention_mask(options.mask_grad ? e : ops::detach(e));
          break;
        case MaskMode::uniform_one:
          gate = Tensor::filled(h.shape(), 1.0);
          break;
        case MaskMode::learned:
          gate = ops::sigmoid(affine(h, learned->per_step[step]));
          break;
      }

      Tensor next = mode == MaskMode::off
                        ? dual.rk2
                        : compensate(h, dual.rk2, gate, step, *comp, options.sparsity_tau);

      StepTrace trace;
      trace.step_index = step;
      trace.nfe_count = nfe.count - nfe_before;
      double e_sum = 0.0;
      for (double v : e.data()) {
        e_sum += v;
        trace.e_max = std::max(trace.e_max, v);
      }
      trace.e_mean = e_sum / static_cast<double>(e.numel());
      const MaskStats ms = compute_mask_stats(gate.data());
      trace.m_mean = ms.mean;
      trace.m_std = ms.std;
      trace.m_p95 = ms.p95;
      trace.mask_histogram = ms.histogram;
      if (options.record_masks) trace.mask_values.assign(gate.data().begin(), gate.data().end());

      result.traces.push_back(std::move(trace));
      result.lte.push_back(e);
      if (options.record_states) result.states.push_back(ops::detach(next));
      h = next;
    } catch (const NumericError& err) {
      const std::string what = err.what();
      throw NumericError(what.rfind("step ", 0) == 0 ? what : at_step(step) + what);
    }
  }
  result.h_final = h;
  return result;
}

std::string traces_csv(std::span<const StepTrace> traces) {
  std::ostringstream out;
  out << "step,nfe,e_mean,e_max,m_mean,m_std,m_p95";
  for (std::size_t i = 0; i < kMaskBins; ++i) out << ",hist_" << i;
  out << '\n';
  for (const StepTrace& t : traces) {
    out << t.step_index << ',' << t.nfe_count << ',' << format_double(t.e_mean) << ','
        << format_double(t.e_max) << ',' << format_double(t.m_mean) << ','
        << format_double(t.m_std) << ',' << format_double(t.m_p95);
    for (auto count : t.mask_histogram) out << ',' << count;
    out << '\n';
  }
  return out.str();
}

}  // namespace lteode
