#include "lteode/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "lteode/error.hpp"
#include "lteode/gradcheck.hpp"
#include "lteode/ops.hpp"
#include "lteode/random.hpp"
#include "lteode/textio.hpp"

namespace lteode {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_lte: return "no_lte";
    case Variant::no_compensation: return "no_compensation";
    case Variant::no_mask: return "no_mask";
    case Variant::manifold_penalty: return "manifold_penalty";
  }
  return "full";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  throw ValidationError("unknown variant '" + std::string(name) +
                        "' (expected full, no_lte, no_compensation, no_mask or manifold_penalty)");
}

MaskMode mask_mode_for(Variant v) {
  switch (v) {
    case Variant::full: return MaskMode::lte;
    case Variant::no_lte: return MaskMode::learned;
    case Variant::no_compensation: return MaskMode::off;
    case Variant::no_mask: return MaskMode::uniform_one;
    case Variant::manifold_penalty: return MaskMode::lte;
  }
  return MaskMode::lte;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("train: lr must be positive");
  if (epochs == 0 || batch_size == 0 || eval_batch_size == 0) {
    throw ValidationError("train: epochs and batch sizes must be positive");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("train: lambda must be >= 0");
  if (lambda > 0.0 && variant != Variant::manifold_penalty) {
    throw ValidationError("train: lambda > 0 requires the manifold_penalty variant");
  }
  if (!(clip_norm > 0.0)) throw ValidationError("train: clip_norm must be positive");
}

KeyValues to_key_values(const TrainConfig& c) {
  KeyValues kv;
  kv["lr"] = format_double(c.lr);
  kv["epochs"] = std::to_string(c.epochs);
  kv["batch_size"] = std::to_string(c.batch_size);
  kv["seed"] = std::to_string(c.seed);
  kv["variant"] = std::string(to_string(c.variant));
  kv["lambda"] = format_double(c.lambda);
  kv["patience"] = std::to_string(c.patience);
  kv["clip_norm"] = format_double(c.clip_norm);
  kv["max_batches"] = std::to_string(c.max_batches);
  kv["eval_batch_size"] = std::to_string(c.eval_batch_size);
  return kv;
}

TrainConfig train_config_from(const KeyValues& kv) {
  TrainConfig c;
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  if (auto v = get("lr")) c.lr = parse_double(*v, "config key lr");
  if (auto v = get("epochs")) c.epochs = parse_index(*v, "config key epochs");
  if (auto v = get("batch_size")) c.batch_size = parse_index(*v, "config key batch_size");
  if (auto v = get("seed")) c.seed = parse_index(*v, "config key seed");
  if (auto v = get("variant")) c.variant = parse_variant(*v);
  if (auto v = get("lambda")) c.lambda = parse_double(*v, "config key lambda");
  if (auto v = get("patience")) c.patience = parse_index(*v, "config key patience");
  if (auto v = get("clip_norm")) c.clip_norm = parse_double(*v, "config key clip_norm");
  if (auto v = get("max_batches")) c.max_batches = parse_index(*v, "config key max_batches");
  if (auto v = get("eval_batch_size")) c.eval_batch_size = parse_index(*v, "config key eval_batch_size");
  return c;
}

ModelConfig apply_variant(ModelConfig config, Variant v) {
  config.mask_mode = mask_mode_for(v);
  return config;
}

Tensor mean_lte(const ForwardResult& fwd) {
  std::optional<Tensor> total;
  std::size_t count = 0;
  for (const EvolveResult* stream : {&fwd.stream_s, &fwd.stream_k}) {
    for (const Tensor& e : stream->lte) {
      const Tensor s = ops::sum(e);
      total = total ? ops::add(*total, s) : s;
      count += e.numel();
    }
  }
  if (!total) throw ContractError("mean_lte: forward pass recorded no truncation errors");
  return ops::scale(*total, 1.0 / static_cast<double>(count));
}

Tensor training_loss(const Tensor& y_hat, const Tensor& y, const ForwardResult& fwd, double lambda) {
  const Tensor task = ops::mean_abs_error(y_hat, y);
  if (lambda == 0.0) return task;
  return ops::add(task, ops::scale(mean_lte(fwd), lambda));
}

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, double lr, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step() {
  for (const auto& [name, t] : params_) {
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor t = params_[p].second;
    const auto g = t.grad();
    if (g.empty()) continue;
    auto x = t.mutable_data();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      x[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

double clip_grad_norm(std::span<const std::pair<std::string, Tensor>> params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params)
    for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& [name, t] : params) {
      if (!t.has_grad()) continue;
      for (double& g : t.node()->grad_buffer()) g *= factor;
    }
  }
  return norm;
}

MetricReport compute_metrics(std::span<const double> y_hat, std::span<const double> y, double mape_floor) {
  if (y_hat.size() != y.size()) throw DimensionError("metrics: prediction and target sizes differ");
  if (y.empty()) throw ContractError("metrics: no targets");
  MetricReport r;
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double err = y_hat[i] - y[i];
    abs_sum += std::fabs(err);
    sq_sum += err * err;
    if (std::fabs(y[i]) >= mape_floor) {
      pct_sum += std::fabs(err) / std::fabs(y[i]);
      ++r.mape_count;
    }
  }
  r.count = y.size();
  const double n = static_cast<double>(r.count);
  r.mae = abs_sum / n;
  r.rmse = std::sqrt(sq_sum / n);
  r.mape = r.mape_count ? 100.0 * pct_sum / static_cast<double>(r.mape_count) : 0.0;
  return r;
}

namespace {

template <typename Fn>
void for_each_batch(const std::vector<std::size_t>& starts, std::size_t batch_size, Fn&& fn) {
  for (std::size_t b = 0; b < starts.size(); b += batch_size) {
    const std::size_t e = std::min(starts.size(), b + batch_size);
    fn(std::span<const std::size_t>(starts.data() + b, e - b));
  }
}

}  // namespace

MetricReport evaluate(const ModelParams& params, const ModelConfig& config, const ForecastDataset& data,
                      Split split, std::size_t batch_size) {
  const auto& starts = data.windows(split);
  if (starts.empty()) throw ContractError("evaluate: empty split");
  const Tensor a_hat = normalize_adjacency(data.graph());
  std::vector<double> pred, target;
  for_each_batch(starts, batch_size, [&](std::span<const std::size_t> chunk) {
    const Batch b = data.batch(chunk);
    const ForwardResult r = forward(b.x, a_hat, params, config);
    for (double v : r.y_hat.data()) pred.push_back(data.scaler().unscale(v, 0));
    const Tensor raw = data.raw_targets(chunk);
    target.insert(target.end(), raw.data().begin(), raw.data().end());
  });
  return compute_metrics(pred, target);
}

MaskSurvey survey_masks(const ModelParams& params, const ModelConfig& config, const ForecastDataset& data,
                        Split split, std::span<const ShockEvent> events, std::size_t lookback,
                        std::size_t batch_size) {
  const auto& starts = data.windows(split);
  if (starts.empty()) throw ContractError("survey_masks: empty split");
  const std::size_t n = config.n_nodes, d = config.hidden(), window = config.window;
  // Shock ticks per node, for the (window, node) lookup.
  std::vector<std::vector<std::size_t>> shocks(n);
  for (const ShockEvent& e : events) {
    if (e.node < n) shocks[e.node].push_back(e.t);
  }
  for (auto& s : shocks) std::sort(s.begin(), s.end());
  auto is_shock_cell = [&](std::size_t start, std::size_t node) {
    const std::size_t hi = start + window;  // exclusive
    const std::size_t lo = hi - std::min(lookback, window);
    const auto& s = shocks[node];
    auto it = std::lower_bound(s.begin(), s.end(), lo);
    return it != s.end() && *it < hi;
  };

  const Tensor a_hat = normalize_adjacency(data.graph());
  ForwardOptions opt;
  opt.record_masks = true;
  MaskSurvey survey;
  for_each_batch(starts, batch_size, [&](std::span<const std::size_t> chunk) {
    const Batch b = data.batch(chunk);
    const ForwardResult r = forward(b.x, a_hat, params, config, opt);
    std::vector<char> shock_cell(chunk.size() * n);
    for (std::size_t k = 0; k < chunk.size(); ++k)
      for (std::size_t i = 0; i < n; ++i) {
        shock_cell[k * n + i] = !events.empty() && is_shock_cell(chunk[k], i);
        (shock_cell[k * n + i] ? survey.shock_cells : survey.calm_cells) += 1;
      }
    for (const EvolveResult* stream : {&r.stream_s, &r.stream_k}) {
      for (const StepTrace& t : stream->traces) {
        survey.all.add(t.mask_values);
        for (std::size_t cell = 0; cell < shock_cell.size(); ++cell) {
          const std::span<const double> values(t.mask_values.data() + cell * d, d);
          (shock_cell[cell] ? survey.shock : survey.calm).add(values);
        }
      }
    }
  });
  // Cells were counted once per batch; steps and streams do not add cells.
  return survey;
}

TrainResult train(const ForecastDataset& data, const ModelConfig& model_in, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  const ModelConfig model = apply_variant(model_in, config.variant);
  model.validate();
  if (model.n_nodes != data.n_nodes() || model.in_dim != data.in_dim() ||
      model.window != data.window() || model.horizon != data.horizon()) {
    throw DimensionError("train: model config does not match the dataset layout");
  }
  if (data.windows(Split::train).empty() || data.windows(Split::val).empty()) {
    throw ContractError("train: empty train or validation split");
  }

  ModelParams params = init_params(model, config.seed);
  const auto named = params.named();
  Adam adam(named, config.lr);
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const Tensor a_hat = normalize_adjacency(data.graph());

  TrainResult result;
  result.model = model;
  result.initial_val_mae = evaluate(params, model, data, Split::val, config.eval_batch_size).mae;
  result.best = params.deep_copy();
  result.best_val_mae = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  std::vector<std::size_t> order = data.windows(Split::train);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    std::size_t batches = (order.size() + config.batch_size - 1) / config.batch_size;
    if (config.max_batches) batches = std::min(batches, config.max_batches);
    double loss_sum = 0.0;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t begin = bi * config.batch_size;
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const Batch batch = data.batch(std::span<const std::size_t>(order.data() + begin, end - begin));
      Tape tape;
      double loss_value = 0.0;
      try {
        TapeScope scope(tape);
        const ForwardResult fwd = forward(batch.x, a_hat, params, model);
        const Tensor loss = training_loss(fwd.y_hat, batch.y, fwd, config.lambda);
        loss_value = loss.item();
        adam.zero_grad();
        tape.backward(loss);
        clip_grad_norm(named, config.clip_norm);
        adam.step();
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) + ": " + e.what());
      }
      loss_sum += loss_value;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val_mae = evaluate(params, model, data, Split::val, config.eval_batch_size).mae;
    const MaskStats ms = survey_masks(params, model, data, Split::val, {}, kShockLookback,
                                      config.eval_batch_size).all.stats();
    rec.m_mean = ms.mean;
    rec.m_std = ms.std;
    rec.m_p95 = ms.p95;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.val_mae < result.best_val_mae) {
      result.best_val_mae = rec.val_mae;
      result.best_epoch = epoch;
      result.best = params.deep_copy();
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  return result;
}

std::string history_csv(std::span<const EpochRecord> history) {
  std::ostringstream out;
  out << "epoch,train_loss,val_mae,m_mean,m_std,m_p95\n";
  for (const EpochRecord& r : history) {
    out << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.val_mae) << ','
        << format_double(r.m_mean) << ',' << format_double(r.m_std) << ',' << format_double(r.m_p95) << '\n';
  }
  return out.str();
}

GradientCheck check_model_gradient(const ModelConfig& config, double lambda, std::uint64_t seed,
                                   std::size_t batch, double eps) {
  config.validate();
  const ModelParams params = init_params(config, seed);
  Rng rng(seed + 1);
  std::vector<double> xs(batch * config.n_nodes * config.window * config.in_dim);
  for (double& v : xs) v = rng.uniform(-1.0, 1.0);
  std::vector<double> ys(batch * config.n_nodes * config.horizon);
  for (double& v : ys) v = rng.uniform(-1.0, 1.0);
  const Tensor x({batch, config.n_nodes, config.window, config.in_dim}, std::move(xs));
  const Tensor y({batch, config.n_nodes, config.horizon}, std::move(ys));
  const Tensor a_hat = normalize_adjacency(ring_graph(config.n_nodes));

  auto loss_value = [&] {
    const ForwardResult fwd = forward(x, a_hat, params, config);
    return training_loss(fwd.y_hat, y, fwd, lambda).item();
  };
  {
    Tape tape;
    TapeScope scope(tape);
    const ForwardResult fwd = forward(x, a_hat, params, config);
    tape.backward(training_loss(fwd.y_hat, y, fwd, lambda));
  }
  GradientCheck out;
  for (auto [name, t] : params.named()) {
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                      : std::vector<double>(t.numel(), 0.0);
    const Tensor numeric = finite_diff_gradient_inplace(loss_value, t, eps);
    const double err = max_relative_error(analytic, numeric.data());
    out.coordinates += t.numel();
    if (err >= out.max_rel_error) {
      out.max_rel_error = err;
      out.worst_param = name;
    }
  }
  return out;
}

std::string histogram_csv(const MaskHistogram& histogram) {
  std::ostringstream out;
  out << "bin,lo,hi,count\n";
  for (std::size_t i = 0; i < kMaskBins; ++i) {
    const double lo = static_cast<double>(i) / kMaskBins;
    const double hi = static_cast<double>(i + 1) / kMaskBins;
    out << i << ',' << format_double(lo) << ',' << format_double(hi) << ',' << histogram[i] << '\n';
  }
  return out.str();
}

namespace {

std::string stats_line(const std::string& label, const MaskStats& s) {
  return label + " mean=" + format_double(s.mean) + " std=" + format_double(s.std) +
         " p95=" + format_double(s.p95) + " count=" + std::to_string(s.count) + "\n";
}

}  // namespace

CollapseReport collapse_experiment(const ForecastDataset& data, const ModelConfig& model,
                                   const TrainConfig& base, std::span<const double> lambdas,
                                   std::span<const ShockEvent> events,
                                   const std::optional<std::filesystem::path>& out_dir,
                                   const ModelParams* trained_full) {
  if (lambdas.empty()) throw ValidationError("collapse_experiment: no lambda values");
  CollapseReport report;
  const ModelConfig full_model = apply_variant(model, Variant::full);

  ModelParams full_params;
  if (trained_full) {
    full_params = *trained_full;
  } else {
    TrainConfig tc = base;
    tc.variant = Variant::full;
    tc.lambda = 0.0;
    full_params = train(data, model, tc).best;
  }
  const MaskSurvey full_survey =
      survey_masks(full_params, full_model, data, Split::test, events, kShockLookback, base.eval_batch_size);
  report.full.stats = full_survey.all.stats();
  report.full.test = evaluate(full_params, full_model, data, Split::test, base.eval_batch_size);
  report.full_shock = full_survey.shock.stats();
  report.full_calm = full_survey.calm.stats();

  for (double lambda : lambdas) {
    TrainConfig tc = base;
    tc.variant = Variant::manifold_penalty;
    tc.lambda = lambda;
    const TrainResult run = train(data, model, tc);
    CollapseArm arm;
    arm.lambda = lambda;
    arm.stats = survey_masks(run.best, run.model, data, Split::test, {}, kShockLookback, base.eval_batch_size)
                    .all.stats();
    arm.test = evaluate(run.best, run.model, data, Split::test, base.eval_batch_size);
    report.penalty.push_back(arm);
    if (arm.stats.mean >= kCollapseLow && arm.stats.mean <= kCollapseHigh &&
        arm.stats.std < report.full.stats.std) {
      report.collapsed = report.penalty.size() - 1;
      break;
    }
  }

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_text_file(*out_dir / "mask_hist_full.csv", histogram_csv(report.full.stats.histogram));
    const CollapseArm& shown = report.penalty[report.collapsed.value_or(report.penalty.size() - 1)];
    write_text_file(*out_dir / "mask_hist_penalty.csv", histogram_csv(shown.stats.histogram));
    std::string summary;
    summary += stats_line("full", report.full.stats);
    for (const CollapseArm& arm : report.penalty) {
      summary += stats_line("penalty lambda=" + format_double(arm.lambda), arm.stats);
    }
    summary += stats_line("full shock_cells", report.full_shock);
    summary += stats_line("full calm_cells", report.full_calm);
    summary += "collapsed_lambda=" +
               (report.collapsed ? format_double(report.penalty[*report.collapsed].lambda) : std::string("none")) +
               "\n";
    summary += std::string("verdict=") + (report.passed() ? "PASS" : "FAIL") + "\n";
    write_text_file(*out_dir / "collapse_summary.txt", summary);
  }
  return report;
}

}  // namespace lteode
