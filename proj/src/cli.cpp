#include "lteode/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>

#include "lteode/data.hpp"
#include "lteode/error.hpp"
#include "lteode/model.hpp"
#include "lteode/random.hpp"
#include "lteode/textio.hpp"
#include "lteode/training.hpp"

namespace lteode::cli {

namespace fs = std::filesystem;

namespace {

using KV = std::map<std::string, std::string>;

KV scenario_defaults() {
  const ShockScenario s;
  return {{"n_nodes", std::to_string(s.n_nodes)},
          {"total_t", std::to_string(s.total_t)},
          {"base_level", format_double(s.base_level)},
          {"amplitude", format_double(s.amplitude)},
          {"period", format_double(s.period)},
          {"diffusion", format_double(s.diffusion)},
          {"shock_rate", format_double(s.shock_rate)},
          {"shock_min", format_double(s.shock_min)},
          {"shock_max", format_double(s.shock_max)},
          {"shock_decay", format_double(s.shock_decay)},
          {"graph_reach", std::to_string(s.graph_reach)},
          {"seed", std::to_string(s.seed)}};
}

ShockScenario scenario_from(const KV& kv) {
  ShockScenario s;
  auto d = [&](const char* k) { return parse_double(kv.at(k), std::string("config key ") + k); };
  auto i = [&](const char* k) { return parse_index(kv.at(k), std::string("config key ") + k); };
  s.n_nodes = i("n_nodes");
  s.total_t = i("total_t");
  s.base_level = d("base_level");
  s.amplitude = d("amplitude");
  s.period = d("period");
  s.diffusion = d("diffusion");
  s.shock_rate = d("shock_rate");
  s.shock_min = d("shock_min");
  s.shock_max = d("shock_max");
  s.shock_decay = d("shock_decay");
  s.graph_reach = i("graph_reach");
  s.seed = i("seed");
  s.validate();
  return s;
}

const std::vector<std::string> kModelKeys = {"window", "horizon", "proj_dim", "embed_dim",
                                             "steps", "mask_grad", "sparsity_tau"};

KV model_defaults() {
  KV all = to_key_values(ModelConfig{});
  KV kv;
  for (const auto& k : kModelKeys) kv[k] = all.at(k);
  return kv;
}

KV train_defaults() { return to_key_values(TrainConfig{}); }

// Every key any command understands; config files may mix them freely.
std::set<std::string> known_keys() {
  std::set<std::string> keys;
  for (const KV& kv : {scenario_defaults(), to_key_values(ModelConfig{}), train_defaults()})
    for (const auto& [k, v] : kv) keys.insert(k);
  for (const char* k : {"data", "checkpoint", "split", "lookback"}) keys.insert(k);
  return keys;
}

std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

struct Command {
  CLI::App* app = nullptr;
  KV defaults;
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flags;
  std::string config_path;
  std::string out_dir = "out";
};

void add_keys(Command& cmd, const KV& defaults) {
  for (const auto& [key, value] : defaults) {
    cmd.defaults[key] = value;
    if (cmd.flags.count(key)) continue;
    cmd.flags[key] = cmd.app->add_option(flag_name(key), cmd.flag_values[key], "default: " + value)
                         ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
}

Command& make_command(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds, const std::string& name,
                      const std::string& description) {
  auto cmd = std::make_unique<Command>();
  cmd->app = app.add_subcommand(name, description);
  cmd->app->add_option("--config", cmd->config_path, "flat key=value config file");
  cmd->app->add_option("--out", cmd->out_dir, "output directory")->capture_default_str();
  cmds.push_back(std::move(cmd));
  return *cmds.back();
}

// defaults <- config file <- flags.
KV resolve(const Command& cmd) {
  KV kv = cmd.defaults;
  if (!cmd.config_path.empty()) {
    const KV file = parse_config_text(read_text_file(cmd.config_path), cmd.config_path);
    for (const auto& [k, v] : file) {
      if (kv.count(k)) kv[k] = v;
    }
  }
  for (const auto& [k, opt] : cmd.flags) {
    if (opt->count() > 0) kv[k] = cmd.flag_values.at(k);
  }
  return kv;
}

void write_resolved(const fs::path& out, const KV& kv) {
  std::string text;
  for (const auto& [k, v] : kv) text += k + "=" + v + "\n";
  write_text_file(out / "resolved_config.txt", text);
}

fs::path prepare_out(const std::string& dir) {
  const fs::path out(dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory " + dir);
  return out;
}

ModelConfig model_from(const KV& kv, std::size_t n_nodes, std::size_t in_dim) {
  KV m;
  for (const auto& k : kModelKeys) m[k] = kv.at(k);
  ModelConfig c = model_config_from(m);
  c.n_nodes = n_nodes;
  c.in_dim = in_dim;
  c.validate();
  return c;
}

TrainConfig train_from(const KV& kv) {
  KV t;
  for (const auto& [k, v] : train_defaults()) {
    if (auto it = kv.find(k); it != kv.end()) t[k] = it->second;
  }
  return train_config_from(t);
}

struct LoadedData {
  ForecastDataset dataset;
  std::vector<ShockEvent> events;
  bool has_events = false;
};

LoadedData load_data(const std::string& dir, std::size_t window, std::size_t horizon) {
  const fs::path d(dir);
  ExternalSeries ext = load_external_csv(d / "series.csv", d / "meta.json");
  LoadedData out{ForecastDataset(std::move(ext.graph), std::move(ext.raw), window, horizon), {}, false};
  if (fs::exists(d / "events.csv")) {
    out.events = read_events_csv(d / "events.csv");
    out.has_events = true;
  }
  return out;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "' (expected train, val or test)");
}

std::string metrics_row(const std::string& label, const MetricReport& m) {
  return label + "," + format_double(m.mae) + "," + format_double(m.rmse) + "," + format_double(m.mape) + "\n";
}

std::string flops_csv(const FlopReport& f) {
  std::ostringstream o;
  o << "term,flops\n"
    << "input_projection," << format_double(f.input_projection) << '\n'
    << "adaptive_adjacency," << format_double(f.adaptive_adjacency) << '\n'
    << "solver," << format_double(f.solver) << '\n'
    << "gating," << format_double(f.gating) << '\n'
    << "compensator," << format_double(f.compensator) << '\n'
    << "head," << format_double(f.head) << '\n'
    << "total," << format_double(f.total) << '\n';
  return o.str();
}

// --- commands ---------------------------------------------------------------

int cmd_generate(const Command& cmd, std::ostream& out) {
  const KV kv = resolve(cmd);
  const ShockScenario sc = scenario_from(kv);
  const fs::path dir = prepare_out(cmd.out_dir);
  const SpatialGraph graph = ring_graph(sc.n_nodes, sc.graph_reach);
  const GeneratedSeries gen = generate_shock_series(sc, graph);
  write_series_csv(gen.series, dir / "series.csv");
  write_events_csv(gen.events, dir / "events.csv");
  save_graph(graph, dir / "edges.csv");
  write_meta(DatasetMeta{sc.n_nodes, 1, 300.0, "edges.csv"}, dir / "meta.json");
  write_resolved(dir, kv);
  out << "nodes=" << sc.n_nodes << " ticks=" << sc.total_t << " shocks=" << gen.events.size() << '\n';
  return kOk;
}

void save_run(const fs::path& dir, const TrainResult& r, const LoadedData& d, std::size_t eval_batch) {
  save_checkpoint(dir / "checkpoint.txt", r.model, r.best);
  write_text_file(dir / "history.csv", history_csv(r.history));
  std::string metrics = "split,mae,rmse,mape\n";
  metrics += metrics_row("val", evaluate(r.best, r.model, d.dataset, Split::val, eval_batch));
  metrics += metrics_row("test", evaluate(r.best, r.model, d.dataset, Split::test, eval_batch));
  write_text_file(dir / "metrics.csv", metrics);
  write_text_file(dir / "flops.csv", flops_csv(flop_report(r.model, r.model.n_nodes)));
}

int cmd_train(const Command& cmd, std::ostream& out) {
  const KV kv = resolve(cmd);
  const TrainConfig tc = train_from(kv);
  tc.validate();
  const fs::path dir = prepare_out(cmd.out_dir);
  const ModelConfig probe = model_from(kv, 1, 1);
  const LoadedData data = load_data(kv.at("data"), probe.window, probe.horizon);
  const ModelConfig mc = model_from(kv, data.dataset.n_nodes(), data.dataset.in_dim());
  write_resolved(dir, kv);
  const TrainResult r = train(data.dataset, mc, tc, [&](const EpochRecord& e) {
    out << "epoch " << e.epoch << " train_loss=" << format_double(e.train_loss)
        << " val_mae=" << format_double(e.val_mae) << " m_mean=" << format_double(e.m_mean) << '\n';
  });
  save_run(dir, r, data, tc.eval_batch_size);
  const MetricReport test = evaluate(r.best, r.model, data.dataset, Split::test, tc.eval_batch_size);
  out << "variant=" << to_string(tc.variant) << " best_epoch=" << r.best_epoch << " params=" << r.best.count()
      << " test_mae=" << format_double(test.mae) << " test_rmse=" << format_double(test.rmse)
      << " flops=" << format_double(flop_report(r.model, r.model.n_nodes).total) << '\n';
  return kOk;
}

int cmd_evaluate(const Command& cmd, std::ostream& out) {
  const KV kv = resolve(cmd);
  const auto [mc, params] = load_checkpoint(kv.at("checkpoint"));
  const LoadedData data = load_data(kv.at("data"), mc.window, mc.horizon);
  if (data.dataset.n_nodes() != mc.n_nodes) throw DimensionError("checkpoint and dataset disagree on the node count");
  const fs::path dir = prepare_out(cmd.out_dir);
  write_resolved(dir, kv);
  const MetricReport m = evaluate(params, mc, data.dataset, parse_split(kv.at("split")),
                                  parse_index(kv.at("eval_batch_size"), "config key eval_batch_size"));
  write_text_file(dir / "metrics.csv", "split,mae,rmse,mape\n" + metrics_row(kv.at("split"), m));
  out << "split=" << kv.at("split") << " mae=" << format_double(m.mae) << " rmse=" << format_double(m.rmse)
      << " mape=" << format_double(m.mape) << '\n';
  return kOk;
}

int cmd_ablate(const Command& cmd, std::ostream& out) {
  const KV kv = resolve(cmd);
  TrainConfig base = train_from(kv);
  const double penalty_lambda = base.lambda > 0.0 ? base.lambda : 0.1;
  const fs::path dir = prepare_out(cmd.out_dir);
  const ModelConfig probe = model_from(kv, 1, 1);
  const LoadedData data = load_data(kv.at("data"), probe.window, probe.horizon);
  const ModelConfig mc = model_from(kv, data.dataset.n_nodes(), data.dataset.in_dim());
  write_resolved(dir, kv);
  std::string table = "variant,params,mae,mape,rmse\n";
  for (Variant v : kAllVariants) {
    TrainConfig tc = base;
    tc.variant = v;
    tc.lambda = v == Variant::manifold_penalty ? penalty_lambda : 0.0;
    const TrainResult r = train(data.dataset, mc, tc);
    const fs::path sub = prepare_out((dir / std::string(to_string(v))).string());
    save_run(sub, r, data, tc.eval_batch_size);
    const MetricReport m = evaluate(r.best, r.model, data.dataset, Split::test, tc.eval_batch_size);
    table += std::string(to_string(v)) + "," + std::to_string(r.best.count()) + "," + format_double(m.mae) + "," +
             format_double(m.mape) + "," + format_double(m.rmse) + "\n";
    write_text_file(dir / "ablation.csv", table);
    out << to_string(v) << " params=" << r.best.count() << " mae=" << format_double(m.mae)
        << " mape=" << format_double(m.mape) << " rmse=" << format_double(m.rmse) << '\n';
  }
  return kOk;
}

int cmd_mask_stats(const Command& cmd, std::ostream& out, std::ostream& err) {
  const KV kv = resolve(cmd);
  const auto [mc, params] = load_checkpoint(kv.at("checkpoint"));
  const LoadedData data = load_data(kv.at("data"), mc.window, mc.horizon);
  if (data.dataset.n_nodes() != mc.n_nodes) throw DimensionError("checkpoint and dataset disagree on the node count");
  const fs::path dir = prepare_out(cmd.out_dir);
  write_resolved(dir, kv);
  if (!data.has_events) err << "warning: no events.csv next to the data; shock cross-reference skipped\n";
  const std::size_t lookback = parse_index(kv.at("lookback"), "config key lookback");
  const MaskSurvey s = survey_masks(params, mc, data.dataset, parse_split(kv.at("split")), data.events, lookback,
                                    parse_index(kv.at("eval_batch_size"), "config key eval_batch_size"));
  const MaskStats all = s.all.stats();
  std::uint64_t binned = 0;
  for (auto c : all.histogram) binned += c;
  if (binned != all.count) throw ContractError("mask histogram lost entries");
  write_text_file(dir / "mask_hist.csv", histogram_csv(all.histogram));
  std::string summary = "key,value\n";
  summary += "mean," + format_double(all.mean) + "\nstd," + format_double(all.std) + "\np95," +
             format_double(all.p95) + "\ncount," + std::to_string(all.count) + "\n";
  out << "mask mean=" << format_double(all.mean) << " std=" << format_double(all.std)
      << " p95=" << format_double(all.p95) << " count=" << all.count << '\n';
  if (data.has_events) {
    const MaskStats sh = s.shock.stats(), ca = s.calm.stats();
    summary += "shock_cells," + std::to_string(s.shock_cells) + "\nshock_mean," + format_double(sh.mean) +
               "\nshock_p95," + format_double(sh.p95) + "\ncalm_cells," + std::to_string(s.calm_cells) +
               "\ncalm_mean," + format_double(ca.mean) + "\n";
    out << "shock cells=" << s.shock_cells << " mean=" << format_double(sh.mean) << "; calm cells=" << s.calm_cells
        << " mean=" << format_double(ca.mean) << '\n';
  }
  write_text_file(dir / "mask_summary.csv", summary);
  return kOk;
}

int cmd_nfe_report(const Command& cmd, std::ostream& out) {
  const KV kv = resolve(cmd);
  const std::size_t n = parse_index(kv.at("n_nodes"), "config key n_nodes");
  const ModelConfig base = model_from(kv, n, 1);
  std::set<std::size_t> sweep{1, 2, 4, 6, 8};
  sweep.insert(base.steps);
  const fs::path dir = prepare_out(cmd.out_dir);
  write_resolved(dir, kv);

  Rng rng(parse_index(kv.at("seed"), "config key seed"));
  std::vector<double> xs(n * base.window);
  for (double& v : xs) v = rng.uniform(-1.0, 1.0);
  const Tensor x({1, n, base.window, 1}, std::move(xs));
  const SpatialGraph graph = ring_graph(n, 2);

  std::string csv = "mask_mode,steps,nfe_s,nfe_k,expected_per_stream,flops_solver,flops_total\n";
  bool ok = true;
  for (MaskMode mode : {MaskMode::lte, MaskMode::uniform_one, MaskMode::learned, MaskMode::off}) {
    for (std::size_t s : sweep) {
      ModelConfig c = base;
      c.mask_mode = mode;
      c.steps = s;
      const ForwardResult r = forward(x, graph, init_params(c, 0), c);
      const std::size_t expected = 2 * s;
      ok = ok && r.nfe_s == expected && r.nfe_k == expected;
      const FlopReport f = flop_report(c, n);
      csv += std::string(to_string(mode)) + "," + std::to_string(s) + "," + std::to_string(r.nfe_s) + "," +
             std::to_string(r.nfe_k) + "," + std::to_string(expected) + "," + format_double(f.solver) + "," +
             format_double(f.total) + "\n";
      out << to_string(mode) << " steps=" << s << " nfe=" << r.nfe_s << "+" << r.nfe_k << " expected=" << expected
          << "+" << expected << " flops=" << format_double(f.total) << '\n';
    }
  }
  write_text_file(dir / "nfe_report.csv", csv);
  if (!ok) throw ContractError("measured NFE count differs from 2*S per stream");
  out << "nfe invariant holds\n";
  return kOk;
}

std::string trajectory_csv(const std::vector<std::vector<double>>& states) {
  std::string s = "step,node0,node1\n";
  for (std::size_t i = 0; i < states.size(); ++i) {
    s += std::to_string(i) + "," + format_double(states[i][0]) + "," + format_double(states[i][1]) + "\n";
  }
  return s;
}

int cmd_intersect(const Command& cmd, std::ostream& out) {
  const KV kv = resolve(cmd);
  const fs::path dir = prepare_out(cmd.out_dir);
  write_resolved(dir, kv);
  const IntersectDemo demo = run_intersect_demo();
  write_text_file(dir / "traj_off_identical.csv", trajectory_csv(demo.off_identical));
  write_text_file(dir / "traj_off_ordered.csv", trajectory_csv(demo.off_ordered));
  write_text_file(dir / "traj_on_ordered.csv", trajectory_csv(demo.on_ordered));
  out << "identical states, compensation off: max gap " << format_double(demo.max_identical_gap) << '\n';
  out << "ordered pair, compensation off: order " << (demo.off_keeps_order ? "kept" : "lost") << '\n';
  out << "ordered pair, compensation on: " << (demo.on_crosses ? "crossed" : "no crossing") << '\n';
  out << (demo.passed() ? "PASS" : "FAIL") << '\n';
  return demo.passed() ? kOk : kInvariantFailure;
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::numeric:
    case ErrorKind::contract: return kInvariantFailure;
    default: return kDataError;
  }
}

}  // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text, const std::string& where) {
  static const std::set<std::string> keys = known_keys();
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t(trim(line));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(where + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key(trim(std::string_view(t).substr(0, eq)));
    const std::string value(trim(std::string_view(t).substr(eq + 1)));
    if (!keys.count(key)) throw ValidationError(where + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    kv[key] = value;
  }
  return kv;
}

IntersectDemo run_intersect_demo() {
  // Two nodes fully mixed by the operator, scalar channel, f(h) = 0.5 A h + 0.1.
  const Tensor a({2, 2}, {0.5, 0.5, 0.5, 0.5});
  const VectorFieldParams vf{Tensor({1, 1}, {0.5}), Tensor({1}, {0.1})};
  const std::size_t steps = 4;
  CompensatorParams comp;
  for (std::size_t s = 0; s < steps; ++s) comp.per_step.push_back(AffineMap{Tensor({1, 1}, {-5.0}), Tensor({1}, {0.0})});

  auto run = [&](const Tensor& h0, MaskMode mode) {
    EvolveOptions opt;
    opt.mask_mode = mode;
    opt.record_states = true;
    NfeCounter nfe;
    const EvolveResult r = evolve(h0, steps, 1.0 / static_cast<double>(steps), a, vf,
                                  mode == MaskMode::off ? nullptr : &comp, nullptr, opt, nfe);
    std::vector<std::vector<double>> states{{h0.data()[0], h0.data()[1]}};
    for (const Tensor& s : r.states) states.push_back({s.data()[0], s.data()[1]});
    return states;
  };

  IntersectDemo d;
  d.off_identical = run(Tensor({1, 2, 1}, {0.2, 0.2}), MaskMode::off);
  d.off_ordered = run(Tensor({1, 2, 1}, {0.2, -0.2}), MaskMode::off);
  d.on_ordered = run(Tensor({1, 2, 1}, {0.2, -0.2}), MaskMode::lte);
  for (const auto& s : d.off_identical) d.max_identical_gap = std::max(d.max_identical_gap, std::fabs(s[0] - s[1]));
  d.off_keeps_order = std::all_of(d.off_ordered.begin(), d.off_ordered.end(), [](const auto& s) { return s[0] > s[1]; });
  d.on_crosses = std::any_of(d.on_ordered.begin(), d.on_ordered.end(), [](const auto& s) { return s[0] < s[1]; });
  return d;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shock-aware graph ODE forecaster"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> cmds;

  Command& gen = make_command(app, cmds, "generate-data", "write a synthetic shock dataset");
  add_keys(gen, scenario_defaults());

  KV data_key{{"data", "data"}};
  KV train_keys = train_defaults();
  Command& tr = make_command(app, cmds, "train", "train one variant");
  add_keys(tr, model_defaults());
  add_keys(tr, train_keys);
  add_keys(tr, data_key);

  KV eval_keys{{"checkpoint", "out/checkpoint.txt"}, {"data", "data"}, {"split", "test"}, {"eval_batch_size", "64"}};
  Command& ev = make_command(app, cmds, "evaluate", "metrics of a checkpoint on a split");
  add_keys(ev, eval_keys);

  Command& ab = make_command(app, cmds, "ablate", "train all five variants with one seed");
  add_keys(ab, model_defaults());
  KV ab_train = train_keys;
  ab_train.erase("variant");
  add_keys(ab, ab_train);
  add_keys(ab, data_key);

  Command& ms = make_command(app, cmds, "mask-stats", "gate histogram of a checkpoint");
  KV ms_keys = eval_keys;
  ms_keys["lookback"] = std::to_string(kShockLookback);
  add_keys(ms, ms_keys);

  Command& nfe = make_command(app, cmds, "nfe-report", "measured NFEs and FLOP estimates");
  KV nfe_keys = model_defaults();
  nfe_keys["n_nodes"] = "20";
  nfe_keys["seed"] = "0";
  add_keys(nfe, nfe_keys);

  Command& demo = make_command(app, cmds, "intersect-demo", "trajectory crossing witness");

  for (auto& c : cmds) {
    if (!c->flags.count("seed")) {
      c->flags["seed"] = c->app->add_option("--seed", c->flag_values["seed"], "random seed");
      c->defaults.emplace("seed", "1");
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (gen.app->parsed()) return cmd_generate(gen, out);
    if (tr.app->parsed()) return cmd_train(tr, out);
    if (ev.app->parsed()) return cmd_evaluate(ev, out);
    if (ab.app->parsed()) return cmd_ablate(ab, out);
    if (ms.app->parsed()) return cmd_mask_stats(ms, out, err);
    if (nfe.app->parsed()) return cmd_nfe_report(nfe, out);
    if (demo.app->parsed()) return cmd_intersect(demo, out);
  } catch (const Error& e) {
    err << "error[" << to_string(e.kind()) << "]: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << '\n';
    return kInvariantFailure;
  }
  err << "error[usage]: no command\n";
  return kUsage;
}

}  // namespace lteode::cli
