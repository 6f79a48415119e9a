// lstp: generate data, tune classic baselines, train, evaluate, merge reports.
//
// Exit codes: 0 ok, 1 runtime error, 2 usage error, 3 training diverged.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lstp/classic.hpp"
#include "lstp/evalreport.hpp"
#include "lstp/parallel.hpp"
#include "lstp/policy.hpp"
#include "lstp/probgen.hpp"
#include "lstp/training.hpp"
#include "lstp/unrolled.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace lstp;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

// A directory argument resolves to <dir>/<default_name>.
fs::path resolve_data(const std::string& arg, const char* default_name) {
  fs::path p(arg);
  if (fs::is_directory(p)) p /= default_name;
  if (!fs::exists(p)) throw std::runtime_error("dataset not found: " + p.string());
  return p;
}

json gen_config_json(const probgen::GenConfig& c) {
  return {{"m", c.m},
          {"n", c.n},
          {"p_b", c.p_b},
          {"snr_levels", c.snr_levels},
          {"train_count", c.train_count},
          {"test_count_per_snr", c.test_count_per_snr},
          {"seed", c.seed}};
}

//----------------------------------------------------------------------------
// gen

struct GenOpts {
  std::string scale = "desk";
  std::uint64_t seed = 0;
  std::string out;
  std::optional<std::size_t> train_count, test_per_snr;
  unsigned threads = 0;
};

int cmd_gen(const GenOpts& o) {
  auto cfg = o.scale == "paper" ? probgen::GenConfig::paper(o.seed) : probgen::GenConfig::desk(o.seed);
  if (o.train_count) cfg.train_count = *o.train_count;
  if (o.test_per_snr) cfg.test_count_per_snr = *o.test_per_snr;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const unsigned threads = resolve_threads(o.threads);
  fs::create_directories(o.out);
  const auto A = probgen::generate_matrix(cfg);
  const auto train = probgen::generate_train(cfg, A, threads);
  const auto test = probgen::generate_test(cfg, A, threads);
  const fs::path dir(o.out);
  probgen::save_dataset(train, dir / "train.lstp");
  probgen::save_dataset(test, dir / "test.lstp");

  json manifest = {{"files",
                    {{{"name", "train.lstp"}, {"instances", train.size()}},
                     {{"name", "test.lstp"}, {"instances", test.size()}}}},
                   {"m", cfg.m},
                   {"n", cfg.n}};
  write_json(dir / "manifest.json", manifest);
  write_json(dir / "config.json", {{"command", "gen"},
                                   {"scale", o.scale},
                                   {"threads", threads},
                                   {"out", o.out},
                                   {"gen", gen_config_json(cfg)}});
  std::cout << "wrote " << train.size() << " train / " << test.size() << " test instances (m="
            << cfg.m << ", n=" << cfg.n << ") to " << o.out << "\n";
  return 0;
}

//----------------------------------------------------------------------------
// tune

struct TuneOpts {
  std::string data;
  std::vector<std::string> algos{"ista", "fista"};
  std::vector<std::size_t> Ts{16};
  std::vector<double> rho_grid;
  std::vector<double> step_grid{0.0};
  std::size_t tune_count = 1000;
  std::string out;
};

int cmd_tune(const TuneOpts& o) {
  std::vector<classic::Algorithm> algos;
  try {
    for (const auto& a : o.algos) algos.push_back(classic::parse_algorithm(a));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (o.tune_count == 0) throw UsageError("--tune-count must be positive");
  for (auto T : o.Ts)
    if (T == 0) throw UsageError("--T values must be positive");
  const auto rho_grid = o.rho_grid.empty() ? classic::default_rho_grid() : o.rho_grid;

  const auto path = resolve_data(o.data, "train.lstp");
  const auto ds = probgen::load_dataset(path);
  std::vector<std::size_t> idx(std::min(o.tune_count, ds.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto B = ds.measurements(idx);
  const auto X = ds.truths(idx);

  json entries = json::array();
  for (auto algo : algos) {
    for (auto T : o.Ts) {
      const auto res = classic::grid_search(algo, ds.A, B, X, rho_grid, o.step_grid, T);
      json grid = json::array();
      for (const auto& g : res.evaluated)
        grid.push_back({{"rho", g.rho}, {"step", g.step}, {"nmse_db", g.nmse_db}});
      entries.push_back({{"algo", classic::to_string(algo)},
                         {"T", T},
                         {"rho", res.best.rho},
                         {"step", res.best.step},
                         {"tuning_nmse_db", res.best_nmse_db},
                         {"grid", grid}});
      std::cout << classic::to_string(algo) << " T=" << T << ": rho=" << res.best.rho
                << " step=" << res.best.step << " nmse=" << res.best_nmse_db << " dB\n";
    }
  }
  const fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_json(out, {{"schema", "lstp-tune/1"}, {"tuning_instances", idx.size()}, {"entries", entries}});
  write_json(fs::path(o.out + ".config.json"), {{"command", "tune"},
                                                {"data", path.string()},
                                                {"algos", o.algos},
                                                {"T", o.Ts},
                                                {"rho_grid", rho_grid},
                                                {"step_grid", o.step_grid},
                                                {"tune_count", o.tune_count},
                                                {"out", o.out}});
  return 0;
}

//----------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string data, out, algo = "twostage", monitor;
  training::TrainConfig cfg;
  std::string stage1_mode = "full-expectation", stage2_mode = "forward-kl";
  unsigned threads = 0;
};

json train_config_json(const training::TrainConfig& c) {
  return {{"T", c.T},
          {"warmup_iters", c.warmup_iters},
          {"stage1_iters", c.stage1_iters},
          {"stage2_iters", c.stage2_iters},
          {"stage3_iters", c.stage3_iters},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"beta", c.beta},
          {"gamma", c.gamma},
          {"mode_stage1", training::to_string(c.mode_stage1)},
          {"mode_stage2", training::to_string(c.mode_stage2)},
          {"channels", c.channels},
          {"seed", c.seed},
          {"threads", c.threads},
          {"init_rho", c.init_rho},
          {"init_step", c.init_step},
          {"h1", c.policy.h1},
          {"h2", c.policy.h2},
          {"residual_feature", c.policy.residual_feature},
          {"log_every", c.log_every},
          {"monitor_every", c.monitor_every},
          {"chunk_size", c.chunk_size}};
}

int cmd_train(TrainOpts o) {
  auto& cfg = o.cfg;
  try {
    cfg.mode_stage1 = training::parse_stage1_mode(o.stage1_mode);
    cfg.mode_stage2 = training::parse_stage2_mode(o.stage2_mode);
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  cfg.threads = resolve_threads(o.threads);

  const auto path = resolve_data(o.data, "train.lstp");
  const auto train = probgen::load_dataset(path);
  std::optional<probgen::Dataset> monitor;
  fs::path monitor_path;
  if (!o.monitor.empty()) {
    monitor_path = resolve_data(o.monitor, "test.lstp");
  } else if (fs::is_directory(o.data) && fs::exists(fs::path(o.data) / "test.lstp")) {
    monitor_path = fs::path(o.data) / "test.lstp";
  }
  if (!monitor_path.empty()) monitor = probgen::load_dataset(monitor_path);

  fs::create_directories(o.out);
  write_json(fs::path(o.out) / "config.json", {{"command", "train"},
                                               {"algo", o.algo},
                                               {"data", path.string()},
                                               {"monitor", monitor_path.string()},
                                               {"out", o.out},
                                               {"train", train_config_json(cfg)}});

  training::TrainHooks hooks{o.out, monitor ? &*monitor : nullptr};
  training::TrainResult res;
  if (o.algo == "twostage") res = training::train_full(train, cfg, hooks);
  else if (o.algo == "aevb") res = training::train_aevb(train, cfg, hooks);
  else res = training::train_baseline(train, cfg, hooks);
  res.log.write_jsonl(fs::path(o.out) / "log.jsonl");
  std::cout << o.algo << ": " << res.gradient_evaluations << " gradient evaluations, checkpoints in "
            << o.out << "\n";
  return 0;
}

//----------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string data, run, theta, policy, tune, out, format = "json";
  std::vector<std::string> methods;
  std::size_t T = 0;
  double rho = -1.0, step = 0.0, threshold = 0.5;
  bool compare = false, no_runtime = false;
  unsigned threads = 0;
};

// Latest-stage checkpoint directory of a training run.
fs::path run_checkpoint(const fs::path& run) {
  for (const char* s : {"stage3", "stage2", "aevb", "baseline", "stage1"})
    if (fs::exists(run / s / "theta.lstw")) return run / s;
  throw std::runtime_error("no checkpoint found under " + run.string());
}

classic::LassoConfig classic_config(const EvalOpts& o, classic::Algorithm algo, std::size_t T) {
  classic::LassoConfig cfg;
  cfg.max_iters = T;
  if (!o.tune.empty()) {
    const auto j = read_json(o.tune);
    for (const auto& e : j.at("entries")) {
      if (e.at("algo").get<std::string>() == classic::to_string(algo) &&
          e.at("T").get<std::size_t>() == T) {
        cfg.rho = e.at("rho").get<double>();
        cfg.step = e.at("step").get<double>();
        return cfg;
      }
    }
    throw std::runtime_error(o.tune + " has no entry for " + classic::to_string(algo) +
                             " at T=" + std::to_string(T));
  }
  if (o.rho < 0.0) throw UsageError("classic methods need --tune FILE or --rho");
  cfg.rho = o.rho;
  cfg.step = o.step;
  return cfg;
}

int cmd_eval(const EvalOpts& o) {
  if (o.methods.empty()) throw UsageError("--method needs at least one value");
  for (const auto& m : o.methods) {
    if (m != "ista" && m != "fista" && m != "lista-baseline" && m != "lista-stop")
      throw UsageError("unknown method '" + m + "'");
  }
  evalreport::Format fmt;
  try {
    fmt = evalreport::parse_format(o.format);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (!(o.threshold > 0.0 && o.threshold < 1.0)) throw UsageError("--threshold must lie in (0, 1)");
  const unsigned threads = resolve_threads(o.threads);

  const auto test_path = resolve_data(o.data, "test.lstp");
  const auto test = probgen::load_dataset(test_path);

  fs::path theta_path(o.theta), policy_path(o.policy);
  if (!o.run.empty()) {
    const auto dir = run_checkpoint(o.run);
    if (theta_path.empty()) theta_path = dir / "theta.lstw";
    if (policy_path.empty() && fs::exists(dir / "policy.lstq")) policy_path = dir / "policy.lstq";
  }
  std::optional<unrolled::ListaParams> theta;
  std::optional<policy::PolicyParams> phi;
  auto need_theta = [&] {
    if (theta) return;
    if (theta_path.empty()) throw UsageError("LISTA methods need --theta or --run");
    theta = unrolled::load_params(theta_path);
    if (theta->m() != test.m() || theta->n() != test.n()) {
      throw std::runtime_error("checkpoint " + theta_path.string() + " has m=" +
                               std::to_string(theta->m()) + ", n=" + std::to_string(theta->n()) +
                               "; test set has m=" + std::to_string(test.m()) +
                               ", n=" + std::to_string(test.n()));
    }
  };
  auto need_phi = [&] {
    if (phi) return;
    if (policy_path.empty()) throw UsageError("lista-stop needs --policy or --run with a policy");
    phi = policy::load_policy(policy_path);
    if (phi->m != test.m() || phi->n != test.n() || phi->T() != theta->T()) {
      throw std::runtime_error("policy " + policy_path.string() + " has m=" + std::to_string(phi->m) +
                               ", n=" + std::to_string(phi->n) + ", T=" + std::to_string(phi->T()) +
                               "; expected m=" + std::to_string(test.m()) + ", n=" +
                               std::to_string(test.n()) + ", T=" + std::to_string(theta->T()));
    }
  };

  std::vector<evalreport::EvalReport> reports;
  for (const auto& m : o.methods) {
    evalreport::EvalReport r;
    if (m == "ista" || m == "fista") {
      std::size_t T = o.T;
      if (T == 0) {
        if (!theta_path.empty()) {
          need_theta();
          T = theta->T();
        } else {
          T = 16;
        }
      }
      const auto algo = classic::parse_algorithm(m);
      r = evalreport::evaluate_classic(algo, test, classic_config(o, algo, T));
    } else if (m == "lista-baseline") {
      need_theta();
      r = evalreport::evaluate_lista_baseline(*theta, test, threads);
    } else {
      need_theta();
      need_phi();
      r = evalreport::evaluate_lista_stop(*theta, *phi, test, o.threshold, threads);
    }
    if (o.no_runtime) r.runtime_secs.reset();
    std::cout << r.method << " (T=" << r.T << "): mixed " << evalreport::format_real(r.nmse_mixed_db)
              << " dB";
    for (const auto& [s, v] : r.nmse_per_snr) std::cout << ", " << s << " dB: " << v;
    std::cout << "\n";
    reports.push_back(std::move(r));
  }

  const fs::path out(o.out);
  fs::create_directories(out);
  const std::string ext = fmt == evalreport::Format::json ? ".json" : ".csv";
  for (const auto& r : reports) evalreport::emit_report(r, out / (r.method + ext), fmt);
  if (o.compare) evalreport::emit_comparison(reports, out / ("comparison" + ext), fmt);
  write_json(out / "config.json", {{"command", "eval"},
                                   {"data", test_path.string()},
                                   {"theta", theta_path.string()},
                                   {"policy", policy_path.string()},
                                   {"tune", o.tune},
                                   {"methods", o.methods},
                                   {"T", o.T},
                                   {"rho", o.rho},
                                   {"step", o.step},
                                   {"threshold", o.threshold},
                                   {"format", o.format},
                                   {"compare", o.compare},
                                   {"no_runtime", o.no_runtime},
                                   {"threads", threads},
                                   {"out", o.out}});
  return 0;
}

//----------------------------------------------------------------------------
// report

struct ReportOpts {
  std::vector<std::string> inputs;
  std::string out, format = "csv";
};

int cmd_report(const ReportOpts& o) {
  evalreport::Format fmt;
  try {
    fmt = evalreport::parse_format(o.format);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::vector<evalreport::EvalReport> reports;
  for (const auto& p : o.inputs) reports.push_back(evalreport::load_report(p));
  const fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  evalreport::emit_comparison(reports, out, fmt);
  write_json(fs::path(o.out + ".config.json"),
             {{"command", "report"}, {"inputs", o.inputs}, {"format", o.format}, {"out", o.out}});
  std::cout << "merged " << reports.size() << " reports into " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned ISTA with learned stopping: data, baselines, training, evaluation"};
  app.require_subcommand(1);

  GenOpts gen;
  auto* g = app.add_subcommand("gen", "Generate train/test sparse recovery datasets");
  g->add_option("--scale", gen.scale, "Preset problem size")->check(CLI::IsMember({"desk", "paper"}));
  g->add_option("--seed", gen.seed, "Global seed");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--train-count", gen.train_count, "Override training-set size");
  g->add_option("--test-per-snr", gen.test_per_snr, "Override test instances per SNR level");
  g->add_option("--threads", gen.threads, "Worker threads (default: LSTP_THREADS or all cores)");

  TuneOpts tune;
  auto* tu = app.add_subcommand("tune", "Grid-search ISTA/FISTA hyperparameters on training data");
  tu->add_option("--data", tune.data, "Training dataset file or gen directory")->required();
  tu->add_option("--algo", tune.algos, "Algorithms to tune")->delimiter(',');
  tu->add_option("--T", tune.Ts, "Iteration counts")->delimiter(',');
  tu->add_option("--rho-grid", tune.rho_grid, "l1 weights (default: 10 log-spaced in [1e-4, 1])")
      ->delimiter(',');
  tu->add_option("--step-grid", tune.step_grid, "Step sizes; 0 means 1/lambda_max")->delimiter(',');
  tu->add_option("--tune-count", tune.tune_count, "Leading training instances used for tuning");
  tu->add_option("--out", tune.out, "Output JSON file")->required();

  TrainOpts train;
  auto* tr = app.add_subcommand("train", "Train the predictor and stopping policy");
  tr->add_option("--data", train.data, "Training dataset file or gen directory")->required();
  tr->add_option("--out", train.out, "Run directory")->required();
  tr->add_option("--algo", train.algo, "Training procedure")
      ->check(CLI::IsMember({"twostage", "aevb", "baseline"}));
  tr->add_option("--monitor", train.monitor, "Dataset for the stop-entropy monitor");
  tr->add_option("--T", train.cfg.T, "Number of layers");
  tr->add_option("--warmup", train.cfg.warmup_iters, "Baseline-loss warm-start iterations");
  tr->add_option("--stage1", train.cfg.stage1_iters, "Stage I iterations");
  tr->add_option("--stage2", train.cfg.stage2_iters, "Stage II iterations");
  tr->add_option("--stage3", train.cfg.stage3_iters, "Stage III iterations (0 disables)");
  tr->add_option("--batch", train.cfg.batch_size, "Minibatch size");
  tr->add_option("--lr", train.cfg.lr, "Learning rate");
  tr->add_option("--beta", train.cfg.beta, "Oracle temperature");
  tr->add_option("--gamma", train.cfg.gamma, "Layer discount of the baseline loss");
  tr->add_option("--stage1-mode", train.stage1_mode, "full-expectation | stochastic-sample");
  tr->add_option("--stage2-mode", train.stage2_mode, "forward-kl | map");
  tr->add_option("--channels", train.cfg.channels, "1-based stop layers (must include T)")
      ->delimiter(',');
  tr->add_option("--seed", train.cfg.seed, "Global seed");
  tr->add_option("--init-rho", train.cfg.init_rho, "l1 weight of the ISTA-like initialization");
  tr->add_option("--init-step", train.cfg.init_step, "Step of the ISTA-like initialization (0: auto)");
  tr->add_option("--h1", train.cfg.policy.h1, "Policy hidden width 1");
  tr->add_option("--h2", train.cfg.policy.h2, "Policy hidden width 2");
  tr->add_flag("--residual-feature", train.cfg.policy.residual_feature,
               "Feed ||b - A x_t||^2 to the policy");
  tr->add_option("--log-every", train.cfg.log_every, "Log period in iterations");
  tr->add_option("--monitor-every", train.cfg.monitor_every,
                 "Period of the stop-histogram entropy monitor (0 disables)");
  tr->add_option("--threads", train.threads, "Worker threads (default: LSTP_THREADS or all cores)");

  EvalOpts ev;
  auto* e = app.add_subcommand("eval", "Evaluate methods on the fixed test set");
  e->add_option("--data", ev.data, "Test dataset file or gen directory")->required();
  e->add_option("--method", ev.methods, "ista, fista, lista-baseline, lista-stop")
      ->delimiter(',')
      ->required();
  e->add_option("--run", ev.run, "Training run directory (uses its latest checkpoint)");
  e->add_option("--theta", ev.theta, "Predictor checkpoint (.lstw)");
  e->add_option("--policy", ev.policy, "Policy checkpoint (.lstq)");
  e->add_option("--tune", ev.tune, "Tuning results for classic methods");
  e->add_option("--T", ev.T, "Iterations for classic methods (default: predictor depth or 16)");
  e->add_option("--rho", ev.rho, "l1 weight for classic methods without --tune");
  e->add_option("--step", ev.step, "Step for classic methods without --tune (0: auto)");
  e->add_option("--threshold", ev.threshold, "Stop threshold for sequential deployment");
  e->add_option("--format", ev.format, "json | csv");
  e->add_flag("--compare", ev.compare, "Also emit a combined comparison table");
  e->add_flag("--no-runtime", ev.no_runtime, "Omit wall-clock timings (byte-stable reports)");
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--threads", ev.threads, "Worker threads (default: LSTP_THREADS or all cores)");

  ReportOpts rep;
  auto* r = app.add_subcommand("report", "Merge EvalReport JSON files into one comparison table");
  r->add_option("inputs", rep.inputs, "Report JSON files")->required();
  r->add_option("--out", rep.out, "Output file")->required();
  r->add_option("--format", rep.format, "json | csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*tu) return cmd_tune(tune);
    if (*tr) return cmd_train(train);
    if (*e) return cmd_eval(ev);
    if (*r) return cmd_report(rep);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return 2;
  } catch (const training::DivergenceAbort& err) {
    std::cerr << "diverged: " << err.what() << "\n";
    std::cerr << "last checkpoint: "
              << (err.last_checkpoint().empty() ? "(none)" : err.last_checkpoint()) << "\n";
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
