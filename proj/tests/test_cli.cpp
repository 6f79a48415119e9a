#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"

#include "lstp/classic.hpp"
#include "lstp/evalreport.hpp"
#include "lstp/probgen.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace lstp;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result run(const std::string& args, const std::string& env = "") {
  static int counter = 0;
  const auto dir = fs::temp_directory_path() / "lstp_cli_io";
  fs::create_directories(dir);
  const auto out = dir / ("out" + std::to_string(counter) + ".txt");
  const auto err = dir / ("err" + std::to_string(counter++) + ".txt");
  const std::string cmd = env + (env.empty() ? "" : " ") + LSTP_CLI + std::string(" ") + args +
                          " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// Small desk-like dataset shared by the tests that need one.
const fs::path& data_dir() {
  static const fs::path dir = [] {
    auto d = testing::scratch_dir("cli_data");
    const auto r = run("gen --scale desk --seed 3 --train-count 300 --test-per-snr 20 --out " +
                       d.string());
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

const std::string kTinyTrain =
    " --T 4 --warmup 3 --stage1 5 --stage2 4 --batch 8 --lr 1e-3 --init-rho 0.1 --h1 6 --h2 5"
    " --log-every 1 --monitor-every 2 --seed 5";

std::set<std::string> log_stages(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::set<std::string> stages;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);  // throws on a malformed line
    stages.insert(j.at("stage").get<std::string>());
  }
  return stages;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  auto r = run("gen --scale desk --seed 7");
  CHECK(r.code == 2);
  CHECK(r.err.find("--out") != std::string::npos);
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("gen --scale huge --out /tmp/x").code == 2);
  CHECK(run("gen --out /tmp/x --bogus").code == 2);
  CHECK(run("gen --out /tmp/x --train-count abc").code == 2);
  CHECK(run("train --data " + data_dir().string() + " --out /tmp/x --stage1-mode full").code == 2);
  CHECK(run("train --data " + data_dir().string() + " --out /tmp/x --T 3 --channels 1,2").code == 2);
  CHECK(run("eval --data " + data_dir().string() + " --method lasso --out /tmp/x").code == 2);
  CHECK(run("eval --data " + data_dir().string() + " --method ista --out /tmp/x").code == 2);
  CHECK(run("eval --data " + data_dir().string() + " --method lista-baseline --out /tmp/x").code == 2);
  CHECK(run("tune --data " + data_dir().string() + " --algo sgd --out /tmp/x.json").code == 2);
  CHECK(run("--help").code == 0);
}

TEST_CASE("runtime errors exit with code 1") {
  const auto r = run("tune --data /nonexistent/dir --out /tmp/x.json");
  CHECK(r.code == 1);
  CHECK(r.err.find("/nonexistent/dir") != std::string::npos);
  CHECK(run("eval --data /nonexistent --method ista --rho 0.1 --out /tmp/x").code == 1);
  CHECK(run("report /nonexistent.json --out /tmp/x.csv").code == 1);
}

TEST_CASE("gen is deterministic and thread-count independent") {
  const auto a = testing::scratch_dir("cli_gen_a");
  const auto b = testing::scratch_dir("cli_gen_b");
  const auto c = testing::scratch_dir("cli_gen_c");
  const std::string common = "gen --scale desk --seed 7 --train-count 400 --test-per-snr 30 --out ";
  REQUIRE(run(common + a.string() + " --threads 1").code == 0);
  REQUIRE(run(common + b.string() + " --threads 1").code == 0);
  REQUIRE(run(common + c.string() + " --threads 8").code == 0);
  for (const char* f : {"train.lstp", "test.lstp", "manifest.json"}) {
    CHECK(slurp(a / f) == slurp(b / f));
    CHECK(slurp(a / f) == slurp(c / f));
  }
  const auto cfg = nlohmann::json::parse(slurp(a / "config.json"));
  CHECK(cfg["gen"]["seed"] == 7);
  CHECK(cfg["gen"]["m"] == 50);
  const auto test = probgen::load_dataset(a / "test.lstp");
  CHECK(test.size() == 90);
  CHECK(test.snr_levels() == std::vector<double>{20, 30, 40});
}

TEST_CASE("gen honors the thread environment fallback") {
  const auto d = testing::scratch_dir("cli_gen_env");
  REQUIRE(run("gen --train-count 10 --test-per-snr 2 --out " + d.string(), "LSTP_THREADS=3").code == 0);
  CHECK(nlohmann::json::parse(slurp(d / "config.json"))["threads"] == 3);
}

TEST_CASE("gen at paper scale") {
  const auto d = testing::scratch_dir("cli_gen_paper");
  REQUIRE(run("gen --scale paper --seed 1 --train-count 10 --out " + d.string()).code == 0);
  const auto test = probgen::load_dataset(d / "test.lstp");
  CHECK(test.m() == 250);
  CHECK(test.n() == 500);
  CHECK(test.size() == 3000);
  CHECK(probgen::load_dataset(d / "train.lstp").size() == 10);
  fs::remove_all(d);
}

TEST_CASE("tune writes one entry per algorithm and depth with the grid minimum") {
  const auto d = testing::scratch_dir("cli_tune");
  const std::string args = "tune --data " + data_dir().string() +
                           " --algo ista,fista --T 4,8 --tune-count 100 --out ";
  REQUIRE(run(args + (d / "a.json").string()).code == 0);
  REQUIRE(run(args + (d / "b.json").string()).code == 0);
  CHECK(slurp(d / "a.json") == slurp(d / "b.json"));
  CHECK(fs::exists(d / "a.json.config.json"));

  const auto j = nlohmann::json::parse(slurp(d / "a.json"));
  CHECK(j["schema"] == "lstp-tune/1");
  CHECK(j["tuning_instances"] == 100);
  REQUIRE(j["entries"].size() == 4);
  std::set<std::pair<std::string, std::size_t>> pairs;
  const auto train = probgen::load_dataset(data_dir() / "train.lstp");
  std::vector<std::size_t> idx(100);
  for (std::size_t i = 0; i < 100; ++i) idx[i] = i;
  const auto B = train.measurements(idx);
  const auto X = train.truths(idx);
  for (const auto& e : j["entries"]) {
    const auto algo = e["algo"].get<std::string>();
    const auto T = e["T"].get<std::size_t>();
    pairs.insert({algo, T});
    const double best = e["tuning_nmse_db"].get<double>();
    CHECK(e["grid"].size() == 10);
    for (const auto& g : e["grid"]) {
      // Exhaustive re-evaluation of every grid point.
      const classic::LassoConfig cfg{g["rho"].get<double>(), g["step"].get<double>(), T};
      const auto path = classic::solve_batch(classic::parse_algorithm(algo), train.A, B, cfg);
      const double nmse = evalreport::nmse_db(path.back(), X);
      CHECK(nmse == doctest::Approx(g["nmse_db"].get<double>()).epsilon(1e-12));
      CHECK(best <= nmse);
    }
  }
  CHECK(pairs == std::set<std::pair<std::string, std::size_t>>{
                     {"ista", 4}, {"ista", 8}, {"fista", 4}, {"fista", 8}});
}

TEST_CASE("two-stage training layout, determinism and evaluation") {
  const auto base = testing::scratch_dir("cli_train");
  const auto a = base / "a", b = base / "b";
  const std::string args = "train --algo twostage --stage3 0 --data " + data_dir().string() + kTinyTrain;
  REQUIRE(run(args + " --threads 1 --out " + a.string()).code == 0);
  REQUIRE(run(args + " --threads 8 --out " + b.string()).code == 0);
  CHECK(fs::exists(a / "stage1" / "theta.lstw"));
  CHECK(fs::exists(a / "stage2" / "policy.lstq"));
  CHECK_FALSE(fs::exists(a / "stage3"));
  for (const char* f : {"stage1/theta.lstw", "stage1/policy.lstq", "stage2/theta.lstw",
                        "stage2/policy.lstq"}) {
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK(log_stages(a / "log.jsonl") == std::set<std::string>{"warmup", "stage1", "stage2"});
  CHECK(log_stages(a / "stage2" / "log.jsonl") == std::set<std::string>{"stage2"});
  const auto cfg = nlohmann::json::parse(slurp(a / "config.json"));
  CHECK(cfg["train"]["T"] == 4);
  CHECK(cfg["train"]["stage3_iters"] == 0);
  CHECK(cfg["train"]["monitor_every"] == 2);

  // Evaluation reports are byte-stable across runs and thread counts.
  const auto e1 = base / "eval1", e2 = base / "eval2";
  const std::string ev = "eval --data " + data_dir().string() + " --run " + a.string() +
                         " --method lista-baseline,lista-stop --compare --no-runtime";
  REQUIRE(run(ev + " --threads 1 --out " + e1.string()).code == 0);
  REQUIRE(run(ev + " --threads 8 --out " + e2.string()).code == 0);
  for (const char* f : {"lista-baseline.json", "lista-stop.json", "comparison.json"})
    CHECK(slurp(e1 / f) == slurp(e2 / f));

  const auto stop = evalreport::load_report(e1 / "lista-stop.json");
  CHECK(stop.T == 4);
  CHECK(stop.stop_histogram.size() == 4);
  std::vector<double> keys;
  for (const auto& [s, v] : stop.nmse_per_snr) keys.push_back(s);
  CHECK(keys == std::vector<double>{20, 30, 40});
  const auto cmp = nlohmann::json::parse(slurp(e1 / "comparison.json"));
  CHECK(cmp["comparison"].size() == 2);

  // The baseline method on a stopping run reuses theta and ignores phi.
  const auto e3 = base / "eval3";
  REQUIRE(run("eval --data " + data_dir().string() + " --theta " +
              (a / "stage2" / "theta.lstw").string() +
              " --method lista-baseline --no-runtime --out " + e3.string())
              .code == 0);
  CHECK(slurp(e3 / "lista-baseline.json") == slurp(e1 / "lista-baseline.json"));

  // CSV output and report merging.
  const auto e4 = base / "eval4";
  REQUIRE(run("eval --data " + data_dir().string() + " --run " + a.string() +
              " --method lista-stop --format csv --out " + e4.string())
              .code == 0);
  CHECK(slurp(e4 / "lista-stop.csv").find("# layers") != std::string::npos);
  REQUIRE(run("report " + (e1 / "lista-baseline.json").string() + " " +
              (e1 / "lista-stop.json").string() + " --out " + (base / "merged.csv").string())
              .code == 0);
  const auto merged = slurp(base / "merged.csv");
  CHECK(merged.find("\nlista-baseline,4,") != std::string::npos);
  CHECK(merged.find("\nlista-stop,4,") != std::string::npos);
}

TEST_CASE("AEVB and baseline runs have single-phase logs") {
  const auto base = testing::scratch_dir("cli_aevb");
  REQUIRE(run("train --algo aevb --data " + data_dir().string() + kTinyTrain + " --out " +
              (base / "aevb").string())
              .code == 0);
  CHECK(log_stages(base / "aevb" / "log.jsonl") == std::set<std::string>{"aevb"});
  CHECK(fs::exists(base / "aevb" / "aevb" / "policy.lstq"));
  REQUIRE(run("train --algo baseline --data " + data_dir().string() + kTinyTrain + " --out " +
              (base / "base").string())
              .code == 0);
  CHECK(log_stages(base / "base" / "log.jsonl") == std::set<std::string>{"baseline"});
  CHECK(fs::exists(base / "base" / "baseline" / "theta.lstw"));
  CHECK(run("eval --data " + data_dir().string() + " --run " + (base / "base").string() +
            " --method lista-stop --out " + (base / "e").string())
            .code == 2);
}

TEST_CASE("divergence exits with code 3 and names the last checkpoint") {
  const auto d = testing::scratch_dir("cli_diverge");
  const auto r = run("train --data " + data_dir().string() +
                     " --T 3 --warmup 0 --stage1 1 --stage2 0 --stage3 2 --lr 1e300 --out " +
                     d.string());
  CHECK(r.code == 3);
  CHECK(r.err.find((d / "stage2").string()) != std::string::npos);
}

TEST_CASE("checkpoint and dataset dimension mismatches exit with code 1") {
  const auto other = testing::scratch_dir("cli_other");
  REQUIRE(run("gen --seed 1 --train-count 20 --test-per-snr 2 --out " + other.string()).code == 0);
  const auto small = testing::scratch_dir("cli_small");
  // Same generator with m=5, n=8 written through the library.
  probgen::GenConfig cfg;
  cfg.m = 5;
  cfg.n = 8;
  cfg.train_count = 50;
  cfg.test_count_per_snr = 2;
  const auto A = probgen::generate_matrix(cfg);
  probgen::save_dataset(probgen::generate_train(cfg, A), small / "train.lstp");
  REQUIRE(run("train --algo baseline --data " + small.string() +
              " --T 3 --warmup 1 --stage1 1 --batch 4 --out " + (small / "run").string())
              .code == 0);
  const auto r = run("eval --data " + other.string() + " --run " + (small / "run").string() +
                     " --method lista-baseline --out " + (other / "e").string());
  CHECK(r.code == 1);
  CHECK(r.err.find("m=5") != std::string::npos);
  CHECK(r.err.find("m=50") != std::string::npos);
}
