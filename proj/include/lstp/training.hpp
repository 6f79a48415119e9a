#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lstp/gradcore.hpp"
#include "lstp/policy.hpp"
#include "lstp/probgen.hpp"
#include "lstp/unrolled.hpp"

namespace lstp::training {

using grad::DenseMat;
using grad::Vec;
using policy::PolicyParams;
using unrolled::ListaParams;

enum class Stage1Mode { full_expectation, stochastic_sample };
enum class Stage2Mode { forward_kl, map };

const char* to_string(Stage1Mode m);
const char* to_string(Stage2Mode m);
Stage1Mode parse_stage1_mode(const std::string& s);
Stage2Mode parse_stage2_mode(const std::string& s);

struct TrainConfig {
  std::size_t T = 16;
  std::size_t warmup_iters = 2000;
  std::size_t stage1_iters = 15000;
  std::size_t stage2_iters = 5000;
  std::size_t stage3_iters = 0;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  double beta = 0.1;
  double gamma = 1.0;
  Stage1Mode mode_stage1 = Stage1Mode::full_expectation;
  Stage2Mode mode_stage2 = Stage2Mode::forward_kl;
  /// 1-based output channels; empty means every layer.
  std::vector<std::size_t> channels;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  /// ISTA-like initialization of the predictor; init_step == 0 selects 1/L.
  double init_rho = 0.0;
  double init_step = 0.0;
  policy::PolicyConfig policy;
  std::size_t log_every = 100;
  std::size_t monitor_every = 500;
  /// Instances per gradient work item; fixes the reduction order.
  std::size_t chunk_size = 16;

  void validate() const;
};

struct LogRecord {
  std::string stage;  // warmup | stage1 | stage2 | stage3 | aevb | baseline
  std::size_t iteration = 0;
  double objective = 0.0;
  double oracle_entropy = 0.0;
  double q_entropy = 0.0;
  double wall_time = 0.0;
  /// Entropy of the stop histogram averaged over the monitor set.
  std::optional<double> monitor_entropy;
};

struct TrainLog {
  std::vector<LogRecord> records;

  void append(LogRecord r);
  std::vector<LogRecord> stage(const std::string& name) const;
  void write_jsonl(const std::filesystem::path& path, const std::string& stage_filter = "") const;
};

/// Thrown when a stage objective becomes non-finite or stays 10x above its
/// best value for too long.
class DivergenceAbort : public std::runtime_error {
 public:
  DivergenceAbort(std::string stage, std::size_t iteration, std::string checkpoint,
                  const std::string& what)
      : std::runtime_error(what),
        stage_(std::move(stage)),
        iteration_(iteration),
        checkpoint_(std::move(checkpoint)) {}
  const std::string& stage() const { return stage_; }
  std::size_t iteration() const { return iteration_; }
  const std::string& last_checkpoint() const { return checkpoint_; }

 private:
  std::string stage_;
  std::size_t iteration_;
  std::string checkpoint_;
};

/// Adaptive moment estimation with bias correction, over flat parameter blocks.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::span<const std::span<double>> params,
            std::span<const std::span<const double>> grads);
  void reset();
  std::size_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Vec> m_, v_;
};

/// A minibatch: measurements (m x k) and ground truths (n x k).
struct Batch {
  DenseMat B;
  DenseMat X;
  std::size_t size() const { return B.cols; }
};

Batch make_batch(const probgen::Dataset& ds, std::span<const std::size_t> idx);
/// Deterministic minibatch indices for (seed, stage, iteration).
std::vector<std::size_t> sample_indices(std::uint64_t seed, const std::string& stage,
                                        std::size_t iteration, std::size_t batch_size,
                                        std::size_t dataset_size);

/// Objective value, gradients, and entropy diagnostics for one batch.
struct Evaluation {
  double objective = 0.0;
  ListaParams d_theta;
  PolicyParams d_phi;
  double oracle_entropy = 0.0;  // batch mean H(q*)
  double q_entropy = 0.0;       // batch mean H(q_phi)
};

struct ObjectiveOptions {
  double beta = 0.1;
  double gamma = 1.0;
  Stage1Mode mode_stage1 = Stage1Mode::full_expectation;
  Stage2Mode mode_stage2 = Stage2Mode::forward_kl;
  std::vector<std::size_t> channels;  // empty = all layers
  std::uint64_t sample_seed = 0;      // stochastic Stage I layer draws
  std::size_t chunk_size = 16;
  unsigned threads = 1;
  /// Measurement matrix, needed only by the residual-feature policy.
  const DenseMat* A = nullptr;
};

/// Batch mean of sum_t gamma^(T-t) ||x_t - x*||^2; gradient w.r.t. theta.
Evaluation baseline_objective(const ListaParams& theta, const Batch& batch,
                              const ObjectiveOptions& opt);
/// Stage I loss E_{q*_theta}[l_t] (minimized). Full-expectation mode keeps
/// q* on the tape; stochastic mode draws one layer per instance from q* and
/// treats the draw as constant.
Evaluation stage1_objective(const ListaParams& theta, const Batch& batch,
                            const ObjectiveOptions& opt);
/// Stage II imitation loss (cross-entropy to q*, or -log q_phi(t_hat));
/// gradient w.r.t. phi only.
Evaluation stage2_objective(const ListaParams& theta, const PolicyParams& phi, const Batch& batch,
                            const ObjectiveOptions& opt);
/// -J_beta-VAE with q = rollout of phi over the taped predictor path;
/// gradients w.r.t. both theta and phi.
Evaluation stage3_objective(const ListaParams& theta, const PolicyParams& phi, const Batch& batch,
                            const ObjectiveOptions& opt);

/// One optimizer step for each stage; returns the objective before the update.
double baseline_step(ListaParams& theta, Adam& opt, const Batch& batch, const ObjectiveOptions& o);
double stage1_step(ListaParams& theta, Adam& opt, const Batch& batch, const ObjectiveOptions& o);
double stage2_step(PolicyParams& phi, const ListaParams& theta, Adam& opt, const Batch& batch,
                   const ObjectiveOptions& o);
double stage3_step(ListaParams& theta, PolicyParams& phi, Adam& opt, const Batch& batch,
                   const ObjectiveOptions& o);

/// Validates a 1-based channel subset of {1..T} (sorted, containing T).
void validate_channels(std::span<const std::size_t> channels, std::size_t T);
/// Values over all T layers restricted to the given channels.
Vec restrict_channels(std::span<const double> per_layer, std::span<const std::size_t> channels);
/// Inverse of restrict_channels for distributions: zero mass off-channel.
Vec expand_channels(std::span<const double> per_channel, std::span<const std::size_t> channels,
                    std::size_t T);
/// {1..T} when `channels` is empty, else `channels`.
std::vector<std::size_t> resolve_channels(std::span<const std::size_t> channels, std::size_t T);

struct TrainResult {
  ListaParams theta;
  PolicyParams phi;
  TrainLog log;
  std::size_t gradient_evaluations = 0;
};

struct TrainHooks {
  /// Run directory receiving per-stage checkpoints; empty disables writing.
  std::filesystem::path out_dir;
  /// Instances used for the averaged stop-histogram entropy monitor.
  const probgen::Dataset* monitor = nullptr;
};

/// Warm start, Stage I, Stage II, optional Stage III.
TrainResult train_full(const probgen::Dataset& train, const TrainConfig& cfg,
                       const TrainHooks& hooks = {});
/// Joint -J_beta-VAE training of theta and phi from the same initialization,
/// for the same total number of gradient evaluations as train_full.
TrainResult train_aevb(const probgen::Dataset& train, const TrainConfig& cfg,
                       const TrainHooks& hooks = {});
/// Fixed-depth predictor trained on the weighted per-layer loss for the same
/// number of predictor updates as train_full (warm start + Stage I + Stage III).
TrainResult train_baseline(const probgen::Dataset& train, const TrainConfig& cfg,
                           const TrainHooks& hooks = {});

}  // namespace lstp::training
