#include "lstp/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "json.hpp"

#include "lstp/classic.hpp"
#include "lstp/metrics.hpp"
#include "lstp/parallel.hpp"
#include "lstp/rng.hpp"
#include "lstp/stopping.hpp"

namespace lstp::training {

namespace {

using grad::Tape;
using grad::Var;

constexpr std::size_t kDivergencePatience = 1000;
constexpr double kDivergenceFactor = 10.0;
constexpr std::size_t kMonitorCap = 256;

DenseMat slice_cols(const DenseMat& m, std::size_t begin, std::size_t end) {
  DenseMat out(m.rows, end - begin);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = m(r, c);
  return out;
}

template <typename P>
void accumulate(P& acc, const P& g) {
  auto dst = acc.blocks();
  const auto src = std::as_const(g).blocks();
  for (std::size_t b = 0; b < dst.size(); ++b)
    for (std::size_t i = 0; i < dst[b].size(); ++i) dst[b][i] += src[b][i];
}

std::vector<std::size_t> zero_based(std::span<const std::size_t> channels) {
  std::vector<std::size_t> out;
  for (auto c : channels) out.push_back(c - 1);
  return out;
}

bool is_full(std::span<const std::size_t> channels, std::size_t T) { return channels.size() == T; }

Var restrict_rows(Var losses, std::span<const std::size_t> channels) {
  if (is_full(channels, losses.rows())) return losses;
  return grad::select_rows(losses, zero_based(channels));
}

std::vector<std::size_t> decision_layers(std::span<const std::size_t> channels) {
  return {channels.begin(), channels.end() - 1};
}

// Mean entropy of the per-column distributions exp(log_q).
double mean_column_entropy(const DenseMat& log_q) {
  double total = 0.0;
  for (std::size_t c = 0; c < log_q.cols; ++c) {
    for (std::size_t r = 0; r < log_q.rows; ++r) {
      const double lq = log_q(r, c);
      if (std::isfinite(lq)) total -= std::exp(lq) * lq;
    }
  }
  return total / static_cast<double>(log_q.cols);
}

DenseMat oracle_matrix(const DenseMat& losses, double beta) {
  DenseMat q(losses.rows, losses.cols);
  for (std::size_t c = 0; c < losses.cols; ++c) {
    const auto col = stopping::oracle_q(losses.col(c), beta);
    q.set_col(c, col.probs);
  }
  return q;
}

DenseMat log_oracle_matrix(const DenseMat& losses, double beta) {
  DenseMat q(losses.rows, losses.cols);
  for (std::size_t c = 0; c < losses.cols; ++c) q.set_col(c, stopping::log_oracle_q(losses.col(c), beta));
  return q;
}

// Per-layer losses 0.5 ||x_t - x*||^2 (T x k) from untaped states.
DenseMat loss_matrix(const std::vector<DenseMat>& states, const DenseMat& X) {
  DenseMat L(states.size(), X.cols);
  for (std::size_t t = 0; t < states.size(); ++t) {
    const auto errs = evalreport::column_sq_errors(states[t], X);
    for (std::size_t c = 0; c < X.cols; ++c) L(t, c) = 0.5 * errs[c];
  }
  return L;
}

DenseMat restrict_matrix(const DenseMat& L, std::span<const std::size_t> channels) {
  DenseMat out(channels.size(), L.cols);
  for (std::size_t k = 0; k < channels.size(); ++k)
    for (std::size_t c = 0; c < L.cols; ++c) out(k, c) = L(channels[k] - 1, c);
  return out;
}

struct ChunkResult {
  double objective = 0.0;
  std::optional<ListaParams> d_theta;
  std::optional<PolicyParams> d_phi;
  double oracle_entropy = 0.0;
  double q_entropy = 0.0;
};

// Splits the batch into fixed-size column chunks, evaluates them (possibly in
// parallel) and reduces in chunk order. Each chunk objective is already
// weighted by chunk_size / batch_size.
template <typename ChunkFn>
Evaluation reduce_chunks(const Batch& batch, const ObjectiveOptions& opt, const ListaParams& theta,
                         const PolicyParams* phi, ChunkFn&& fn) {
  const std::size_t k = batch.size();
  if (k == 0) throw std::invalid_argument("training objective: empty batch");
  const std::size_t cs = std::max<std::size_t>(1, opt.chunk_size);
  const std::size_t chunks = (k + cs - 1) / cs;
  std::vector<ChunkResult> results(chunks);
  parallel_for(chunks, opt.threads, [&](std::size_t i) {
    const std::size_t begin = i * cs, end = std::min(k, begin + cs);
    const Batch sub{slice_cols(batch.B, begin, end), slice_cols(batch.X, begin, end)};
    results[i] = fn(sub, begin, static_cast<double>(end - begin) / static_cast<double>(k));
  });
  Evaluation ev;
  ev.d_theta = theta.zeros_like();
  if (phi) ev.d_phi = phi->zeros_like();
  for (const auto& r : results) {
    ev.objective += r.objective;
    ev.oracle_entropy += r.oracle_entropy;
    ev.q_entropy += r.q_entropy;
    if (r.d_theta) accumulate(ev.d_theta, *r.d_theta);
    if (r.d_phi && phi) accumulate(ev.d_phi, *r.d_phi);
  }
  ev.oracle_entropy /= static_cast<double>(k);
  ev.q_entropy /= static_cast<double>(k);
  return ev;
}

std::optional<Var> bind_matrix(Tape& tape, const DenseMat* A) {
  if (!A) return std::nullopt;
  return tape.constant(*A);
}

}  // namespace

//----------------------------------------------------------------------------

const char* to_string(Stage1Mode m) {
  return m == Stage1Mode::full_expectation ? "full-expectation" : "stochastic-sample";
}
const char* to_string(Stage2Mode m) { return m == Stage2Mode::forward_kl ? "forward-kl" : "map"; }

Stage1Mode parse_stage1_mode(const std::string& s) {
  if (s == "full-expectation") return Stage1Mode::full_expectation;
  if (s == "stochastic-sample") return Stage1Mode::stochastic_sample;
  throw std::invalid_argument("unknown Stage I mode: " + s);
}

Stage2Mode parse_stage2_mode(const std::string& s) {
  if (s == "forward-kl") return Stage2Mode::forward_kl;
  if (s == "map") return Stage2Mode::map;
  throw std::invalid_argument("unknown Stage II mode: " + s);
}

void TrainConfig::validate() const {
  if (T == 0) throw std::invalid_argument("TrainConfig: T must be at least 1");
  if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (!(beta > 0.0)) throw std::invalid_argument("TrainConfig: beta must be positive");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("TrainConfig: need 0 < gamma <= 1");
  if (!channels.empty()) validate_channels(channels, T);
}

void TrainLog::append(LogRecord r) {
  if (!records.empty() && records.back().stage == r.stage &&
      r.iteration <= records.back().iteration) {
    throw std::logic_error("TrainLog: iterations must increase within a stage");
  }
  records.push_back(std::move(r));
}

std::vector<LogRecord> TrainLog::stage(const std::string& name) const {
  std::vector<LogRecord> out;
  for (const auto& r : records)
    if (r.stage == name) out.push_back(r);
  return out;
}

void TrainLog::write_jsonl(const std::filesystem::path& path, const std::string& stage_filter) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write log: " + path.string());
  for (const auto& r : records) {
    if (!stage_filter.empty() && r.stage != stage_filter &&
        !(stage_filter == "stage1" && r.stage == "warmup")) {
      continue;
    }
    nlohmann::json j{{"stage", r.stage},
                     {"iteration", r.iteration},
                     {"objective", r.objective},
                     {"oracle_entropy", r.oracle_entropy},
                     {"q_entropy", r.q_entropy},
                     {"wall_time", r.wall_time}};
    if (r.monitor_entropy) j["monitor_entropy"] = *r.monitor_entropy;
    out << j.dump() << '\n';
  }
}

//----------------------------------------------------------------------------

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
}

void Adam::step(std::span<const std::span<double>> params,
                std::span<const std::span<const double>> grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("Adam: block count mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto p = params[b];
    const auto g = grads[b];
    if (p.size() != g.size() || p.size() != m_[b].size()) {
      throw std::invalid_argument("Adam: block size mismatch");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m_[b][i] = beta1_ * m_[b][i] + (1.0 - beta1_) * g[i];
      v_[b][i] = beta2_ * v_[b][i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = m_[b][i] / c1;
      const double vhat = v_[b][i] / c2;
      p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

//----------------------------------------------------------------------------

Batch make_batch(const probgen::Dataset& ds, std::span<const std::size_t> idx) {
  return {ds.measurements(idx), ds.truths(idx)};
}

std::vector<std::size_t> sample_indices(std::uint64_t seed, const std::string& stage,
                                        std::size_t iteration, std::size_t batch_size,
                                        std::size_t dataset_size) {
  if (dataset_size == 0) throw std::invalid_argument("sample_indices: empty dataset");
  auto rng = make_stream(seed, "batch/" + stage, iteration);
  std::uniform_int_distribution<std::size_t> pick(0, dataset_size - 1);
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

void validate_channels(std::span<const std::size_t> channels, std::size_t T) {
  if (channels.empty()) throw std::invalid_argument("channels: subset is empty");
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] == 0 || channels[i] > T) {
      throw std::invalid_argument("channels: layer " + std::to_string(channels[i]) +
                                  " outside 1.." + std::to_string(T));
    }
    if (i > 0 && channels[i] <= channels[i - 1]) {
      throw std::invalid_argument("channels: subset must be strictly increasing");
    }
  }
  if (channels.back() != T) {
    throw std::invalid_argument("channels: the last layer T=" + std::to_string(T) +
                                " must be an output channel");
  }
}

Vec restrict_channels(std::span<const double> per_layer, std::span<const std::size_t> channels) {
  validate_channels(channels, per_layer.size());
  Vec out;
  for (auto c : channels) out.push_back(per_layer[c - 1]);
  return out;
}

Vec expand_channels(std::span<const double> per_channel, std::span<const std::size_t> channels,
                    std::size_t T) {
  validate_channels(channels, T);
  if (per_channel.size() != channels.size()) {
    throw std::invalid_argument("expand_channels: value count does not match channel count");
  }
  Vec out(T, 0.0);
  for (std::size_t k = 0; k < channels.size(); ++k) out[channels[k] - 1] = per_channel[k];
  return out;
}

std::vector<std::size_t> resolve_channels(std::span<const std::size_t> channels, std::size_t T) {
  if (!channels.empty()) {
    validate_channels(channels, T);
    return {channels.begin(), channels.end()};
  }
  std::vector<std::size_t> all(T);
  for (std::size_t t = 0; t < T; ++t) all[t] = t + 1;
  return all;
}

//----------------------------------------------------------------------------
// Objectives

Evaluation baseline_objective(const ListaParams& theta, const Batch& batch,
                              const ObjectiveOptions& opt) {
  return reduce_chunks(batch, opt, theta, nullptr, [&](const Batch& sub, std::size_t, double w) {
    Tape tape;
    const auto vars = unrolled::bind(tape, theta, true);
    const auto states = unrolled::lista_forward(vars, tape.constant(sub.B));
    const Var loss =
        grad::scale(unrolled::baseline_loss(states, tape.constant(sub.X), opt.gamma), w);
    tape.backward(loss);
    ChunkResult r;
    r.objective = loss.scalar();
    r.d_theta = vars.gradients(tape, theta);
    return r;
  });
}

Evaluation stage1_objective(const ListaParams& theta, const Batch& batch,
                            const ObjectiveOptions& opt) {
  const auto channels = resolve_channels(opt.channels, theta.T());
  return reduce_chunks(batch, opt, theta, nullptr, [&](const Batch& sub, std::size_t offset, double w) {
    Tape tape;
    const auto vars = unrolled::bind(tape, theta, true);
    const auto states = unrolled::lista_forward(vars, tape.constant(sub.B));
    const Var losses = restrict_rows(unrolled::layer_losses(states, tape.constant(sub.X)), channels);
    const DenseMat log_q_star = log_oracle_matrix(losses.value(), opt.beta);

    Var loss;
    if (opt.mode_stage1 == Stage1Mode::full_expectation) {
      loss = grad::scale(stopping::oracle_expected_loss(losses, opt.beta), w);
    } else {
      DenseMat mask(losses.rows(), losses.cols());
      for (std::size_t c = 0; c < losses.cols(); ++c) {
        auto rng = make_stream(opt.sample_seed, "stage1-sample", offset + c);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const std::size_t pick = stopping::sample_index(log_q_star.col(c), u(rng));
        mask(pick, c) = w / static_cast<double>(losses.cols());
      }
      loss = grad::sum_all(grad::mul_const(losses, std::move(mask)));
    }
    tape.backward(loss);
    ChunkResult r;
    r.objective = loss.scalar();
    r.d_theta = vars.gradients(tape, theta);
    r.oracle_entropy = mean_column_entropy(log_q_star) * static_cast<double>(sub.size());
    return r;
  });
}

Evaluation stage2_objective(const ListaParams& theta, const PolicyParams& phi, const Batch& batch,
                            const ObjectiveOptions& opt) {
  const auto channels = resolve_channels(opt.channels, theta.T());
  const auto decisions = decision_layers(channels);
  return reduce_chunks(batch, opt, theta, &phi, [&](const Batch& sub, std::size_t, double w) {
    // The predictor is frozen: its path enters the tape as constants.
    const auto path = unrolled::lista_forward_batch(theta, sub.B);
    const DenseMat losses = restrict_matrix(loss_matrix(path, sub.X), channels);
    DenseMat target = oracle_matrix(losses, opt.beta);
    const DenseMat log_q_star = log_oracle_matrix(losses, opt.beta);
    if (opt.mode_stage2 == Stage2Mode::map) {
      target = DenseMat(losses.rows, losses.cols);
      for (std::size_t c = 0; c < losses.cols; ++c)
        target(stopping::map_stop(losses.col(c)) - 1, c) = 1.0;
    }

    Tape tape;
    const auto pv = policy::bind(tape, phi, true);
    std::vector<Var> states;
    for (const auto& s : path) states.push_back(tape.constant(s));
    const Var logits =
        policy::policy_logits(phi, pv, tape.constant(sub.B), states, decisions, bind_matrix(tape, opt.A));
    const Var log_q = stopping::log_induced_q(logits);
    const Var loss = grad::scale(stopping::cross_entropy(log_q, target), w);
    tape.backward(loss);

    ChunkResult r;
    r.objective = loss.scalar();
    r.d_phi = pv.gradients(tape, phi);
    r.oracle_entropy = mean_column_entropy(log_q_star) * static_cast<double>(sub.size());
    r.q_entropy = mean_column_entropy(log_q.value()) * static_cast<double>(sub.size());
    return r;
  });
}

Evaluation stage3_objective(const ListaParams& theta, const PolicyParams& phi, const Batch& batch,
                            const ObjectiveOptions& opt) {
  const auto channels = resolve_channels(opt.channels, theta.T());
  const auto decisions = decision_layers(channels);
  return reduce_chunks(batch, opt, theta, &phi, [&](const Batch& sub, std::size_t, double w) {
    Tape tape;
    const auto tv = unrolled::bind(tape, theta, true);
    const auto pv = policy::bind(tape, phi, true);
    const Var B = tape.constant(sub.B);
    const auto states = unrolled::lista_forward(tv, B);
    const Var losses = restrict_rows(unrolled::layer_losses(states, tape.constant(sub.X)), channels);
    const Var logits = policy::policy_logits(phi, pv, B, states, decisions, bind_matrix(tape, opt.A));
    const Var log_q = stopping::log_induced_q(logits);
    const Var loss = grad::scale(stopping::neg_beta_vae(losses, log_q, opt.beta), w);
    tape.backward(loss);

    ChunkResult r;
    r.objective = loss.scalar();
    r.d_theta = tv.gradients(tape, theta);
    r.d_phi = pv.gradients(tape, phi);
    r.oracle_entropy =
        mean_column_entropy(log_oracle_matrix(losses.value(), opt.beta)) * static_cast<double>(sub.size());
    r.q_entropy = mean_column_entropy(log_q.value()) * static_cast<double>(sub.size());
    return r;
  });
}

//----------------------------------------------------------------------------
// Steps

double baseline_step(ListaParams& theta, Adam& opt, const Batch& batch, const ObjectiveOptions& o) {
  const auto ev = baseline_objective(theta, batch, o);
  if (std::isfinite(ev.objective)) opt.step(theta.blocks(), ev.d_theta.blocks());
  return ev.objective;
}

double stage1_step(ListaParams& theta, Adam& opt, const Batch& batch, const ObjectiveOptions& o) {
  const auto ev = stage1_objective(theta, batch, o);
  if (std::isfinite(ev.objective)) opt.step(theta.blocks(), ev.d_theta.blocks());
  return ev.objective;
}

double stage2_step(PolicyParams& phi, const ListaParams& theta, Adam& opt, const Batch& batch,
                   const ObjectiveOptions& o) {
  const auto ev = stage2_objective(theta, phi, batch, o);
  if (std::isfinite(ev.objective)) opt.step(phi.blocks(), ev.d_phi.blocks());
  return ev.objective;
}

namespace {

template <typename A, typename B, typename V>
std::vector<V> concat(const std::vector<A>& a, const std::vector<B>& b) {
  std::vector<V> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

void joint_update(ListaParams& theta, PolicyParams& phi, Adam& opt, const Evaluation& ev) {
  const auto params = concat<std::span<double>, std::span<double>, std::span<double>>(theta.blocks(), phi.blocks());
  const auto grads = concat<std::span<const double>, std::span<const double>, std::span<const double>>(
      ev.d_theta.blocks(), ev.d_phi.blocks());
  opt.step(params, grads);
}

}  // namespace

double stage3_step(ListaParams& theta, PolicyParams& phi, Adam& opt, const Batch& batch,
                   const ObjectiveOptions& o) {
  const auto ev = stage3_objective(theta, phi, batch, o);
  if (std::isfinite(ev.objective)) joint_update(theta, phi, opt, ev);
  return ev.objective;
}

//----------------------------------------------------------------------------
// Drivers

namespace {

using Clock = std::chrono::steady_clock;

struct Diag {
  double objective = 0.0;
  double oracle_entropy = 0.0;
  double q_entropy = 0.0;
};


class Runner {
 public:
  Runner(const probgen::Dataset& train, const TrainConfig& cfg, const TrainHooks& hooks)
      : train_(train), cfg_(cfg), hooks_(hooks), start_(Clock::now()) {
    cfg_.validate();
    if (train.size() == 0) throw std::invalid_argument("training: empty training set");
    if (!hooks_.out_dir.empty()) std::filesystem::create_directories(hooks_.out_dir);
    const auto* mon = hooks_.monitor ? hooks_.monitor : &train_;
    std::vector<std::size_t> idx(std::min(kMonitorCap, mon->size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    monitor_ = make_batch(*mon, idx);
  }

  ObjectiveOptions options(std::uint64_t sample_seed = 0) const {
    ObjectiveOptions o;
    o.beta = cfg_.beta;
    o.gamma = cfg_.gamma;
    o.mode_stage1 = cfg_.mode_stage1;
    o.mode_stage2 = cfg_.mode_stage2;
    o.channels = cfg_.channels;
    o.sample_seed = sample_seed;
    o.chunk_size = cfg_.chunk_size;
    o.threads = cfg_.threads;
    o.A = cfg_.policy.residual_feature ? &train_.A : nullptr;
    return o;
  }

  ListaParams initial_theta() const {
    const double step = cfg_.init_step > 0.0 ? cfg_.init_step : classic_step();
    return unrolled::init_ista_like(train_.A, cfg_.init_rho, step, cfg_.T);
  }

  PolicyParams initial_phi() const {
    return policy::init_policy(train_.m(), train_.n(), cfg_.T, cfg_.policy,
                               mix_seed(cfg_.seed, "policy", 0));
  }

  // Runs `iters` iterations of `step(batch, iteration) -> Evaluation-like`.
  template <typename StepFn>
  void run(const std::string& stage, std::size_t iters, TrainLog& log, StepFn&& step,
           const ListaParams* theta_for_monitor = nullptr, const PolicyParams* phi_for_monitor = nullptr) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t degraded = 0;
    for (std::size_t it = 1; it <= iters; ++it) {
      const auto idx = sample_indices(cfg_.seed, stage, it, cfg_.batch_size, train_.size());
      const Batch batch = make_batch(train_, idx);
      Diag diag;
      try {
        diag = step(batch, it);
      } catch (const unrolled::NonFiniteState& e) {
        throw DivergenceAbort(stage, it, last_checkpoint, stage + ": " + e.what() +
                                                              " at iteration " + std::to_string(it));
      }
      ++gradient_evaluations;

      if (!std::isfinite(diag.objective)) {
        throw DivergenceAbort(stage, it, last_checkpoint,
                              stage + ": non-finite objective at iteration " + std::to_string(it));
      }
      best = std::min(best, diag.objective);
      degraded = diag.objective > kDivergenceFactor * best ? degraded + 1 : 0;
      if (degraded >= kDivergencePatience) {
        throw DivergenceAbort(stage, it, last_checkpoint,
                              stage + ": objective stayed 10x above its best for " +
                                  std::to_string(kDivergencePatience) + " iterations");
      }

      const bool monitor_due = phi_for_monitor && cfg_.monitor_every > 0 &&
                               (it % cfg_.monitor_every == 0 || it == iters);
      if (it % std::max<std::size_t>(1, cfg_.log_every) == 0 || it == iters || monitor_due) {
        LogRecord rec{stage, it, diag.objective, diag.oracle_entropy, diag.q_entropy, elapsed(), {}};
        if (monitor_due) rec.monitor_entropy = monitor_entropy(*theta_for_monitor, *phi_for_monitor);
        log.append(std::move(rec));
      }
    }
  }

  double monitor_entropy(const ListaParams& theta, const PolicyParams& phi) const {
    const auto channels = resolve_channels(cfg_.channels, theta.T());
    const auto decisions = decision_layers(channels);
    const auto path = unrolled::lista_forward_batch(theta, monitor_.B);
    const DenseMat logits = policy::policy_logits_batch(
        phi, monitor_.B, path, decisions, cfg_.policy.residual_feature ? &train_.A : nullptr);
    Vec hist(channels.size(), 0.0);
    for (std::size_t c = 0; c < logits.cols; ++c) {
      const auto q = stopping::induced_q_from_logits(logits.col(c));
      for (std::size_t t = 0; t < q.T(); ++t) hist[t] += q.probs[t] / static_cast<double>(logits.cols);
    }
    return stopping::entropy(hist);
  }

  void checkpoint(const std::string& name, const ListaParams& theta, const PolicyParams* phi,
                  const TrainLog& log, const std::string& log_stage) {
    if (hooks_.out_dir.empty()) return;
    const auto dir = hooks_.out_dir / name;
    std::filesystem::create_directories(dir);
    unrolled::save_params(theta, dir / "theta.lstw");
    if (phi) policy::save_policy(*phi, dir / "policy.lstq");
    log.write_jsonl(dir / "log.jsonl", log_stage);
    last_checkpoint = dir.string();
  }

  double elapsed() const {
    return std::chrono::duration<double>(Clock::now() - start_).count();
  }

  std::size_t gradient_evaluations = 0;
  std::string last_checkpoint;

 private:
  double classic_step() const { return classic::resolve_step(train_.A, {}).step; }

  const probgen::Dataset& train_;
  TrainConfig cfg_;
  TrainHooks hooks_;
  Clock::time_point start_;
  Batch monitor_;
};

Diag diag_of(const Evaluation& ev) { return {ev.objective, ev.oracle_entropy, ev.q_entropy}; }

void warm_start(Runner& run, const TrainConfig& cfg, ListaParams& theta, TrainLog& log) {
  if (cfg.warmup_iters == 0) return;
  Adam opt(cfg.lr);
  const auto o = run.options();
  run.run("warmup", cfg.warmup_iters, log, [&](const Batch& b, std::size_t) {
    const auto ev = baseline_objective(theta, b, o);
    opt.step(theta.blocks(), ev.d_theta.blocks());
    return diag_of(ev);
  });
}

}  // namespace

TrainResult train_full(const probgen::Dataset& train, const TrainConfig& cfg, const TrainHooks& hooks) {
  Runner run(train, cfg, hooks);
  TrainResult res{run.initial_theta(), run.initial_phi(), {}, 0};

  warm_start(run, cfg, res.theta, res.log);
  {
    Adam opt(cfg.lr);
    run.run("stage1", cfg.stage1_iters, res.log, [&](const Batch& b, std::size_t it) {
      const auto ev = stage1_objective(res.theta, b, run.options(mix_seed(cfg.seed, "stage1", it)));
      opt.step(res.theta.blocks(), ev.d_theta.blocks());
      return diag_of(ev);
    });
    run.checkpoint("stage1", res.theta, &res.phi, res.log, "stage1");
  }
  {
    Adam opt(cfg.lr);
    const auto o = run.options();
    run.run("stage2", cfg.stage2_iters, res.log, [&](const Batch& b, std::size_t) {
      const auto ev = stage2_objective(res.theta, res.phi, b, o);
      opt.step(res.phi.blocks(), ev.d_phi.blocks());
      return diag_of(ev);
    }, &res.theta, &res.phi);
    run.checkpoint("stage2", res.theta, &res.phi, res.log, "stage2");
  }
  if (cfg.stage3_iters > 0) {
    Adam opt(cfg.lr);
    const auto o = run.options();
    run.run("stage3", cfg.stage3_iters, res.log, [&](const Batch& b, std::size_t) {
      const auto ev = stage3_objective(res.theta, res.phi, b, o);
      joint_update(res.theta, res.phi, opt, ev);
      return diag_of(ev);
    }, &res.theta, &res.phi);
    run.checkpoint("stage3", res.theta, &res.phi, res.log, "stage3");
  }
  res.gradient_evaluations = run.gradient_evaluations;
  return res;
}

TrainResult train_aevb(const probgen::Dataset& train, const TrainConfig& cfg, const TrainHooks& hooks) {
  Runner run(train, cfg, hooks);
  TrainResult res{run.initial_theta(), run.initial_phi(), {}, 0};
  const std::size_t budget = cfg.warmup_iters + cfg.stage1_iters + cfg.stage2_iters + cfg.stage3_iters;
  Adam opt(cfg.lr);
  const auto o = run.options();
  run.run("aevb", budget, res.log, [&](const Batch& b, std::size_t) {
    const auto ev = stage3_objective(res.theta, res.phi, b, o);
    joint_update(res.theta, res.phi, opt, ev);
    return diag_of(ev);
  }, &res.theta, &res.phi);
  run.checkpoint("aevb", res.theta, &res.phi, res.log, "aevb");
  res.gradient_evaluations = run.gradient_evaluations;
  return res;
}

TrainResult train_baseline(const probgen::Dataset& train, const TrainConfig& cfg,
                           const TrainHooks& hooks) {
  Runner run(train, cfg, hooks);
  TrainResult res{run.initial_theta(), run.initial_phi(), {}, 0};
  const std::size_t budget = cfg.warmup_iters + cfg.stage1_iters + cfg.stage3_iters;
  Adam opt(cfg.lr);
  const auto o = run.options();
  run.run("baseline", budget, res.log, [&](const Batch& b, std::size_t) {
    const auto ev = baseline_objective(res.theta, b, o);
    opt.step(res.theta.blocks(), ev.d_theta.blocks());
    return diag_of(ev);
  });
  run.checkpoint("baseline", res.theta, nullptr, res.log, "baseline");
  res.gradient_evaluations = run.gradient_evaluations;
  return res;
}

}  // namespace lstp::training
