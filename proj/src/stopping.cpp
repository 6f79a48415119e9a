#include "lstp/stopping.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace lstp::stopping {

namespace {

double xlogx(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

void check_same_length(std::span<const double> a, std::size_t n, const char* what) {
  if (a.size() != n) {
    throw std::invalid_argument(std::string(what) + ": length mismatch (" +
                                std::to_string(a.size()) + " vs " + std::to_string(n) + ")");
  }
}

void check_beta(double beta, const char* what) {
  if (!(beta > 0.0)) throw std::invalid_argument(std::string(what) + ": beta must be positive");
}

}  // namespace

void StopDistribution::validate(double tol) const {
  if (probs.empty()) throw std::invalid_argument("StopDistribution: empty");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("StopDistribution: entry outside [0,1]");
    total += p;
  }
  if (std::abs(total - 1.0) > tol) {
    throw std::invalid_argument("StopDistribution: mass " + std::to_string(total) + " != 1");
  }
}

StopDistribution induced_q(std::span<const double> pi) {
  StopDistribution q;
  q.probs.resize(pi.size() + 1);
  double survival = 1.0;
  for (std::size_t t = 0; t < pi.size(); ++t) {
    if (!(pi[t] >= 0.0 && pi[t] <= 1.0)) {
      throw std::invalid_argument("induced_q: stop probability at step " + std::to_string(t + 1) +
                                  " is outside [0, 1]");
    }
    q.probs[t] = pi[t] * survival;
    survival *= 1.0 - pi[t];
  }
  q.probs.back() = survival;
  return q;
}

Vec log_induced_q_from_logits(std::span<const double> logits) {
  Vec out(logits.size() + 1);
  double log_survival = 0.0;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    out[t] = grad::log_sigmoid(logits[t]) + log_survival;
    log_survival += grad::log_sigmoid(-logits[t]);
  }
  out.back() = log_survival;
  return out;
}

StopDistribution induced_q_from_logits(std::span<const double> logits) {
  StopDistribution q{log_induced_q_from_logits(logits)};
  for (auto& p : q.probs) p = std::exp(p);
  return q;
}

Vec log_oracle_q(std::span<const double> losses, double beta) {
  check_beta(beta, "oracle_q");
  Vec scaled(losses.size());
  for (std::size_t t = 0; t < losses.size(); ++t) scaled[t] = -losses[t] / beta;
  const double lse = grad::log_sum_exp(scaled);
  for (auto& v : scaled) v -= lse;
  return scaled;
}

StopDistribution oracle_q(std::span<const double> losses, double beta) {
  StopDistribution q{log_oracle_q(losses, beta)};
  for (auto& p : q.probs) p = std::exp(p);
  return q;
}

double entropy(std::span<const double> q) {
  double h = 0.0;
  for (double p : q) h -= xlogx(p);
  return h;
}

double binary_entropy(double p) { return -xlogx(p) - xlogx(1.0 - p); }

double trajectory_entropy(std::span<const double> pi) {
  double h = 0.0, survival = 1.0;
  for (double p : pi) {
    h += survival * binary_entropy(p);
    survival *= 1.0 - p;
  }
  return h;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  check_same_length(q, p.size(), "kl_divergence");
  double kl = 0.0;
  for (std::size_t t = 0; t < p.size(); ++t) {
    if (p[t] > 0.0) kl += p[t] * (std::log(p[t]) - std::log(std::max(q[t], kProbFloor)));
  }
  return kl;
}

double joint_loss(std::span<const double> losses, const StopDistribution& q, double beta) {
  check_same_length(losses, q.T(), "joint_loss");
  double expected = 0.0;
  for (std::size_t t = 0; t < q.T(); ++t) expected += q.probs[t] * losses[t];
  return expected - beta * entropy(q.probs);
}

double beta_vae_objective(std::span<const double> losses, const StopDistribution& q, double beta) {
  check_same_length(losses, q.T(), "beta_vae_objective");
  const Vec uniform(q.T(), 1.0 / static_cast<double>(q.T()));
  double expected = 0.0;
  for (std::size_t t = 0; t < q.T(); ++t) expected -= q.probs[t] * losses[t];
  return expected - beta * kl_divergence(q.probs, uniform);
}

ForwardKl forward_kl(const StopDistribution& q_star, const StopDistribution& q_phi) {
  check_same_length(q_phi.probs, q_star.T(), "forward_kl");
  ForwardKl out;
  for (std::size_t t = 0; t < q_star.T(); ++t) {
    if (q_star.probs[t] <= 0.0) continue;
    if (q_phi.probs[t] < kProbFloor) out.clamped = true;
    out.value -= q_star.probs[t] * std::log(std::max(q_phi.probs[t], kProbFloor));
  }
  return out;
}

double reverse_kl(const StopDistribution& q_phi, std::span<const double> losses, double beta) {
  check_beta(beta, "reverse_kl");
  Vec scaled(losses.size());
  for (std::size_t t = 0; t < losses.size(); ++t) scaled[t] = -losses[t] / beta;
  return joint_loss(losses, q_phi, beta) / beta + grad::log_sum_exp(scaled);
}

double maxent_rl_objective(std::span<const double> pi, std::span<const double> losses,
                           double reward_scale) {
  const auto q = induced_q(pi);
  check_same_length(losses, q.T(), "maxent_rl_objective");
  double ret = 0.0;
  for (std::size_t t = 0; t < q.T(); ++t) ret += q.probs[t] * (-reward_scale * losses[t]);
  return ret + entropy(q.probs);
}

std::size_t sample_index(std::span<const double> log_q, double u) {
  if (log_q.empty()) throw std::invalid_argument("sample_index: empty distribution");
  double cdf = 0.0;
  for (std::size_t t = 0; t < log_q.size(); ++t) {
    cdf += std::exp(log_q[t]);
    if (u < cdf) return t;
  }
  return log_q.size() - 1;
}

std::size_t map_stop(std::span<const double> losses) {
  if (losses.empty()) throw std::invalid_argument("map_stop: empty loss path");
  return static_cast<std::size_t>(std::min_element(losses.begin(), losses.end()) - losses.begin()) + 1;
}

//----------------------------------------------------------------------------

Var log_induced_q(Var logits) {
  auto& tape = *logits.tape;
  // No decisions: all mass sits on the terminal layer.
  if (logits.rows() == 0) return tape.constant(grad::DenseMat(1, logits.cols()));
  const Var log_stop = grad::log_sigmoid(logits);
  const Var log_continue = grad::log_sigmoid(grad::scale(logits, -1.0));
  // Row t of the exclusive cumulative sum is log survival up to step t.
  const Var log_survival = grad::excl_cumsum_rows(log_continue);
  const Var terminal_pad = tape.constant(grad::DenseMat(1, logits.cols()));
  const Var padded[] = {log_stop, terminal_pad};
  return grad::add(grad::vstack(padded), log_survival);
}

Var log_oracle_q(Var losses, double beta) {
  check_beta(beta, "log_oracle_q");
  const Var scaled = grad::scale(losses, -1.0 / beta);
  return grad::sub_row_broadcast(scaled, grad::log_sum_exp_cols(scaled));
}

Var oracle_expected_loss(Var losses, double beta) {
  const Var q = grad::exp(log_oracle_q(losses, beta));
  return grad::scale(grad::sum_all(grad::hadamard(q, losses)), 1.0 / static_cast<double>(losses.cols()));
}

Var cross_entropy(Var log_q, const grad::DenseMat& target) {
  grad::DenseMat weights = target;
  const double inv_k = 1.0 / static_cast<double>(log_q.cols());
  for (auto& w : weights.data) w *= -inv_k;
  return grad::sum_all(grad::mul_const(log_q, std::move(weights)));
}

Var neg_beta_vae(Var losses, Var log_q, double beta) {
  const std::size_t T = losses.rows();
  const std::size_t k = losses.cols();
  const Var q = grad::exp(log_q);
  // E_q[loss] + beta (sum q log q + log T)
  const Var per_layer = grad::add(losses, grad::scale(log_q, beta));
  const Var total = grad::sum_all(grad::hadamard(q, per_layer));
  const Var mean = grad::scale(total, 1.0 / static_cast<double>(k));
  auto& tape = *losses.tape;
  return grad::add(mean, tape.constant(beta * std::log(static_cast<double>(T))));
}

}  // namespace lstp::stopping
