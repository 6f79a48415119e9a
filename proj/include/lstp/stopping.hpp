#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lstp/gradcore.hpp"

namespace lstp::stopping {

using grad::Var;
using grad::Vec;

/// Floor applied to probabilities inside logarithms.
inline constexpr double kProbFloor = 1e-12;
inline constexpr double kDefaultBeta = 0.1;

/// Probability mass over stop layers 1..T (stored 0-indexed).
struct StopDistribution {
  Vec probs;

  std::size_t T() const { return probs.size(); }
  /// Throws unless entries are in [0, 1] and sum to 1 within tol.
  void validate(double tol = 1e-12) const;
};

/// q(t) = pi_t prod_{tau<t} (1 - pi_tau) for t < T; q(T) is the survival mass.
StopDistribution induced_q(std::span<const double> pi);
/// Same distribution from stop logits (pi = sigmoid(z)), computed in log space.
StopDistribution induced_q_from_logits(std::span<const double> logits);
Vec log_induced_q_from_logits(std::span<const double> logits);

/// q*(t) proportional to exp(-loss_t / beta).
StopDistribution oracle_q(std::span<const double> losses, double beta);
Vec log_oracle_q(std::span<const double> losses, double beta);

/// Shannon entropy with 0 log 0 := 0.
double entropy(std::span<const double> q);
/// Binary entropy of a Bernoulli(p).
double binary_entropy(double p);
/// sum_{t<T} survival_t * H_b(pi_t).
double trajectory_entropy(std::span<const double> pi);
/// KL(p || q) with 0 log 0 := 0 and q floored inside the logarithm.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// E_q[loss] - beta H(q).
double joint_loss(std::span<const double> losses, const StopDistribution& q, double beta);
/// E_q[-loss] - beta KL(q || uniform_T).
double beta_vae_objective(std::span<const double> losses, const StopDistribution& q, double beta);

struct ForwardKl {
  double value = 0.0;
  bool clamped = false;  // some q_phi(t) fell below the floor where q*(t) > 0
};

/// Cross-entropy -sum_t q*(t) log q_phi(t); the constant H(q*) is dropped.
ForwardKl forward_kl(const StopDistribution& q_star, const StopDistribution& q_phi);
/// KL(q_phi || q*) via joint_loss / beta + log sum exp(-loss / beta).
double reverse_kl(const StopDistribution& q_phi, std::span<const double> losses, double beta);
/// sum_t q(t) (-reward_scale * loss_t) + H(q) with q = induced_q(pi): the
/// expected return plus policy entropy of the stop/continue process whose
/// stop reward is -reward_scale * loss.
double maxent_rl_objective(std::span<const double> pi, std::span<const double> losses,
                           double reward_scale);

/// Inverse-CDF draw from a distribution given as log-probabilities, with
/// u uniform in [0, 1). Returns a 0-based index; the last index absorbs
/// round-off.
std::size_t sample_index(std::span<const double> log_q, double u);

/// 1-based argmin of the losses, earliest on ties. Equals the oracle's mode
/// for every beta > 0.
std::size_t map_stop(std::span<const double> losses);

//----------------------------------------------------------------------------
// Taped forms over batches (one instance per column).

/// Stop logits ((T-1) x k) -> log q (T x k).
Var log_induced_q(Var logits);
/// Losses (T x k) -> log q* (T x k); differentiable through the losses.
Var log_oracle_q(Var losses, double beta);
/// Batch mean of E_{q*}[loss] with q* kept on the tape.
Var oracle_expected_loss(Var losses, double beta);
/// Batch mean of -sum_t q*(t) log q_phi(t) for a constant target q* (T x k).
Var cross_entropy(Var log_q, const grad::DenseMat& target);
/// Batch mean of -J_beta-VAE = E_q[loss] + beta KL(q || uniform).
Var neg_beta_vae(Var losses, Var log_q, double beta);

}  // namespace lstp::stopping
