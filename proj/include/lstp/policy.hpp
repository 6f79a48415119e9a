#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "lstp/gradcore.hpp"
#include "lstp/stopping.hpp"
#include "lstp/unrolled.hpp"

namespace lstp::policy {

using grad::DenseMat;
using grad::Var;
using grad::Vec;

struct PolicyConfig {
  std::size_t h1 = 64;
  std::size_t h2 = 32;
  /// Appends ||b - A x_t||^2 to the input features. Off by default.
  bool residual_feature = false;
};

/// Two tanh hidden layers over [b; x_t] with a per-step embedding added at the
/// second hidden layer, followed by a sigmoid stop head.
struct PolicyParams {
  DenseMat W_in;                     // h1 x (m + n [+1])
  DenseMat b_in;                     // h1 x 1
  DenseMat W_mid;                    // h2 x h1
  DenseMat b_mid;                    // h2 x 1
  DenseMat w_out;                    // 1 x h2
  DenseMat b_out;                    // 1 x 1
  std::vector<DenseMat> layer_embed;  // T-1 entries, h2 x 1
  std::size_t m = 0;
  std::size_t n = 0;
  bool residual_feature = false;

  std::size_t T() const { return layer_embed.size() + 1; }
  std::size_t h1() const { return W_in.rows; }
  std::size_t h2() const { return W_mid.rows; }
  std::size_t input_dim() const { return m + n + (residual_feature ? 1 : 0); }
  void validate() const;
  PolicyParams zeros_like() const;
  std::vector<std::span<double>> blocks();
  std::vector<std::span<const double>> blocks() const;

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

/// Hidden weights ~ N(0, 1/fan_in); biases, embeddings and the output head
/// start at zero so the initial stop probability is 0.5 everywhere.
PolicyParams init_policy(std::size_t m, std::size_t n, std::size_t T, const PolicyConfig& cfg,
                         std::uint64_t seed);

/// Stop probability at 1-based step t < T. A is required only when the
/// residual feature is enabled.
double policy_forward(const PolicyParams& phi, std::span<const double> b,
                      std::span<const double> x_t, std::size_t t,
                      const DenseMat* A = nullptr);

/// Stop logits for a batch at the given 1-based decision layers
/// (rows: decisions, columns: instances).
DenseMat policy_logits_batch(const PolicyParams& phi, const DenseMat& B,
                             std::span<const DenseMat> states,
                             std::span<const std::size_t> decision_layers,
                             const DenseMat* A = nullptr);

/// Stop distribution for one forward path: policy at t = 1..T-1, then the
/// survival construction.
stopping::StopDistribution rollout_q(const PolicyParams& phi, const unrolled::ForwardPath& path,
                                     const DenseMat* A = nullptr);

struct PolicyVars {
  Var W_in, b_in, W_mid, b_mid, w_out, b_out;
  std::vector<Var> layer_embed;

  PolicyParams gradients(const grad::Tape& tape, const PolicyParams& shape) const;
};

PolicyVars bind(grad::Tape& tape, const PolicyParams& phi, bool trainable);

/// Taped stop logits ((#decisions) x k). States may themselves be taped
/// outputs of the predictor, in which case gradients reach it as well.
Var policy_logits(const PolicyParams& phi, const PolicyVars& vars, Var B,
                  std::span<const Var> states, std::span<const std::size_t> decision_layers,
                  std::optional<Var> A = std::nullopt);

struct StopDecision {
  std::size_t stop_layer = 0;       // 1-based
  std::size_t layers_computed = 0;  // states actually requested
};

/// Sequential deployment: requests x_1, x_2, ... one at a time from
/// `next_state` and halts at the first t with pi_t >= threshold (else T).
/// Never requests a state past the returned stop layer.
StopDecision deterministic_stop(const PolicyParams& phi, std::span<const double> b,
                                const std::function<Vec(std::size_t)>& next_state,
                                double threshold, const DenseMat* A = nullptr);

void save_policy(const PolicyParams& phi, const std::filesystem::path& path);
PolicyParams load_policy(const std::filesystem::path& path);

}  // namespace lstp::policy
