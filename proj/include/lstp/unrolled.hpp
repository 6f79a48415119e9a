#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "lstp/gradcore.hpp"

namespace lstp::unrolled {

using grad::DenseMat;
using grad::Var;
using grad::Vec;

/// Raised when a forward pass produces a non-finite state.
class NonFiniteState : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thresholds are stored unconstrained and projected to this floor in forward.
inline constexpr double kLambdaFloor = 1e-6;

struct ListaLayer {
  double lambda = 0.0;
  DenseMat W1;  // n x m
  DenseMat W2;  // n x n

  friend bool operator==(const ListaLayer&, const ListaLayer&) = default;
};

/// Per-layer parameters of the unrolled predictor.
struct ListaParams {
  std::vector<ListaLayer> layers;

  std::size_t T() const { return layers.size(); }
  std::size_t m() const { return layers.empty() ? 0 : layers.front().W1.cols; }
  std::size_t n() const { return layers.empty() ? 0 : layers.front().W1.rows; }
  void validate() const;
  /// Same-shaped container with every entry zero (used for gradients).
  ListaParams zeros_like() const;
  /// Flat views of every parameter block in checkpoint order.
  std::vector<std::span<double>> blocks();
  std::vector<std::span<const double>> blocks() const;

  friend bool operator==(const ListaParams&, const ListaParams&) = default;
};

struct ForwardPath {
  Vec b;
  std::vector<Vec> states;  // x_1 .. x_T
};

/// Every layer set to (rho * step, step * A^T, I - step * A^T A).
ListaParams init_ista_like(const DenseMat& A, double rho, double step, std::size_t T);

/// x_t = shrink_{lambda_t}(W1_t b + W2_t x_{t-1}) from x_0 = 0.
ForwardPath lista_forward(const ListaParams& params, std::span<const double> b);
/// Column-batched forward; returns X_1 .. X_T (n x k each).
std::vector<DenseMat> lista_forward_batch(const ListaParams& params, const DenseMat& B);

/// Tape bindings for one set of parameters.
struct ListaVars {
  std::vector<Var> lambda;
  std::vector<Var> W1;
  std::vector<Var> W2;

  /// Reads leaf gradients back into a ListaParams-shaped container.
  ListaParams gradients(const grad::Tape& tape, const ListaParams& shape) const;
};

/// Records parameters as trainable leaves (or constants when frozen).
ListaVars bind(grad::Tape& tape, const ListaParams& params, bool trainable);
/// Taped forward over a batch B (m x k).
std::vector<Var> lista_forward(const ListaVars& vars, Var B);

/// T x k matrix of per-layer losses 0.5 ||x_t - x*||^2.
Var layer_losses(std::span<const Var> states, Var X_star);

/// sum_t gamma^(T-t) ||x_t - x*||^2 for one instance.
double baseline_loss(const ForwardPath& path, std::span<const double> x_star, double gamma);
/// Batch mean of the weighted per-layer loss.
Var baseline_loss(std::span<const Var> states, Var X_star, double gamma);

void save_params(const ListaParams& params, const std::filesystem::path& path);
ListaParams load_params(const std::filesystem::path& path);

}  // namespace lstp::unrolled
