#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "lstp/gradcore.hpp"

namespace lstp::classic {

using grad::DenseMat;
using grad::Vec;

struct LassoConfig {
  double rho = 0.0;   // l1 weight
  double step = 0.0;  // 1/L; 0 selects the power-iteration estimate
  std::size_t max_iters = 16;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t iteration, const std::string& what)
      : std::runtime_error(what), iteration_(iteration) {}
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

/// Largest eigenvalue of A^T A by power iteration.
double lambda_max(const DenseMat& A, std::size_t iters = 1000, double tol = 1e-14);
/// Resolves step == 0 to 1 / lambda_max(A^T A).
LassoConfig resolve_step(const DenseMat& A, LassoConfig cfg);

double lasso_objective(const DenseMat& A, std::span<const double> b, std::span<const double> x,
                       double rho);

/// ISTA from x_0 = 0; returns x_1 .. x_T.
std::vector<Vec> ista_solve(const DenseMat& A, std::span<const double> b, LassoConfig cfg);

/// FISTA from x_0 = 0. With zero_momentum the extrapolation is disabled and
/// the path coincides with ISTA.
std::vector<Vec> fista_solve(const DenseMat& A, std::span<const double> b, LassoConfig cfg,
                             bool zero_momentum = false);

enum class Algorithm { ista, fista };

/// Column-batched solvers: B holds one measurement per column. Returns the
/// iterates X_1 .. X_T, each n x k.
std::vector<DenseMat> solve_batch(Algorithm algo, const DenseMat& A, const DenseMat& B,
                                  LassoConfig cfg);

struct GridPoint {
  double rho = 0.0;
  double step = 0.0;
  double nmse_db = 0.0;
};

struct GridResult {
  LassoConfig best;
  double best_nmse_db = 0.0;
  std::vector<GridPoint> evaluated;
};

/// Exhaustive search minimizing pooled NMSE at iteration T over the tuning
/// subset (columns of B / X). Ties go to the smaller rho, then smaller step.
/// A step value of 0 in step_grid means "auto".
GridResult grid_search(Algorithm algo, const DenseMat& A, const DenseMat& B, const DenseMat& X,
                       std::span<const double> rho_grid, std::span<const double> step_grid,
                       std::size_t T);

/// 10 log-spaced points in [1e-4, 1].
std::vector<double> default_rho_grid();

const char* to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& s);

}  // namespace lstp::classic
