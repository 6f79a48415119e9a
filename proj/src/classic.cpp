#include "lstp/classic.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "lstp/metrics.hpp"

namespace lstp::classic {

namespace {

void check_shapes(const DenseMat& A, std::size_t b_rows) {
  if (A.rows != b_rows) {
    throw std::invalid_argument("lasso solver: A is " + A.shape() + " but measurement has " +
                                std::to_string(b_rows) + " rows");
  }
}

// x <- shrink(y - step * A^T (A y - b)) for all columns at once.
DenseMat prox_grad_step(const DenseMat& A, const DenseMat& B, const DenseMat& Y, double step,
                        double thresh) {
  DenseMat resid = grad::matmul(A, Y);
  for (std::size_t i = 0; i < resid.data.size(); ++i) resid.data[i] -= B.data[i];
  const DenseMat g = grad::matmul_tn(A, resid);
  DenseMat X(Y.rows, Y.cols);
  for (std::size_t i = 0; i < X.data.size(); ++i)
    X.data[i] = grad::soft_threshold(Y.data[i] - step * g.data[i], thresh);
  return X;
}

void check_finite(const DenseMat& X, std::size_t iter, const char* algo) {
  if (!X.all_finite()) {
    throw DivergenceError(iter, std::string(algo) + " diverged: non-finite iterate at iteration " +
                                    std::to_string(iter));
  }
}

std::vector<Vec> columns_to_path(const std::vector<DenseMat>& iters) {
  std::vector<Vec> path;
  path.reserve(iters.size());
  for (const auto& X : iters) path.push_back(X.data);
  return path;
}

std::vector<DenseMat> run(Algorithm algo, const DenseMat& A, const DenseMat& B, LassoConfig cfg,
                          bool zero_momentum) {
  check_shapes(A, B.rows);
  cfg = resolve_step(A, cfg);
  if (!(cfg.step > 0.0)) throw std::invalid_argument("lasso solver: step must be positive");
  if (!(cfg.rho >= 0.0)) throw std::invalid_argument("lasso solver: rho must be nonnegative");
  const double thresh = cfg.rho * cfg.step;
  const char* name = to_string(algo);

  std::vector<DenseMat> path;
  path.reserve(cfg.max_iters);
  DenseMat x_prev(A.cols, B.cols);
  DenseMat y = x_prev;
  double t = 1.0;
  for (std::size_t k = 1; k <= cfg.max_iters; ++k) {
    DenseMat x = prox_grad_step(A, B, y, cfg.step, thresh);
    check_finite(x, k, name);
    if (algo == Algorithm::fista && !zero_momentum) {
      const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
      const double w = (t - 1.0) / t_next;
      for (std::size_t i = 0; i < y.data.size(); ++i)
        y.data[i] = x.data[i] + w * (x.data[i] - x_prev.data[i]);
      t = t_next;
    } else {
      y = x;
    }
    x_prev = x;
    path.push_back(std::move(x));
  }
  return path;
}

}  // namespace

double lambda_max(const DenseMat& A, std::size_t iters, double tol) {
  // Power iteration on the smaller Gram matrix; both share the top eigenvalue.
  const bool wide = A.rows <= A.cols;
  const DenseMat G = wide ? grad::matmul_nt(A, A) : grad::matmul_tn(A, A);
  Vec v(G.rows, 1.0 / std::sqrt(static_cast<double>(G.rows)));
  double lam = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    Vec w = grad::matvec(G, v);
    const double norm = std::sqrt(grad::squared_norm(w));
    if (norm == 0.0) return 0.0;
    for (auto& x : w) x /= norm;
    const double next = grad::dot(w, grad::matvec(G, w));
    v = std::move(w);
    const bool done = std::abs(next - lam) <= tol * std::max(1.0, std::abs(next));
    lam = next;
    if (done) break;
  }
  return lam;
}

LassoConfig resolve_step(const DenseMat& A, LassoConfig cfg) {
  if (cfg.step == 0.0) cfg.step = 1.0 / lambda_max(A);
  return cfg;
}

double lasso_objective(const DenseMat& A, std::span<const double> b, std::span<const double> x,
                       double rho) {
  const Vec ax = grad::matvec(A, x);
  double fit = 0.0;
  for (std::size_t i = 0; i < ax.size(); ++i) fit += (b[i] - ax[i]) * (b[i] - ax[i]);
  double l1 = 0.0;
  for (double v : x) l1 += std::abs(v);
  return 0.5 * fit + rho * l1;
}

std::vector<Vec> ista_solve(const DenseMat& A, std::span<const double> b, LassoConfig cfg) {
  return columns_to_path(run(Algorithm::ista, A, DenseMat::column(b), cfg, false));
}

std::vector<Vec> fista_solve(const DenseMat& A, std::span<const double> b, LassoConfig cfg,
                             bool zero_momentum) {
  return columns_to_path(run(Algorithm::fista, A, DenseMat::column(b), cfg, zero_momentum));
}

std::vector<DenseMat> solve_batch(Algorithm algo, const DenseMat& A, const DenseMat& B,
                                  LassoConfig cfg) {
  return run(algo, A, B, cfg, false);
}

GridResult grid_search(Algorithm algo, const DenseMat& A, const DenseMat& B, const DenseMat& X,
                       std::span<const double> rho_grid, std::span<const double> step_grid,
                       std::size_t T) {
  if (rho_grid.empty() || step_grid.empty()) throw std::invalid_argument("grid_search: empty grid");
  if (B.cols == 0) throw std::invalid_argument("grid_search: empty tuning subset");
  if (B.cols != X.cols) throw std::invalid_argument("grid_search: measurement/truth count mismatch");

  GridResult result;
  result.best_nmse_db = std::numeric_limits<double>::infinity();
  bool have_best = false;
  for (double step_in : step_grid) {
    const double step = step_in == 0.0 ? resolve_step(A, {}).step : step_in;
    for (double rho : rho_grid) {
      LassoConfig cfg{rho, step, T};
      double score;
      try {
        const auto path = solve_batch(algo, A, B, cfg);
        score = evalreport::nmse_db(path.back(), X);
      } catch (const DivergenceError&) {
        score = std::numeric_limits<double>::infinity();
      }
      result.evaluated.push_back({rho, step, score});
      const bool better =
          !have_best || score < result.best_nmse_db ||
          (score == result.best_nmse_db &&
           (rho < result.best.rho || (rho == result.best.rho && step < result.best.step)));
      if (better) {
        result.best = cfg;
        result.best_nmse_db = score;
        have_best = true;
      }
    }
  }
  return result;
}

std::vector<double> default_rho_grid() {
  std::vector<double> grid;
  for (int i = 0; i < 10; ++i) grid.push_back(std::pow(10.0, -4.0 + 4.0 * i / 9.0));
  return grid;
}

const char* to_string(Algorithm a) { return a == Algorithm::ista ? "ista" : "fista"; }

Algorithm parse_algorithm(const std::string& s) {
  if (s == "ista") return Algorithm::ista;
  if (s == "fista") return Algorithm::fista;
  throw std::invalid_argument("unknown classic algorithm: " + s);
}

}  // namespace lstp::classic
