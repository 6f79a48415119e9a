#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cmath>

#include "lstp/classic.hpp"
#include "lstp/metrics.hpp"
#include "lstp/probgen.hpp"
#include "support.hpp"

using namespace lstp;
using namespace lstp::classic;
using grad::DenseMat;
using grad::Vec;

namespace {

// Reference ISTA written directly from the update rule.
std::vector<Vec> ista_reference(const DenseMat& A, const Vec& b, double rho, double step, std::size_t T) {
  const std::size_t n = A.cols, m = A.rows;
  Vec x(n, 0.0);
  std::vector<Vec> path;
  for (std::size_t t = 0; t < T; ++t) {
    Vec r(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) r[i] += A(i, j) * x[j];
      r[i] -= b[i];
    }
    Vec nx(n);
    for (std::size_t j = 0; j < n; ++j) {
      double g = 0.0;
      for (std::size_t i = 0; i < m; ++i) g += A(i, j) * r[i];
      const double v = x[j] - step * g;
      const double th = rho * step;
      nx[j] = v > th ? v - th : v < -th ? v + th : 0.0;
    }
    x = nx;
    path.push_back(x);
  }
  return path;
}

}  // namespace

TEST_CASE("ISTA closed forms with A = I") {
  const auto I = DenseMat::identity(2);
  const auto path = ista_solve(I, Vec{1, 0.05}, {0.1, 1.0, 1});
  REQUIRE(path.size() == 1);
  CHECK(path[0][0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(path[0][1] == 0.0);
  CHECK(ista_solve(I, Vec{0.3, -2}, {0.0, 1.0, 1})[0] == Vec{0.3, -2});
}

TEST_CASE("FISTA with rho = 0 and A = I reaches b in one step") {
  const auto path = fista_solve(DenseMat::identity(3), Vec{1, -2, 3}, {0.0, 1.0, 4});
  for (const auto& x : path) CHECK(x == Vec{1, -2, 3});
}

TEST_CASE("FISTA momentum sequence") {
  // With a diagonal scaling A = a I the iterates obey a scalar recursion we
  // can replay with the textbook momentum schedule.
  const double a = 0.5, step = 1.0, rho = 0.0;
  const DenseMat A(1, 1, {a});
  const Vec b{1.0};
  const auto path = fista_solve(A, b, {rho, step, 4});
  double t = 1.0, x_prev = 0.0, y = 0.0;
  CHECK((1.0 + std::sqrt(1.0 + 4.0)) / 2.0 == doctest::Approx(1.6180339887498949));
  for (std::size_t k = 0; k < 4; ++k) {
    const double x = y - step * a * (a * y - b[0]);
    const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
    y = x + (t - 1.0) / t_next * (x - x_prev);
    x_prev = x;
    t = t_next;
    CHECK(path[k][0] == doctest::Approx(x).epsilon(1e-14));
  }
}

TEST_CASE("ISTA matches the reference and descends monotonically") {
  std::mt19937_64 rng(3);
  auto cfg = probgen::GenConfig::desk(3);
  const auto A = probgen::generate_matrix(cfg);
  const double step = resolve_step(A, {}).step;
  for (int trial = 0; trial < 10; ++trial) {
    const auto inst = probgen::generate_instance(A, 30.0, 0.1, 100 + trial);
    const double rho = 0.05 * (trial + 1);
    const auto path = ista_solve(A, inst.b, {rho, 0.0, 40});
    const auto ref = ista_reference(A, inst.b, rho, step, 40);
    double prev = lasso_objective(A, inst.b, Vec(A.cols, 0.0), rho);
    for (std::size_t t = 0; t < path.size(); ++t) {
      for (std::size_t j = 0; j < A.cols; ++j) CHECK(std::abs(path[t][j] - ref[t][j]) < 1e-12);
      const double obj = lasso_objective(A, inst.b, path[t], rho);
      CHECK(obj <= prev + 1e-12);
      prev = obj;
    }
  }
}

TEST_CASE("FISTA with zero momentum is ISTA") {
  std::mt19937_64 rng(4);
  const auto A = testing::random_mat(6, 10, rng, 0.4);
  const auto b = testing::random_vec(6, rng);
  const LassoConfig cfg{0.1, 0.0, 25};
  CHECK(fista_solve(A, b, cfg, true) == ista_solve(A, b, cfg));
}

TEST_CASE("lambda_max agrees with an eigensolver") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto A = testing::random_mat(20 + trial % 30, 40, rng, 0.3);
    Eigen::MatrixXd M(A.rows, A.cols);
    for (std::size_t i = 0; i < A.rows; ++i)
      for (std::size_t j = 0; j < A.cols; ++j) M(i, j) = A(i, j);
    const Eigen::MatrixXd G = M.transpose() * M;
    const double ref = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(G).eigenvalues().maxCoeff();
    CHECK(std::abs(lambda_max(A) - ref) < 1e-6);
  }
}

TEST_CASE("solvers diverging report the iteration") {
  const DenseMat A(1, 1, {1.0});
  try {
    ista_solve(A, Vec{1e300}, {0.0, 1e10, 50});
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.iteration() >= 1);
  }
}

TEST_CASE("batched solvers equal per-instance solvers") {
  std::mt19937_64 rng(6);
  const auto A = testing::random_mat(5, 9, rng, 0.5);
  const auto B = testing::random_mat(5, 4, rng);
  const LassoConfig cfg{0.05, 0.0, 7};
  for (auto algo : {Algorithm::ista, Algorithm::fista}) {
    const auto batch = solve_batch(algo, A, B, cfg);
    for (std::size_t c = 0; c < 4; ++c) {
      const auto path = algo == Algorithm::ista ? ista_solve(A, B.col(c), cfg) : fista_solve(A, B.col(c), cfg);
      for (std::size_t t = 0; t < 7; ++t)
        for (std::size_t j = 0; j < 9; ++j) CHECK(std::abs(batch[t](j, c) - path[t][j]) < 1e-12);
    }
  }
}

TEST_CASE("grid search") {
  auto cfg = probgen::GenConfig::desk(8);
  cfg.train_count = 100;
  const auto A = probgen::generate_matrix(cfg);
  const auto ds = probgen::generate_train(cfg, A);
  std::vector<std::size_t> idx(100);
  for (std::size_t i = 0; i < 100; ++i) idx[i] = i;
  const auto B = ds.measurements(idx), X = ds.truths(idx);

  const double one_rho[] = {0.2}, one_step[] = {0.0};
  const auto single = grid_search(Algorithm::ista, A, B, X, one_rho, one_step, 10);
  CHECK(single.best.rho == 0.2);
  CHECK(single.evaluated.size() == 1);

  // Planted two-point grid: evaluate both directly and compare.
  const double two[] = {1e-3, 0.3};
  const auto res = grid_search(Algorithm::fista, A, B, X, two, one_step, 10);
  double direct[2];
  for (int k = 0; k < 2; ++k) {
    const auto path = solve_batch(Algorithm::fista, A, B, {two[k], 0.0, 10});
    direct[k] = evalreport::nmse_db(path.back(), X);
  }
  CHECK(res.best.rho == (direct[0] <= direct[1] ? two[0] : two[1]));
  CHECK(res.best_nmse_db == std::min(direct[0], direct[1]));
  for (const auto& g : res.evaluated) CHECK(res.best_nmse_db <= g.nmse_db);

  const auto grid = default_rho_grid();
  CHECK(grid.size() == 10);
  CHECK(grid.front() == doctest::Approx(1e-4));
  CHECK(grid.back() == doctest::Approx(1.0));
  const auto again = grid_search(Algorithm::ista, A, B, X, grid, one_step, 10);
  CHECK(grid_search(Algorithm::ista, A, B, X, grid, one_step, 10).best.rho == again.best.rho);

  // Exact ties go to the smaller rho.
  const double dup[] = {0.3, 0.3 + 0.0};
  CHECK(grid_search(Algorithm::ista, A, B, X, dup, one_step, 10).best.rho == 0.3);

  CHECK_THROWS(grid_search(Algorithm::ista, A, B, X, std::span<const double>{}, one_step, 10));
  CHECK_THROWS(grid_search(Algorithm::ista, A, DenseMat(50, 0), DenseMat(100, 0), two, one_step, 10));
}

TEST_CASE("algorithm names") {
  CHECK(parse_algorithm("ista") == Algorithm::ista);
  CHECK(std::string(to_string(Algorithm::fista)) == "fista");
  CHECK_THROWS(parse_algorithm("admm"));
}
