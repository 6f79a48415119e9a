#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lstp/gradcore.hpp"

namespace lstp::testing {

using grad::DenseMat;
using grad::Vec;

inline DenseMat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  DenseMat m(r, c);
  for (auto& v : m.data) v = nd(rng);
  return m;
}

inline Vec random_vec(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Vec v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

inline Vec random_simplex(std::size_t n, std::mt19937_64& rng) {
  std::exponential_distribution<double> ed(1.0);
  Vec v(n);
  double s = 0.0;
  for (auto& x : v) s += (x = ed(rng));
  for (auto& x : v) x /= s;
  return v;
}

/// Relative error with an absolute floor: |a - n| / max(|a|, |n|, floor).
inline double rel_err(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Worst relative error between analytic gradients and central differences
/// over every coordinate of the given parameter blocks.
inline double fd_check(const std::function<double()>& f, std::vector<std::span<double>> params,
                       std::vector<std::span<const double>> grads, double h = 1e-6) {
  double worst = 0.0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      const double saved = params[b][i];
      params[b][i] = saved + h;
      const double fp = f();
      params[b][i] = saved - h;
      const double fm = f();
      params[b][i] = saved;
      worst = std::max(worst, rel_err(grads[b][i], (fp - fm) / (2 * h)));
    }
  }
  return worst;
}

// Euclidean projection onto the probability simplex (sort-based).
inline Vec project_simplex(Vec v) {
  Vec u = v;
  std::sort(u.begin(), u.end(), std::greater<>());
  double css = 0.0, theta = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    css += u[k];
    const double t = (css - 1.0) / static_cast<double>(k + 1);
    if (u[k] - t > 0) theta = t;
  }
  for (auto& x : v) x = std::max(x - theta, 0.0);
  return v;
}

// Projected gradient descent over the simplex from the uniform point.
template <typename Grad>
inline Vec simplex_descent(std::size_t T, Grad g, double step, int iters) {
  Vec q(T, 1.0 / static_cast<double>(T));
  for (int it = 0; it < iters; ++it) {
    const Vec d = g(q);
    for (std::size_t t = 0; t < T; ++t) q[t] -= step * d[t];
    q = project_simplex(q);
  }
  return q;
}

// Exponentiated-gradient descent over the simplex from the uniform point.
template <typename Grad>
inline Vec simplex_mirror_descent(std::size_t T, Grad g, double step, int iters) {
  Vec q(T, 1.0 / static_cast<double>(T));
  for (int it = 0; it < iters; ++it) {
    const Vec d = g(q);
    const double shift = *std::min_element(d.begin(), d.end());
    double s = 0.0;
    for (std::size_t t = 0; t < T; ++t) s += (q[t] *= std::exp(-step * (d[t] - shift)));
    for (auto& x : q) x /= s;
  }
  return q;
}

/// Fresh scratch directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("lstp_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace lstp::testing
