#include "lstp/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace lstp::evalreport {

double ratio_to_db(double err, double energy) {
  if (!(energy > 0.0)) throw std::invalid_argument("nmse: truth energy is zero");
  if (err == 0.0) return -std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(err / energy);
}

double nmse_db(std::span<const grad::Vec> estimates, std::span<const grad::Vec> truths) {
  if (estimates.size() != truths.size() || estimates.empty()) {
    throw std::invalid_argument("nmse: need equal-length nonempty lists, got " +
                                std::to_string(estimates.size()) + " and " +
                                std::to_string(truths.size()));
  }
  double err = 0.0, energy = 0.0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (estimates[i].size() != truths[i].size())
      throw std::invalid_argument("nmse: vector length mismatch at index " + std::to_string(i));
    for (std::size_t j = 0; j < truths[i].size(); ++j) {
      const double d = estimates[i][j] - truths[i][j];
      err += d * d;
      energy += truths[i][j] * truths[i][j];
    }
  }
  return ratio_to_db(err, energy);
}

grad::Vec column_sq_errors(const grad::DenseMat& estimates, const grad::DenseMat& truths) {
  if (estimates.rows != truths.rows || estimates.cols != truths.cols) {
    throw std::invalid_argument("nmse: shape mismatch " + estimates.shape() + " vs " +
                                truths.shape());
  }
  grad::Vec out(truths.cols, 0.0);
  for (std::size_t r = 0; r < truths.rows; ++r)
    for (std::size_t c = 0; c < truths.cols; ++c) {
      const double d = estimates(r, c) - truths(r, c);
      out[c] += d * d;
    }
  return out;
}

double nmse_db(const grad::DenseMat& estimates, const grad::DenseMat& truths) {
  if (truths.cols == 0) throw std::invalid_argument("nmse: empty instance list");
  const auto errs = column_sq_errors(estimates, truths);
  double err = 0.0;
  for (double e : errs) err += e;
  return ratio_to_db(err, grad::squared_norm(truths.data));
}

}  // namespace lstp::evalreport
