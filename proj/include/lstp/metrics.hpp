#pragma once

#include <span>
#include <vector>

#include "lstp/gradcore.hpp"

namespace lstp::evalreport {

/// Pooled-ratio NMSE in dB: 10 log10(sum ||xhat - x*||^2 / sum ||x*||^2).
/// Returns -inf for a perfect reconstruction; throws on zero truth energy.
double nmse_db(std::span<const grad::Vec> estimates, std::span<const grad::Vec> truths);
/// Same metric over matching columns of two n x k matrices.
double nmse_db(const grad::DenseMat& estimates, const grad::DenseMat& truths);
/// Per-column squared errors ||xhat_i - x*_i||^2.
grad::Vec column_sq_errors(const grad::DenseMat& estimates, const grad::DenseMat& truths);
double ratio_to_db(double err, double energy);

}  // namespace lstp::evalreport
