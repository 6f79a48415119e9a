#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "lstp/gradcore.hpp"

namespace lstp::probgen {

using grad::DenseMat;
using grad::Vec;

struct GenConfig {
  std::size_t m = 50;
  std::size_t n = 100;
  double p_b = 0.1;
  std::vector<double> snr_levels{20.0, 30.0, 40.0};
  std::size_t train_count = 20000;
  std::size_t test_count_per_snr = 500;
  std::uint64_t seed = 0;

  static GenConfig desk(std::uint64_t seed = 0);
  static GenConfig paper(std::uint64_t seed = 0);
  void validate() const;
};

struct SparseInstance {
  Vec b;       // measurement, m
  Vec x_star;  // ground truth, n
  double snr_db = 0.0;
  std::uint64_t instance_seed = 0;

  friend bool operator==(const SparseInstance&, const SparseInstance&) = default;
};

struct Dataset {
  DenseMat A;
  std::vector<SparseInstance> instances;
  GenConfig config;

  std::size_t m() const { return A.rows; }
  std::size_t n() const { return A.cols; }
  std::size_t size() const { return instances.size(); }

  /// Columns b^i (m x k) and x*^i (n x k) for the given instance indices.
  DenseMat measurements(std::span<const std::size_t> idx) const;
  DenseMat truths(std::span<const std::size_t> idx) const;
  /// Distinct SNR levels in first-appearance order.
  std::vector<double> snr_levels() const;
};

/// Gaussian N(0, 1/m) entries, then every column scaled to unit l2 norm.
DenseMat generate_matrix(const GenConfig& config);

/// Bernoulli(p_b) support with standard Gaussian values (an empty support is
/// redrawn), plus white noise rescaled to hit snr_db exactly. Fully determined
/// by instance_seed.
SparseInstance generate_instance(const DenseMat& A, double snr_db, double p_b,
                                 std::uint64_t instance_seed);

/// Training set: SNR drawn uniformly from the configured levels per instance.
Dataset generate_train(const GenConfig& config, const DenseMat& A, unsigned threads = 1);
/// Fixed test set: test_count_per_snr instances per level, in declared order.
Dataset generate_test(const GenConfig& config, const DenseMat& A, unsigned threads = 1);

/// 10 log10(||A x*||^2 / ||b - A x*||^2) from stored fields.
double measured_snr_db(const DenseMat& A, const SparseInstance& inst);

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace lstp::probgen
