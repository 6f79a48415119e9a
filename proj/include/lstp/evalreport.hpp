#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lstp/classic.hpp"
#include "lstp/gradcore.hpp"
#include "lstp/metrics.hpp"
#include "lstp/policy.hpp"
#include "lstp/probgen.hpp"
#include "lstp/unrolled.hpp"

namespace lstp::evalreport {

using grad::DenseMat;
using grad::Vec;

inline constexpr const char* kReportSchema = "lstp-report/1";
/// Layers whose total stop mass falls below this are reported as null.
inline constexpr double kNoMass = 1e-8;

struct EvalReport {
  std::string method;
  std::size_t T = 0;
  std::size_t instances = 0;
  /// Headline metric: pooled NMSE over every test instance (expected under
  /// q_phi for stopping models).
  double nmse_mixed_db = 0.0;
  /// (snr_db, nmse_db) in test-set order.
  std::vector<std::pair<double, double>> nmse_per_snr;
  /// Test-averaged stop distribution, length T.
  Vec stop_histogram;
  /// Mass-weighted per-layer NMSE; nullopt where the layer carries no mass.
  std::vector<std::optional<double>> weighted_convergence;
  /// Fixed-depth NMSE of every intermediate layer/iterate.
  Vec layer_nmse_db;
  /// Threshold-stopping deployment variant.
  double det_stop_nmse_db = 0.0;
  std::vector<std::pair<double, double>> det_stop_per_snr;
  double mean_layers_computed = 0.0;
  std::optional<double> runtime_secs;
};

/// Squared errors per layer and instance (T x N), plus truth energies.
struct ErrorTable {
  DenseMat sq_err;   // T x N
  Vec energy;        // ||x*_i||^2
  Vec snr_db;        // per instance
};

/// Pooled 10 log10(sum_i sum_t q(t|i) e(t,i) / sum_i ||x*_i||^2).
double expected_nmse_db(const DenseMat& q, const ErrorTable& errors);
/// Per layer: (sum_i q e / sum_i q) / (sum_i ||x*_i||^2 / N); null below kNoMass.
std::vector<std::optional<double>> weighted_convergence_curve(const DenseMat& q,
                                                              const ErrorTable& errors);
/// Column mean of q (T x N).
Vec stop_histogram(const DenseMat& q);

/// Error table of the LISTA path over the test set.
ErrorTable lista_errors(const unrolled::ListaParams& theta, const probgen::Dataset& test,
                        unsigned threads = 1);
/// Stop distributions q_phi(.|i) as a T x N matrix.
DenseMat stop_distributions(const unrolled::ListaParams& theta, const policy::PolicyParams& phi,
                            const probgen::Dataset& test, unsigned threads = 1);

double expected_nmse(const unrolled::ListaParams& theta, const policy::PolicyParams& phi,
                     const probgen::Dataset& test, unsigned threads = 1);

EvalReport evaluate_classic(classic::Algorithm algo, const probgen::Dataset& test,
                            const classic::LassoConfig& cfg);
/// Fixed-depth evaluation at layer T; any stopping policy is ignored.
EvalReport evaluate_lista_baseline(const unrolled::ListaParams& theta,
                                   const probgen::Dataset& test, unsigned threads = 1);
EvalReport evaluate_lista_stop(const unrolled::ListaParams& theta, const policy::PolicyParams& phi,
                               const probgen::Dataset& test, double threshold = 0.5,
                               unsigned threads = 1);

enum class Format { json, csv };
Format parse_format(const std::string& s);

std::string to_json(const EvalReport& r);
std::string to_csv(const EvalReport& r);
void emit_report(const EvalReport& r, const std::filesystem::path& path, Format fmt);
EvalReport parse_report_json(const std::string& text);
EvalReport load_report(const std::filesystem::path& path);

/// One row per report: method, mixed, per-SNR, threshold-stop, mean layers.
std::string comparison_json(std::span<const EvalReport> reports);
std::string comparison_csv(std::span<const EvalReport> reports);
void emit_comparison(std::span<const EvalReport> reports, const std::filesystem::path& path,
                     Format fmt);

/// Real number as emitted in reports: 17 significant digits, with the
/// non-finite values spelled "-inf", "inf" and "nan".
std::string format_real(double v);

}  // namespace lstp::evalreport
