#include "lstp/evalreport.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "lstp/parallel.hpp"
#include "lstp/stopping.hpp"

namespace lstp::evalreport {

namespace {

constexpr std::size_t kChunk = 256;

struct Chunk {
  std::size_t begin, end;
};

std::vector<Chunk> chunks_of(std::size_t N) {
  std::vector<Chunk> out;
  for (std::size_t b = 0; b < N; b += kChunk) out.push_back({b, std::min(N, b + kChunk)});
  return out;
}

std::vector<std::size_t> iota_range(std::size_t b, std::size_t e) {
  std::vector<std::size_t> idx(e - b);
  std::iota(idx.begin(), idx.end(), b);
  return idx;
}

void check_test(const probgen::Dataset& test) {
  if (test.size() == 0) throw std::invalid_argument("evaluation: empty test set");
}

void check_dims(const unrolled::ListaParams& theta, const probgen::Dataset& test) {
  if (theta.m() != test.m() || theta.n() != test.n()) {
    throw std::invalid_argument("evaluation: predictor is m=" + std::to_string(theta.m()) +
                                ", n=" + std::to_string(theta.n()) + " but test set is m=" +
                                std::to_string(test.m()) + ", n=" + std::to_string(test.n()));
  }
}

void check_dims(const unrolled::ListaParams& theta, const policy::PolicyParams& phi,
                const probgen::Dataset& test) {
  check_dims(theta, test);
  if (phi.m != test.m() || phi.n != test.n() || phi.T() != theta.T()) {
    throw std::invalid_argument("evaluation: policy is m=" + std::to_string(phi.m) +
                                ", n=" + std::to_string(phi.n) + ", T=" + std::to_string(phi.T()) +
                                " but predictor/test expect m=" + std::to_string(test.m()) +
                                ", n=" + std::to_string(test.n()) +
                                ", T=" + std::to_string(theta.T()));
  }
}

// Fills rows of the T x N error table from per-layer estimates of one chunk.
void fill_errors(ErrorTable& tab, const std::vector<DenseMat>& states, const DenseMat& X,
                 const Chunk& c) {
  for (std::size_t t = 0; t < states.size(); ++t) {
    const Vec e = column_sq_errors(states[t], X);
    for (std::size_t j = 0; j < e.size(); ++j) tab.sq_err(t, c.begin + j) = e[j];
  }
}

ErrorTable empty_table(const probgen::Dataset& test, std::size_t T) {
  ErrorTable tab;
  tab.sq_err = DenseMat(T, test.size());
  tab.energy.resize(test.size());
  tab.snr_db.resize(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    tab.energy[i] = grad::squared_norm(test.instances[i].x_star);
    tab.snr_db[i] = test.instances[i].snr_db;
  }
  return tab;
}

// Pooled NMSE restricted to instances with the given SNR, weighted by q.
double pooled_db(const DenseMat& q, const ErrorTable& tab, std::optional<double> snr) {
  double err = 0.0, energy = 0.0;
  for (std::size_t i = 0; i < tab.sq_err.cols; ++i) {
    if (snr && tab.snr_db[i] != *snr) continue;
    for (std::size_t t = 0; t < tab.sq_err.rows; ++t) err += q(t, i) * tab.sq_err(t, i);
    energy += tab.energy[i];
  }
  return ratio_to_db(err, energy);
}

std::vector<double> distinct_snrs(const ErrorTable& tab) {
  std::vector<double> out;
  for (double s : tab.snr_db)
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  return out;
}

DenseMat one_hot_last(std::size_t T, std::size_t N) {
  DenseMat q(T, N);
  for (std::size_t i = 0; i < N; ++i) q(T - 1, i) = 1.0;
  return q;
}

Vec layer_curve(const ErrorTable& tab) {
  Vec out(tab.sq_err.rows);
  const double energy = std::accumulate(tab.energy.begin(), tab.energy.end(), 0.0);
  for (std::size_t t = 0; t < tab.sq_err.rows; ++t) {
    double err = 0.0;
    for (std::size_t i = 0; i < tab.sq_err.cols; ++i) err += tab.sq_err(t, i);
    out[t] = ratio_to_db(err, energy);
  }
  return out;
}

// Fills every distribution-derived field of the report from q and the table.
EvalReport assemble(std::string method, const DenseMat& q, const ErrorTable& tab,
                    const std::vector<std::size_t>& det_stop) {
  EvalReport r;
  r.method = std::move(method);
  r.T = tab.sq_err.rows;
  r.instances = tab.sq_err.cols;
  r.nmse_mixed_db = expected_nmse_db(q, tab);
  for (double s : distinct_snrs(tab)) r.nmse_per_snr.emplace_back(s, pooled_db(q, tab, s));
  r.stop_histogram = stop_histogram(q);
  r.weighted_convergence = weighted_convergence_curve(q, tab);
  r.layer_nmse_db = layer_curve(tab);

  DenseMat hard(r.T, r.instances);
  double layers = 0.0;
  for (std::size_t i = 0; i < r.instances; ++i) {
    hard(det_stop[i] - 1, i) = 1.0;
    layers += static_cast<double>(det_stop[i]);
  }
  r.det_stop_nmse_db = expected_nmse_db(hard, tab);
  for (double s : distinct_snrs(tab)) r.det_stop_per_snr.emplace_back(s, pooled_db(hard, tab, s));
  r.mean_layers_computed = layers / static_cast<double>(r.instances);
  return r;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

double expected_nmse_db(const DenseMat& q, const ErrorTable& errors) {
  if (q.rows != errors.sq_err.rows || q.cols != errors.sq_err.cols) {
    throw std::invalid_argument("expected_nmse_db: q is " + q.shape() + ", errors are " +
                                errors.sq_err.shape());
  }
  if (q.cols == 0) throw std::invalid_argument("expected_nmse_db: no instances");
  return pooled_db(q, errors, std::nullopt);
}

std::vector<std::optional<double>> weighted_convergence_curve(const DenseMat& q,
                                                              const ErrorTable& errors) {
  if (q.rows != errors.sq_err.rows || q.cols != errors.sq_err.cols) {
    throw std::invalid_argument("weighted_convergence_curve: q is " + q.shape() +
                                ", errors are " + errors.sq_err.shape());
  }
  const double N = static_cast<double>(q.cols);
  const double mean_energy = std::accumulate(errors.energy.begin(), errors.energy.end(), 0.0) / N;
  std::vector<std::optional<double>> out(q.rows);
  for (std::size_t t = 0; t < q.rows; ++t) {
    double mass = 0.0, err = 0.0;
    for (std::size_t i = 0; i < q.cols; ++i) {
      mass += q(t, i);
      err += q(t, i) * errors.sq_err(t, i);
    }
    if (mass < kNoMass) continue;
    out[t] = ratio_to_db(err / mass, mean_energy);
  }
  return out;
}

Vec stop_histogram(const DenseMat& q) {
  Vec h(q.rows, 0.0);
  if (q.cols == 0) return h;
  for (std::size_t t = 0; t < q.rows; ++t) {
    for (std::size_t i = 0; i < q.cols; ++i) h[t] += q(t, i);
    h[t] /= static_cast<double>(q.cols);
  }
  return h;
}

ErrorTable lista_errors(const unrolled::ListaParams& theta, const probgen::Dataset& test,
                        unsigned threads) {
  check_test(test);
  check_dims(theta, test);
  ErrorTable tab = empty_table(test, theta.T());
  const auto parts = chunks_of(test.size());
  parallel_for(parts.size(), threads, [&](std::size_t k) {
    const auto idx = iota_range(parts[k].begin, parts[k].end);
    const auto states = unrolled::lista_forward_batch(theta, test.measurements(idx));
    fill_errors(tab, states, test.truths(idx), parts[k]);
  });
  return tab;
}

namespace {

struct PolicyPass {
  DenseMat q;                     // T x N
  std::vector<std::size_t> stop;  // first t with pi_t >= threshold, else T
};

PolicyPass policy_pass(const unrolled::ListaParams& theta, const policy::PolicyParams& phi,
                       const probgen::Dataset& test, double threshold, unsigned threads) {
  check_test(test);
  check_dims(theta, phi, test);
  const std::size_t T = theta.T();
  PolicyPass out{DenseMat(T, test.size()), std::vector<std::size_t>(test.size(), T)};
  std::vector<std::size_t> layers(T - 1);
  std::iota(layers.begin(), layers.end(), std::size_t{1});
  const DenseMat* A = phi.residual_feature ? &test.A : nullptr;
  const auto parts = chunks_of(test.size());
  parallel_for(parts.size(), threads, [&](std::size_t k) {
    const auto idx = iota_range(parts[k].begin, parts[k].end);
    const DenseMat B = test.measurements(idx);
    const auto states = unrolled::lista_forward_batch(theta, B);
    const DenseMat logits = policy::policy_logits_batch(phi, B, states, layers, A);
    Vec z(T - 1);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      for (std::size_t t = 0; t + 1 < T; ++t) z[t] = logits(t, j);
      const auto qi = stopping::induced_q_from_logits(z);
      for (std::size_t t = 0; t < T; ++t) out.q(t, idx[j]) = qi.probs[t];
      for (std::size_t t = 0; t + 1 < T; ++t) {
        if (grad::sigmoid(z[t]) >= threshold) {
          out.stop[idx[j]] = t + 1;
          break;
        }
      }
    }
  });
  return out;
}

}  // namespace

DenseMat stop_distributions(const unrolled::ListaParams& theta, const policy::PolicyParams& phi,
                            const probgen::Dataset& test, unsigned threads) {
  return policy_pass(theta, phi, test, 0.5, threads).q;
}

double expected_nmse(const unrolled::ListaParams& theta, const policy::PolicyParams& phi,
                     const probgen::Dataset& test, unsigned threads) {
  return expected_nmse_db(stop_distributions(theta, phi, test, threads),
                          lista_errors(theta, test, threads));
}

EvalReport evaluate_classic(classic::Algorithm algo, const probgen::Dataset& test,
                            const classic::LassoConfig& cfg_in) {
  check_test(test);
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = classic::resolve_step(test.A, cfg_in);
  ErrorTable tab = empty_table(test, cfg.max_iters);
  for (const auto& c : chunks_of(test.size())) {
    const auto idx = iota_range(c.begin, c.end);
    fill_errors(tab, classic::solve_batch(algo, test.A, test.measurements(idx), cfg),
                test.truths(idx), c);
  }
  const std::size_t T = cfg.max_iters;
  auto r = assemble(classic::to_string(algo), one_hot_last(T, test.size()), tab,
                    std::vector<std::size_t>(test.size(), T));
  r.runtime_secs = seconds_since(t0);
  return r;
}

EvalReport evaluate_lista_baseline(const unrolled::ListaParams& theta,
                                   const probgen::Dataset& test, unsigned threads) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto tab = lista_errors(theta, test, threads);
  const std::size_t T = theta.T();
  auto r = assemble("lista-baseline", one_hot_last(T, test.size()), tab,
                    std::vector<std::size_t>(test.size(), T));
  r.runtime_secs = seconds_since(t0);
  return r;
}

EvalReport evaluate_lista_stop(const unrolled::ListaParams& theta, const policy::PolicyParams& phi,
                               const probgen::Dataset& test, double threshold, unsigned threads) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("evaluate_lista_stop: threshold must lie in (0, 1)");
  const auto t0 = std::chrono::steady_clock::now();
  const auto tab = lista_errors(theta, test, threads);
  const auto pass = policy_pass(theta, phi, test, threshold, threads);
  auto r = assemble("lista-stop", pass.q, tab, pass.stop);
  r.runtime_secs = seconds_since(t0);
  return r;
}

Format parse_format(const std::string& s) {
  if (s == "json") return Format::json;
  if (s == "csv") return Format::csv;
  throw std::invalid_argument("unknown report format '" + s + "' (expected json or csv)");
}

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string json_real(double v) {
  return std::isfinite(v) ? format_real(v) : "\"" + format_real(v) + "\"";
}

std::string snr_key(double s) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", s);
  return buf;
}

std::string json_string(const std::string& s) { return nlohmann::json(s).dump(); }

std::string json_snr_map(const std::vector<std::pair<double, double>>& rows) {
  std::string out = "{";
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (k) out += ", ";
    out += "\"" + snr_key(rows[k].first) + "\": " + json_real(rows[k].second);
  }
  return out + "}";
}

template <typename Seq, typename Fn>
std::string json_array(const Seq& seq, Fn fn) {
  std::string out = "[";
  bool first = true;
  for (const auto& v : seq) {
    if (!first) out += ", ";
    first = false;
    out += fn(v);
  }
  return out + "]";
}

std::string report_body(const EvalReport& r, const std::string& indent) {
  std::ostringstream os;
  os << indent << "\"method\": " << json_string(r.method) << ",\n"
     << indent << "\"T\": " << r.T << ",\n"
     << indent << "\"instances\": " << r.instances << ",\n"
     << indent << "\"nmse_mixed_db\": " << json_real(r.nmse_mixed_db) << ",\n"
     << indent << "\"nmse_per_snr\": " << json_snr_map(r.nmse_per_snr) << ",\n"
     << indent << "\"stop_histogram\": " << json_array(r.stop_histogram, json_real) << ",\n"
     << indent << "\"weighted_convergence\": "
     << json_array(r.weighted_convergence,
                   [](const std::optional<double>& v) { return v ? json_real(*v) : "null"; })
     << ",\n"
     << indent << "\"layer_nmse_db\": " << json_array(r.layer_nmse_db, json_real) << ",\n"
     << indent << "\"det_stop_nmse_db\": " << json_real(r.det_stop_nmse_db) << ",\n"
     << indent << "\"det_stop_per_snr\": " << json_snr_map(r.det_stop_per_snr) << ",\n"
     << indent << "\"mean_layers_computed\": " << json_real(r.mean_layers_computed) << ",\n"
     << indent << "\"runtime_secs\": " << (r.runtime_secs ? json_real(*r.runtime_secs) : "null");
  return os.str();
}

// RFC 4180 quoting, applied only when needed.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

double parse_real(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw std::invalid_argument("report: expected a real, got " + j.dump());
}

std::vector<std::pair<double, double>> parse_snr_map(const nlohmann::json& j) {
  // nlohmann sorts object keys; restore numeric order.
  std::vector<std::pair<double, double>> out;
  for (auto it = j.begin(); it != j.end(); ++it)
    out.emplace_back(std::stod(it.key()), parse_real(it.value()));
  std::sort(out.begin(), out.end());
  return out;
}

EvalReport parse_report_object(const nlohmann::json& j) {
  EvalReport r;
  r.method = j.at("method").get<std::string>();
  r.T = j.at("T").get<std::size_t>();
  r.instances = j.at("instances").get<std::size_t>();
  r.nmse_mixed_db = parse_real(j.at("nmse_mixed_db"));
  r.nmse_per_snr = parse_snr_map(j.at("nmse_per_snr"));
  for (const auto& v : j.at("stop_histogram")) r.stop_histogram.push_back(parse_real(v));
  for (const auto& v : j.at("weighted_convergence")) {
    if (v.is_null()) r.weighted_convergence.emplace_back();
    else r.weighted_convergence.emplace_back(parse_real(v));
  }
  for (const auto& v : j.at("layer_nmse_db")) r.layer_nmse_db.push_back(parse_real(v));
  r.det_stop_nmse_db = parse_real(j.at("det_stop_nmse_db"));
  r.det_stop_per_snr = parse_snr_map(j.at("det_stop_per_snr"));
  r.mean_layers_computed = parse_real(j.at("mean_layers_computed"));
  if (!j.at("runtime_secs").is_null()) r.runtime_secs = parse_real(j.at("runtime_secs"));
  if (r.stop_histogram.size() != r.T || r.weighted_convergence.size() != r.T)
    throw std::invalid_argument("report: per-layer arrays do not have length T");
  return r;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

std::string to_json(const EvalReport& r) {
  return "{\n  \"schema\": \"" + std::string(kReportSchema) + "\",\n" + report_body(r, "  ") +
         "\n}\n";
}

std::string to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "# summary\nfield,value\n"
     << "schema," << kReportSchema << "\n"
     << "method," << csv_field(r.method) << "\n"
     << "T," << r.T << "\n"
     << "instances," << r.instances << "\n"
     << "nmse_mixed_db," << format_real(r.nmse_mixed_db) << "\n"
     << "det_stop_nmse_db," << format_real(r.det_stop_nmse_db) << "\n"
     << "mean_layers_computed," << format_real(r.mean_layers_computed) << "\n"
     << "runtime_secs," << (r.runtime_secs ? format_real(*r.runtime_secs) : "") << "\n";
  os << "\n# nmse_per_snr\nsnr_db,nmse_db,det_stop_nmse_db\n";
  for (std::size_t k = 0; k < r.nmse_per_snr.size(); ++k) {
    os << snr_key(r.nmse_per_snr[k].first) << "," << format_real(r.nmse_per_snr[k].second) << ","
       << (k < r.det_stop_per_snr.size() ? format_real(r.det_stop_per_snr[k].second) : "") << "\n";
  }
  os << "\n# layers\nlayer,stop_probability,weighted_nmse_db,layer_nmse_db\n";
  for (std::size_t t = 0; t < r.T; ++t) {
    os << t + 1 << "," << format_real(r.stop_histogram.at(t)) << ","
       << (r.weighted_convergence.at(t) ? format_real(*r.weighted_convergence[t]) : "") << ","
       << (t < r.layer_nmse_db.size() ? format_real(r.layer_nmse_db[t]) : "") << "\n";
  }
  return os.str();
}

void emit_report(const EvalReport& r, const std::filesystem::path& path, Format fmt) {
  write_text(path, fmt == Format::json ? to_json(r) : to_csv(r));
}

EvalReport parse_report_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (j.value("schema", "") != kReportSchema)
    throw std::invalid_argument("report: unsupported schema (expected " +
                                std::string(kReportSchema) + ")");
  return parse_report_object(j);
}

EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open report " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_report_json(ss.str());
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::string comparison_json(std::span<const EvalReport> reports) {
  std::string out = "{\n  \"schema\": \"" + std::string(kReportSchema) +
                    "\",\n  \"comparison\": [\n";
  for (std::size_t k = 0; k < reports.size(); ++k) {
    out += "    {\n" + report_body(reports[k], "      ") + "\n    }";
    out += k + 1 < reports.size() ? ",\n" : "\n";
  }
  return out + "  ]\n}\n";
}

std::string comparison_csv(std::span<const EvalReport> reports) {
  // Union of SNR levels in first-appearance order.
  std::vector<double> snrs;
  for (const auto& r : reports)
    for (const auto& [s, v] : r.nmse_per_snr)
      if (std::find(snrs.begin(), snrs.end(), s) == snrs.end()) snrs.push_back(s);
  std::ostringstream os;
  os << "# comparison\nmethod,T,mixed";
  for (double s : snrs) os << "," << snr_key(s);
  os << ",det_stop_mixed,mean_layers_computed\n";
  for (const auto& r : reports) {
    os << csv_field(r.method) << "," << r.T << "," << format_real(r.nmse_mixed_db);
    for (double s : snrs) {
      os << ",";
      for (const auto& [k, v] : r.nmse_per_snr)
        if (k == s) os << format_real(v);
    }
    os << "," << format_real(r.det_stop_nmse_db) << "," << format_real(r.mean_layers_computed)
       << "\n";
  }
  return os.str();
}

void emit_comparison(std::span<const EvalReport> reports, const std::filesystem::path& path,
                     Format fmt) {
  write_text(path, fmt == Format::json ? comparison_json(reports) : comparison_csv(reports));
}

}  // namespace lstp::evalreport
