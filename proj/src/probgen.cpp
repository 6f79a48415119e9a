#include "lstp/probgen.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "lstp/binio.hpp"
#include "lstp/parallel.hpp"
#include "lstp/rng.hpp"

namespace lstp::probgen {

namespace {

constexpr std::uint16_t kFormatVersion = 1;

}  // namespace

GenConfig GenConfig::desk(std::uint64_t seed) {
  GenConfig c;
  c.seed = seed;
  return c;
}

GenConfig GenConfig::paper(std::uint64_t seed) {
  GenConfig c;
  c.m = 250;
  c.n = 500;
  c.test_count_per_snr = 1000;
  c.seed = seed;
  return c;
}

void GenConfig::validate() const {
  if (m == 0 || m >= n) {
    throw std::invalid_argument("GenConfig: need 0 < m < n, got m=" + std::to_string(m) +
                                " n=" + std::to_string(n));
  }
  if (!(p_b > 0.0 && p_b < 1.0)) {
    throw std::invalid_argument("GenConfig: p_b must lie in (0, 1), got " + std::to_string(p_b));
  }
  if (snr_levels.empty()) throw std::invalid_argument("GenConfig: snr_levels is empty");
  for (double s : snr_levels) {
    if (!std::isfinite(s)) throw std::invalid_argument("GenConfig: snr levels must be finite");
  }
}

DenseMat Dataset::measurements(std::span<const std::size_t> idx) const {
  DenseMat out(m(), idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) out.set_col(k, instances.at(idx[k]).b);
  return out;
}

DenseMat Dataset::truths(std::span<const std::size_t> idx) const {
  DenseMat out(n(), idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) out.set_col(k, instances.at(idx[k]).x_star);
  return out;
}

std::vector<double> Dataset::snr_levels() const {
  std::vector<double> levels;
  for (const auto& inst : instances) {
    if (std::find(levels.begin(), levels.end(), inst.snr_db) == levels.end())
      levels.push_back(inst.snr_db);
  }
  return levels;
}

DenseMat generate_matrix(const GenConfig& config) {
  config.validate();
  auto rng = make_stream(config.seed, "matrix", 0);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(config.m)));
  DenseMat A(config.m, config.n);
  for (auto& v : A.data) v = normal(rng);
  for (std::size_t c = 0; c < A.cols; ++c) {
    double norm2 = 0.0;
    for (std::size_t r = 0; r < A.rows; ++r) norm2 += A(r, c) * A(r, c);
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t r = 0; r < A.rows; ++r) A(r, c) *= inv;
  }
  return A;
}

SparseInstance generate_instance(const DenseMat& A, double snr_db, double p_b,
                                 std::uint64_t instance_seed) {
  if (!std::isfinite(snr_db)) throw std::invalid_argument("generate_instance: snr_db must be finite");
  std::mt19937_64 rng(instance_seed);
  std::bernoulli_distribution support(p_b);
  std::normal_distribution<double> normal(0.0, 1.0);

  SparseInstance inst;
  inst.snr_db = snr_db;
  inst.instance_seed = instance_seed;
  inst.x_star.assign(A.cols, 0.0);
  bool any = false;
  while (!any) {
    for (auto& x : inst.x_star) {
      x = support(rng) ? normal(rng) : 0.0;
      any = any || x != 0.0;
    }
  }

  const Vec clean = grad::matvec(A, inst.x_star);
  Vec noise(A.rows);
  double noise_norm2 = 0.0;
  while (noise_norm2 == 0.0) {
    for (auto& e : noise) e = normal(rng);
    noise_norm2 = grad::squared_norm(noise);
  }
  const double target = std::sqrt(grad::squared_norm(clean) / noise_norm2) *
                        std::pow(10.0, -snr_db / 20.0);
  inst.b.resize(A.rows);
  for (std::size_t i = 0; i < A.rows; ++i) inst.b[i] = clean[i] + target * noise[i];
  return inst;
}

Dataset generate_train(const GenConfig& config, const DenseMat& A, unsigned threads) {
  config.validate();
  Dataset ds{A, std::vector<SparseInstance>(config.train_count), config};
  parallel_for(config.train_count, threads, [&](std::size_t i) {
    const auto seed = mix_seed(config.seed, "train", i);
    auto pick = make_stream(seed, "snr", 0);
    std::uniform_int_distribution<std::size_t> level(0, config.snr_levels.size() - 1);
    ds.instances[i] = generate_instance(A, config.snr_levels[level(pick)], config.p_b, seed);
  });
  return ds;
}

Dataset generate_test(const GenConfig& config, const DenseMat& A, unsigned threads) {
  config.validate();
  const std::size_t per = config.test_count_per_snr;
  const std::size_t total = per * config.snr_levels.size();
  Dataset ds{A, std::vector<SparseInstance>(total), config};
  parallel_for(total, threads, [&](std::size_t i) {
    ds.instances[i] = generate_instance(A, config.snr_levels[i / per], config.p_b,
                                        mix_seed(config.seed, "test", i));
  });
  return ds;
}

double measured_snr_db(const DenseMat& A, const SparseInstance& inst) {
  const Vec clean = grad::matvec(A, inst.x_star);
  double signal = 0.0, noise = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    signal += clean[i] * clean[i];
    const double e = inst.b[i] - clean[i];
    noise += e * e;
  }
  return 10.0 * std::log10(signal / noise);
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  BinaryWriter w;
  w.magic("LSTP");
  w.u16(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(ds.m()));
  w.u32(static_cast<std::uint32_t>(ds.n()));
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.f64(ds.config.p_b);
  w.u64(ds.config.seed);
  w.f64s(ds.A.data);
  for (const auto& inst : ds.instances) {
    w.f64(inst.snr_db);
    w.u64(inst.instance_seed);
    w.f64s(inst.b);
    w.f64s(inst.x_star);
  }
  w.write_file(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  auto r = BinaryReader::from_file(path);
  r.expect_magic("LSTP");
  r.expect_version(kFormatVersion);
  Dataset ds;
  const std::size_t m = r.u32();
  const std::size_t n = r.u32();
  const std::size_t count = r.u32();
  ds.config.m = m;
  ds.config.n = n;
  ds.config.p_b = r.f64();
  ds.config.seed = r.u64();
  r.require(8 * (m * n + count * (2 + m + n)));
  ds.A = DenseMat(m, n);
  r.f64s(ds.A.data);
  ds.instances.resize(count);
  for (auto& inst : ds.instances) {
    inst.snr_db = r.f64();
    inst.instance_seed = r.u64();
    inst.b.resize(m);
    inst.x_star.resize(n);
    r.f64s(inst.b);
    r.f64s(inst.x_star);
  }
  ds.config.snr_levels = ds.snr_levels();
  return ds;
}

}  // namespace lstp::probgen
