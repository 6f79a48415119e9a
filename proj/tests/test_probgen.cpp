#include <doctest.h>

#include <cmath>
#include <fstream>

#include "lstp/binio.hpp"
#include "lstp/probgen.hpp"
#include "lstp/rng.hpp"
#include "support.hpp"

using namespace lstp;
using namespace lstp::probgen;

namespace {

GenConfig small_config(std::uint64_t seed) {
  GenConfig c = GenConfig::desk(seed);
  c.train_count = 200;
  c.test_count_per_snr = 20;
  return c;
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("presets") {
  const auto d = GenConfig::desk();
  CHECK(d.m == 50);
  CHECK(d.n == 100);
  CHECK(d.train_count == 20000);
  CHECK(d.test_count_per_snr == 500);
  const auto p = GenConfig::paper();
  CHECK(p.m == 250);
  CHECK(p.n == 500);
  CHECK(p.test_count_per_snr * p.snr_levels.size() == 3000);
  CHECK(p.snr_levels == std::vector<double>{20, 30, 40});
  CHECK(p.p_b == 0.1);
}

TEST_CASE("config validation") {
  auto c = GenConfig::desk();
  c.m = c.n;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_THROWS_AS(generate_matrix(c), std::invalid_argument);
  c = GenConfig::desk();
  c.p_b = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = GenConfig::desk();
  c.snr_levels.clear();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("matrix columns are unit norm and generation is deterministic") {
  const auto c = GenConfig::desk(3);
  const auto A = generate_matrix(c);
  CHECK(A.rows == 50);
  CHECK(A.cols == 100);
  for (std::size_t j = 0; j < A.cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < A.rows; ++i) s += A(i, j) * A(i, j);
    CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-12);
  }
  CHECK(generate_matrix(c) == A);
  CHECK_FALSE(generate_matrix(GenConfig::desk(4)) == A);

  // Entries have variance ~ 1/m; the grand mean has sd sqrt(1/m) / sqrt(mn).
  double mean = 0.0;
  for (double v : A.data) mean += v;
  mean /= static_cast<double>(A.size());
  CHECK(std::abs(mean) < 3.0 * std::sqrt(1.0 / 50.0) / std::sqrt(50.0 * 100.0));
}

TEST_CASE("instances hit the requested SNR exactly") {
  const auto A = generate_matrix(GenConfig::desk(1));
  for (std::uint64_t i = 0; i < 200; ++i) {
    const double snr = 20.0 + 10.0 * static_cast<double>(i % 3);
    const auto inst = generate_instance(A, snr, 0.1, mix_seed(9, "t", i));
    CHECK(std::abs(measured_snr_db(A, inst) - snr) < 1e-9);
    CHECK(inst.snr_db == snr);
    CHECK(grad::squared_norm(inst.x_star) > 0.0);
  }
  // 40 dB: ||eps|| = ||A x*|| / 100.
  const auto inst = generate_instance(A, 40.0, 0.1, 77);
  const auto ax = grad::matvec(A, inst.x_star);
  Vec eps(ax.size());
  for (std::size_t i = 0; i < ax.size(); ++i) eps[i] = inst.b[i] - ax[i];
  CHECK(std::sqrt(grad::squared_norm(eps)) ==
        doctest::Approx(std::sqrt(grad::squared_norm(ax)) * 1e-2).epsilon(1e-10));
  CHECK(generate_instance(A, 40.0, 0.1, 77) == inst);
}

TEST_CASE("support size concentrates at p_b * n") {
  const auto A = generate_matrix(GenConfig::desk(2));
  double total = 0.0;
  for (std::uint64_t i = 0; i < 10000; ++i) {
    const auto inst = generate_instance(A, 30.0, 0.1, mix_seed(2, "support", i));
    for (double v : inst.x_star) total += v != 0.0;
  }
  const double mean = total / 10000.0;
  CHECK(mean >= 9.0);
  CHECK(mean <= 11.0);
}

TEST_CASE("empty supports are redrawn") {
  // With p_b tiny almost every first draw is empty.
  const auto A = generate_matrix(GenConfig::desk(2));
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto inst = generate_instance(A, 30.0, 1e-3, i);
    CHECK(grad::squared_norm(inst.x_star) > 0.0);
  }
}

TEST_CASE("train and test sets") {
  const auto c = small_config(5);
  const auto A = generate_matrix(c);
  const auto train = generate_train(c, A);
  const auto test = generate_test(c, A);
  CHECK(train.size() == 200);
  CHECK(test.size() == 60);
  for (std::size_t i = 0; i < 60; ++i) CHECK(test.instances[i].snr_db == c.snr_levels[i / 20]);
  CHECK(test.snr_levels() == c.snr_levels);
  for (const auto& inst : train.instances) {
    CHECK(std::find(c.snr_levels.begin(), c.snr_levels.end(), inst.snr_db) != c.snr_levels.end());
  }
  // Thread count never changes the data.
  CHECK(generate_train(c, A, 4).instances == train.instances);
  CHECK(generate_test(c, A, 3).instances == test.instances);

  const std::size_t idx[] = {3, 0};
  const auto B = train.measurements(idx);
  CHECK(B.rows == 50);
  CHECK(B.cols == 2);
  CHECK(B.col(0) == train.instances[3].b);
  CHECK(train.truths(idx).col(1) == train.instances[0].x_star);
}

TEST_CASE("dataset round trip and format errors") {
  const auto dir = testing::scratch_dir("probgen");
  const auto c = small_config(6);
  const auto ds = generate_test(c, generate_matrix(c));
  const auto path = dir / "test.lstp";
  save_dataset(ds, path);
  const auto back = load_dataset(path);
  CHECK(back.A == ds.A);
  CHECK(back.instances == ds.instances);
  CHECK(back.config.p_b == ds.config.p_b);
  CHECK(back.config.seed == ds.config.seed);

  const auto bytes = read_bytes(path);
  CHECK(bytes.size() == 4 + 2 + 4 * 3 + 8 + 8 + 50 * 100 * 8 + 60 * (8 + 8 + 50 * 8 + 100 * 8));

  auto expect_code = [&](const std::vector<unsigned char>& b, FormatErrc code) {
    const auto p = dir / "broken.lstp";
    write_bytes(p, b);
    try {
      load_dataset(p);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(e.code() == code);
    }
  };
  auto bad_magic = bytes;
  bad_magic[0] ^= 0xFF;
  expect_code(bad_magic, FormatErrc::bad_magic);
  auto bad_version = bytes;
  bad_version[4] = 0x7F;
  expect_code(bad_version, FormatErrc::version_mismatch);
  expect_code(std::vector<unsigned char>(bytes.begin(), bytes.end() - 1), FormatErrc::truncated);
  expect_code(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 10), FormatErrc::truncated);

  try {
    load_dataset(dir / "missing.lstp");
    FAIL("expected an io error");
  } catch (const FormatError& e) {
    CHECK(e.code() == FormatErrc::io);
    CHECK(std::string(e.what()).find("missing.lstp") != std::string::npos);
  }
}

TEST_CASE("seed streams are order independent") {
  CHECK(mix_seed(1, "a", 2) == mix_seed(1, "a", 2));
  CHECK(mix_seed(1, "a", 2) != mix_seed(1, "b", 2));
  CHECK(mix_seed(1, "a", 2) != mix_seed(1, "a", 3));
  CHECK(mix_seed(1, "a", 2) != mix_seed(2, "a", 2));
}
