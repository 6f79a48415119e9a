#include <doctest.h>

#include <cmath>
#include <fstream>

#include "lstp/binio.hpp"
#include "lstp/policy.hpp"
#include "policy_support.hpp"
#include "support.hpp"

using namespace lstp;
using namespace lstp::policy;
using grad::DenseMat;
using testing::random_policy;
using testing::scripted_policy;

TEST_CASE("fresh policy stops with probability one half") {
  const auto p = init_policy(5, 8, 6, {}, 3);
  CHECK(p.h1() == 64);
  CHECK(p.h2() == 32);
  CHECK(p.T() == 6);
  std::mt19937_64 rng(1);
  unrolled::ForwardPath path{testing::random_vec(5, rng), {}};
  for (int t = 0; t < 6; ++t) path.states.push_back(testing::random_vec(8, rng));
  for (std::size_t t = 1; t < 6; ++t) CHECK(policy_forward(p, path.b, path.states[t - 1], t) == 0.5);
  const auto q = rollout_q(p, path);
  CHECK(q.probs == Vec{0.5, 0.25, 0.125, 0.0625, 0.03125, 0.03125});
  const auto p3 = init_policy(5, 8, 3, {}, 3);
  path.states.resize(3);
  CHECK(rollout_q(p3, path).probs == Vec{0.5, 0.25, 0.25});
}

TEST_CASE("policy output range, validity and step bounds") {
  std::mt19937_64 rng(2);
  const auto p = random_policy(5, 8, 4, 7);
  for (int trial = 0; trial < 100; ++trial) {
    const double pi = policy_forward(p, testing::random_vec(5, rng, 3.0), testing::random_vec(8, rng, 3.0), 1 + trial % 3);
    CHECK(pi > 0.0);
    CHECK(pi < 1.0);
  }
  CHECK_THROWS_AS(policy_forward(p, Vec(5), Vec(8), 4), std::invalid_argument);
  CHECK_THROWS_AS(policy_forward(p, Vec(5), Vec(8), 0), std::invalid_argument);
  CHECK_THROWS_AS(policy_forward(p, Vec(4), Vec(8), 1), std::invalid_argument);
}

TEST_CASE("saturated first step gives a point mass at layer one") {
  const auto p = scripted_policy(3, 4, Vec{1 - 1e-9, 0.5});
  std::mt19937_64 rng(3);
  unrolled::ForwardPath path{testing::random_vec(3, rng), {Vec(4), Vec(4), Vec(4)}};
  CHECK(rollout_q(p, path).probs[0] > 1 - 1e-6);
}

TEST_CASE("rollout equals induced q of policy outputs and sums to one") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t T = 2 + trial % 5;
    const auto p = random_policy(3, 4, T, trial, trial % 2 == 0, 3);
    const auto A = testing::random_mat(3, 4, rng);
    unrolled::ForwardPath path{testing::random_vec(3, rng), {}};
    for (std::size_t t = 0; t < T; ++t) path.states.push_back(testing::random_vec(4, rng));
    const DenseMat* a = p.residual_feature ? &A : nullptr;
    Vec pi;
    for (std::size_t t = 1; t < T; ++t) pi.push_back(policy_forward(p, path.b, path.states[t - 1], t, a));
    const auto q = rollout_q(p, path, a);
    CHECK(q.probs == stopping::induced_q(pi).probs);
    CHECK(std::abs(std::accumulate(q.probs.begin(), q.probs.end(), 0.0) - 1.0) < 1e-12);
  }
}

TEST_CASE("batched logits are per-instance and order independent") {
  std::mt19937_64 rng(5);
  const auto p = random_policy(3, 4, 4, 11);
  const auto B = testing::random_mat(3, 5, rng);
  std::vector<DenseMat> states;
  for (int t = 0; t < 4; ++t) states.push_back(testing::random_mat(4, 5, rng));
  const std::size_t layers[] = {1, 2, 3};
  const auto Z = policy_logits_batch(p, B, states, layers);
  CHECK(Z.rows == 3);
  CHECK(Z.cols == 5);
  // Reverse the batch.
  DenseMat Br(3, 5);
  std::vector<DenseMat> sr(4, DenseMat(4, 5));
  for (std::size_t c = 0; c < 5; ++c) {
    Br.set_col(4 - c, B.col(c));
    for (int t = 0; t < 4; ++t) sr[t].set_col(4 - c, states[t].col(c));
  }
  const auto Zr = policy_logits_batch(p, Br, sr, layers);
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t t = 0; t < 3; ++t) {
      CHECK(std::abs(Zr(t, 4 - c) - Z(t, c)) < 1e-14);
      CHECK(std::abs(grad::sigmoid(Z(t, c)) - policy_forward(p, B.col(c), states[t].col(c), t + 1)) < 1e-14);
    }
}

TEST_CASE("policy gradients pass finite differences") {
  for (bool residual : {false, true}) {
    CAPTURE(residual);
    std::mt19937_64 rng(6);
    auto p = random_policy(5, 8, 3, 21, residual);
    const auto B = testing::random_mat(5, 3, rng);
    const auto A = testing::random_mat(5, 8, rng, 0.4);
    std::vector<DenseMat> S;
    for (int t = 0; t < 3; ++t) S.push_back(testing::random_mat(8, 3, rng, 0.5));
    const std::size_t layers[] = {1, 2};
    auto loss = [&](PolicyParams* gp, std::vector<DenseMat>* gs) {
      grad::Tape tape;
      const auto vars = bind(tape, p, true);
      std::vector<grad::Var> xs;
      for (auto& s : S) xs.push_back(tape.param(s));
      std::optional<grad::Var> a;
      if (residual) a = tape.constant(A);
      const auto z = policy_logits(p, vars, tape.constant(B), xs, layers, a);
      const auto lq = stopping::log_induced_q(z);
      std::mt19937_64 wr(5);
      const auto out = grad::sum_all(grad::mul_const(grad::exp(lq), testing::random_mat(3, 3, wr)));
      if (gp) {
        tape.backward(out);
        *gp = vars.gradients(tape, p);
        gs->clear();
        for (auto& x : xs) gs->push_back(tape.grad(x));
      }
      return out.scalar();
    };
    PolicyParams g;
    std::vector<DenseMat> gs;
    loss(&g, &gs);
    auto params = p.blocks();
    const auto gb = g.blocks();
    std::vector<std::span<const double>> grads(gb.begin(), gb.end());
    for (std::size_t t = 0; t < 3; ++t) {
      params.emplace_back(S[t].data);
      grads.emplace_back(gs[t].data);
    }
    CHECK(testing::fd_check([&] { return loss(nullptr, nullptr); }, params, grads) < 1e-5);
  }
}

TEST_CASE("deterministic stop") {
  const Vec b{0.1, 0.2, 0.3};
  std::size_t furthest = 0;
  auto stream = [&](std::size_t t) {
    furthest = std::max(furthest, t);
    return Vec(4, 0.0);
  };
  {
    const auto p = scripted_policy(3, 4, Vec{0.1, 0.9, 0.2, 0.3});
    furthest = 0;
    const auto d = deterministic_stop(p, b, stream, 0.5);
    CHECK(d.stop_layer == 2);
    CHECK(d.layers_computed == 2);
    CHECK(furthest == 2);
  }
  {
    const auto p = scripted_policy(3, 4, Vec{0.1, 0.2, 0.3});
    furthest = 0;
    const auto d = deterministic_stop(p, b, stream, 0.5);
    CHECK(d.stop_layer == 4);
    CHECK(d.layers_computed == 4);
    CHECK(furthest == 4);
  }
  {
    const auto p = init_policy(3, 4, 5, {}, 1);
    furthest = 0;
    const auto d = deterministic_stop(p, b, stream, 0.5);
    CHECK(d.stop_layer == 1);
    CHECK(furthest == 1);
  }
  const auto p = init_policy(3, 4, 5, {}, 1);
  CHECK_THROWS_AS(deterministic_stop(p, b, stream, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(deterministic_stop(p, b, stream, 1.0), std::invalid_argument);

  // Tripwire over random policies: never reads past the stop layer.
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const auto q = random_policy(3, 4, 6, 300 + trial);
    furthest = 0;
    auto guarded = [&](std::size_t t) {
      furthest = std::max(furthest, t);
      return testing::random_vec(4, rng);
    };
    const auto d = deterministic_stop(q, b, guarded, 0.3 + 0.4 * (trial % 2));
    CHECK(furthest == d.stop_layer);
    CHECK(d.layers_computed <= 6);
  }
}

TEST_CASE("policy checkpoints") {
  const auto dir = testing::scratch_dir("policy");
  for (bool residual : {false, true}) {
    const auto p = random_policy(5, 8, 4, 9, residual, 3);
    save_policy(p, dir / "p.lstq");
    CHECK(load_policy(dir / "p.lstq") == p);
    std::ifstream is(dir / "p.lstq", std::ios::binary);
    std::vector<char> bytes{std::istreambuf_iterator<char>(is), {}};
    CHECK(bytes[4] == (residual ? 2 : 1));
    std::size_t total = 0;
    for (const auto& blk : p.blocks()) total += blk.size();
    CHECK(bytes.size() == 4 + 2 + 5 * 4 + 8 * total);
    bytes[0] = 'X';
    {
      std::ofstream os(dir / "bad.lstq", std::ios::binary);
      os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    try {
      load_policy(dir / "bad.lstq");
      FAIL("expected bad magic");
    } catch (const FormatError& e) {
      CHECK(e.code() == FormatErrc::bad_magic);
    }
  }
}
