#include "lstp/policy.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "lstp/binio.hpp"
#include "lstp/rng.hpp"

namespace lstp::policy {

namespace {

constexpr std::uint16_t kPlainVersion = 1;
constexpr std::uint16_t kResidualVersion = 2;

void check_shape(const DenseMat& m, std::size_t r, std::size_t c, const char* name) {
  if (m.rows != r || m.cols != c) {
    throw std::invalid_argument(std::string("PolicyParams: ") + name + " is " + m.shape() +
                                ", expected " + std::to_string(r) + "x" + std::to_string(c));
  }
}

void gaussian_fill(DenseMat& m, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(m.cols)));
  for (auto& v : m.data) v = normal(rng);
}

}  // namespace

void PolicyParams::validate() const {
  const auto a = h1(), b = h2();
  if (a == 0 || b == 0) throw std::invalid_argument("PolicyParams: hidden sizes must be >= 1");
  check_shape(W_in, a, input_dim(), "W_in");
  check_shape(b_in, a, 1, "b_in");
  check_shape(W_mid, b, a, "W_mid");
  check_shape(b_mid, b, 1, "b_mid");
  check_shape(w_out, 1, b, "w_out");
  check_shape(b_out, 1, 1, "b_out");
  for (const auto& e : layer_embed) check_shape(e, b, 1, "layer_embed");
  for (const auto& blk : blocks())
    for (double v : blk)
      if (!std::isfinite(v)) throw std::invalid_argument("PolicyParams: non-finite parameter");
}

PolicyParams PolicyParams::zeros_like() const {
  PolicyParams z = *this;
  for (auto blk : z.blocks()) std::fill(blk.begin(), blk.end(), 0.0);
  return z;
}

std::vector<std::span<double>> PolicyParams::blocks() {
  std::vector<std::span<double>> out{W_in.data, b_in.data, W_mid.data, b_mid.data, w_out.data,
                                     b_out.data};
  for (auto& e : layer_embed) out.emplace_back(e.data);
  return out;
}

std::vector<std::span<const double>> PolicyParams::blocks() const {
  std::vector<std::span<const double>> out{W_in.data,  b_in.data,  W_mid.data,
                                           b_mid.data, w_out.data, b_out.data};
  for (const auto& e : layer_embed) out.emplace_back(e.data);
  return out;
}

PolicyParams init_policy(std::size_t m, std::size_t n, std::size_t T, const PolicyConfig& cfg,
                         std::uint64_t seed) {
  if (T == 0) throw std::invalid_argument("init_policy: T must be at least 1");
  if (cfg.h1 == 0 || cfg.h2 == 0) throw std::invalid_argument("init_policy: hidden sizes must be >= 1");
  PolicyParams p;
  p.m = m;
  p.n = n;
  p.residual_feature = cfg.residual_feature;
  p.W_in = DenseMat(cfg.h1, p.input_dim());
  p.b_in = DenseMat(cfg.h1, 1);
  p.W_mid = DenseMat(cfg.h2, cfg.h1);
  p.b_mid = DenseMat(cfg.h2, 1);
  p.w_out = DenseMat(1, cfg.h2);
  p.b_out = DenseMat(1, 1);
  p.layer_embed.assign(T - 1, DenseMat(cfg.h2, 1));
  auto rng = make_stream(seed, "policy-init", 0);
  gaussian_fill(p.W_in, rng);
  gaussian_fill(p.W_mid, rng);
  return p;
}

PolicyVars bind(grad::Tape& tape, const PolicyParams& phi, bool trainable) {
  auto leaf = [&](const DenseMat& m) { return trainable ? tape.param(m) : tape.constant(m); };
  PolicyVars v{leaf(phi.W_in), leaf(phi.b_in), leaf(phi.W_mid), leaf(phi.b_mid),
               leaf(phi.w_out), leaf(phi.b_out), {}};
  for (const auto& e : phi.layer_embed) v.layer_embed.push_back(leaf(e));
  return v;
}

PolicyParams PolicyVars::gradients(const grad::Tape& tape, const PolicyParams& shape) const {
  PolicyParams g = shape;
  g.W_in = tape.grad(W_in);
  g.b_in = tape.grad(b_in);
  g.W_mid = tape.grad(W_mid);
  g.b_mid = tape.grad(b_mid);
  g.w_out = tape.grad(w_out);
  g.b_out = tape.grad(b_out);
  for (std::size_t i = 0; i < layer_embed.size(); ++i) g.layer_embed[i] = tape.grad(layer_embed[i]);
  return g;
}

Var policy_logits(const PolicyParams& phi, const PolicyVars& vars, Var B,
                  std::span<const Var> states, std::span<const std::size_t> decision_layers,
                  std::optional<Var> A) {
  if (phi.residual_feature && !A) {
    throw std::invalid_argument("policy_logits: residual feature needs the measurement matrix");
  }
  std::vector<Var> rows;
  rows.reserve(decision_layers.size());
  for (std::size_t t : decision_layers) {
    if (t == 0 || t >= phi.T() || t > states.size()) {
      throw std::invalid_argument("policy_logits: no stop decision at layer " + std::to_string(t) +
                                  " (T=" + std::to_string(phi.T()) + ")");
    }
    const Var x = states[t - 1];
    std::vector<Var> parts{B, x};
    if (phi.residual_feature) {
      parts.push_back(grad::sum_sq_cols(grad::sub(B, grad::matmul(*A, x))));
    }
    const Var input = grad::vstack(parts);
    const Var h1 = grad::tanh(grad::add_col_bias(grad::matmul(vars.W_in, input), vars.b_in));
    const Var pre2 = grad::add_col_bias(grad::add_col_bias(grad::matmul(vars.W_mid, h1), vars.b_mid),
                                        vars.layer_embed[t - 1]);
    const Var h2 = grad::tanh(pre2);
    rows.push_back(grad::add_col_bias(grad::matmul(vars.w_out, h2), vars.b_out));
  }
  if (rows.empty()) return B.tape->constant(DenseMat(0, B.cols()));
  return grad::vstack(rows);
}

DenseMat policy_logits_batch(const PolicyParams& phi, const DenseMat& B,
                             std::span<const DenseMat> states,
                             std::span<const std::size_t> decision_layers, const DenseMat* A) {
  // Same primitive sequence as the taped path, so values match it exactly.
  grad::Tape tape;
  const auto vars = bind(tape, phi, false);
  const Var b = tape.constant(B);
  std::vector<Var> xs;
  for (const auto& s : states) xs.push_back(tape.constant(s));
  std::optional<Var> a;
  if (A) a = tape.constant(*A);
  return policy_logits(phi, vars, b, xs, decision_layers, a).value();
}

double policy_forward(const PolicyParams& phi, std::span<const double> b,
                      std::span<const double> x_t, std::size_t t, const DenseMat* A) {
  if (t == 0 || t >= phi.T()) {
    throw std::invalid_argument("policy_forward: step " + std::to_string(t) +
                                " has no stop decision (valid: 1.." + std::to_string(phi.T() - 1) +
                                ")");
  }
  if (b.size() != phi.m || x_t.size() != phi.n) {
    throw std::invalid_argument("policy_forward: input sizes do not match the policy");
  }
  // Only state t is read; earlier slots are placeholders.
  std::vector<DenseMat> states(t, DenseMat(phi.n, 1));
  states.back() = DenseMat::column(x_t);
  const std::size_t layer[] = {t};
  return grad::sigmoid(policy_logits_batch(phi, DenseMat::column(b), states, layer, A).data[0]);
}

stopping::StopDistribution rollout_q(const PolicyParams& phi, const unrolled::ForwardPath& path,
                                     const DenseMat* A) {
  if (path.states.size() != phi.T()) {
    throw std::invalid_argument("rollout_q: path has " + std::to_string(path.states.size()) +
                                " states, policy expects T=" + std::to_string(phi.T()));
  }
  Vec pi;
  for (std::size_t t = 1; t < phi.T(); ++t)
    pi.push_back(policy_forward(phi, path.b, path.states[t - 1], t, A));
  return stopping::induced_q(pi);
}

StopDecision deterministic_stop(const PolicyParams& phi, std::span<const double> b,
                                const std::function<Vec(std::size_t)>& next_state,
                                double threshold, const DenseMat* A) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("deterministic_stop: threshold must lie in (0, 1)");
  }
  const std::size_t T = phi.T();
  for (std::size_t t = 1; t <= T; ++t) {
    const Vec x = next_state(t);
    if (t == T) break;
    if (policy_forward(phi, b, x, t, A) >= threshold) return {t, t};
  }
  return {T, T};
}

void save_policy(const PolicyParams& phi, const std::filesystem::path& path) {
  phi.validate();
  BinaryWriter w;
  w.magic("LSTQ");
  w.u16(phi.residual_feature ? kResidualVersion : kPlainVersion);
  w.u32(static_cast<std::uint32_t>(phi.h1()));
  w.u32(static_cast<std::uint32_t>(phi.h2()));
  w.u32(static_cast<std::uint32_t>(phi.m));
  w.u32(static_cast<std::uint32_t>(phi.n));
  w.u32(static_cast<std::uint32_t>(phi.T()));
  for (const auto& blk : phi.blocks()) w.f64s(blk);
  w.write_file(path);
}

PolicyParams load_policy(const std::filesystem::path& path) {
  auto r = BinaryReader::from_file(path);
  r.expect_magic("LSTQ");
  const auto version = r.expect_version(kResidualVersion);
  const std::size_t h1 = r.u32(), h2 = r.u32(), m = r.u32(), n = r.u32(), T = r.u32();
  if (T == 0 || h1 == 0 || h2 == 0) {
    throw FormatError(FormatErrc::shape_mismatch, path.string() + ": invalid policy header");
  }
  PolicyParams p;
  p.m = m;
  p.n = n;
  p.residual_feature = version == kResidualVersion;
  p.W_in = DenseMat(h1, p.input_dim());
  p.b_in = DenseMat(h1, 1);
  p.W_mid = DenseMat(h2, h1);
  p.b_mid = DenseMat(h2, 1);
  p.w_out = DenseMat(1, h2);
  p.b_out = DenseMat(1, 1);
  p.layer_embed.assign(T - 1, DenseMat(h2, 1));
  std::size_t total = 0;
  for (const auto& blk : p.blocks()) total += blk.size();
  r.require(8 * total);
  for (auto blk : p.blocks()) r.f64s(blk);
  return p;
}

}  // namespace lstp::policy
