#include "lstp/unrolled.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "lstp/binio.hpp"

namespace lstp::unrolled {

namespace {

constexpr std::uint16_t kFormatVersion = 1;

DenseMat shrink(const DenseMat& pre, double lambda) {
  const double eff = std::max(lambda, kLambdaFloor);
  DenseMat out(pre.rows, pre.cols);
  for (std::size_t i = 0; i < pre.data.size(); ++i)
    out.data[i] = grad::soft_threshold(pre.data[i], eff);
  return out;
}

void check_layer(const DenseMat& x, std::size_t t) {
  if (!x.all_finite()) {
    throw NonFiniteState("lista_forward: non-finite state at layer " + std::to_string(t));
  }
}

}  // namespace

void ListaParams::validate() const {
  if (layers.empty()) throw std::invalid_argument("ListaParams: need at least one layer");
  const auto m_ = m(), n_ = n();
  for (std::size_t t = 0; t < layers.size(); ++t) {
    const auto& l = layers[t];
    if (l.W1.rows != n_ || l.W1.cols != m_ || l.W2.rows != n_ || l.W2.cols != n_) {
      throw std::invalid_argument("ListaParams: inconsistent shapes at layer " +
                                  std::to_string(t + 1));
    }
    if (!std::isfinite(l.lambda) || !l.W1.all_finite() || !l.W2.all_finite()) {
      throw std::invalid_argument("ListaParams: non-finite parameter at layer " +
                                  std::to_string(t + 1));
    }
  }
}

ListaParams ListaParams::zeros_like() const {
  ListaParams z;
  for (const auto& l : layers)
    z.layers.push_back({0.0, DenseMat(l.W1.rows, l.W1.cols), DenseMat(l.W2.rows, l.W2.cols)});
  return z;
}

std::vector<std::span<double>> ListaParams::blocks() {
  std::vector<std::span<double>> out;
  for (auto& l : layers) {
    out.emplace_back(&l.lambda, 1);
    out.emplace_back(l.W1.data);
    out.emplace_back(l.W2.data);
  }
  return out;
}

std::vector<std::span<const double>> ListaParams::blocks() const {
  std::vector<std::span<const double>> out;
  for (const auto& l : layers) {
    out.emplace_back(&l.lambda, 1);
    out.emplace_back(l.W1.data);
    out.emplace_back(l.W2.data);
  }
  return out;
}

ListaParams init_ista_like(const DenseMat& A, double rho, double step, std::size_t T) {
  if (T == 0) throw std::invalid_argument("init_ista_like: T must be at least 1");
  DenseMat W1 = grad::transpose(A);
  for (auto& v : W1.data) v *= step;
  DenseMat W2 = grad::matmul_tn(A, A);
  for (auto& v : W2.data) v = -step * v;
  for (std::size_t i = 0; i < W2.rows; ++i) W2(i, i) += 1.0;
  ListaParams p;
  p.layers.assign(T, ListaLayer{rho * step, W1, W2});
  return p;
}

std::vector<DenseMat> lista_forward_batch(const ListaParams& params, const DenseMat& B) {
  if (B.rows != params.m()) {
    throw std::invalid_argument("lista_forward: measurement has " + std::to_string(B.rows) +
                                " rows, model expects m=" + std::to_string(params.m()));
  }
  std::vector<DenseMat> states;
  states.reserve(params.T());
  for (std::size_t t = 0; t < params.T(); ++t) {
    const auto& layer = params.layers[t];
    DenseMat pre = grad::matmul(layer.W1, B);
    if (t > 0) {
      const DenseMat rec = grad::matmul(layer.W2, states.back());
      for (std::size_t i = 0; i < pre.data.size(); ++i) pre.data[i] += rec.data[i];
    }
    states.push_back(shrink(pre, layer.lambda));
    check_layer(states.back(), t + 1);
  }
  return states;
}

ForwardPath lista_forward(const ListaParams& params, std::span<const double> b) {
  ForwardPath path;
  path.b.assign(b.begin(), b.end());
  for (auto& X : lista_forward_batch(params, DenseMat::column(b)))
    path.states.push_back(std::move(X.data));
  return path;
}

ListaVars bind(grad::Tape& tape, const ListaParams& params, bool trainable) {
  ListaVars v;
  for (const auto& l : params.layers) {
    if (trainable) {
      v.lambda.push_back(tape.param(l.lambda));
      v.W1.push_back(tape.param(l.W1));
      v.W2.push_back(tape.param(l.W2));
    } else {
      v.lambda.push_back(tape.constant(l.lambda));
      v.W1.push_back(tape.constant(l.W1));
      v.W2.push_back(tape.constant(l.W2));
    }
  }
  return v;
}

ListaParams ListaVars::gradients(const grad::Tape& tape, const ListaParams& shape) const {
  ListaParams g = shape.zeros_like();
  for (std::size_t t = 0; t < g.layers.size(); ++t) {
    g.layers[t].lambda = tape.grad(lambda[t]).data[0];
    g.layers[t].W1 = tape.grad(W1[t]);
    g.layers[t].W2 = tape.grad(W2[t]);
  }
  return g;
}

std::vector<Var> lista_forward(const ListaVars& vars, Var B) {
  std::vector<Var> states;
  states.reserve(vars.W1.size());
  for (std::size_t t = 0; t < vars.W1.size(); ++t) {
    Var pre = grad::matmul(vars.W1[t], B);
    if (t > 0) pre = grad::add(pre, grad::matmul(vars.W2[t], states.back()));
    states.push_back(grad::soft_threshold(pre, vars.lambda[t], kLambdaFloor));
    check_layer(states.back().value(), t + 1);
  }
  return states;
}

Var layer_losses(std::span<const Var> states, Var X_star) {
  std::vector<Var> rows;
  rows.reserve(states.size());
  for (const auto& x : states) rows.push_back(grad::scale(grad::sum_sq_cols(grad::sub(x, X_star)), 0.5));
  return grad::vstack(rows);
}

double baseline_loss(const ForwardPath& path, std::span<const double> x_star, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("baseline_loss: need 0 < gamma <= 1");
  const std::size_t T = path.states.size();
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    double err = 0.0;
    for (std::size_t i = 0; i < x_star.size(); ++i) {
      const double d = path.states[t][i] - x_star[i];
      err += d * d;
    }
    total += std::pow(gamma, static_cast<double>(T - 1 - t)) * err;
  }
  return total;
}

Var baseline_loss(std::span<const Var> states, Var X_star, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("baseline_loss: need 0 < gamma <= 1");
  const std::size_t T = states.size();
  const std::size_t k = X_star.cols();
  DenseMat weights(T, k);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < k; ++c)
      weights(t, c) = 2.0 * std::pow(gamma, static_cast<double>(T - 1 - t)) / static_cast<double>(k);
  return grad::sum_all(grad::mul_const(layer_losses(states, X_star), std::move(weights)));
}

void save_params(const ListaParams& params, const std::filesystem::path& path) {
  params.validate();
  BinaryWriter w;
  w.magic("LSTW");
  w.u16(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(params.T()));
  w.u32(static_cast<std::uint32_t>(params.m()));
  w.u32(static_cast<std::uint32_t>(params.n()));
  for (const auto& l : params.layers) {
    w.f64(l.lambda);
    w.f64s(l.W1.data);
    w.f64s(l.W2.data);
  }
  w.write_file(path);
}

ListaParams load_params(const std::filesystem::path& path) {
  auto r = BinaryReader::from_file(path);
  r.expect_magic("LSTW");
  r.expect_version(kFormatVersion);
  const std::size_t T = r.u32(), m = r.u32(), n = r.u32();
  r.require(8 * T * (1 + n * m + n * n));
  ListaParams p;
  for (std::size_t t = 0; t < T; ++t) {
    ListaLayer l{r.f64(), DenseMat(n, m), DenseMat(n, n)};
    r.f64s(l.W1.data);
    r.f64s(l.W2.data);
    p.layers.push_back(std::move(l));
  }
  return p;
}

}  // namespace lstp::unrolled
