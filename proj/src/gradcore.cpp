#include "lstp/gradcore.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lstp::grad {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const DenseMat& m) {
  return ConstMap(m.data.data(), static_cast<Eigen::Index>(m.rows),
                  static_cast<Eigen::Index>(m.cols));
}
MutMap view(DenseMat& m) {
  return MutMap(m.data.data(), static_cast<Eigen::Index>(m.rows),
                static_cast<Eigen::Index>(m.cols));
}

std::string shape_of(std::size_t r, std::size_t c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

[[noreturn]] void shape_error(const char* what, const DenseMat& a, const DenseMat& b) {
  throw std::invalid_argument(std::string(what) + ": dimension mismatch between " +
                              a.shape() + " and " + b.shape());
}

void require_same_shape(const char* what, const DenseMat& a, const DenseMat& b) {
  if (a.rows != b.rows || a.cols != b.cols) shape_error(what, a, b);
}

void add_into(DenseMat& dst, const DenseMat& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

//----------------------------------------------------------------------------
// DenseMat

DenseMat::DenseMat(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) {
    throw std::invalid_argument("DenseMat: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_of(r, c));
  }
}

DenseMat DenseMat::identity(std::size_t n) {
  DenseMat m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMat DenseMat::column(std::span<const double> v) {
  return DenseMat(v.size(), 1, Vec(v.begin(), v.end()));
}

std::string DenseMat::shape() const { return shape_of(rows, cols); }

Vec DenseMat::col(std::size_t c) const {
  Vec out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = (*this)(r, c);
  return out;
}

void DenseMat::set_col(std::size_t c, std::span<const double> v) {
  if (v.size() != rows) {
    throw std::invalid_argument("set_col: vector length " + std::to_string(v.size()) +
                                " does not match " + shape());
  }
  for (std::size_t r = 0; r < rows; ++r) (*this)(r, c) = v[r];
}

bool DenseMat::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
}

//----------------------------------------------------------------------------
// Untaped kernels

Vec matvec(const DenseMat& w, std::span<const double> v) {
  if (w.cols != v.size()) {
    throw std::invalid_argument("matvec: dimension mismatch between " + w.shape() +
                                " and vector of length " + std::to_string(v.size()));
  }
  Vec out(w.rows);
  Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size())).noalias() =
      view(w) * Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  return out;
}

DenseMat matmul(const DenseMat& a, const DenseMat& b) {
  if (a.cols != b.rows) shape_error("matmul", a, b);
  DenseMat out(a.rows, b.cols);
  view(out).noalias() = view(a) * view(b);
  return out;
}

DenseMat matmul_tn(const DenseMat& a, const DenseMat& b) {
  if (a.rows != b.rows) shape_error("matmul_tn", a, b);
  DenseMat out(a.cols, b.cols);
  view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

DenseMat matmul_nt(const DenseMat& a, const DenseMat& b) {
  if (a.cols != b.cols) shape_error("matmul_nt", a, b);
  DenseMat out(a.rows, b.rows);
  view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

DenseMat transpose(const DenseMat& a) {
  DenseMat out(a.cols, a.rows);
  for (std::size_t r = 0; r < a.rows; ++r)
    for (std::size_t c = 0; c < a.cols; ++c) out(c, r) = a(r, c);
  return out;
}

double soft_threshold(double v, double lam) {
  if (v > lam) return v - lam;
  if (v < -lam) return v + lam;
  return 0.0;
}

Vec soft_threshold(std::span<const double> v, double lam) {
  if (!(lam >= 0.0)) {
    throw std::invalid_argument("soft_threshold: threshold must be nonnegative, got " +
                                std::to_string(lam));
  }
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = soft_threshold(v[i], lam);
  return out;
}

double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

Vec sigmoid(std::span<const double> v) {
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = sigmoid(v[i]);
  return out;
}

double log_sigmoid(double v) {
  if (v >= 0.0) return -std::log1p(std::exp(-v));
  return v - std::log1p(std::exp(v));
}

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double squared_norm(std::span<const double> v) { return dot(v, v); }

//----------------------------------------------------------------------------
// Tape

const DenseMat& Var::value() const { return tape->value(*this); }

double Var::scalar() const {
  const auto& v = value();
  if (v.rows != 1 || v.cols != 1) {
    throw std::invalid_argument("Var::scalar: node is " + v.shape() + ", not 1x1");
  }
  return v.data[0];
}

void Tape::check_var(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw std::invalid_argument("Tape: variable does not belong to this tape");
  }
}

Var Tape::record(Op op, std::vector<std::size_t> inputs, DenseMat value, double aux,
                 std::vector<std::size_t> index, DenseMat extra) {
  for (auto in : inputs) {
    if (in >= nodes_.size()) throw std::logic_error("Tape: input recorded out of order");
  }
  nodes_.push_back(Node{op, std::move(inputs), aux, std::move(index), std::move(extra)});
  values_.push_back(std::move(value));
  adjoints_.clear();
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(DenseMat value) { return record(Op::Leaf, {}, std::move(value), 1.0); }
Var Tape::param(double value) { return param(DenseMat(1, 1, value)); }
Var Tape::constant(DenseMat value) { return record(Op::Leaf, {}, std::move(value), 0.0); }
Var Tape::constant(double value) { return constant(DenseMat(1, 1, value)); }

const DenseMat& Tape::value(Var v) const {
  check_var(v);
  return values_[v.id];
}

const DenseMat& Tape::grad(Var v) const {
  check_var(v);
  if (adjoints_.empty()) throw std::logic_error("Tape::grad: backward() has not been run");
  return adjoints_[v.id];
}

void Tape::backward(Var loss) {
  check_var(loss);
  const auto& lv = values_[loss.id];
  if (lv.rows != 1 || lv.cols != 1) {
    throw std::invalid_argument("backward: loss node must be scalar, got " + lv.shape());
  }
  adjoints_.clear();
  adjoints_.reserve(values_.size());
  for (const auto& v : values_) adjoints_.emplace_back(v.rows, v.cols);
  adjoints_[loss.id].data[0] = 1.0;

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    const DenseMat& dy = adjoints_[id];
    const DenseMat& y = values_[id];
    switch (node.op) {
      case Op::Leaf:
      case Op::StopGradient:
        break;
      case Op::MatMul: {
        const auto a = node.inputs[0], b = node.inputs[1];
        add_into(adjoints_[a], matmul_nt(dy, values_[b]));
        add_into(adjoints_[b], matmul_tn(values_[a], dy));
        break;
      }
      case Op::Add:
        add_into(adjoints_[node.inputs[0]], dy);
        add_into(adjoints_[node.inputs[1]], dy);
        break;
      case Op::Sub: {
        add_into(adjoints_[node.inputs[0]], dy);
        auto& db = adjoints_[node.inputs[1]];
        for (std::size_t i = 0; i < db.data.size(); ++i) db.data[i] -= dy.data[i];
        break;
      }
      case Op::Hadamard: {
        const auto a = node.inputs[0], b = node.inputs[1];
        auto& da = adjoints_[a];
        auto& db = adjoints_[b];
        for (std::size_t i = 0; i < dy.data.size(); ++i) {
          da.data[i] += dy.data[i] * values_[b].data[i];
          db.data[i] += dy.data[i] * values_[a].data[i];
        }
        break;
      }
      case Op::Scale: {
        auto& da = adjoints_[node.inputs[0]];
        for (std::size_t i = 0; i < dy.data.size(); ++i) da.data[i] += node.aux * dy.data[i];
        break;
      }
      case Op::AddColBias: {
        add_into(adjoints_[node.inputs[0]], dy);
        auto& db = adjoints_[node.inputs[1]];
        for (std::size_t r = 0; r < dy.rows; ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dy.cols; ++c) acc += dy(r, c);
          db.data[r] += acc;
        }
        break;
      }
      case Op::SubRowBroadcast: {
        add_into(adjoints_[node.inputs[0]], dy);
        auto& dr = adjoints_[node.inputs[1]];
        for (std::size_t r = 0; r < dy.rows; ++r)
          for (std::size_t c = 0; c < dy.cols; ++c) dr.data[c] -= dy(r, c);
        break;
      }
      case Op::SoftThreshold: {
        const auto x = node.inputs[0], lam = node.inputs[1];
        const double raw = values_[lam].data[0];
        const double eff = std::max(raw, node.aux);
        const bool lam_active = raw >= node.aux;
        auto& dx = adjoints_[x];
        double dlam = 0.0;
        for (std::size_t i = 0; i < dy.data.size(); ++i) {
          if (std::abs(values_[x].data[i]) > eff) {
            dx.data[i] += dy.data[i];
            dlam -= (y.data[i] > 0.0 ? 1.0 : -1.0) * dy.data[i];
          }
        }
        if (lam_active) adjoints_[lam].data[0] += dlam;
        break;
      }
      case Op::Tanh: {
        auto& da = adjoints_[node.inputs[0]];
        for (std::size_t i = 0; i < dy.data.size(); ++i)
          da.data[i] += dy.data[i] * (1.0 - y.data[i] * y.data[i]);
        break;
      }
      case Op::Sigmoid: {
        auto& da = adjoints_[node.inputs[0]];
        for (std::size_t i = 0; i < dy.data.size(); ++i)
          da.data[i] += dy.data[i] * y.data[i] * (1.0 - y.data[i]);
        break;
      }
      case Op::LogSigmoid: {
        const auto& a = values_[node.inputs[0]];
        auto& da = adjoints_[node.inputs[0]];
        for (std::size_t i = 0; i < dy.data.size(); ++i)
          da.data[i] += dy.data[i] * sigmoid(-a.data[i]);
        break;
      }
      case Op::Exp: {
        auto& da = adjoints_[node.inputs[0]];
        for (std::size_t i = 0; i < dy.data.size(); ++i) da.data[i] += dy.data[i] * y.data[i];
        break;
      }
      case Op::SumSqCols: {
        const auto& a = values_[node.inputs[0]];
        auto& da = adjoints_[node.inputs[0]];
        for (std::size_t r = 0; r < a.rows; ++r)
          for (std::size_t c = 0; c < a.cols; ++c) da(r, c) += 2.0 * a(r, c) * dy.data[c];
        break;
      }
      case Op::VStack: {
        std::size_t offset = 0;
        for (auto in : node.inputs) {
          auto& da = adjoints_[in];
          for (std::size_t i = 0; i < da.data.size(); ++i)
            da.data[i] += dy.data[offset * dy.cols + i];
          offset += da.rows;
        }
        break;
      }
      case Op::SelectRows: {
        auto& da = adjoints_[node.inputs[0]];
        for (std::size_t k = 0; k < node.index.size(); ++k)
          for (std::size_t c = 0; c < dy.cols; ++c) da(node.index[k], c) += dy(k, c);
        break;
      }
      case Op::LogSumExpCols: {
        const auto& a = values_[node.inputs[0]];
        auto& da = adjoints_[node.inputs[0]];
        for (std::size_t c = 0; c < a.cols; ++c) {
          if (!std::isfinite(y.data[c])) continue;
          for (std::size_t r = 0; r < a.rows; ++r)
            da(r, c) += dy.data[c] * std::exp(a(r, c) - y.data[c]);
        }
        break;
      }
      case Op::ExclCumsumRows: {
        auto& da = adjoints_[node.inputs[0]];
        for (std::size_t c = 0; c < da.cols; ++c) {
          double acc = 0.0;
          for (std::size_t j = da.rows; j-- > 0;) {
            acc += dy(j + 1, c);
            da(j, c) += acc;
          }
        }
        break;
      }
      case Op::SumAll: {
        auto& da = adjoints_[node.inputs[0]];
        for (auto& v : da.data) v += dy.data[0];
        break;
      }
      case Op::MulConst: {
        auto& da = adjoints_[node.inputs[0]];
        for (std::size_t i = 0; i < dy.data.size(); ++i)
          da.data[i] += dy.data[i] * node.extra.data[i];
        break;
      }
    }
  }
}

//----------------------------------------------------------------------------
// Taped operations

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument("tape operation: operands recorded on different tapes");
  }
  return *a.tape;
}

template <typename F>
DenseMat map_values(const DenseMat& a, F&& f) {
  DenseMat out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  auto& t = same_tape(a, b);
  return t.record(Op::MatMul, {a.id, b.id}, matmul(a.value(), b.value()));
}

Var add(Var a, Var b) {
  auto& t = same_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  DenseMat out = a.value();
  add_into(out, b.value());
  return t.record(Op::Add, {a.id, b.id}, std::move(out));
}

Var sub(Var a, Var b) {
  auto& t = same_tape(a, b);
  require_same_shape("sub", a.value(), b.value());
  DenseMat out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i];
  return t.record(Op::Sub, {a.id, b.id}, std::move(out));
}

Var hadamard(Var a, Var b) {
  auto& t = same_tape(a, b);
  require_same_shape("hadamard", a.value(), b.value());
  DenseMat out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
  return t.record(Op::Hadamard, {a.id, b.id}, std::move(out));
}

Var scale(Var a, double c) {
  return a.tape->record(Op::Scale, {a.id}, map_values(a.value(), [c](double x) { return c * x; }),
                        c);
}

Var add_col_bias(Var a, Var bias) {
  auto& t = same_tape(a, bias);
  const auto& av = a.value();
  const auto& bv = bias.value();
  if (bv.cols != 1 || bv.rows != av.rows) shape_error("add_col_bias", av, bv);
  DenseMat out = av;
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t c = 0; c < av.cols; ++c) out(r, c) += bv.data[r];
  return t.record(Op::AddColBias, {a.id, bias.id}, std::move(out));
}

Var sub_row_broadcast(Var a, Var row) {
  auto& t = same_tape(a, row);
  const auto& av = a.value();
  const auto& rv = row.value();
  if (rv.rows != 1 || rv.cols != av.cols) shape_error("sub_row_broadcast", av, rv);
  DenseMat out = av;
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t c = 0; c < av.cols; ++c) out(r, c) -= rv.data[c];
  return t.record(Op::SubRowBroadcast, {a.id, row.id}, std::move(out));
}

Var soft_threshold(Var x, Var lam, double floor) {
  auto& t = same_tape(x, lam);
  const double raw = lam.scalar();
  if (floor <= 0.0 && !(raw >= 0.0)) {
    throw std::invalid_argument("soft_threshold: threshold must be nonnegative, got " +
                                std::to_string(raw));
  }
  const double eff = std::max(raw, floor);
  return t.record(Op::SoftThreshold, {x.id, lam.id},
                  map_values(x.value(), [eff](double v) { return soft_threshold(v, eff); }),
                  floor);
}

Var tanh(Var a) {
  return a.tape->record(Op::Tanh, {a.id},
                        map_values(a.value(), [](double x) { return std::tanh(x); }));
}

Var sigmoid(Var a) {
  return a.tape->record(Op::Sigmoid, {a.id},
                        map_values(a.value(), [](double x) { return sigmoid(x); }));
}

Var log_sigmoid(Var a) {
  return a.tape->record(Op::LogSigmoid, {a.id},
                        map_values(a.value(), [](double x) { return log_sigmoid(x); }));
}

Var exp(Var a) {
  return a.tape->record(Op::Exp, {a.id},
                        map_values(a.value(), [](double x) { return std::exp(x); }));
}

Var sum_sq_cols(Var a) {
  const auto& av = a.value();
  DenseMat out(1, av.cols);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t c = 0; c < av.cols; ++c) out.data[c] += av(r, c) * av(r, c);
  return a.tape->record(Op::SumSqCols, {a.id}, std::move(out));
}

Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("vstack: no inputs");
  Tape* t = parts.front().tape;
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    same_tape(parts.front(), p);
    if (p.cols() != cols) shape_error("vstack", parts.front().value(), p.value());
    rows += p.rows();
    ids.push_back(p.id);
  }
  DenseMat out(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + offset);
    offset += v.data.size();
  }
  return t->record(Op::VStack, std::move(ids), std::move(out));
}

Var select_rows(Var a, std::vector<std::size_t> rows) {
  const auto& av = a.value();
  DenseMat out(rows.size(), av.cols);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= av.rows) {
      throw std::out_of_range("select_rows: row " + std::to_string(rows[k]) +
                              " out of range for " + av.shape());
    }
    for (std::size_t c = 0; c < av.cols; ++c) out(k, c) = av(rows[k], c);
  }
  return a.tape->record(Op::SelectRows, {a.id}, std::move(out), 0.0, std::move(rows));
}

Var log_sum_exp_cols(Var a) {
  const auto& av = a.value();
  DenseMat out(1, av.cols);
  Vec column(av.rows);
  for (std::size_t c = 0; c < av.cols; ++c) {
    for (std::size_t r = 0; r < av.rows; ++r) column[r] = av(r, c);
    out.data[c] = log_sum_exp(column);
  }
  return a.tape->record(Op::LogSumExpCols, {a.id}, std::move(out));
}

Var excl_cumsum_rows(Var a) {
  const auto& av = a.value();
  DenseMat out(av.rows + 1, av.cols);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t c = 0; c < av.cols; ++c) out(r + 1, c) = out(r, c) + av(r, c);
  return a.tape->record(Op::ExclCumsumRows, {a.id}, std::move(out));
}

Var sum_all(Var a) {
  double acc = 0.0;
  for (double x : a.value().data) acc += x;
  return a.tape->record(Op::SumAll, {a.id}, DenseMat(1, 1, acc));
}

Var mul_const(Var a, DenseMat c) {
  require_same_shape("mul_const", a.value(), c);
  DenseMat out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= c.data[i];
  return a.tape->record(Op::MulConst, {a.id}, std::move(out), 0.0, {}, std::move(c));
}

Var stop_gradient(Var a) { return a.tape->record(Op::StopGradient, {a.id}, a.value()); }

}  // namespace lstp::grad
