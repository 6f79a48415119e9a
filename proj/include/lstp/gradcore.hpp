#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace lstp::grad {

using Vec = std::vector<double>;

/// Row-major dense matrix of 64-bit reals. Column vectors are n x 1.
struct DenseMat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  DenseMat() = default;
  DenseMat(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  DenseMat(std::size_t r, std::size_t c, std::vector<double> values);

  static DenseMat identity(std::size_t n);
  static DenseMat column(std::span<const double> v);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t size() const { return data.size(); }
  std::string shape() const;
  Vec col(std::size_t c) const;
  void set_col(std::size_t c, std::span<const double> v);
  bool all_finite() const;

  friend bool operator==(const DenseMat&, const DenseMat&) = default;
};

// Untaped kernels. The tape calls these same routines, so taped and untaped
// forward values agree bit for bit.

Vec matvec(const DenseMat& w, std::span<const double> v);
DenseMat matmul(const DenseMat& a, const DenseMat& b);
/// a^T * b without materializing the transpose.
DenseMat matmul_tn(const DenseMat& a, const DenseMat& b);
/// a * b^T without materializing the transpose.
DenseMat matmul_nt(const DenseMat& a, const DenseMat& b);
DenseMat transpose(const DenseMat& a);

double soft_threshold(double v, double lam);
Vec soft_threshold(std::span<const double> v, double lam);
double sigmoid(double v);
Vec sigmoid(std::span<const double> v);
/// log(sigmoid(v)), stable for large |v|.
double log_sigmoid(double v);
/// max-subtracted log(sum(exp(v))); -inf for an all -inf input.
double log_sum_exp(std::span<const double> v);

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> v);

//----------------------------------------------------------------------------
// Reverse-mode tape

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const DenseMat& value() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  double scalar() const;
};

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Sub,
  Hadamard,
  Scale,
  AddColBias,
  SubRowBroadcast,
  SoftThreshold,
  Tanh,
  Sigmoid,
  LogSigmoid,
  Exp,
  SumSqCols,
  VStack,
  SelectRows,
  LogSumExpCols,
  ExclCumsumRows,
  SumAll,
  MulConst,
  StopGradient,
};

/// Append-only record of primitive operations. Single owner; rebuilt per step.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is wanted after backward().
  Var param(DenseMat value);
  Var param(double value);
  /// Leaf treated as a constant input.
  Var constant(DenseMat value);
  Var constant(double value);

  /// Runs the reverse sweep from a 1x1 node. Adjoints of all nodes not on a
  /// path to `loss` are exactly zero afterwards.
  void backward(Var loss);

  const DenseMat& value(Var v) const;
  const DenseMat& grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  bool has_gradients() const { return !adjoints_.empty(); }

  // Recording interface used by the free functions below.
  Var record(Op op, std::vector<std::size_t> inputs, DenseMat value,
             double aux = 0.0, std::vector<std::size_t> index = {},
             DenseMat extra = {});

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<std::size_t> inputs;
    double aux = 0.0;
    std::vector<std::size_t> index;
    DenseMat extra;
  };

  void check_var(Var v) const;

  std::vector<Node> nodes_;
  std::vector<DenseMat> values_;
  std::vector<DenseMat> adjoints_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double c);
/// a (r x c) + bias (r x 1) broadcast across columns.
Var add_col_bias(Var a, Var bias);
/// a (r x c) - row (1 x c) broadcast across rows.
Var sub_row_broadcast(Var a, Var row);
/// Elementwise shrinkage by a 1x1 threshold node. With floor > 0 the
/// threshold is projected to max(lam, floor); with floor == 0 a negative
/// threshold is an error.
Var soft_threshold(Var x, Var lam, double floor = 0.0);
Var tanh(Var a);
Var sigmoid(Var a);
Var log_sigmoid(Var a);
Var exp(Var a);
/// 1 x c row of per-column squared norms.
Var sum_sq_cols(Var a);
Var vstack(std::span<const Var> parts);
Var select_rows(Var a, std::vector<std::size_t> rows);
/// 1 x c row of per-column log-sum-exp over rows.
Var log_sum_exp_cols(Var a);
/// (r+1) x c: row k holds the sum of rows 0..k-1 (row 0 is zero).
Var excl_cumsum_rows(Var a);
Var sum_all(Var a);
/// Elementwise product with a constant matrix.
Var mul_const(Var a, DenseMat c);
/// Identity on the forward pass; blocks gradient flow.
Var stop_gradient(Var a);

}  // namespace lstp::grad
