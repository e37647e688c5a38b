#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

namespace kbmpc::expr {

enum class Op : std::uint8_t { Const, Var, Add, Sub, Mul, Div, Neg, Sin, Cos, Tan, Atan, Sqrt };

/// Immutable scalar expression over state variables x_0..x_{n-1}.
///
/// Expressions are handles into a process-wide interned DAG: structurally
/// identical subexpressions share one node, smart constructors fold
/// constants, and symbolic partial derivatives are memoized. This keeps
/// repeated directional derivatives (Lie chains) compact and makes value
/// equality of handles cheap.
///
/// Handles are trivially copyable and evaluation is reentrant.
class Expr {
 public:
  Expr();  // the constant 0

  static Expr constant(double c);
  static Expr var(int index);

  Op op() const;
  bool is_constant() const;
  double constant_value() const;  // requires is_constant()
  std::int32_t id() const { return id_; }

  /// Symbolic partial derivative with respect to variable `var`.
  Expr derivative(int var) const;

  /// One-off evaluation (memoized walk). Hot paths should use Tape.
  double eval(std::span<const double> x) const;

  /// Value and gradient w.r.t. the first n_vars variables in one
  /// forward-mode pass.
  double eval_with_gradient(std::span<const double> x, Eigen::VectorXd& grad) const;

  /// Highest variable index appearing in the expression, plus one.
  int min_vars() const;

  friend bool operator==(Expr a, Expr b) { return a.id_ == b.id_; }

 private:
  explicit Expr(std::int32_t id) : id_(id) {}
  std::int32_t id_;
  friend class Tape;
  friend struct PoolAccess;
};

Expr operator+(Expr a, Expr b);
Expr operator-(Expr a, Expr b);
Expr operator*(Expr a, Expr b);
Expr operator/(Expr a, Expr b);
Expr operator-(Expr a);
inline Expr operator+(Expr a, double b) { return a + Expr::constant(b); }
inline Expr operator+(double a, Expr b) { return Expr::constant(a) + b; }
inline Expr operator-(Expr a, double b) { return a - Expr::constant(b); }
inline Expr operator-(double a, Expr b) { return Expr::constant(a) - b; }
inline Expr operator*(Expr a, double b) { return a * Expr::constant(b); }
inline Expr operator*(double a, Expr b) { return Expr::constant(a) * b; }
inline Expr operator/(Expr a, double b) { return a / Expr::constant(b); }
inline Expr operator/(double a, Expr b) { return Expr::constant(a) / b; }

Expr sin(Expr a);
Expr cos(Expr a);
Expr tan(Expr a);
Expr atan(Expr a);
Expr sqrt(Expr a);

/// Flattened single-pass evaluator for a set of expressions.
///
/// Construction topologically orders the union of their DAGs; eval runs
/// the resulting straight-line program once per point, so shared
/// subexpressions are computed once. Thread-safe: eval uses only local or
/// caller-provided scratch.
class Tape {
 public:
  Tape() = default;
  Tape(std::span<const Expr> outputs, int n_vars);

  int n_outputs() const { return static_cast<int>(out_slots_.size()); }
  int n_vars() const { return n_vars_; }
  int n_nodes() const { return static_cast<int>(prog_.size()); }

  void eval(std::span<const double> x, std::span<double> out) const;
  void eval(std::span<const double> x, std::span<double> out, std::vector<double>& scratch) const;

  /// Values plus Jacobian (n_outputs x n_vars) via forward-mode duals.
  void eval_with_jacobian(std::span<const double> x, std::span<double> out,
                          Eigen::MatrixXd& jac) const;

 private:
  struct Instr {
    Op op;
    std::int32_t a = -1;  // operand slots
    std::int32_t b = -1;
    double c = 0.0;  // constant payload / var index
  };
  std::vector<Instr> prog_;
  std::vector<std::int32_t> out_slots_;
  int n_vars_ = 0;
};

}  // namespace kbmpc::expr
