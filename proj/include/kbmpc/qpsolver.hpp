#pragma once

#include "kbmpc/util.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <string>

namespace kbmpc::qp {

/// minimize 0.5 w'P w + q'w  subject to  G w <= h,
/// with P symmetric positive definite.
struct QpProblem {
  Eigen::MatrixXd P;
  Eigen::VectorXd q;
  Eigen::MatrixXd G;
  Eigen::VectorXd h;

  int n() const { return static_cast<int>(P.rows()); }
  int n_ineq() const { return static_cast<int>(G.rows()); }
  void validate() const;
};

double objective(const QpProblem& qp, const Eigen::VectorXd& w);

enum class QpStatus { solved, max_iter, infeasible };
std::string to_string(QpStatus s);

struct KktResiduals {
  double stationarity = 0.0;     // |P w + q + G' lambda|_inf
  double primal = 0.0;           // max(0, max_i (G w - h)_i)
  double dual = 0.0;             // max(0, max_i -lambda_i)
  double complementarity = 0.0;  // max_i |lambda_i (G w - h)_i|

  double max() const;
};

/// Checks a candidate primal/dual pair against the first-order optimality
/// conditions. Independent of the solver's internal bookkeeping.
KktResiduals kkt_residuals(const QpProblem& qp, const Eigen::VectorXd& w,
                           const Eigen::VectorXd& duals);

struct QpSolution {
  Eigen::VectorXd w;
  Eigen::VectorXd duals;
  QpStatus status = QpStatus::max_iter;
  KktResiduals kkt;
  int iterations = 0;
};

struct QpSettings {
  double tol = 1e-6;
  int max_iter = 4000;
  double sigma = 1e-6;  // proximal term on the w update
  double rho = 0.1;     // constraint penalty (rescaled by residual balancing)
  double alpha = 1.6;   // over-relaxation
  int check_every = 25;
};

/// Operator-splitting solver: alternates a proximal w-update (one cached
/// Cholesky solve of P + sigma I + rho G'G) with a projection of the
/// constraint slacks, then polishes the detected active set through an
/// exact KKT solve. The penalty is fixed between periodic residual-balance
/// rescales. Instances own their workspace; no shared state.
class QpSolver {
 public:
  explicit QpSolver(QpSettings settings = {});

  QpSolution solve(const QpProblem& qp);
  QpSolution solve(const QpProblem& qp, const Eigen::VectorXd& w0,
                   const Eigen::VectorXd& duals0);

  const QpSettings& settings() const { return settings_; }

 private:
  bool polish(const QpProblem& qp, const Eigen::LLT<Eigen::MatrixXd>& p_llt,
              const Eigen::VectorXd& w, const Eigen::VectorXd& y, Eigen::VectorXd& w_out,
              Eigen::VectorXd& y_out) const;

  QpSettings settings_;
};

}  // namespace kbmpc::qp
