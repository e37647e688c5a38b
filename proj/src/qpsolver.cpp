#include "kbmpc/qpsolver.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace kbmpc::qp {

void QpProblem::validate() const {
  if (P.rows() != P.cols()) throw std::invalid_argument("QpProblem: P must be square");
  if (q.size() != P.rows()) throw std::invalid_argument("QpProblem: q length mismatch");
  if (G.rows() != h.size()) throw std::invalid_argument("QpProblem: G/h row mismatch");
  if (G.rows() > 0 && G.cols() != P.rows())
    throw std::invalid_argument("QpProblem: G column mismatch");
  if (!P.allFinite() || !q.allFinite() || !G.allFinite() || !h.allFinite())
    throw std::invalid_argument("QpProblem: non-finite entries");
  if ((P - P.transpose()).cwiseAbs().maxCoeff() > 1e-10)
    throw std::invalid_argument("QpProblem: P is not symmetric");
}

double objective(const QpProblem& qp, const Eigen::VectorXd& w) {
  return 0.5 * w.dot(qp.P * w) + qp.q.dot(w);
}

std::string to_string(QpStatus s) {
  switch (s) {
    case QpStatus::solved: return "solved";
    case QpStatus::max_iter: return "max_iter";
    case QpStatus::infeasible: return "infeasible";
  }
  return "unknown";
}

double KktResiduals::max() const {
  return std::max(std::max(stationarity, primal), std::max(dual, complementarity));
}

KktResiduals kkt_residuals(const QpProblem& qp, const Eigen::VectorXd& w,
                           const Eigen::VectorXd& duals) {
  KktResiduals r;
  Eigen::VectorXd grad = qp.P * w + qp.q;
  if (duals.size() > 0) grad.noalias() += qp.G.transpose() * duals;
  r.stationarity = grad.cwiseAbs().maxCoeff();
  if (qp.n_ineq() > 0) {
    const Eigen::VectorXd slack = qp.G * w - qp.h;  // feasible iff <= 0
    r.primal = std::max(0.0, slack.maxCoeff());
    r.dual = std::max(0.0, -duals.minCoeff());
    r.complementarity = (duals.array() * slack.array()).abs().maxCoeff();
  }
  return r;
}

QpSolver::QpSolver(QpSettings settings) : settings_(settings) {
  if (!(settings_.tol > 0) || settings_.max_iter < 1 || !(settings_.sigma > 0) ||
      !(settings_.rho > 0) || settings_.check_every < 1)
    throw std::invalid_argument("QpSolver: bad settings");
}

QpSolution QpSolver::solve(const QpProblem& qp) {
  return solve(qp, Eigen::VectorXd::Zero(qp.n()), Eigen::VectorXd::Zero(qp.n_ineq()));
}

// Exact KKT solve on the active set guessed from the iterate: rows whose
// dual outweighs the slack. Succeeds only if the resulting pair actually
// satisfies the optimality conditions; the caller keeps its iterate
// otherwise.
bool QpSolver::polish(const QpProblem& qp, const Eigen::LLT<Eigen::MatrixXd>& p_llt,
                      const Eigen::VectorXd& w, const Eigen::VectorXd& y,
                      Eigen::VectorXd& w_out, Eigen::VectorXd& y_out) const {
  const int mi = qp.n_ineq();
  const Eigen::VectorXd slack = qp.h - qp.G * w;
  std::vector<int> active;
  for (int i = 0; i < mi; ++i)
    if (y[i] > slack[i]) active.push_back(i);

  const Eigen::VectorXd p_inv_q = p_llt.solve(qp.q);
  Eigen::VectorXd lam;
  // A wrong guess shows up as a negative multiplier; drop those rows and
  // retry a couple of times before giving up.
  for (int pass = 0; pass < 3; ++pass) {
    const int a = static_cast<int>(active.size());
    if (a == 0) break;
    Eigen::MatrixXd ga(a, qp.n());
    Eigen::VectorXd ha(a);
    for (int i = 0; i < a; ++i) {
      ga.row(i) = qp.G.row(active[i]);
      ha[i] = qp.h[active[i]];
    }
    const Eigen::MatrixXd x = p_llt.solve(ga.transpose());  // P^-1 G_A'
    const Eigen::MatrixXd s = ga * x;
    const Eigen::VectorXd rhs = -(ha + ga * p_inv_q);
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
    if (ldlt.info() != Eigen::Success) return false;
    lam = ldlt.solve(rhs);
    if ((s * lam - rhs).cwiseAbs().maxCoeff() > 1e-8 * (rhs.cwiseAbs().maxCoeff() + 1.0))
      return false;  // active rows dependent; the solve is unreliable
    if (lam.minCoeff() >= -settings_.tol) break;
    std::vector<int> keep;
    for (int i = 0; i < a; ++i)
      if (lam[i] > -settings_.tol) keep.push_back(active[i]);
    if (keep.size() == active.size()) break;
    active = std::move(keep);
    lam.resize(0);
  }

  y_out = Eigen::VectorXd::Zero(mi);
  Eigen::VectorXd q_eff = qp.q;
  for (size_t i = 0; i < active.size(); ++i) {
    const double li = std::max(0.0, lam.size() > 0 ? lam[static_cast<int>(i)] : 0.0);
    y_out[active[i]] = li;
    q_eff.noalias() += li * qp.G.row(active[i]).transpose();
  }
  w_out = -p_llt.solve(q_eff);
  return true;
}

QpSolution QpSolver::solve(const QpProblem& qp, const Eigen::VectorXd& w0,
                           const Eigen::VectorXd& duals0) {
  qp.validate();
  const int n = qp.n();
  const int mi = qp.n_ineq();
  if (w0.size() != n || duals0.size() != mi)
    throw std::invalid_argument("QpSolver: warm-start size mismatch");

  const Eigen::LLT<Eigen::MatrixXd> p_llt(qp.P);
  if (p_llt.info() != Eigen::Success)
    throw NumericalError("QpSolver: P is not positive definite");

  QpSolution sol;
  if (mi == 0) {
    sol.w = p_llt.solve(-qp.q);
    sol.duals.resize(0);
    sol.kkt = kkt_residuals(qp, sol.w, sol.duals);
    sol.status = QpStatus::solved;
    return sol;
  }

  const double tol = settings_.tol;
  double rho = settings_.rho;
  const double sigma = settings_.sigma;
  const double alpha = settings_.alpha;
  const Eigen::MatrixXd gtg = qp.G.transpose() * qp.G;
  const Eigen::MatrixXd reg =
      qp.P + sigma * Eigen::MatrixXd::Identity(n, n);
  Eigen::LLT<Eigen::MatrixXd> llt(reg + rho * gtg);

  Eigen::VectorXd w = w0;
  Eigen::VectorXd y = duals0.cwiseMax(0.0);
  Eigen::VectorXd z = (qp.G * w).cwiseMin(qp.h);
  Eigen::VectorXd y_mark = y;  // infeasibility certificate accumulator

  for (int it = 1; it <= settings_.max_iter; ++it) {
    const Eigen::VectorXd rhs =
        sigma * w - qp.q + qp.G.transpose() * (rho * z - y);
    const Eigen::VectorXd wt = llt.solve(rhs);
    const Eigen::VectorXd zt = qp.G * wt;
    w = alpha * wt + (1.0 - alpha) * w;
    const Eigen::VectorXd v = alpha * zt + (1.0 - alpha) * z + y / rho;
    z = v.cwiseMin(qp.h);
    y = rho * (v - z);  // nonnegative by construction
    sol.iterations = it;

    if (it % settings_.check_every != 0 && it != settings_.max_iter) continue;

    const KktResiduals now = kkt_residuals(qp, w, y);
    if (now.max() <= tol) {
      sol.w = w;
      sol.duals = y;
      sol.kkt = now;
      sol.status = QpStatus::solved;
      Eigen::VectorXd wp, yp;
      if (polish(qp, p_llt, w, y, wp, yp)) {
        const KktResiduals pk = kkt_residuals(qp, wp, yp);
        if (pk.max() <= now.max()) {
          sol.w = wp;
          sol.duals = yp;
          sol.kkt = pk;
        }
      }
      return sol;
    }

    const double r_prim = (qp.G * w - z).cwiseAbs().maxCoeff();
    const double r_dual = now.stationarity;
    if (r_prim <= tol && r_dual <= 100 * tol) {
      Eigen::VectorXd wp, yp;
      if (polish(qp, p_llt, w, y, wp, yp)) {
        const KktResiduals pk = kkt_residuals(qp, wp, yp);
        if (pk.max() <= tol) {
          sol.w = wp;
          sol.duals = yp;
          sol.kkt = pk;
          sol.status = QpStatus::solved;
          return sol;
        }
      }
    }

    // Primal infeasibility certificate: a direction v >= 0 with G'v = 0
    // and h'v < 0 proves {G w <= h} is empty.
    const Eigen::VectorXd dy = y - y_mark;
    y_mark = y;
    const double dy_norm = dy.cwiseAbs().maxCoeff();
    if (dy_norm > 1e-12) {
      const Eigen::VectorXd cert = dy / dy_norm;
      if (cert.minCoeff() >= -1e-8 &&
          (qp.G.transpose() * cert).cwiseAbs().maxCoeff() <= 1e-8 &&
          qp.h.dot(cert) < -1e-8) {
        sol.w = w;
        sol.duals = y;
        sol.kkt = now;
        sol.status = QpStatus::infeasible;
        return sol;
      }
    }

    // Residual balancing: nudge the penalty toward the lagging residual.
    if (r_prim > 10 * r_dual && rho < 1e6) {
      rho = std::min(rho * 5, 1e6);
      llt.compute(reg + rho * gtg);
      y_mark = y;
    } else if (r_dual > 10 * r_prim && rho > 1e-6) {
      rho = std::max(rho / 5, 1e-6);
      llt.compute(reg + rho * gtg);
      y_mark = y;
    }
  }

  sol.w = w;
  sol.duals = y;
  sol.kkt = kkt_residuals(qp, w, y);
  sol.status = QpStatus::max_iter;
  return sol;
}

}  // namespace kbmpc::qp
