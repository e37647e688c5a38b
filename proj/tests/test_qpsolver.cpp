#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/LU>

#include <cmath>
#include <limits>
#include <vector>

#include "kbmpc/qpsolver.hpp"

using namespace kbmpc;
using namespace kbmpc::qp;

namespace {

Eigen::MatrixXd rand_mat(int r, int c, double scale, Rng& rng) {
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = scale * rng.uniform(-1, 1);
  return m;
}

Eigen::VectorXd rand_vec(int n, double scale, Rng& rng) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = scale * rng.uniform(-1, 1);
  return v;
}

// Strictly convex instance with a guaranteed interior point.
QpProblem random_qp(int n, int mi, Rng& rng) {
  QpProblem qp;
  const Eigen::MatrixXd m = rand_mat(n, n, 1.0, rng);
  qp.P = m.transpose() * m + 0.3 * n * Eigen::MatrixXd::Identity(n, n);
  qp.q = rand_vec(n, 2.0, rng);
  qp.G = rand_mat(mi, n, 1.0, rng);
  const Eigen::VectorXd anchor = rand_vec(n, 1.0, rng);
  qp.h = qp.G * anchor;
  for (int i = 0; i < mi; ++i) qp.h[i] += rng.uniform(0.05, 1.5);
  return qp;
}

// Global optimum by enumerating candidate active sets and solving each
// equality-constrained KKT system directly. Tractable for small instances
// only; the unique strictly-convex optimum is the best KKT-consistent
// candidate.
double brute_force_objective(const QpProblem& qp) {
  const int n = qp.n();
  const int mi = qp.n_ineq();
  double best = std::numeric_limits<double>::infinity();
  for (unsigned mask = 0; mask < (1u << mi); ++mask) {
    std::vector<int> act;
    for (int i = 0; i < mi; ++i)
      if (mask & (1u << i)) act.push_back(i);
    const int a = static_cast<int>(act.size());
    if (a > n) continue;
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + a, n + a);
    kkt.topLeftCorner(n, n) = qp.P;
    Eigen::VectorXd rhs(n + a);
    rhs.head(n) = -qp.q;
    for (int i = 0; i < a; ++i) {
      kkt.block(n + i, 0, 1, n) = qp.G.row(act[i]);
      kkt.block(0, n + i, n, 1) = qp.G.row(act[i]).transpose();
      rhs[n + i] = qp.h[act[i]];
    }
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
    if (!lu.isInvertible()) continue;
    const Eigen::VectorXd sol = lu.solve(rhs);
    const Eigen::VectorXd w = sol.head(n);
    const Eigen::VectorXd lam = sol.tail(a);
    if (a > 0 && lam.minCoeff() < -1e-9) continue;
    if (mi > 0 && (qp.G * w - qp.h).maxCoeff() > 1e-9) continue;
    best = std::min(best, objective(qp, w));
  }
  return best;
}

}  // namespace

TEST_CASE("unconstrained problems are solved in closed form") {
  QpProblem qp;
  qp.P = Eigen::MatrixXd::Identity(2, 2);
  qp.q = Eigen::Vector2d(-1, -2);
  qp.G.resize(0, 2);
  qp.h.resize(0);
  QpSolver solver;
  const QpSolution sol = solver.solve(qp);
  CHECK(sol.status == QpStatus::solved);
  CHECK(sol.w[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sol.w[1] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(sol.duals.size() == 0);

  Rng rng(41);
  const QpProblem big = random_qp(17, 0, rng);
  const QpSolution s2 = solver.solve(big);
  const Eigen::VectorXd direct = Eigen::LLT<Eigen::MatrixXd>(big.P).solve(-big.q);
  CHECK((s2.w - direct).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("halfspace projection pins the optimum and dual on the boundary") {
  QpProblem qp;
  qp.P = Eigen::MatrixXd::Identity(2, 2);
  qp.q = Eigen::Vector2d::Zero();
  qp.G = Eigen::MatrixXd::Zero(1, 2);
  qp.G(0, 0) = 1.0;
  qp.h = Eigen::VectorXd::Constant(1, -1.0);
  QpSolver solver;
  const QpSolution sol = solver.solve(qp);
  REQUIRE(sol.status == QpStatus::solved);
  CHECK(sol.w[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(std::abs(sol.w[1]) < 1e-6);
  CHECK(sol.duals[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(sol.kkt.max() <= solver.settings().tol);
}

TEST_CASE("random instances match a brute-force active-set oracle") {
  Rng rng(42);
  QpSolver solver;
  int solved = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform(0, 3.999));      // 2..5
    const int mi = 1 + static_cast<int>(rng.uniform(0, 10.999));    // 1..11
    const QpProblem qp = random_qp(n, mi, rng);
    const QpSolution sol = solver.solve(qp);
    REQUIRE(sol.status == QpStatus::solved);
    CHECK(sol.kkt.max() <= solver.settings().tol);
    const double best = brute_force_objective(qp);
    CHECK(objective(qp, sol.w) == doctest::Approx(best).epsilon(1e-6));
    ++solved;
  }
  CHECK(solved == 60);
}

TEST_CASE("larger instances satisfy the optimality conditions") {
  Rng rng(43);
  QpSolver solver;
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 6 + static_cast<int>(rng.uniform(0, 34.999));    // 6..40
    const int mi = n + static_cast<int>(rng.uniform(0, 200.999 - n));
    const QpProblem qp = random_qp(n, std::min(mi, 200), rng);
    const QpSolution sol = solver.solve(qp);
    REQUIRE(sol.status == QpStatus::solved);
    // Residuals from the independent checker, not the solver's own.
    const KktResiduals kkt = kkt_residuals(qp, sol.w, sol.duals);
    CHECK(kkt.max() <= solver.settings().tol);
  }
}

TEST_CASE("scaling the objective leaves the minimizer unchanged") {
  Rng rng(44);
  const QpProblem qp = random_qp(8, 20, rng);
  QpSolver solver;
  const QpSolution base = solver.solve(qp);
  REQUIRE(base.status == QpStatus::solved);
  for (double c : {1e3, 1e-3}) {
    QpProblem scaled = qp;
    scaled.P *= c;
    scaled.q *= c;
    const QpSolution sol = solver.solve(scaled);
    REQUIRE(sol.status == QpStatus::solved);
    CHECK((sol.w - base.w).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("solves are deterministic") {
  Rng rng(45);
  const QpProblem qp = random_qp(12, 40, rng);
  QpSolver solver;
  const QpSolution a = solver.solve(qp);
  const QpSolution b = solver.solve(qp);
  CHECK(a.iterations == b.iterations);
  CHECK((a.w - b.w).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.duals - b.duals).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("warm starts are accepted and reach the same optimum") {
  Rng rng(46);
  const QpProblem qp = random_qp(10, 30, rng);
  QpSolver solver;
  const QpSolution cold = solver.solve(qp);
  REQUIRE(cold.status == QpStatus::solved);

  QpProblem nudged = qp;
  nudged.q += rand_vec(10, 0.01, rng);
  const QpSolution fresh = solver.solve(nudged);
  const QpSolution warm = solver.solve(nudged, cold.w, cold.duals);
  REQUIRE(fresh.status == QpStatus::solved);
  REQUIRE(warm.status == QpStatus::solved);
  CHECK((warm.w - fresh.w).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(warm.iterations <= fresh.iterations);

  CHECK_THROWS_AS(solver.solve(qp, Eigen::VectorXd::Zero(3), cold.duals),
                  std::invalid_argument);
}

TEST_CASE("contradictory constraints are reported, not fatal") {
  QpProblem qp;
  qp.P = Eigen::MatrixXd::Identity(1, 1);
  qp.q = Eigen::VectorXd::Zero(1);
  qp.G.resize(2, 1);
  qp.G << 1.0, -1.0;
  qp.h.resize(2);
  qp.h << -1.0, -1.0;  // w <= -1 and w >= 1
  QpSolver solver;
  const QpSolution sol = solver.solve(qp);
  CHECK(sol.status == QpStatus::infeasible);
  CHECK(to_string(sol.status) == "infeasible");
}

TEST_CASE("invalid problems are rejected up front") {
  QpSolver solver;
  QpProblem qp;
  qp.P = Eigen::MatrixXd::Identity(2, 2);
  qp.P(0, 0) = -1.0;  // indefinite
  qp.q = Eigen::Vector2d::Zero();
  qp.G.resize(0, 2);
  qp.h.resize(0);
  CHECK_THROWS_AS(solver.solve(qp), NumericalError);

  qp.P = Eigen::MatrixXd::Identity(2, 2);
  qp.P(0, 1) = 0.5;  // asymmetric
  CHECK_THROWS_AS(solver.solve(qp), std::invalid_argument);

  qp.P = Eigen::MatrixXd::Identity(2, 2);
  qp.q[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(solver.solve(qp), std::invalid_argument);
}

TEST_CASE("iteration budget exhaustion is reported honestly") {
  Rng rng(47);
  const QpProblem qp = random_qp(20, 60, rng);
  QpSettings s;
  s.max_iter = 3;
  QpSolver solver(s);
  const QpSolution sol = solver.solve(qp);
  CHECK(sol.status == QpStatus::max_iter);
  CHECK(sol.iterations == 3);
}

TEST_CASE("the residual checker reproduces hand-computed values") {
  QpProblem qp;
  qp.P = Eigen::MatrixXd::Identity(2, 2);
  qp.q = Eigen::Vector2d::Zero();
  qp.G = Eigen::MatrixXd::Zero(1, 2);
  qp.G(0, 0) = 1.0;
  qp.h = Eigen::VectorXd::Zero(1);
  Eigen::VectorXd w(2), lam(1);
  w << 0.5, 0.0;
  lam << 0.2;
  const KktResiduals r = kkt_residuals(qp, w, lam);
  CHECK(r.stationarity == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(r.primal == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r.dual == 0.0);
  CHECK(r.complementarity == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(r.max() == doctest::Approx(0.7).epsilon(1e-15));
}
