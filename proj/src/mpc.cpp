#include "kbmpc/mpc.hpp"

#include "kbmpc/bilinear.hpp"
#include "kbmpc/lie.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace kbmpc::mpc {

namespace {

constexpr double kTwoPi = 2.0 * M_PI;

void check_psd(const Eigen::MatrixXd& w, const char* name) {
  if (w.rows() != w.cols()) throw std::invalid_argument(std::string(name) + " must be square");
  if ((w - w.transpose()).cwiseAbs().maxCoeff() > 1e-9)
    throw std::invalid_argument(std::string(name) + " must be symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(w, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-9)
    throw std::invalid_argument(std::string(name) + " must be positive semidefinite");
}

Control clamp_control(const Control& u, const Limits& lim) {
  Control out;
  out.omega = std::clamp(u.omega, -lim.omega_max, lim.omega_max);
  out.a = std::clamp(u.a, -lim.a_max, lim.a_max);
  return out;
}

/// Shifts the reference headings by whole turns so each sample continues
/// the previous one, anchored at the measured output. Keeps the quadratic
/// cost free of 2*pi jumps when either side wanders across the cut.
std::vector<Eigen::VectorXd> unwrap_refs(const std::vector<OutputVec>& refs,
                                         const Eigen::VectorXd& y_now) {
  std::vector<Eigen::VectorXd> out(refs.size());
  for (size_t k = 0; k < refs.size(); ++k) out[k] = refs[k];
  for (int ci : {2, 3}) {
    double prev = y_now(ci);
    for (auto& r : out) {
      r(ci) -= kTwoPi * std::round((r(ci) - prev) / kTwoPi);
      prev = r(ci);
    }
  }
  return out;
}

/// One frozen prediction model along the estimate: per-stage transition
/// dz+ = A_hat dz + B_hat du + d plus outputs and output Jacobians at
/// every stage including the terminal one.
struct StageModel {
  std::vector<Eigen::MatrixXd> A_hat;  // horizon entries
  std::vector<Eigen::MatrixXd> B_hat;
  std::vector<Eigen::VectorXd> d;
  std::vector<Eigen::VectorXd> y_hat;  // horizon+1 entries
  std::vector<Eigen::MatrixXd> C;
};

StageModel bilinear_stages(const edmd::BilinearModel& model, const IterationState& st) {
  const int np = static_cast<int>(st.u_hat.size());
  StageModel sm;
  sm.A_hat.resize(np);
  sm.B_hat.resize(np);
  sm.d.resize(np);
  sm.y_hat.resize(np + 1);
  sm.C.assign(np + 1, model.C());
  for (int k = 0; k < np; ++k) {
    bilinear::LinearizedStep lin = bilinear::linearize(model, st.z_hat[k], st.u_hat[k]);
    sm.A_hat[k] = std::move(lin.A_hat);
    sm.B_hat[k] = std::move(lin.B_hat);
    sm.d[k] = bilinear::step_bilinear(model, st.z_hat[k], st.u_hat[k]) - st.z_hat[k + 1];
  }
  for (int k = 0; k <= np; ++k) sm.y_hat[k] = st.z_hat[k].head(model.n_y);
  return sm;
}

Condensation condense_stages(const StageModel& sm, const std::vector<Eigen::VectorXd>& refs,
                             const std::vector<Eigen::VectorXd>& u_hat, const MpcConfig& cfg,
                             const ConstraintSet& con) {
  const int np = cfg.horizon;
  const int n = static_cast<int>(sm.C[0].cols());
  const int m = static_cast<int>(sm.B_hat[0].cols());
  const int nd = np * m;

  Condensation out;
  out.dz_map = Eigen::MatrixXd::Zero((np + 1) * n, nd);
  out.dz_offset = Eigen::VectorXd::Zero((np + 1) * n);
  for (int k = 0; k < np; ++k) {
    out.dz_map.middleRows((k + 1) * n, n) = sm.A_hat[k] * out.dz_map.middleRows(k * n, n);
    out.dz_map.block((k + 1) * n, k * m, n, m) += sm.B_hat[k];
    out.dz_offset.segment((k + 1) * n, n) =
        sm.A_hat[k] * out.dz_offset.segment(k * n, n) + sm.d[k];
  }

  // tracking cost over the increment: outputs enter through the rolled-up
  // sensitivity, inputs directly block by block
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(nd, nd);
  Eigen::VectorXd q = Eigen::VectorXd::Zero(nd);
  std::vector<Eigen::MatrixXd> t(np + 1);       // output sensitivities
  std::vector<Eigen::VectorXd> y_off(np + 1);   // predicted outputs at du = 0
  for (int k = 0; k <= np; ++k) {
    t[k] = sm.C[k] * out.dz_map.middleRows(k * n, n);
    y_off[k] = sm.y_hat[k] + sm.C[k] * out.dz_offset.segment(k * n, n);
    const Eigen::MatrixXd& wk = (k == np) ? cfg.Q_terminal : cfg.Q;
    Eigen::VectorXd o = y_off[k] - refs[k];
    p += 2.0 * t[k].transpose() * wk * t[k];
    q += 2.0 * t[k].transpose() * (wk * o);
    out.cost_at_zero += o.dot(wk * o);
  }
  for (int k = 0; k < np; ++k) {
    p.block(k * m, k * m, m, m) += 2.0 * cfg.R;
    q.segment(k * m, m) += 2.0 * (cfg.R * u_hat[k]);
    out.cost_at_zero += u_hat[k].dot(cfg.R * u_hat[k]);
  }
  p = 0.5 * (p + p.transpose()).eval();  // scrub summation-order asymmetry

  std::vector<Eigen::RowVectorXd> rows;
  std::vector<double> rhs;
  auto push_row = [&](Eigen::RowVectorXd g, double h) {
    if (g.cwiseAbs().maxCoeff() == 0.0) return;  // decision-free constant
    rows.push_back(std::move(g));
    rhs.push_back(h);
  };
  for (int k = 0; k < np; ++k) {
    const StageConstraint& sc = con.stage[k];
    for (int r = 0; r < sc.l.size(); ++r) {
      Eigen::RowVectorXd g = sc.E.row(r) * t[k];
      g.segment(k * m, m) += sc.F.row(r);
      push_row(std::move(g),
               sc.l(r) - sc.E.row(r).dot(y_off[k]) - sc.F.row(r).dot(u_hat[k]));
    }
  }
  for (int r = 0; r < con.l_terminal.size(); ++r)
    push_row(con.E_terminal.row(r) * t[np], con.l_terminal(r) - con.E_terminal.row(r).dot(y_off[np]));

  out.problem.P = std::move(p);
  out.problem.q = std::move(q);
  out.problem.G = Eigen::MatrixXd::Zero(static_cast<int>(rows.size()), nd);
  out.problem.h = Eigen::VectorXd::Zero(static_cast<int>(rows.size()));
  for (size_t r = 0; r < rows.size(); ++r) {
    out.problem.G.row(static_cast<int>(r)) = rows[r];
    out.problem.h(static_cast<int>(r)) = rhs[r];
  }
  return out;
}

double tracking_cost(const StageModel& sm, const std::vector<Eigen::VectorXd>& refs,
                     const std::vector<Eigen::VectorXd>& u_hat, const MpcConfig& cfg) {
  double j = 0.0;
  for (int k = 0; k <= cfg.horizon; ++k) {
    const Eigen::MatrixXd& wk = (k == cfg.horizon) ? cfg.Q_terminal : cfg.Q;
    Eigen::VectorXd o = sm.y_hat[k] - refs[k];
    j += o.dot(wk * o);
  }
  for (int k = 0; k < cfg.horizon; ++k) j += u_hat[k].dot(cfg.R * u_hat[k]);
  return j;
}

/// Worst violation of the constraint rows by the estimate itself, skipping
/// stage 0 whose outputs are measured rather than decided.
double predicted_violation(const StageModel& sm, const std::vector<Eigen::VectorXd>& u_hat,
                           const ConstraintSet& con) {
  const int np = static_cast<int>(u_hat.size());
  double worst = 0.0;
  for (int k = 1; k < np; ++k) {
    const StageConstraint& sc = con.stage[k];
    Eigen::VectorXd slack = sc.l - sc.E * sm.y_hat[k] - sc.F * u_hat[k];
    if (slack.size() > 0) worst = std::max(worst, -slack.minCoeff());
  }
  if (con.l_terminal.size() > 0) {
    Eigen::VectorXd slack = con.l_terminal - con.E_terminal * sm.y_hat[np];
    worst = std::max(worst, -slack.minCoeff());
  }
  return std::max(worst, 0.0);
}

using StageBuilder = std::function<StageModel(const IterationState&)>;

/// Shared relinearize-solve-update loop of both controllers. Refines the
/// estimate in place; a failed QP stops the loop and raises the fallback
/// flag (updates already applied are kept: they satisfied their QP).
void inner_loop(const StageBuilder& build, IterationState& st,
                const std::vector<Eigen::VectorXd>& refs, const MpcConfig& cfg,
                const ConstraintSet& con, StepDiagnostics& diag) {
  const int np = cfg.horizon;
  const int n = static_cast<int>(st.z_hat[0].size());
  const int m = static_cast<int>(st.u_hat[0].size());
  qp::QpSolver solver;
  Eigen::VectorXd warm_duals;
  for (int i = 0; i < cfg.iter_max; ++i) {
    StageModel sm = build(st);
    Condensation cond = condense_stages(sm, refs, st.u_hat, cfg, con);
    diag.cost_per_iter.push_back(cond.cost_at_zero);
    qp::QpSolution sol =
        (warm_duals.size() == cond.problem.n_ineq())
            ? solver.solve(cond.problem, Eigen::VectorXd::Zero(cond.problem.n()), warm_duals)
            : solver.solve(cond.problem);
    diag.qp_status = sol.status;
    if (sol.status != qp::QpStatus::solved) {
      diag.fallback = true;
      break;
    }
    for (int k = 0; k < np; ++k) st.u_hat[k] += sol.w.segment(k * m, m);
    for (int k = 0; k <= np; ++k)
      st.z_hat[k] += cond.dz_map.middleRows(k * n, n) * sol.w + cond.dz_offset.segment(k * n, n);
    st.iteration = i + 1;
    diag.inner_iters = i + 1;
    diag.du_inf = sol.w.lpNorm<Eigen::Infinity>();
    diag.du_per_iter.push_back(diag.du_inf);
    warm_duals = std::move(sol.duals);
    if (diag.du_inf <= cfg.eps_conv) break;
  }
  StageModel sm = build(st);
  diag.cost = tracking_cost(sm, refs, st.u_hat, cfg);
  diag.predicted_violation = predicted_violation(sm, st.u_hat, con);
}

IterationState shift_estimate(const IterationState& st) {
  const int np = static_cast<int>(st.u_hat.size());
  IterationState out;
  out.z_hat.resize(np + 1);
  out.u_hat.resize(np);
  for (int k = 0; k < np; ++k) out.z_hat[k] = st.z_hat[k + 1];
  out.z_hat[np] = st.z_hat[np];
  for (int k = 0; k + 1 < np; ++k) out.u_hat[k] = st.u_hat[k + 1];
  out.u_hat[np - 1] = st.u_hat[np - 1];
  out.iteration = 0;
  return out;
}

bool warm_shape_ok(const IterationState& warm, int np, int n, int m) {
  if (static_cast<int>(warm.z_hat.size()) != np + 1) return false;
  if (static_cast<int>(warm.u_hat.size()) != np) return false;
  for (const auto& z : warm.z_hat)
    if (z.size() != n) return false;
  for (const auto& u : warm.u_hat)
    if (u.size() != m) return false;
  return true;
}

/// Nominal rig dynamics split for the locally linearized baseline: one
/// tape evaluating drift and input fields together, one for the outputs.
struct NominalTapes {
  expr::Tape dyn;  // f rows, then the input fields column-major
  expr::Tape out;  // pose map
  int n_x = 0;
  int m = 0;
  int n_y = 0;
};

NominalTapes make_nominal_tapes(const PlantParams& p) {
  lie::ControlAffineSystem sys = lie::tractor_trailer_nominal(p.nominal());
  std::vector<expr::Expr> dyn_fields = sys.f;
  for (const auto& gj : sys.g)
    for (const auto& e : gj) dyn_fields.push_back(e);
  NominalTapes tapes;
  tapes.dyn = expr::Tape(dyn_fields, sys.n_x);
  tapes.out = expr::Tape(sys.h, sys.n_x);
  tapes.n_x = sys.n_x;
  tapes.m = sys.m;
  tapes.n_y = sys.n_y;
  return tapes;
}

Eigen::VectorXd euler_step_nominal(const NominalTapes& tapes, const Eigen::VectorXd& x,
                                   const Eigen::VectorXd& u, double ts) {
  Eigen::VectorXd vals(tapes.n_x * (1 + tapes.m));
  std::vector<double> scratch;
  tapes.dyn.eval({x.data(), static_cast<size_t>(x.size())},
                 {vals.data(), static_cast<size_t>(vals.size())}, scratch);
  Eigen::VectorXd xdot = vals.head(tapes.n_x);
  for (int j = 0; j < tapes.m; ++j) xdot += u(j) * vals.segment(tapes.n_x * (1 + j), tapes.n_x);
  return x + ts * xdot;
}

StageModel nominal_stages(const NominalTapes& tapes, const IterationState& st, double ts) {
  const int np = static_cast<int>(st.u_hat.size());
  const int nx = tapes.n_x;
  const int m = tapes.m;
  StageModel sm;
  sm.A_hat.resize(np);
  sm.B_hat.resize(np);
  sm.d.resize(np);
  sm.y_hat.resize(np + 1);
  sm.C.resize(np + 1);
  Eigen::VectorXd vals(nx * (1 + m));
  Eigen::MatrixXd jac;
  Eigen::VectorXd yv(tapes.n_y);
  Eigen::MatrixXd yjac;
  for (int k = 0; k <= np; ++k) {
    const Eigen::VectorXd& x = st.z_hat[k];
    tapes.out.eval_with_jacobian({x.data(), static_cast<size_t>(x.size())},
                                 {yv.data(), static_cast<size_t>(yv.size())}, yjac);
    sm.y_hat[k] = yv;
    sm.C[k] = yjac;
    if (k == np) break;
    tapes.dyn.eval_with_jacobian({x.data(), static_cast<size_t>(x.size())},
                                 {vals.data(), static_cast<size_t>(vals.size())}, jac);
    const Eigen::VectorXd& u = st.u_hat[k];
    Eigen::VectorXd xdot = vals.head(nx);
    Eigen::MatrixXd jx = jac.topRows(nx);
    Eigen::MatrixXd gmat(nx, m);
    for (int j = 0; j < m; ++j) {
      gmat.col(j) = vals.segment(nx * (1 + j), nx);
      xdot += u(j) * gmat.col(j);
      jx += u(j) * jac.middleRows(nx * (1 + j), nx);
    }
    sm.A_hat[k] = Eigen::MatrixXd::Identity(nx, nx) + ts * jx;
    sm.B_hat[k] = ts * gmat;
    sm.d[k] = x + ts * xdot - st.z_hat[k + 1];
  }
  return sm;
}

long long elapsed_us(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() -
                                                               t0)
      .count();
}

}  // namespace

MpcConfig MpcConfig::defaults() {
  MpcConfig cfg;
  Eigen::VectorXd qd(8);
  qd << 10, 10, 1, 1, 0, 0, 10, 10;
  cfg.Q = qd.asDiagonal();
  cfg.Q_terminal = 10.0 * cfg.Q;
  Eigen::Vector2d rd(0.01, 1.0);
  cfg.R = rd.asDiagonal();
  return cfg;
}

void MpcConfig::validate() const {
  if (horizon < 1) throw std::invalid_argument("MpcConfig: horizon must be >= 1");
  if (iter_max < 1) throw std::invalid_argument("MpcConfig: iter_max must be >= 1");
  if (!(eps_conv > 0.0)) throw std::invalid_argument("MpcConfig: eps_conv must be positive");
  if (!(ts > 0.0)) throw std::invalid_argument("MpcConfig: ts must be positive");
  check_psd(Q, "MpcConfig: Q");
  check_psd(Q_terminal, "MpcConfig: Q_terminal");
  check_psd(R, "MpcConfig: R");
  if (Q.rows() != Q_terminal.rows())
    throw std::invalid_argument("MpcConfig: Q and Q_terminal disagree on size");
  limits.validate();
}

void ConstraintSet::validate(int n_y, int m, int horizon) const {
  if (static_cast<int>(stage.size()) != horizon)
    throw std::invalid_argument("ConstraintSet: one stage entry per horizon step expected");
  for (const StageConstraint& sc : stage) {
    if (sc.E.cols() != n_y || sc.F.cols() != m)
      throw std::invalid_argument("ConstraintSet: stage row width mismatch");
    if (sc.E.rows() != sc.l.size() || sc.F.rows() != sc.l.size())
      throw std::invalid_argument("ConstraintSet: stage row count mismatch");
  }
  if (E_terminal.cols() != n_y || E_terminal.rows() != l_terminal.size())
    throw std::invalid_argument("ConstraintSet: terminal row mismatch");
}

ConstraintSet make_constraints(const Limits& lim, int horizon) {
  lim.validate();
  if (horizon < 1) throw std::invalid_argument("make_constraints: horizon must be >= 1");
  Eigen::MatrixXd e = Eigen::MatrixXd::Zero(6, 8);
  Eigen::VectorXd le(6);
  e(0, 4) = 1.0;               // steering tangent
  e(1, 4) = -1.0;
  e(2, 5) = 1.0;               // speed
  e(3, 5) = -1.0;
  e(4, 2) = 1.0; e(4, 3) = -1.0;   // hitch angle
  e(5, 2) = -1.0; e(5, 3) = 1.0;
  le << lim.tan_phi_max, lim.tan_phi_max, lim.v_max, lim.v_max, lim.dtheta_max, lim.dtheta_max;

  StageConstraint sc;
  sc.E = Eigen::MatrixXd::Zero(10, 8);
  sc.F = Eigen::MatrixXd::Zero(10, 2);
  sc.l = Eigen::VectorXd::Zero(10);
  sc.E.topRows(6) = e;
  sc.l.head(6) = le;
  sc.F(6, 0) = 1.0;   // steering rate
  sc.F(7, 0) = -1.0;
  sc.F(8, 1) = 1.0;   // acceleration
  sc.F(9, 1) = -1.0;
  sc.l(6) = lim.omega_max;
  sc.l(7) = lim.omega_max;
  sc.l(8) = lim.a_max;
  sc.l(9) = lim.a_max;

  ConstraintSet con;
  con.stage.assign(horizon, sc);
  con.E_terminal = e;
  con.l_terminal = le;
  return con;
}

IterationState initial_guess_lifted(const lifting::LiftingBasis& basis, const State& x0,
                                    const Control& u0, int horizon) {
  if (horizon < 1) throw std::invalid_argument("initial_guess_lifted: horizon must be >= 1");
  IterationState st;
  Eigen::VectorXd z0 = lifting::eval_psi_x(basis, x0);
  st.z_hat.assign(horizon + 1, z0);
  st.u_hat.assign(horizon, u0.vec());
  return st;
}

IterationState initial_guess_state(const State& x0, const Control& u0, int horizon) {
  if (horizon < 1) throw std::invalid_argument("initial_guess_state: horizon must be >= 1");
  IterationState st;
  st.z_hat.assign(horizon + 1, x0.vec());
  st.u_hat.assign(horizon, u0.vec());
  return st;
}

Condensation condense(const edmd::BilinearModel& model, const IterationState& state,
                      const std::vector<Eigen::VectorXd>& refs, const MpcConfig& cfg,
                      const ConstraintSet& con) {
  cfg.validate();
  model.validate();
  con.validate(model.n_y, model.m(), cfg.horizon);
  if (cfg.Q.rows() != model.n_y)
    throw std::invalid_argument("condense: Q size does not match the model outputs");
  if (cfg.R.rows() != model.m())
    throw std::invalid_argument("condense: R size does not match the model inputs");
  if (!warm_shape_ok(state, cfg.horizon, model.n(), model.m()))
    throw std::invalid_argument("condense: estimate dimensions do not match the config");
  if (static_cast<int>(refs.size()) != cfg.horizon + 1)
    throw std::invalid_argument("condense: one reference per stage expected");
  for (const auto& r : refs)
    if (r.size() != model.n_y)
      throw std::invalid_argument("condense: reference width mismatch");
  return condense_stages(bilinear_stages(model, state), refs, state.u_hat, cfg, con);
}

StepResult kbmpc_step(const edmd::BilinearModel& model, const lifting::LiftingBasis& basis,
                      const State& x0, const std::vector<OutputVec>& refs, const MpcConfig& cfg,
                      const ConstraintSet& con, IterationState warm, const Control& prev_u) {
  auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  con.validate(model.n_y, model.m(), cfg.horizon);
  if (static_cast<int>(refs.size()) != cfg.horizon + 1)
    throw std::invalid_argument("kbmpc_step: horizon+1 reference samples expected");

  Eigen::VectorXd z0 = lifting::eval_psi_x(basis, x0);
  if (!warm_shape_ok(warm, cfg.horizon, model.n(), model.m()))
    warm = initial_guess_lifted(basis, x0, prev_u, cfg.horizon);
  if ((warm.z_hat[0] - z0).lpNorm<Eigen::Infinity>() != 0.0) {
    // stale estimate (e.g. shifted from the previous step): re-roll it
    // from the measured state so the condensation drift vanishes
    warm.z_hat[0] = z0;
    for (int k = 0; k < cfg.horizon; ++k)
      warm.z_hat[k + 1] = bilinear::step_bilinear(model, warm.z_hat[k], warm.u_hat[k]);
  }
  warm.iteration = 0;

  std::vector<Eigen::VectorXd> refs_u = unwrap_refs(refs, z0.head(model.n_y));
  StepDiagnostics diag;
  inner_loop([&](const IterationState& st) { return bilinear_stages(model, st); }, warm, refs_u,
             cfg, con, diag);

  StepResult res;
  res.u = (diag.fallback && warm.iteration == 0) ? prev_u : Control::from_vec(warm.u_hat[0]);
  res.u = clamp_control(res.u, cfg.limits);
  res.warm = shift_estimate(warm);
  res.diag = std::move(diag);
  res.diag.solve_time_us = elapsed_us(t0);
  return res;
}

StepResult lmpc_step(const PlantParams& nominal, const State& x0,
                     const std::vector<OutputVec>& refs, const MpcConfig& cfg,
                     const ConstraintSet& con, IterationState warm, const Control& prev_u) {
  auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  NominalTapes tapes = make_nominal_tapes(nominal);
  con.validate(tapes.n_y, tapes.m, cfg.horizon);
  if (static_cast<int>(refs.size()) != cfg.horizon + 1)
    throw std::invalid_argument("lmpc_step: horizon+1 reference samples expected");

  Eigen::VectorXd x0v = x0.vec();
  if (!warm_shape_ok(warm, cfg.horizon, tapes.n_x, tapes.m))
    warm = initial_guess_state(x0, prev_u, cfg.horizon);
  if ((warm.z_hat[0] - x0v).lpNorm<Eigen::Infinity>() != 0.0) {
    warm.z_hat[0] = x0v;
    for (int k = 0; k < cfg.horizon; ++k)
      warm.z_hat[k + 1] = euler_step_nominal(tapes, warm.z_hat[k], warm.u_hat[k], cfg.ts);
  }
  warm.iteration = 0;

  std::vector<Eigen::VectorXd> refs_u = unwrap_refs(refs, output_map(x0, nominal));
  StepDiagnostics diag;
  inner_loop([&](const IterationState& st) { return nominal_stages(tapes, st, cfg.ts); }, warm,
             refs_u, cfg, con, diag);

  StepResult res;
  res.u = (diag.fallback && warm.iteration == 0) ? prev_u : Control::from_vec(warm.u_hat[0]);
  res.u = clamp_control(res.u, cfg.limits);
  res.warm = shift_estimate(warm);
  res.diag = std::move(diag);
  res.diag.solve_time_us = elapsed_us(t0);
  return res;
}

bilinear::ErrorMetrics TrackingLog::mean_errors() const {
  std::vector<OutputVec> truth(rows.size());
  std::vector<OutputVec> want(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    truth[i] = output_map(rows[i].x, true_params);
    want[i] = rows[i].ref;
  }
  return bilinear::error_metrics(truth, want);
}

double TrackingLog::mean_cost() const {
  if (rows.empty()) return 0.0;
  double sum = 0.0;
  for (const TrackingRow& r : rows) sum += r.cost;
  return sum / static_cast<double>(rows.size());
}

double TrackingLog::mean_solve_time_us() const {
  if (rows.empty()) return 0.0;
  double sum = 0.0;
  for (const TrackingRow& r : rows) sum += static_cast<double>(r.solve_time_us);
  return sum / static_cast<double>(rows.size());
}

long long TrackingLog::max_solve_time_us() const {
  long long worst = 0;
  for (const TrackingRow& r : rows) worst = std::max(worst, r.solve_time_us);
  return worst;
}

TrackingLog closed_loop(const ClosedLoopSetup& setup, ControllerKind kind,
                        const ReferenceTrajectory& ref) {
  setup.cfg.validate();
  setup.true_params.validate();
  if (ref.size() < 2)
    throw std::invalid_argument("closed_loop: reference needs at least two samples");
  if (std::abs(ref.ts - setup.cfg.ts) > 1e-12)
    throw std::invalid_argument("closed_loop: reference sample time differs from the controller");
  if (kind == ControllerKind::kbmpc && (setup.model == nullptr || setup.basis == nullptr))
    throw std::invalid_argument("closed_loop: bilinear controller needs a model and basis");

  const int np = setup.cfg.horizon;
  ConstraintSet con = make_constraints(setup.cfg.limits, np);
  PlantParams nominal = setup.true_params.nominal();

  State x;  // the first six reference channels are exactly the state
  x.x0 = ref.samples[0](0);
  x.y0 = ref.samples[0](1);
  x.theta0 = ref.samples[0](2);
  x.theta1 = ref.samples[0](3);
  x.tan_phi = ref.samples[0](4);
  x.v = ref.samples[0](5);

  IterationState warm = (kind == ControllerKind::kbmpc)
                            ? initial_guess_lifted(*setup.basis, x, setup.u0, np)
                            : initial_guess_state(x, setup.u0, np);
  Control prev = setup.u0;

  TrackingLog log;
  log.ts = ref.ts;
  log.true_params = setup.true_params;
  const int steps = ref.size() - 1;
  log.rows.reserve(steps);
  std::vector<OutputVec> window(np + 1);
  for (int s = 0; s < steps; ++s) {
    for (int k = 0; k <= np; ++k)
      window[k] = ref.samples[std::min(s + k, ref.size() - 1)];
    StepResult r = (kind == ControllerKind::kbmpc)
                       ? kbmpc_step(*setup.model, *setup.basis, x, window, setup.cfg, con,
                                    std::move(warm), prev)
                       : lmpc_step(nominal, x, window, setup.cfg, con, std::move(warm), prev);
    TrackingRow row;
    row.t = static_cast<double>(s) * ref.ts;
    row.x = x;
    row.u = r.u;
    row.ref = ref.samples[s];
    row.cost = r.diag.cost;
    row.inner_iters = r.diag.inner_iters;
    row.predicted_violation = r.diag.predicted_violation;
    row.solve_time_us = r.diag.solve_time_us;
    row.qp_status = r.diag.qp_status;
    row.fallback = r.diag.fallback;
    log.rows.push_back(std::move(row));
    warm = std::move(r.warm);
    prev = r.u;
    x = rk4_step(x, r.u, setup.true_params, ref.ts);
  }
  return log;
}

void save_tracking_csv(const std::string& path, const TrackingLog& log,
                       const std::string& preamble) {
  std::ostringstream out;
  if (!preamble.empty()) out << "# " << preamble << '\n';
  out << "t,x0,y0,theta0,theta1,tan_phi,v,x1,y1,omega,a,"
         "ref_x0,ref_y0,ref_theta0,ref_theta1,ref_tan_phi,ref_v,ref_x1,ref_y1,"
         "cost,inner_iters,solve_time_us,qp_status\n";
  for (const TrackingRow& r : log.rows) {
    OutputVec y = output_map(r.x, log.true_params);
    out << format_double(r.t);
    for (int i = 0; i < 8; ++i) out << ',' << format_double(y(i));
    out << ',' << format_double(r.u.omega) << ',' << format_double(r.u.a);
    for (int i = 0; i < 8; ++i) out << ',' << format_double(r.ref(i));
    out << ',' << format_double(r.cost) << ',' << r.inner_iters << ',' << r.solve_time_us << ','
        << qp::to_string(r.qp_status) << '\n';
  }
  write_file(path, out.str());
}

std::string tracking_summary_json(const TrackingLog& log) {
  bilinear::ErrorMetrics e = log.mean_errors();
  nlohmann::ordered_json j;
  j["steps"] = log.rows.size();
  j["e_x0y0"] = e.e_x0y0;
  j["e_x1y1"] = e.e_x1y1;
  j["e_theta0"] = e.e_theta0;
  j["e_theta1"] = e.e_theta1;
  j["mean_cost"] = log.mean_cost();
  j["mean_solve_time_us"] = log.mean_solve_time_us();
  j["max_solve_time_us"] = log.max_solve_time_us();
  return j.dump(2) + "\n";
}

}  // namespace kbmpc::mpc
