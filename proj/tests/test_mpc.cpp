#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

#include "kbmpc/mpc.hpp"

using namespace kbmpc;
using namespace kbmpc::mpc;

namespace {

// Shared identification rig: basis and model fitted once, reused by every
// closed-loop case below.
const lifting::LiftingBasis& rig_basis() {
  static const lifting::LiftingBasis basis = [] {
    lie::ControlAffineSystem sys = lie::tractor_trailer_nominal(PlantParams{});
    return lifting::build_basis(sys, 2, lifting::ProbeConfig::defaults());
  }();
  return basis;
}

const edmd::BilinearModel& rig_model() {
  static const edmd::BilinearModel model = [] {
    edmd::DataGenConfig cfg = edmd::DataGenConfig::defaults();
    cfg.threads = 4;
    return edmd::fit(edmd::generate_dataset(cfg), rig_basis(), std::nullopt, 4);
  }();
  return model;
}

PlantParams slip_params() {
  PlantParams p;
  p.mu = 0.98;
  p.kappa = 0.94;
  return p;
}

const ReferenceTrajectory& parking_ref() {
  static const ReferenceTrajectory ref =
      generate_reference(parking_profile(), PlantParams{}, 0.5, 0.05, Limits{});
  return ref;
}

ClosedLoopSetup rig_setup(const PlantParams& truth) {
  ClosedLoopSetup setup;
  setup.true_params = truth;
  setup.model = &rig_model();
  setup.basis = &rig_basis();
  setup.cfg = MpcConfig::defaults();
  return setup;
}

const TrackingLog& parking_log_kb() {
  static const TrackingLog log =
      closed_loop(rig_setup(slip_params()), ControllerKind::kbmpc, parking_ref());
  return log;
}

const TrackingLog& parking_log_lm() {
  static const TrackingLog log =
      closed_loop(rig_setup(slip_params()), ControllerKind::lmpc, parking_ref());
  return log;
}

// Exact lifted rollout from x0 under the given inputs.
IterationState exact_rollout(const State& x0, const std::vector<Eigen::VectorXd>& u) {
  IterationState st;
  st.u_hat = u;
  st.z_hat.resize(u.size() + 1);
  st.z_hat[0] = lifting::eval_psi_x(rig_basis(), x0);
  for (size_t k = 0; k < u.size(); ++k)
    st.z_hat[k + 1] = bilinear::step_bilinear(rig_model(), st.z_hat[k], st.u_hat[k]);
  return st;
}

std::vector<OutputVec> held_window(const OutputVec& y, int n) {
  return std::vector<OutputVec>(n, y);
}

// Slip-plant rollout under a smooth control script; every sample is an
// exactly feasible reference point for that plant.
ReferenceTrajectory feasible_ref(const PlantParams& truth, double ts, int steps) {
  ReferenceTrajectory ref;
  ref.ts = ts;
  State x;
  ref.samples.push_back(output_map(x, truth));
  for (int s = 0; s < steps; ++s) {
    double t = s * ts;
    Control u;
    u.a = t < 2.0 ? 0.4 : 0.0;
    u.omega = 0.1 * std::sin(0.5 * t);
    x = rk4_step(x, u, truth, ts);
    ref.samples.push_back(output_map(x, truth));
  }
  return ref;
}

}  // namespace

TEST_CASE("operating limits become stagewise constraint rows") {
  Limits lim;
  ConstraintSet con = make_constraints(lim, 20);
  REQUIRE(con.stage.size() == 20);
  con.validate(8, 2, 20);

  State x;
  x.theta0 = 0.2;
  x.theta1 = -0.1;
  x.tan_phi = 0.5;
  x.v = 0.3;
  Control u{1.5, -0.4};
  OutputVec y = output_map(x, PlantParams{});

  const StageConstraint& sc = con.stage[7];
  Eigen::VectorXd slack = sc.l - sc.E * y - sc.F * u.vec();
  ConstraintMargins margins = check_limits(y, u, lim);
  // each +/- row pair reproduces one margin as its tighter side
  CHECK(std::min(slack(0), slack(1)) == doctest::Approx(margins.tan_phi).epsilon(1e-12));
  CHECK(std::min(slack(2), slack(3)) == doctest::Approx(margins.v).epsilon(1e-12));
  CHECK(std::min(slack(4), slack(5)) == doctest::Approx(margins.dtheta).epsilon(1e-12));
  CHECK(std::min(slack(6), slack(7)) == doctest::Approx(margins.omega).epsilon(1e-12));
  CHECK(std::min(slack(8), slack(9)) == doctest::Approx(margins.a).epsilon(1e-12));

  Eigen::VectorXd tslack = con.l_terminal - con.E_terminal * y;
  CHECK(tslack.size() == 6);
  CHECK(std::min(tslack(0), tslack(1)) == doctest::Approx(margins.tan_phi).epsilon(1e-12));

  CHECK_THROWS_AS(con.validate(8, 2, 19), std::invalid_argument);
  CHECK_THROWS_AS(con.validate(7, 2, 20), std::invalid_argument);
  CHECK_THROWS_AS(make_constraints(lim, 0), std::invalid_argument);
}

TEST_CASE("single-step condensation matches a hand-expanded quadratic") {
  edmd::BilinearModel model;
  model.A = Eigen::MatrixXd{{0.9, 0.1}, {-0.05, 0.8}};
  model.B = Eigen::MatrixXd{{0.2}, {-0.1}};
  model.H = {Eigen::MatrixXd{{0.03, -0.01}, {0.02, 0.04}}};
  model.ts = 0.05;
  model.n_y = 1;

  MpcConfig cfg;
  cfg.horizon = 1;
  cfg.Q = Eigen::MatrixXd{{2.0}};
  cfg.Q_terminal = Eigen::MatrixXd{{5.0}};
  cfg.R = Eigen::MatrixXd{{3.0}};

  ConstraintSet con;
  con.stage.assign(1, StageConstraint{Eigen::MatrixXd::Zero(0, 1), Eigen::MatrixXd::Zero(0, 1),
                                      Eigen::VectorXd::Zero(0)});
  con.E_terminal = Eigen::MatrixXd::Zero(0, 1);
  con.l_terminal = Eigen::VectorXd::Zero(0);

  IterationState st;
  st.z_hat = {Eigen::Vector2d(1.2, -0.7), Eigen::Vector2d(0.3, 0.45)};
  st.u_hat = {Eigen::VectorXd::Constant(1, 0.6)};
  std::vector<Eigen::VectorXd> refs = {Eigen::VectorXd::Constant(1, 0.9),
                                       Eigen::VectorXd::Constant(1, -0.2)};

  Condensation cond = condense(model, st, refs, cfg, con);

  // independent scalar expansion of the same one-step program (a one-step
  // horizon never applies the frozen transition matrix)
  Eigen::Vector2d b_hat = model.B.col(0) + model.H[0] * st.z_hat[0];
  Eigen::Vector2d d = model.A * st.z_hat[0] + b_hat * 0.6 - st.z_hat[1];
  double t1 = b_hat(0);  // output row of the one-step sensitivity
  double o0 = st.z_hat[0](0) - 0.9;
  double o1 = st.z_hat[1](0) + d(0) + 0.2;
  double p_expect = 2.0 * (5.0 * t1 * t1 + 3.0);
  double q_expect = 2.0 * (5.0 * t1 * o1 + 3.0 * 0.6);
  double j_expect = 2.0 * o0 * o0 + 5.0 * o1 * o1 + 3.0 * 0.36;

  REQUIRE(cond.problem.n() == 1);
  REQUIRE(cond.problem.n_ineq() == 0);
  CHECK(cond.problem.P(0, 0) == doctest::Approx(p_expect).epsilon(1e-12));
  CHECK(cond.problem.q(0) == doctest::Approx(q_expect).epsilon(1e-12));
  CHECK(cond.cost_at_zero == doctest::Approx(j_expect).epsilon(1e-12));
  CHECK(cond.dz_map.rows() == 4);
  CHECK((cond.dz_map.bottomRows(2) - b_hat).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((cond.dz_offset.tail(2) - d).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(cond.dz_map.topRows(2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(cond.dz_offset.head(2).cwiseAbs().maxCoeff() == 0.0);

  qp::QpSolver solver;
  qp::QpSolution sol = solver.solve(cond.problem);
  CHECK(sol.w(0) == doctest::Approx(-q_expect / p_expect).epsilon(1e-9));

  // mismatched shapes are rejected
  std::vector<Eigen::VectorXd> bad_refs = {refs[0]};
  CHECK_THROWS_AS(condense(model, st, bad_refs, cfg, con), std::invalid_argument);
  IterationState bad = st;
  bad.u_hat.clear();
  CHECK_THROWS_AS(condense(model, bad, refs, cfg, con), std::invalid_argument);
}

TEST_CASE("condensation drift vanishes on an exact rollout") {
  MpcConfig cfg = MpcConfig::defaults();
  ConstraintSet con = make_constraints(cfg.limits, cfg.horizon);
  State x0;
  x0.theta0 = 0.4;
  x0.theta1 = 0.25;
  x0.tan_phi = 0.2;
  x0.v = 0.5;

  Rng rng(91);
  std::vector<Eigen::VectorXd> u(cfg.horizon);
  for (auto& uk : u) {
    uk = Eigen::VectorXd(2);
    uk << rng.uniform(-1.5, 1.5), rng.uniform(-1.0, 1.0);
  }
  IterationState st = exact_rollout(x0, u);

  std::vector<Eigen::VectorXd> refs(cfg.horizon + 1);
  for (int k = 0; k <= cfg.horizon; ++k) {
    refs[k] = st.z_hat[k].head(8);
    refs[k](0) += 0.3;  // arbitrary offset; the drift must not depend on refs
  }
  Condensation cond = condense(rig_model(), st, refs, cfg, con);
  CHECK(cond.dz_offset.lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("estimate that already tracks the reference is stationary") {
  MpcConfig cfg = MpcConfig::defaults();
  ConstraintSet con = make_constraints(cfg.limits, cfg.horizon);
  State x0;
  x0.theta0 = 0.2;
  x0.theta1 = 0.1;
  x0.tan_phi = 0.1;
  x0.v = 0.3;

  std::vector<Eigen::VectorXd> u(cfg.horizon, Eigen::VectorXd::Zero(2));
  IterationState st = exact_rollout(x0, u);
  std::vector<Eigen::VectorXd> refs(cfg.horizon + 1);
  for (int k = 0; k <= cfg.horizon; ++k) refs[k] = st.z_hat[k].head(8);

  Condensation cond = condense(rig_model(), st, refs, cfg, con);
  CHECK(cond.problem.q.lpNorm<Eigen::Infinity>() == 0.0);

  qp::QpSolver solver;
  qp::QpSolution sol = solver.solve(cond.problem);
  REQUIRE(sol.status == qp::QpStatus::solved);
  CHECK(sol.w.lpNorm<Eigen::Infinity>() <= 1e-8);
}

TEST_CASE("repeated relinearization reaches a fixed point") {
  MpcConfig cfg = MpcConfig::defaults();
  ConstraintSet con = make_constraints(cfg.limits, cfg.horizon);
  State x0;
  x0.theta0 = 0.1;
  x0.theta1 = 0.05;
  x0.v = 0.4;

  std::vector<Eigen::VectorXd> u(cfg.horizon, Eigen::VectorXd::Zero(2));
  IterationState st = exact_rollout(x0, u);
  std::vector<Eigen::VectorXd> refs(cfg.horizon + 1);
  for (int k = 0; k <= cfg.horizon; ++k) {
    refs[k] = st.z_hat[k].head(8);
    refs[k](0) += 0.05;  // ask for a small forward shift
    refs[k](6) += 0.05;
  }

  qp::QpSolver solver;
  const int n = rig_model().n();
  for (int pass = 0; pass < 6; ++pass) {
    Condensation cond = condense(rig_model(), st, refs, cfg, con);
    qp::QpSolution sol = solver.solve(cond.problem);
    REQUIRE(sol.status == qp::QpStatus::solved);
    for (int k = 0; k < cfg.horizon; ++k) st.u_hat[k] += sol.w.segment(2 * k, 2);
    for (int k = 0; k <= cfg.horizon; ++k)
      st.z_hat[k] += cond.dz_map.middleRows(k * n, n) * sol.w + cond.dz_offset.segment(k * n, n);
  }
  Condensation cond = condense(rig_model(), st, refs, cfg, con);
  qp::QpSolution sol = solver.solve(cond.problem);
  REQUIRE(sol.status == qp::QpStatus::solved);
  CHECK(sol.w.lpNorm<Eigen::Infinity>() <= 1e-8);
}

TEST_CASE("holding position at rest needs no control") {
  MpcConfig cfg = MpcConfig::defaults();
  ConstraintSet con = make_constraints(cfg.limits, cfg.horizon);
  State x0;
  x0.x0 = 1.0;
  x0.y0 = -2.0;
  x0.theta0 = 0.3;
  x0.theta1 = 0.3;
  std::vector<OutputVec> refs = held_window(output_map(x0, PlantParams{}), cfg.horizon + 1);

  StepResult lm = lmpc_step(PlantParams{}, x0, refs, cfg, con, {}, Control{});
  CHECK(std::abs(lm.u.omega) <= 1e-9);
  CHECK(std::abs(lm.u.a) <= 1e-9);

  // The fitted model carries a one-step regression residual (~1e-4 in the
  // lifted coordinates), so "rest maps to rest" only holds to that accuracy
  // and the controller issues a correction of the same order. The exact-model
  // case below shows the remaining slack is the model's, not the solver's.
  StepResult kb = kbmpc_step(rig_model(), rig_basis(), x0, refs, cfg, con, {}, Control{});
  MESSAGE("kbmpc equilibrium |u|_inf = ", std::max(std::abs(kb.u.omega), std::abs(kb.u.a)));
  CHECK(std::abs(kb.u.omega) <= 2e-3);
  CHECK(std::abs(kb.u.a) <= 2e-3);
}

TEST_CASE("an exactly stationary model holds rest with zero control") {
  MpcConfig cfg = MpcConfig::defaults();
  ConstraintSet con = make_constraints(cfg.limits, cfg.horizon);
  const lifting::LiftingBasis& basis = rig_basis();
  const int n = basis.n();

  // A = I fixes every lifted point; B and the coupling blocks are nonzero so
  // the stationarity cannot come from a degenerate zero model.
  edmd::BilinearModel model;
  model.A = Eigen::MatrixXd::Identity(n, n);
  model.B = Eigen::MatrixXd::Constant(n, 2, 0.1);
  model.H = {0.01 * Eigen::MatrixXd::Identity(n, n), -0.02 * Eigen::MatrixXd::Identity(n, n)};
  model.ts = cfg.ts;
  model.n_y = 8;
  model.validate();

  State x0;
  x0.x0 = -0.4;
  x0.y0 = 1.1;
  x0.theta0 = -0.2;
  x0.theta1 = -0.2;
  std::vector<OutputVec> refs = held_window(output_map(x0, PlantParams{}), cfg.horizon + 1);

  StepResult kb = kbmpc_step(model, basis, x0, refs, cfg, con, {}, Control{});
  CHECK(std::abs(kb.u.omega) <= 1e-9);
  CHECK(std::abs(kb.u.a) <= 1e-9);
  CHECK(kb.diag.cost <= 1e-12);
}

TEST_CASE("stale warm start is re-rolled from the measured state") {
  MpcConfig cfg = MpcConfig::defaults();
  ConstraintSet con = make_constraints(cfg.limits, cfg.horizon);
  const PlantParams truth = slip_params();

  State x0;
  x0.v = 0.5;
  x0.tan_phi = 0.15;
  std::vector<OutputVec> refs(cfg.horizon + 1);
  for (int k = 0; k <= cfg.horizon; ++k) {
    State target = x0;
    target.x0 += 0.5 * cfg.ts * static_cast<double>(k);
    refs[k] = output_map(target, truth);
  }

  StepResult first = kbmpc_step(rig_model(), rig_basis(), x0, refs, cfg, con, {}, Control{});
  State x1 = rk4_step(x0, first.u, truth, cfg.ts);

  // manually rebuild what the entry re-roll should produce from the shift
  IterationState manual = first.warm;
  manual.z_hat[0] = lifting::eval_psi_x(rig_basis(), x1);
  for (int k = 0; k < cfg.horizon; ++k)
    manual.z_hat[k + 1] = bilinear::step_bilinear(rig_model(), manual.z_hat[k], manual.u_hat[k]);

  StepResult via_stale = kbmpc_step(rig_model(), rig_basis(), x1, refs, cfg, con, first.warm, first.u);
  StepResult via_manual = kbmpc_step(rig_model(), rig_basis(), x1, refs, cfg, con, manual, first.u);
  CHECK(via_stale.u.omega == via_manual.u.omega);
  CHECK(via_stale.u.a == via_manual.u.a);
  CHECK(via_stale.diag.cost == via_manual.diag.cost);
}

TEST_CASE("lateral step demand saturates the steering rate exactly") {
  MpcConfig cfg = MpcConfig::defaults();
  ConstraintSet con = make_constraints(cfg.limits, cfg.horizon);
  State x0;
  x0.v = 1.0;

  std::vector<OutputVec> refs(cfg.horizon + 1);
  for (int k = 0; k <= cfg.horizon; ++k) {
    State target;
    target.v = 1.0;
    target.x0 = cfg.ts * static_cast<double>(k);
    target.y0 = 0.8;  // immediate lateral offset: wants more steering than allowed
    refs[k] = output_map(target, PlantParams{});
  }
  StepResult res = kbmpc_step(rig_model(), rig_basis(), x0, refs, cfg, con, {}, Control{});
  CHECK(std::abs(res.u.omega) <= cfg.limits.omega_max + 1e-9);
  CHECK(std::abs(res.u.omega) >= cfg.limits.omega_max - 1e-6);
}

TEST_CASE("inner iterations refine monotonically on the parking entry") {
  MpcConfig cfg = MpcConfig::defaults();
  ConstraintSet con = make_constraints(cfg.limits, cfg.horizon);
  const PlantParams truth = slip_params();
  const ReferenceTrajectory& ref = parking_ref();

  State x;
  x.x0 = ref.samples[0](0);
  x.y0 = ref.samples[0](1);
  x.theta0 = ref.samples[0](2);
  x.theta1 = ref.samples[0](3);
  x.tan_phi = ref.samples[0](4);
  x.v = ref.samples[0](5);

  IterationState warm;
  Control prev;
  std::vector<OutputVec> window(cfg.horizon + 1);
  int checked = 0;
  for (int s = 0; s < 40; ++s) {
    for (int k = 0; k <= cfg.horizon; ++k)
      window[k] = ref.samples[std::min(s + k, ref.size() - 1)];
    StepResult r = kbmpc_step(rig_model(), rig_basis(), x, window, cfg, con, warm, prev);
    REQUIRE(!r.diag.fallback);
    for (size_t i = 0; i + 1 < r.diag.du_per_iter.size(); ++i) {
      CHECK(r.diag.du_per_iter[i + 1] <= r.diag.du_per_iter[i] * 1.0001 + 1e-12);
      ++checked;
    }
    for (size_t i = 0; i + 1 < r.diag.cost_per_iter.size(); ++i)
      CHECK(r.diag.cost_per_iter[i + 1] <= r.diag.cost_per_iter[i] * (1.0 + 1e-9) + 1e-12);
    warm = r.warm;
    prev = r.u;
    x = rk4_step(x, r.u, truth, cfg.ts);
  }
  CHECK(checked > 0);  // at least some steps took more than one iteration
}

TEST_CASE("parking with slip: bilinear controller beats the linearized baseline") {
  const TrackingLog& kb = parking_log_kb();
  const TrackingLog& lm = parking_log_lm();
  bilinear::ErrorMetrics ekb = kb.mean_errors();
  bilinear::ErrorMetrics elm = lm.mean_errors();

  MESSAGE("parking slip  kbmpc: e_x0y0=", ekb.e_x0y0, " e_x1y1=", ekb.e_x1y1,
          " e_th0=", ekb.e_theta0, " e_th1=", ekb.e_theta1, " cost=", kb.mean_cost());
  MESSAGE("parking slip  lmpc : e_x0y0=", elm.e_x0y0, " e_x1y1=", elm.e_x1y1,
          " e_th0=", elm.e_theta0, " e_th1=", elm.e_theta1, " cost=", lm.mean_cost());

  CHECK(ekb.e_x1y1 < elm.e_x1y1);
  CHECK(ekb.e_theta1 < elm.e_theta1);
  CHECK(ekb.e_x1y1 <= 0.36);
  CHECK(lm.mean_cost() > kb.mean_cost());
}

TEST_CASE("closed-loop runs respect the operating limits") {
  const Limits lim = MpcConfig::defaults().limits;
  for (const TrackingLog* log : {&parking_log_kb(), &parking_log_lm()}) {
    double worst_pred = 0.0;
    double worst_true = 0.0;
    int fallbacks = 0;
    for (const TrackingRow& r : log->rows) {
      CHECK(std::abs(r.u.omega) <= lim.omega_max + 1e-9);
      CHECK(std::abs(r.u.a) <= lim.a_max + 1e-9);
      worst_pred = std::max(worst_pred, r.predicted_violation);
      OutputVec y = output_map(r.x, log->true_params);
      worst_true = std::max(worst_true, -check_limits(y, r.u, lim).min());
      fallbacks += r.fallback ? 1 : 0;
    }
    MESSAGE("worst predicted violation = ", worst_pred, ", worst true margin deficit = ",
            worst_true, ", fallbacks = ", fallbacks);
    CHECK(worst_pred <= 1e-5);   // solver tolerance
    CHECK(worst_true <= 0.02);   // soft margin for model mismatch on the true plant
    CHECK(fallbacks == 0);
  }
}

TEST_CASE("zero-slip plant: both controllers park cleanly") {
  ClosedLoopSetup setup = rig_setup(PlantParams{});
  TrackingLog kb = closed_loop(setup, ControllerKind::kbmpc, parking_ref());
  TrackingLog lm = closed_loop(setup, ControllerKind::lmpc, parking_ref());
  MESSAGE("parking no-slip kbmpc e_x1y1=", kb.mean_errors().e_x1y1,
          " lmpc e_x1y1=", lm.mean_errors().e_x1y1);
  CHECK(kb.mean_errors().e_x1y1 < 0.05);
  CHECK(lm.mean_errors().e_x1y1 < 0.05);
}

TEST_CASE("a feasible reference is tracked tightly") {
  const PlantParams truth = slip_params();
  ReferenceTrajectory ref = feasible_ref(truth, 0.05, 160);
  TrackingLog log = closed_loop(rig_setup(truth), ControllerKind::kbmpc, ref);
  bilinear::ErrorMetrics e = log.mean_errors();
  MESSAGE("feasible ref kbmpc: e_x0y0=", e.e_x0y0, " e_x1y1=", e.e_x1y1, " e_th0=", e.e_theta0,
          " e_th1=", e.e_theta1);
  CHECK(e.e_x0y0 < 0.02);
  CHECK(e.e_x1y1 < 0.02);
  CHECK(e.e_theta0 < 0.02);
  CHECK(e.e_theta1 < 0.02);
}

TEST_CASE("degenerate closed-loop inputs are rejected") {
  ClosedLoopSetup setup = rig_setup(slip_params());
  ReferenceTrajectory empty;
  empty.ts = 0.05;
  CHECK_THROWS_AS(closed_loop(setup, ControllerKind::kbmpc, empty), std::invalid_argument);

  ReferenceTrajectory single;
  single.ts = 0.05;
  single.samples.push_back(OutputVec::Zero());
  CHECK_THROWS_AS(closed_loop(setup, ControllerKind::kbmpc, single), std::invalid_argument);

  ReferenceTrajectory wrong_ts = feasible_ref(slip_params(), 0.1, 5);
  CHECK_THROWS_AS(closed_loop(setup, ControllerKind::kbmpc, wrong_ts), std::invalid_argument);

  ClosedLoopSetup no_model = setup;
  no_model.model = nullptr;
  CHECK_THROWS_AS(closed_loop(no_model, ControllerKind::kbmpc, feasible_ref(slip_params(), 0.05, 5)),
                  std::invalid_argument);

  MpcConfig cfg = MpcConfig::defaults();
  ConstraintSet con = make_constraints(cfg.limits, cfg.horizon);
  std::vector<OutputVec> short_refs = held_window(OutputVec::Zero(), cfg.horizon);
  CHECK_THROWS_AS(kbmpc_step(rig_model(), rig_basis(), State{}, short_refs, cfg, con, {}, Control{}),
                  std::invalid_argument);
}

TEST_CASE("tracking log lands in the documented CSV and summary shape") {
  const TrackingLog& log = parking_log_kb();
  const std::string path = "mpc_test_tracking.csv";
  save_tracking_csv(path, log);

  std::ifstream in(path);
  REQUIRE(in.good());
  std::string header;
  std::getline(in, header);
  CHECK(header ==
        "t,x0,y0,theta0,theta1,tan_phi,v,x1,y1,omega,a,"
        "ref_x0,ref_y0,ref_theta0,ref_theta1,ref_tan_phi,ref_v,ref_x1,ref_y1,"
        "cost,inner_iters,solve_time_us,qp_status");
  int lines = 0;
  std::string row;
  std::string first_row;
  while (std::getline(in, row)) {
    if (lines == 0) first_row = row;
    ++lines;
  }
  CHECK(lines == static_cast<int>(log.rows.size()));
  CHECK(first_row.substr(0, 2) == "0,");
  CHECK(first_row.find("solved") != std::string::npos);

  nlohmann::json j = nlohmann::json::parse(tracking_summary_json(log));
  CHECK(j["steps"].get<int>() == static_cast<int>(log.rows.size()));
  CHECK(j["e_x1y1"].get<double>() == doctest::Approx(log.mean_errors().e_x1y1));
  CHECK(j.contains("mean_cost"));
  CHECK(j.contains("mean_solve_time_us"));
  CHECK(j.contains("max_solve_time_us"));
  std::remove(path.c_str());
}
