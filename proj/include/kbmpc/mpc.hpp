#pragma once

#include "kbmpc/bilinear.hpp"
#include "kbmpc/edmd.hpp"
#include "kbmpc/lifting.hpp"
#include "kbmpc/plant.hpp"
#include "kbmpc/qpsolver.hpp"

#include <Eigen/Core>

#include <string>
#include <vector>

namespace kbmpc::mpc {

/// Receding-horizon weights and loop controls. Q weighs the tracking error
/// of every stage output, Q_terminal the last one, R the (full) input.
struct MpcConfig {
  int horizon = 20;
  Eigen::MatrixXd Q;           // n_y x n_y
  Eigen::MatrixXd Q_terminal;  // n_y x n_y
  Eigen::MatrixXd R;           // m x m
  int iter_max = 3;       // relinearization passes per step
  double eps_conv = 1e-4;  // stop when the increment norm drops below
  double ts = 0.05;
  Limits limits;

  static MpcConfig defaults();
  void validate() const;  // symmetry, PSD, positive sizes
};

/// One stage of the polytopic constraint E y + F u <= l. F rows are zero
/// for pure output bounds and vice versa.
struct StageConstraint {
  Eigen::MatrixXd E;  // n_c x n_y
  Eigen::MatrixXd F;  // n_c x m
  Eigen::VectorXd l;  // n_c
};

/// Stagewise constraints for k = 0..horizon-1 plus an output-only terminal
/// inequality E_terminal y_horizon <= l_terminal.
struct ConstraintSet {
  std::vector<StageConstraint> stage;
  Eigen::MatrixXd E_terminal;
  Eigen::VectorXd l_terminal;

  void validate(int n_y, int m, int horizon) const;
};

/// Builds the operating envelope: steering-rate and acceleration rows on
/// the input, steering-tangent, speed and hitch-angle rows on the output,
/// each as a +/- pair. The terminal stage keeps only the output rows.
ConstraintSet make_constraints(const Limits& lim, int horizon);

/// Current estimate of the predicted trajectory, refined in place by the
/// inner loop. z_hat holds lifted states for the bilinear controller and
/// plain 6-vectors for the locally linearized baseline; u_hat one entry
/// per stage. After a controller step the estimate is shifted one stage
/// forward to warm-start the next step.
struct IterationState {
  std::vector<Eigen::VectorXd> z_hat;  // horizon+1 entries
  std::vector<Eigen::VectorXd> u_hat;  // horizon entries
  int iteration = 0;
};

/// Flat-start guess: the current lifted state and hold control repeated
/// over the horizon.
IterationState initial_guess_lifted(const lifting::LiftingBasis& basis, const State& x0,
                                    const Control& u0, int horizon);
IterationState initial_guess_state(const State& x0, const Control& u0, int horizon);

/// Dense QP over the stacked input increments [du_0; ...; du_{horizon-1}]
/// plus the affine map recovering the state increments: dz_k =
/// dz_map.middleRows(k*n, n) * du + dz_offset.segment(k*n, n).
struct Condensation {
  qp::QpProblem problem;
  Eigen::MatrixXd dz_map;     // (horizon+1)*n x horizon*m
  Eigen::VectorXd dz_offset;  // stacked drift of the frozen linearization
  double cost_at_zero = 0.0;  // tracking cost of the estimate itself (du = 0)
};

/// Linearizes the bilinear model along the estimate, eliminates the state
/// increments by forward substitution and assembles the tracking QP.
/// Stage rows whose coefficient row vanishes (the output rows of stage 0:
/// y_0 is measured, not decided) are dropped as constants.
Condensation condense(const edmd::BilinearModel& model, const IterationState& state,
                      const std::vector<Eigen::VectorXd>& refs, const MpcConfig& cfg,
                      const ConstraintSet& con);

struct StepDiagnostics {
  int inner_iters = 0;
  double du_inf = 0.0;  // increment norm of the last inner iteration
  double cost = 0.0;    // tracking cost of the returned estimate
  std::vector<double> cost_per_iter;  // estimate cost before each QP solve
  std::vector<double> du_per_iter;    // increment norm of every QP solved
  qp::QpStatus qp_status = qp::QpStatus::max_iter;  // last QP attempted
  bool fallback = false;  // QP unusable; previous control was reused
  // worst violation of the output rows by the predicted outputs at
  // stages k >= 1 (<= solver tolerance when the QP solved)
  double predicted_violation = 0.0;
  long long solve_time_us = 0;
};

struct StepResult {
  Control u;
  IterationState warm;  // shifted estimate for the next step
  StepDiagnostics diag;
};

/// One receding-horizon step of the bilinear tracking controller:
/// relinearize along the estimate, solve the condensed QP, add the
/// increments, repeat up to iter_max times, then apply the first input.
/// The warm estimate is re-rolled from the measured state whenever its
/// first entry disagrees with psi_x(x0), so the condensation drift
/// vanishes on entry. refs needs horizon+1 samples; reference headings are
/// unwrapped against the measured heading first. If the QP fails, prev_u
/// is applied again and the step is flagged.
StepResult kbmpc_step(const edmd::BilinearModel& model, const lifting::LiftingBasis& basis,
                      const State& x0, const std::vector<OutputVec>& refs, const MpcConfig& cfg,
                      const ConstraintSet& con, IterationState warm, const Control& prev_u);

/// Same loop with the slip-free plant as predictive model: forward-Euler
/// discretization linearized at the estimate each pass, outputs through
/// the linearized pose map. Baseline for the bilinear controller.
StepResult lmpc_step(const PlantParams& nominal, const State& x0,
                     const std::vector<OutputVec>& refs, const MpcConfig& cfg,
                     const ConstraintSet& con, IterationState warm, const Control& prev_u);

enum class ControllerKind { kbmpc, lmpc };

struct TrackingRow {
  double t = 0.0;
  State x;        // state the controller saw (before applying u)
  Control u;      // input applied over [t, t+ts)
  OutputVec ref;  // reference output at t
  double cost = 0.0;
  int inner_iters = 0;
  double predicted_violation = 0.0;
  long long solve_time_us = 0;
  qp::QpStatus qp_status = qp::QpStatus::max_iter;
  bool fallback = false;
};

struct TrackingLog {
  double ts = 0.0;
  PlantParams true_params;
  std::vector<TrackingRow> rows;

  bilinear::ErrorMetrics mean_errors() const;  // true outputs vs reference
  double mean_cost() const;
  double mean_solve_time_us() const;
  long long max_solve_time_us() const;
};

struct ClosedLoopSetup {
  PlantParams true_params;                       // simulated as ground truth
  const edmd::BilinearModel* model = nullptr;    // bilinear controller only
  const lifting::LiftingBasis* basis = nullptr;  // bilinear controller only
  MpcConfig cfg;
  Control u0;  // initial warm-start input
};

/// Tracks the reference from its first sample: at every step the next
/// horizon+1 reference outputs are extracted (held at the end), the
/// controller runs, and the returned input drives the true slip plant one
/// RK4 step. Controller failures are logged and the previous input is
/// held. The initial state is read off the first reference sample with
/// the hitch angle resolved from the trailer position.
TrackingLog closed_loop(const ClosedLoopSetup& setup, ControllerKind kind,
                        const ReferenceTrajectory& ref);

/// A nonempty preamble is written as a leading "# ..." comment line.
void save_tracking_csv(const std::string& path, const TrackingLog& log,
                       const std::string& preamble = "");

/// Mean tracking errors (four channels), mean cost and solve-time stats.
std::string tracking_summary_json(const TrackingLog& log);

}  // namespace kbmpc::mpc
