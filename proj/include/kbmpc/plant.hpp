#pragma once

#include "kbmpc/util.hpp"

#include <Eigen/Core>

#include <string>
#include <vector>

namespace kbmpc {

using StateVec = Eigen::Matrix<double, 6, 1>;
using ControlVec = Eigen::Vector2d;
using OutputVec = Eigen::Matrix<double, 8, 1>;

/// Tractor-trailer geometry and slip factors.
struct PlantParams {
  double l0 = 3.6;     // tractor length (m)
  double l1 = 6.0;     // trailer length (m)
  double lH = 1.0;     // hitch offset (m)
  double mu = 1.0;     // longitudinal slip factor
  double kappa = 1.0;  // side slip factor

  void validate() const;
  PlantParams nominal() const;  // same geometry, mu = kappa = 1
};

/// [x0 y0 theta0 theta1 tan_phi v]. Headings are stored unwrapped so they
/// stay continuous along a trajectory.
struct State {
  double x0 = 0.0;
  double y0 = 0.0;
  double theta0 = 0.0;
  double theta1 = 0.0;
  double tan_phi = 0.0;
  double v = 0.0;

  StateVec vec() const;
  static State from_vec(const StateVec& x);
};

/// [omega a]: rate of tan_phi and linear acceleration.
struct Control {
  double omega = 0.0;
  double a = 0.0;

  ControlVec vec() const;
  static Control from_vec(const ControlVec& u);
};

/// Input and output bounds.
struct Limits {
  double omega_max = 2.0;
  double a_max = 2.0;
  double tan_phi_max = 0.68413680834169226;  // tan(0.6)
  double v_max = 1.0;
  double dtheta_max = M_PI / 3.0;  // jack-knife bound on |theta0 - theta1|

  void validate() const;
};

/// Signed satisfaction margins, one per constraint; >= 0 means satisfied.
struct ConstraintMargins {
  double omega = 0.0;
  double a = 0.0;
  double tan_phi = 0.0;
  double v = 0.0;
  double dtheta = 0.0;

  double min() const;
  bool all_ok(double tol = 0.0) const { return min() >= -tol; }
};

/// Right-hand side of the slip dynamics. The steering term uses
/// tan(kappa * atan(tan_phi)): the steering angle is recovered from the
/// stored tangent before the side-slip factor is applied.
StateVec plant_derivative(const State& x, const Control& u, const PlantParams& p);

/// [x0 y0 theta0 theta1 tan_phi v x1 y1]; the trailer position follows
/// from the hitch geometry.
OutputVec output_map(const State& x, const PlantParams& p);

/// Classical RK4 update with zero-order-hold input.
State rk4_step(const State& x, const Control& u, const PlantParams& p, double ts);

ConstraintMargins check_limits(const OutputVec& y, const Control& u, const Limits& lim);

/// Piecewise-constant control segment of a scripted maneuver.
struct ProfileSegment {
  double duration = 0.0;  // seconds
  double omega = 0.0;
  double a = 0.0;
};

struct ReferenceProfile {
  std::string name;
  State initial;
  std::vector<ProfileSegment> segments;

  double total_duration() const;
};

/// Output samples on the fine grid, one per ts step starting at t = 0.
struct ReferenceTrajectory {
  double ts = 0.0;
  std::vector<OutputVec> samples;

  int size() const { return static_cast<int>(samples.size()); }
};

/// Simulates the nominal plant under the scripted profile on the coarse
/// grid, then linearly interpolates all output channels down to ts. The
/// result is intentionally not dynamically feasible at ts resolution.
/// Every coarse node is validated against `lim`.
ReferenceTrajectory generate_reference(const ReferenceProfile& profile, const PlantParams& p,
                                       double coarse_dt, double ts, const Limits& lim);

/// Backing maneuver into a perpendicular slot: the rig starts at rest on
/// the road axis, reverses along it, swings the trailer through ~90 deg
/// and stops in the slot. Stays inside the default limits.
ReferenceProfile parking_profile();

ReferenceProfile straight_profile(double v_target, double duration);

/// A nonempty preamble is written as a leading "# ..." comment line;
/// the loader skips any such lines.
void save_reference_csv(const std::string& path, const ReferenceTrajectory& ref,
                        const std::string& preamble = "");
ReferenceTrajectory load_reference_csv(const std::string& path);

}  // namespace kbmpc
