#include "kbmpc/plant.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace kbmpc {

void PlantParams::validate() const {
  if (!(l0 > 0.0) || !(l1 > 0.0) || !(lH >= 0.0))
    throw std::invalid_argument("PlantParams: lengths must satisfy l0>0, l1>0, lH>=0");
  if (!(mu > 0.0 && mu <= 1.5) || !(kappa > 0.0 && kappa <= 1.5))
    throw std::invalid_argument("PlantParams: slip factors must lie in (0, 1.5]");
}

PlantParams PlantParams::nominal() const {
  PlantParams q = *this;
  q.mu = 1.0;
  q.kappa = 1.0;
  return q;
}

StateVec State::vec() const {
  StateVec x;
  x << x0, y0, theta0, theta1, tan_phi, v;
  return x;
}

State State::from_vec(const StateVec& x) {
  return State{x[0], x[1], x[2], x[3], x[4], x[5]};
}

ControlVec Control::vec() const { return ControlVec(omega, a); }

Control Control::from_vec(const ControlVec& u) { return Control{u[0], u[1]}; }

void Limits::validate() const {
  if (!(omega_max > 0.0 && a_max > 0.0 && tan_phi_max > 0.0 && v_max > 0.0 && dtheta_max > 0.0))
    throw std::invalid_argument("Limits: all bounds must be strictly positive");
}

double ConstraintMargins::min() const {
  return std::min({omega, a, tan_phi, v, dtheta});
}

StateVec plant_derivative(const State& x, const Control& u, const PlantParams& p) {
  const double phi = std::atan(x.tan_phi);
  const double tan_kphi = std::tan(p.kappa * phi);
  const double dtheta = x.theta0 - x.theta1;
  StateVec dx;
  dx[0] = p.mu * x.v * std::cos(x.theta0);
  dx[1] = p.mu * x.v * std::sin(x.theta0);
  dx[2] = p.mu * x.v * tan_kphi / p.l0;
  dx[3] = p.mu * x.v * (std::sin(dtheta) - tan_kphi * std::cos(dtheta) * p.lH / p.l0) / p.l1;
  dx[4] = u.omega;
  dx[5] = u.a;
  return dx;
}

OutputVec output_map(const State& x, const PlantParams& p) {
  OutputVec y;
  y.head<6>() = x.vec();
  y[6] = x.x0 - p.lH * std::cos(x.theta0) - p.l1 * std::cos(x.theta1);
  y[7] = x.y0 - p.lH * std::sin(x.theta0) - p.l1 * std::sin(x.theta1);
  return y;
}

State rk4_step(const State& x, const Control& u, const PlantParams& p, double ts) {
  if (!(ts > 0.0)) throw std::invalid_argument("rk4_step: ts must be positive");
  const StateVec x0 = x.vec();
  const StateVec k1 = plant_derivative(x, u, p);
  const StateVec k2 = plant_derivative(State::from_vec(x0 + 0.5 * ts * k1), u, p);
  const StateVec k3 = plant_derivative(State::from_vec(x0 + 0.5 * ts * k2), u, p);
  const StateVec k4 = plant_derivative(State::from_vec(x0 + ts * k3), u, p);
  return State::from_vec(x0 + (ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
}

ConstraintMargins check_limits(const OutputVec& y, const Control& u, const Limits& lim) {
  ConstraintMargins m;
  m.omega = lim.omega_max - std::abs(u.omega);
  m.a = lim.a_max - std::abs(u.a);
  m.tan_phi = lim.tan_phi_max - std::abs(y[4]);
  m.v = lim.v_max - std::abs(y[5]);
  m.dtheta = lim.dtheta_max - std::abs(y[2] - y[3]);
  return m;
}

double ReferenceProfile::total_duration() const {
  double t = 0.0;
  for (const auto& s : segments) t += s.duration;
  return t;
}

namespace {

Control control_at(const ReferenceProfile& profile, double t) {
  double acc = 0.0;
  for (const auto& s : profile.segments) {
    acc += s.duration;
    if (t < acc) return Control{s.omega, s.a};
  }
  return Control{0.0, 0.0};  // past the script: coast
}

}  // namespace

ReferenceTrajectory generate_reference(const ReferenceProfile& profile, const PlantParams& p,
                                       double coarse_dt, double ts, const Limits& lim) {
  if (profile.segments.empty()) throw std::invalid_argument("generate_reference: empty profile");
  if (!(ts > 0.0) || !(coarse_dt > ts))
    throw std::invalid_argument("generate_reference: need coarse_dt > ts > 0");
  const double total = profile.total_duration();
  const int n_coarse = static_cast<int>(std::floor(total / coarse_dt + 1e-9)) + 1;
  if (n_coarse < 2)
    throw std::invalid_argument("generate_reference: profile shorter than one coarse step");

  const PlantParams nominal = p.nominal();
  std::vector<OutputVec> coarse(n_coarse);
  State x = profile.initial;
  for (int k = 0; k < n_coarse; ++k) {
    const OutputVec y = output_map(x, nominal);
    const Control u = control_at(profile, k * coarse_dt);
    const ConstraintMargins margins = check_limits(y, u, lim);
    if (!margins.all_ok(1e-9))
      throw std::invalid_argument("generate_reference: profile violates limits at coarse node " +
                                  std::to_string(k) + " (margin " + std::to_string(margins.min()) +
                                  ")");
    coarse[k] = y;
    if (k + 1 < n_coarse) x = rk4_step(x, u, nominal, coarse_dt);
  }

  ReferenceTrajectory ref;
  ref.ts = ts;
  const double t_end = (n_coarse - 1) * coarse_dt;
  const int n_fine = static_cast<int>(std::floor(t_end / ts + 1e-9)) + 1;
  ref.samples.resize(n_fine);
  for (int k = 0; k < n_fine; ++k) {
    const double t = std::min(k * ts, t_end);
    const int j = std::min(static_cast<int>(t / coarse_dt), n_coarse - 2);
    const double w = (t - j * coarse_dt) / coarse_dt;
    ref.samples[k] = (1.0 - w) * coarse[j] + w * coarse[j + 1];
  }
  return ref;
}

ReferenceProfile straight_profile(double v_target, double duration) {
  ReferenceProfile prof;
  prof.name = "straight";
  prof.initial = State{};
  prof.initial.v = v_target;
  prof.segments.push_back({duration, 0.0, 0.0});
  return prof;
}

ReferenceProfile parking_profile() {
  // Built by time reversal. A forward pull-out from the slot is easy to
  // keep feasible because the hitch angle is stable when driving forward;
  // playing its control schedule backwards (segments reversed, steering
  // rates negated, acceleration values kept) retraces the same path in
  // reverse gear, so the backing maneuver inherits the forward margins.
  // All segment lengths are multiples of 0.5 s so the schedule survives a
  // zero-order hold on a half-second grid unchanged.
  const double tan_arc = 0.44;  // peak hitch angle ~0.73 rad, inside the pi/3 band
  const double ramp = 0.5;
  const double omega_ramp = tan_arc / ramp;
  const double omega_wiggle = 1.0;  // steering-tangent swing of +/-0.5 on the road leg

  const std::vector<ProfileSegment> fwd = {
      {0.5, 0.0, 0.0},            // rest in the slot
      {0.5, 0.0, 1.8},            // v: 0 -> 0.9
      {0.5, 0.0, 0.0},            // straight out of the slot
      {ramp, -omega_ramp, 0.0},   // steer toward the road axis
      {14.0, 0.0, 0.0},           // arc: tractor heading sweeps ~pi/2
      {ramp, omega_ramp, 0.0},    // straighten the wheels
      {1.0, 0.0, 0.0},            // settle
      {0.5, omega_wiggle, 0.0},   // s-wiggle: swerve around an obstacle on the road
      {1.0, 0.0, 0.0},
      {1.0, -omega_wiggle, 0.0},
      {1.0, 0.0, 0.0},
      {0.5, omega_wiggle, 0.0},   // wheels straight again
      {4.0, 0.0, 0.0},            // run out along the road; hitch angle relaxes
      {0.5, 0.0, -1.8},           // brake to rest
      {0.5, 0.0, 0.0},            // rest on the road
  };

  State x;  // slot pose, perpendicular to the road axis
  x.theta0 = x.theta1 = M_PI / 2.0;
  const PlantParams p;
  const double dt = 0.01;
  for (const auto& s : fwd) {
    const Control u{s.omega, s.a};
    const int n = static_cast<int>(std::lround(s.duration / dt));
    for (int i = 0; i < n; ++i) x = rk4_step(x, u, p, dt);
  }

  ReferenceProfile prof;
  prof.name = "parking";
  prof.initial = x;
  prof.initial.v = -x.v;  // the reversal flips velocity (zero here anyway)
  for (auto it = fwd.rbegin(); it != fwd.rend(); ++it)
    prof.segments.push_back({it->duration, -it->omega, it->a});
  return prof;
}

void save_reference_csv(const std::string& path, const ReferenceTrajectory& ref,
                        const std::string& preamble) {
  std::ostringstream out;
  if (!preamble.empty()) out << "# " << preamble << '\n';
  out << "t,x0,y0,theta0,theta1,tan_phi,v,x1,y1\n";
  for (int k = 0; k < ref.size(); ++k) {
    out << format_double(k * ref.ts);
    for (int c = 0; c < 8; ++c) out << ',' << format_double(ref.samples[k][c]);
    out << '\n';
  }
  write_file(path, out.str());
}

ReferenceTrajectory load_reference_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  do {
    if (!std::getline(in, line)) throw IoError("reference csv empty: " + path);
  } while (!line.empty() && line[0] == '#');  // provenance comments
  if (line != "t,x0,y0,theta0,theta1,tan_phi,v,x1,y1")
    throw IoError("reference csv has unexpected header: " + path);
  ReferenceTrajectory ref;
  std::vector<double> times;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.size() != 9) throw IoError("reference csv row with wrong arity: " + path);
    times.push_back(vals[0]);
    OutputVec y;
    for (int c = 0; c < 8; ++c) y[c] = vals[c + 1];
    ref.samples.push_back(y);
  }
  if (ref.samples.size() < 2) throw IoError("reference csv has fewer than two rows: " + path);
  ref.ts = times[1] - times[0];
  if (!(ref.ts > 0.0)) throw IoError("reference csv has non-increasing time column: " + path);
  return ref;
}

}  // namespace kbmpc
