#include "kbmpc/lie.hpp"

#include <stdexcept>

namespace kbmpc::lie {

void ControlAffineSystem::validate() const {
  if (static_cast<int>(f.size()) != n_x)
    throw std::invalid_argument("ControlAffineSystem: drift has wrong dimension");
  if (static_cast<int>(g.size()) != m)
    throw std::invalid_argument("ControlAffineSystem: wrong number of control fields");
  for (const auto& gj : g)
    if (static_cast<int>(gj.size()) != n_x)
      throw std::invalid_argument("ControlAffineSystem: control field has wrong dimension");
  if (static_cast<int>(h.size()) != n_y)
    throw std::invalid_argument("ControlAffineSystem: output has wrong dimension");
  for (const auto& e : f)
    if (e.min_vars() > n_x)
      throw std::invalid_argument("ControlAffineSystem: drift references unknown variables");
  for (const auto& gj : g)
    for (const auto& e : gj)
      if (e.min_vars() > n_x)
        throw std::invalid_argument("ControlAffineSystem: control field references unknown variables");
  for (const auto& e : h)
    if (e.min_vars() > n_x)
      throw std::invalid_argument("ControlAffineSystem: output references unknown variables");
}

ScalarField lie_derivative(const ScalarField& phi, std::span<const ScalarField> field) {
  if (phi.min_vars() > static_cast<int>(field.size()))
    throw std::invalid_argument("lie_derivative: field dimension smaller than variable span");
  ScalarField acc = ScalarField::constant(0.0);
  for (int i = 0; i < static_cast<int>(field.size()); ++i)
    acc = acc + phi.derivative(i) * field[i];  // zero terms fold away
  return acc;
}

std::vector<ScalarField> expand_level(std::span<const ScalarField> fields,
                                      const ControlAffineSystem& sys) {
  std::vector<ScalarField> out;
  out.reserve(fields.size() * (sys.m + 1));
  for (const ScalarField& lambda : fields) {
    out.push_back(lie_derivative(lambda, sys.f));
    for (int j = 0; j < sys.m; ++j) out.push_back(lie_derivative(lambda, sys.g[j]));
  }
  return out;
}

ControlAffineSystem tractor_trailer_nominal(const PlantParams& p) {
  p.validate();
  using E = ScalarField;
  const E x0 = E::var(0), y0 = E::var(1), th0 = E::var(2), th1 = E::var(3);
  const E tph = E::var(4), v = E::var(5);
  const E zero = E::constant(0.0), one = E::constant(1.0);
  const E dth = th0 - th1;

  ControlAffineSystem sys;
  sys.n_x = 6;
  sys.m = 2;
  sys.n_y = 8;
  // With kappa = 1 the steering recovery tan(atan(.)) cancels, so the
  // nominal right-hand side is polynomial/trigonometric in the state.
  sys.f = {
      v * cos(th0),
      v * sin(th0),
      v * tph / p.l0,
      v * (sin(dth) - tph * cos(dth) * (p.lH / p.l0)) / p.l1,
      zero,
      zero,
  };
  sys.g = {
      {zero, zero, zero, zero, one, zero},  // omega drives tan_phi
      {zero, zero, zero, zero, zero, one},  // a drives v
  };
  sys.h = {
      x0, y0, th0, th1, tph, v,
      x0 - p.lH * cos(th0) - p.l1 * cos(th1),
      y0 - p.lH * sin(th0) - p.l1 * sin(th1),
  };
  sys.validate();
  return sys;
}

}  // namespace kbmpc::lie
