#pragma once

#include "kbmpc/expr.hpp"
#include "kbmpc/plant.hpp"

#include <span>
#include <vector>

namespace kbmpc::lie {

/// A scalar field over the state is an expression in variables 0..n_x-1;
/// value-and-gradient evaluation is exact (see expr).
using ScalarField = expr::Expr;

/// x_dot = f(x) + sum_j g_j(x) u_j, y = h(x).
struct ControlAffineSystem {
  std::vector<ScalarField> f;               // drift, n_x entries
  std::vector<std::vector<ScalarField>> g;  // m control fields, n_x entries each
  std::vector<ScalarField> h;               // outputs, n_y entries
  int n_x = 0;
  int m = 0;
  int n_y = 0;

  void validate() const;  // dimension consistency
};

/// Directional derivative x -> grad(phi)(x) . field(x). The result is a
/// plain scalar field again, so chains of any depth can be formed.
ScalarField lie_derivative(const ScalarField& phi, std::span<const ScalarField> field);

/// One derivative level: each input field lambda spawns m+1 children
/// [L_f lambda, L_{g_1} lambda, ..., L_{g_m} lambda], in that order,
/// concatenated over the inputs.
std::vector<ScalarField> expand_level(std::span<const ScalarField> fields,
                                      const ControlAffineSystem& sys);

/// Tractor-trailer rig with mu = kappa = 1 over
/// [x0 y0 theta0 theta1 tan_phi v]; inputs [omega a], outputs the
/// 8-channel pose vector of plant::output_map.
ControlAffineSystem tractor_trailer_nominal(const PlantParams& p);

}  // namespace kbmpc::lie
