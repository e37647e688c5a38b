#pragma once

#include "kbmpc/lifting.hpp"
#include "kbmpc/plant.hpp"
#include "kbmpc/util.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace kbmpc::edmd {

/// Sampling protocol for training data. Axis 3 of x_box parameterizes the
/// hitch angle theta0 - theta1 (not theta1 itself) so that uniform box
/// sampling respects the jack-knife band; theta1 is reconstructed as
/// theta0 - dtheta.
struct DataGenConfig {
  int n_traj = 2000;
  int steps = 40;
  double ts = 0.05;
  Box x_box;  // [x0 y0 theta0 dtheta tan_phi v]
  Box u_box;  // [omega a], redrawn every step
  double mu_lo = 0.97;
  double mu_hi = 0.99;
  double kappa = 0.94;
  PlantParams geometry;  // slip factors ignored; mu/kappa above are used
  std::uint64_t seed = 1;
  int threads = 1;

  static DataGenConfig defaults();
  void validate() const;
};

/// Transition tuples (x_k, u_k, x_{k+1}) stored column-wise.
struct Dataset {
  double ts = 0.0;
  Eigen::MatrixXd x;       // 6 x K
  Eigen::MatrixXd u;       // 2 x K
  Eigen::MatrixXd x_next;  // 6 x K
  // generation metadata, embedded in the file header
  std::uint64_t seed = 0;
  int n_traj = 0;
  int steps = 0;
  double mu_lo = 0.0, mu_hi = 0.0, kappa = 1.0;

  int size() const { return static_cast<int>(x.cols()); }
};

/// Simulates n_traj independent slip-plant rollouts (mu drawn once per
/// trajectory, kappa fixed) under piecewise-constant random inputs.
/// Deterministic for a fixed seed, independent of the thread count.
Dataset generate_dataset(const DataGenConfig& cfg);

/// A nonempty provenance string (tool version + config hash) is embedded
/// in the file header.
void save_dataset(const std::string& path, const Dataset& ds, const std::string& provenance = "");
Dataset load_dataset(const std::string& path);

/// Discrete-time lifted model z+ = A z + B u + sum_j u_j H_j z, y = C z
/// with C = [I 0] (the retained observables start with the outputs).
struct BilinearModel {
  Eigen::MatrixXd A;               // N x N
  Eigen::MatrixXd B;               // N x m
  std::vector<Eigen::MatrixXd> H;  // m matrices, N x N each
  double ts = 0.0;
  int n_y = 0;
  std::uint64_t basis_hash = 0;
  double ridge = 0.0;  // regularization actually used by the fit

  int n() const { return static_cast<int>(A.rows()); }
  int m() const { return static_cast<int>(B.cols()); }
  Eigen::MatrixXd C() const;  // n_y x N output selector
  void validate() const;
};

/// Ridge regression of the lifted one-step map: minimizes
/// sum_k |G psi(x_k,u_k) - psi_x(x_{k+1})|^2 + ridge |G|_F^2 over
/// G = [A H_1 ... H_m B], via streaming normal equations and a Cholesky
/// solve. Only the N rows that the bilinear model uses are regressed.
/// If ridge is not given it defaults to 1e-8 * trace(Psi' Psi) / dim.
/// Deterministic for a fixed dataset, independent of the thread count.
BilinearModel fit(const Dataset& ds, const lifting::LiftingBasis& basis,
                  std::optional<double> ridge = std::nullopt, int threads = 1);

/// Self-describing binary container; round-trips bit-exactly and embeds
/// the basis manifest hash so a model cannot be loaded against a
/// mismatched basis.
void save_model(const std::string& path, const BilinearModel& model,
                const std::string& provenance = "");
BilinearModel load_model(const std::string& path, const lifting::LiftingBasis& basis);

}  // namespace kbmpc::edmd
