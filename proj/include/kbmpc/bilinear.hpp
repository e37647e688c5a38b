#pragma once

#include "kbmpc/edmd.hpp"
#include "kbmpc/lie.hpp"
#include "kbmpc/lifting.hpp"
#include "kbmpc/plant.hpp"

#include <Eigen/Core>

#include <string>
#include <vector>

namespace kbmpc::bilinear {

/// One step of the lifted model: z+ = A z + B u + sum_j u_j H_j z.
Eigen::VectorXd step_bilinear(const edmd::BilinearModel& model, const Eigen::VectorXd& z,
                              const Eigen::VectorXd& u);

/// Time-varying linear surrogate about an estimated pair (z_hat, u_hat):
/// z+ ~= A_hat z + B_hat u + residual_base, exact at the estimate.
struct LinearizedStep {
  Eigen::MatrixXd A_hat;          // A + sum_j u_hat_j H_j
  Eigen::MatrixXd B_hat;          // B + [H_1 z_hat, ..., H_m z_hat]
  Eigen::VectorXd residual_base;  // -sum_j u_hat_j H_j z_hat
};

LinearizedStep linearize(const edmd::BilinearModel& model, const Eigen::VectorXd& z_hat,
                         const Eigen::VectorXd& u_hat);

Eigen::VectorXd step_linearized(const LinearizedStep& lin, const Eigen::VectorXd& z,
                                const Eigen::VectorXd& u);

/// Open-loop predictor variants compared against the slip plant:
///  - KBM: the identified bilinear model rolled as-is
///  - LKBM: the coupling terms frozen at z_0, i.e. the constant linear
///    model z+ = A z + (B + [H_1 z_0 ... H_m z_0]) u for the whole horizon
///  - NM: nominal plant (mu = kappa = 1) under RK4
///  - LLNM: forward-Euler rollout of the nominal Jacobian frozen at (x_0, u_0)
enum class Predictor { KBM, LKBM, NM, LLNM };

Predictor predictor_from_string(const std::string& name);
std::string to_string(Predictor p);

struct PredictContext {
  const edmd::BilinearModel* model = nullptr;    // KBM / LKBM
  const lifting::LiftingBasis* basis = nullptr;  // KBM / LKBM
  PlantParams nominal;                           // NM / LLNM geometry (slip forced to 1)
  double ts = 0.0;                               // NM / LLNM step length
};

/// Rolls the variant from `init` under the given input sequence and
/// returns the 8-channel output after each step (length = controls size).
std::vector<OutputVec> predict(Predictor variant, const State& init,
                               const std::vector<Control>& controls, const PredictContext& ctx);

/// Mean per-step errors between two output trajectories: Euclidean
/// distance for the position pairs, wrapped absolute difference for the
/// headings.
struct ErrorMetrics {
  double e_x0y0 = 0.0;
  double e_x1y1 = 0.0;
  double e_theta0 = 0.0;
  double e_theta1 = 0.0;

  double channel(int i) const;  // 0..3 in the order above
};

ErrorMetrics error_metrics(const std::vector<OutputVec>& truth,
                           const std::vector<OutputVec>& pred);

}  // namespace kbmpc::bilinear
