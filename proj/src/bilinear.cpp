#include "kbmpc/bilinear.hpp"

#include <cmath>
#include <stdexcept>

namespace kbmpc::bilinear {

Eigen::VectorXd step_bilinear(const edmd::BilinearModel& model, const Eigen::VectorXd& z,
                              const Eigen::VectorXd& u) {
  if (z.size() != model.n() || u.size() != model.m())
    throw std::invalid_argument("step_bilinear: dimension mismatch");
  Eigen::VectorXd zn = model.A * z + model.B * u;
  for (int j = 0; j < model.m(); ++j) zn.noalias() += u[j] * (model.H[j] * z);
  return zn;
}

LinearizedStep linearize(const edmd::BilinearModel& model, const Eigen::VectorXd& z_hat,
                         const Eigen::VectorXd& u_hat) {
  if (z_hat.size() != model.n() || u_hat.size() != model.m())
    throw std::invalid_argument("linearize: dimension mismatch");
  LinearizedStep lin;
  lin.A_hat = model.A;
  for (int j = 0; j < model.m(); ++j) lin.A_hat.noalias() += u_hat[j] * model.H[j];
  lin.B_hat = model.B;
  lin.residual_base = Eigen::VectorXd::Zero(model.n());
  for (int j = 0; j < model.m(); ++j) {
    const Eigen::VectorXd hz = model.H[j] * z_hat;
    lin.B_hat.col(j) += hz;
    lin.residual_base.noalias() -= u_hat[j] * hz;
  }
  return lin;
}

Eigen::VectorXd step_linearized(const LinearizedStep& lin, const Eigen::VectorXd& z,
                                const Eigen::VectorXd& u) {
  return lin.A_hat * z + lin.B_hat * u + lin.residual_base;
}

Predictor predictor_from_string(const std::string& name) {
  if (name == "kbm") return Predictor::KBM;
  if (name == "lkbm") return Predictor::LKBM;
  if (name == "nm") return Predictor::NM;
  if (name == "llnm") return Predictor::LLNM;
  throw std::invalid_argument("unknown predictor variant: " + name);
}

std::string to_string(Predictor p) {
  switch (p) {
    case Predictor::KBM: return "kbm";
    case Predictor::LKBM: return "lkbm";
    case Predictor::NM: return "nm";
    case Predictor::LLNM: return "llnm";
  }
  throw std::invalid_argument("unknown predictor variant");
}

namespace {

std::vector<OutputVec> predict_lifted(const State& init, const std::vector<Control>& controls,
                                      const PredictContext& ctx, bool freeze_linearization) {
  if (!ctx.model || !ctx.basis)
    throw std::invalid_argument("predict: lifted variants need a model and basis");
  const auto& model = *ctx.model;
  Eigen::VectorXd z = lifting::eval_psi_x(*ctx.basis, init);
  std::vector<OutputVec> out;
  out.reserve(controls.size());
  LinearizedStep lin;
  if (freeze_linearization && !controls.empty())
    lin = linearize(model, z, ControlVec::Zero());
  for (const Control& uc : controls) {
    const Eigen::VectorXd u = uc.vec();
    z = freeze_linearization ? step_linearized(lin, z, u) : step_bilinear(model, z, u);
    out.push_back(z.head<8>());
  }
  return out;
}

std::vector<OutputVec> predict_frozen_jacobian(const State& init,
                                               const std::vector<Control>& controls, double ts,
                                               const PlantParams& geometry) {
  const PlantParams p = geometry.nominal();
  const auto sys = lie::tractor_trailer_nominal(p);
  expr::Tape drift(sys.f, sys.n_x);
  const StateVec x0 = init.vec();
  std::vector<double> f0(6);
  Eigen::MatrixXd jac;
  drift.eval_with_jacobian(std::span<const double>(x0.data(), 6), f0, jac);

  // Continuous dynamics frozen at x0: x_dot = f(x0) + Jf(x0) (x - x0) + G u,
  // where the input matrix G = [g_1 g_2] is constant for this plant, so the
  // frozen model stays exact in u; rolled out by forward Euler at ts.
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(6, 2);
  g(4, 0) = 1.0;
  g(5, 1) = 1.0;
  StateVec x = x0;
  Eigen::Map<const StateVec> f0v(f0.data());
  std::vector<OutputVec> out;
  out.reserve(controls.size());
  for (const Control& uc : controls) {
    const StateVec dx = f0v + jac * (x - x0) + g * uc.vec();
    x += ts * dx;
    out.push_back(output_map(State::from_vec(x), p));
  }
  return out;
}

}  // namespace

std::vector<OutputVec> predict(Predictor variant, const State& init,
                               const std::vector<Control>& controls, const PredictContext& ctx) {
  switch (variant) {
    case Predictor::KBM:
      return predict_lifted(init, controls, ctx, false);
    case Predictor::LKBM:
      return predict_lifted(init, controls, ctx, true);
    case Predictor::NM: {
      if (!(ctx.ts > 0)) throw std::invalid_argument("predict: NM needs a positive ts");
      const PlantParams p = ctx.nominal.nominal();
      std::vector<OutputVec> out;
      out.reserve(controls.size());
      State x = init;
      for (const Control& u : controls) {
        x = rk4_step(x, u, p, ctx.ts);
        out.push_back(output_map(x, p));
      }
      return out;
    }
    case Predictor::LLNM: {
      if (!(ctx.ts > 0)) throw std::invalid_argument("predict: LLNM needs a positive ts");
      return predict_frozen_jacobian(init, controls, ctx.ts, ctx.nominal);
    }
  }
  throw std::invalid_argument("predict: unknown variant");
}

double ErrorMetrics::channel(int i) const {
  switch (i) {
    case 0: return e_x0y0;
    case 1: return e_x1y1;
    case 2: return e_theta0;
    case 3: return e_theta1;
  }
  throw std::out_of_range("ErrorMetrics::channel");
}

ErrorMetrics error_metrics(const std::vector<OutputVec>& truth,
                           const std::vector<OutputVec>& pred) {
  if (truth.size() != pred.size())
    throw std::invalid_argument("error_metrics: trajectory length mismatch");
  if (truth.empty()) return {};
  ErrorMetrics m;
  for (size_t k = 0; k < truth.size(); ++k) {
    const OutputVec d = truth[k] - pred[k];
    m.e_x0y0 += std::hypot(d[0], d[1]);
    m.e_x1y1 += std::hypot(d[6], d[7]);
    m.e_theta0 += std::abs(wrap_angle(d[2]));
    m.e_theta1 += std::abs(wrap_angle(d[3]));
  }
  const double inv = 1.0 / static_cast<double>(truth.size());
  m.e_x0y0 *= inv;
  m.e_x1y1 *= inv;
  m.e_theta0 *= inv;
  m.e_theta1 *= inv;
  return m;
}

}  // namespace kbmpc::bilinear
