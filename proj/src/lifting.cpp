#include "kbmpc/lifting.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <stdexcept>

namespace kbmpc::lifting {

namespace {

constexpr double kZeroTol = 1e-10;  // zero / constant / duplicate tolerance at probe points

double factorial(int n) {
  double r = 1.0;
  for (int i = 2; i <= n; ++i) r *= i;
  return r;
}

/// Full chain tree of one seed function: levels 1..max_level, where level l
/// holds the (m+1)^l fields obtained by l directional derivatives, ordered
/// so that the path digits enumerate in base (m+1).
struct Chain {
  std::vector<lie::ScalarField> fields;
  std::vector<std::vector<int>> paths;
  std::vector<int> levels;
};

Chain grow_chain(const lie::ScalarField& seed, const lie::ControlAffineSystem& sys,
                 int max_level) {
  Chain out;
  std::vector<lie::ScalarField> cur = {seed};
  std::vector<std::vector<int>> cur_paths = {{}};
  for (int level = 1; level <= max_level; ++level) {
    cur = lie::expand_level(cur, sys);
    std::vector<std::vector<int>> next_paths;
    next_paths.reserve(cur.size());
    for (const auto& p : cur_paths)
      for (int j = 0; j <= sys.m; ++j) {
        next_paths.push_back(p);
        next_paths.back().push_back(j);
      }
    cur_paths = std::move(next_paths);
    for (size_t i = 0; i < cur.size(); ++i) {
      out.fields.push_back(cur[i]);
      out.paths.push_back(cur_paths[i]);
      out.levels.push_back(level);
    }
  }
  return out;
}

std::vector<int> control_indices(const std::vector<int>& path) {
  std::vector<int> out;
  for (int j : path)
    if (j > 0) out.push_back(j - 1);
  return out;
}

}  // namespace

ProbeConfig ProbeConfig::defaults() {
  ProbeConfig cfg;
  Eigen::VectorXd lo(6), hi(6);
  lo << -10, -10, -M_PI, -M_PI, -0.7, -1.2;
  hi << 10, 10, M_PI, M_PI, 0.7, 1.2;
  cfg.x_box = Box{lo, hi};
  return cfg;
}

LiftingBasis build_basis(const lie::ControlAffineSystem& sys, int rho, const ProbeConfig& probe) {
  sys.validate();
  if (rho < 0) throw std::invalid_argument("build_basis: rho must be non-negative");
  if (probe.n_points <= 0) throw std::invalid_argument("build_basis: probe needs sample points");
  if (probe.x_box.dim() != sys.n_x)
    throw std::invalid_argument("build_basis: probe box dimension mismatch");

  // Raw candidate list: the outputs themselves, then the derivative chains
  // of every output row and every state row, seeds in declaration order.
  std::vector<lie::ScalarField> raw = sys.h;
  std::vector<Provenance> raw_prov;
  for (int i = 0; i < sys.n_y; ++i)
    raw_prov.push_back({"h" + std::to_string(i), 0, {}, 0});
  auto append_chain = [&](const lie::ScalarField& seed, const std::string& name) {
    Chain c = grow_chain(seed, sys, rho + 1);
    for (size_t i = 0; i < c.fields.size(); ++i) {
      raw.push_back(c.fields[i]);
      raw_prov.push_back({name, c.levels[i], c.paths[i], 0});
    }
  };
  for (int i = 0; i < sys.n_y; ++i) append_chain(sys.h[i], "h" + std::to_string(i));
  for (int i = 0; i < sys.n_x; ++i)
    append_chain(lie::ScalarField::var(i), "f" + std::to_string(i));

  // Fingerprint all candidates at the probe states in one tape pass each.
  const int n_raw = static_cast<int>(raw.size());
  expr::Tape raw_tape(raw, sys.n_x);
  Rng rng(probe.seed);
  Eigen::MatrixXd vals(probe.n_points, n_raw);  // column i = candidate i at all probes
  std::vector<double> row(n_raw), scratch;
  for (int p = 0; p < probe.n_points; ++p) {
    const Eigen::VectorXd x = rng.uniform_in(probe.x_box);
    std::span<const double> xs(x.data(), static_cast<size_t>(x.size()));
    raw_tape.eval(xs, row, scratch);
    for (int i = 0; i < n_raw; ++i) vals(p, i) = row[i];
  }

  LiftingBasis basis;
  basis.rho = rho;
  basis.n_y = sys.n_y;
  basis.n_x = sys.n_x;
  basis.m = sys.m;
  basis.raw_count = n_raw;
  std::vector<int> kept;
  for (int i = 0; i < n_raw; ++i) {
    const auto col = vals.col(i);
    if (i >= sys.n_y) {  // the output prefix is mandatory
      if (col.cwiseAbs().maxCoeff() < kZeroTol) continue;                 // zero function
      if (col.maxCoeff() - col.minCoeff() < kZeroTol) continue;          // constant
      bool dup = false;
      for (int j : kept)
        if ((col - vals.col(j)).cwiseAbs().maxCoeff() < kZeroTol) {
          dup = true;
          break;
        }
      if (dup) continue;
    }
    kept.push_back(i);
    basis.obs.push_back(raw[i]);
    Provenance pv = raw_prov[i];
    pv.fingerprint = fnv1a64(col.data(), sizeof(double) * probe.n_points);
    basis.prov.push_back(std::move(pv));
  }
  basis.tape = expr::Tape(basis.obs, sys.n_x);
  return basis;
}

void eval_psi_x(const LiftingBasis& basis, std::span<const double> x, std::span<double> out,
                std::vector<double>& scratch) {
  basis.tape.eval(x, out, scratch);
}

Eigen::VectorXd eval_psi_x(const LiftingBasis& basis, const State& x) {
  Eigen::VectorXd z(basis.n());
  const StateVec xv = x.vec();
  std::vector<double> scratch;
  eval_psi_x(basis, std::span<const double>(xv.data(), 6),
             std::span<double>(z.data(), static_cast<size_t>(z.size())), scratch);
  return z;
}

void eval_psi(const LiftingBasis& basis, std::span<const double> x, std::span<const double> u,
              std::span<double> out, std::vector<double>& scratch) {
  const int n = basis.n();
  const int m = basis.m;
  eval_psi_x(basis, x, out.subspan(0, n), scratch);
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < n; ++i) out[(j + 1) * n + i] = u[j] * out[i];
  for (int j = 0; j < m; ++j) out[(m + 1) * n + j] = u[j];
}

Eigen::VectorXd eval_psi(const LiftingBasis& basis, const State& x, const Control& u) {
  Eigen::VectorXd psi(basis.psi_dim());
  const StateVec xv = x.vec();
  const ControlVec uv = u.vec();
  std::vector<double> scratch;
  eval_psi(basis, std::span<const double>(xv.data(), 6), std::span<const double>(uv.data(), 2),
           std::span<double>(psi.data(), static_cast<size_t>(psi.size())), scratch);
  return psi;
}

std::string basis_manifest_json(const LiftingBasis& basis) {
  nlohmann::json j;
  j["rho"] = basis.rho;
  j["n_y"] = basis.n_y;
  j["n_x"] = basis.n_x;
  j["m"] = basis.m;
  j["raw_count"] = basis.raw_count;
  j["n"] = basis.n();
  nlohmann::json list = nlohmann::json::array();
  for (int i = 0; i < basis.n(); ++i) {
    const Provenance& p = basis.prov[i];
    list.push_back({{"index", i},
                    {"seed", p.seed},
                    {"level", p.level},
                    {"path", p.path},
                    {"fingerprint", "0x" + to_hex(p.fingerprint)}});
  }
  j["observables"] = std::move(list);
  return j.dump();
}

std::uint64_t basis_hash(const LiftingBasis& basis) {
  return fnv1a64(basis_manifest_json(basis));
}

TaylorPredictor::TaylorPredictor(const lie::ControlAffineSystem& sys, int rho)
    : n_x_(sys.n_x), rho_(rho) {
  sys.validate();
  if (rho < 0) throw std::invalid_argument("TaylorPredictor: rho must be non-negative");
  std::vector<lie::ScalarField> outputs;
  for (int i = 0; i < sys.n_x; ++i) {
    Chain c = grow_chain(lie::ScalarField::var(i), sys, rho + 1);
    for (size_t k = 0; k < c.fields.size(); ++k) {
      const auto& field = c.fields[k];
      if (field.is_constant() && field.constant_value() == 0.0) continue;
      terms_.push_back({i, c.levels[k], control_indices(c.paths[k]),
                        static_cast<int>(outputs.size())});
      outputs.push_back(field);
    }
  }
  tape_ = expr::Tape(outputs, sys.n_x);
}

State TaylorPredictor::step(const State& x, const Control& u, double ts) const {
  const StateVec xv = x.vec();
  std::vector<double> vals(tape_.n_outputs()), scratch;
  tape_.eval(std::span<const double>(xv.data(), 6), vals, scratch);
  const double uarr[2] = {u.omega, u.a};
  // ts^order / order! for order = 1..rho+1
  std::vector<double> coef(rho_ + 2, 0.0);
  double c = 1.0;
  for (int order = 1; order <= rho_ + 1; ++order) {
    c *= ts / order;
    coef[order] = c;
  }
  StateVec acc = StateVec::Zero();
  for (const Term& t : terms_) {
    double w = coef[t.order] * vals[t.slot];
    for (int j : t.u_ix) w *= uarr[j];
    acc[t.row] += w;
  }
  return State::from_vec(xv + acc);
}

Eigen::VectorXd estimate_fmax(const lie::ControlAffineSystem& sys, int rho, const Box& x_box,
                              const Box& u_box, int n_samples, std::uint64_t seed) {
  sys.validate();
  if (n_samples <= 0) throw std::invalid_argument("estimate_fmax: need samples");
  if (x_box.dim() != sys.n_x || u_box.dim() != sys.m)
    throw std::invalid_argument("estimate_fmax: box dimension mismatch");

  // Fields of derivative order rho+2 only (one past the predictor).
  struct FTerm {
    int row;
    std::vector<int> u_ix;
    int slot;
  };
  std::vector<FTerm> terms;
  std::vector<lie::ScalarField> outputs;
  for (int i = 0; i < sys.n_x; ++i) {
    Chain c = grow_chain(lie::ScalarField::var(i), sys, rho + 2);
    for (size_t k = 0; k < c.fields.size(); ++k) {
      if (c.levels[k] != rho + 2) continue;
      const auto& field = c.fields[k];
      if (field.is_constant() && field.constant_value() == 0.0) continue;
      terms.push_back({i, control_indices(c.paths[k]), static_cast<int>(outputs.size())});
      outputs.push_back(field);
    }
  }
  Eigen::VectorXd fmax = Eigen::VectorXd::Zero(sys.n_x);
  if (outputs.empty()) return fmax;

  expr::Tape tape(outputs, sys.n_x);
  Rng rng(seed);
  std::vector<double> vals(tape.n_outputs()), scratch;
  for (int s = 0; s < n_samples; ++s) {
    const Eigen::VectorXd x = rng.uniform_in(x_box);
    const Eigen::VectorXd u = rng.uniform_in(u_box);
    tape.eval(std::span<const double>(x.data(), static_cast<size_t>(x.size())), vals, scratch);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(sys.n_x);
    for (const FTerm& t : terms) {
      double w = vals[t.slot];
      for (int j : t.u_ix) w *= u[j];
      acc[t.row] += w;
    }
    fmax = fmax.cwiseMax(acc.cwiseAbs());
  }
  return fmax;
}

Eigen::VectorXd truncation_error_bound(int rho, int k, double ts, const Eigen::VectorXd& fmax) {
  if (rho < 0 || k < 0 || !(ts > 0.0))
    throw std::invalid_argument("truncation_error_bound: bad arguments");
  const double horizon = k * ts;
  return fmax * (std::pow(horizon, rho + 1) / factorial(rho + 1));
}

}  // namespace kbmpc::lifting
