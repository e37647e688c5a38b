#pragma once

#include "kbmpc/expr.hpp"
#include "kbmpc/lie.hpp"
#include "kbmpc/plant.hpp"
#include "kbmpc/util.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace kbmpc::lifting {

/// Where a retained observable came from: which seed function it chains
/// off, how many directional derivatives were applied, and along which
/// fields (0 = drift, j = j-th control field).
struct Provenance {
  std::string seed;       // "h0".."h7" for output chains, "f0".."f5" for state chains
  int level = 0;          // number of derivative applications; 0 = the output itself
  std::vector<int> path;  // one entry per application
  std::uint64_t fingerprint = 0;
};

/// Fixed pseudo-random probe states used to fingerprint candidate
/// observables for zero/constant pruning and deduplication.
struct ProbeConfig {
  std::uint64_t seed = 7777;
  int n_points = 64;
  Box x_box;

  static ProbeConfig defaults();
};

/// Ordered set of retained observables. The first n_y entries are always
/// the raw output channels; the rest are derivative-chain fields that
/// survived pruning. Immutable after build; evaluation is reentrant.
struct LiftingBasis {
  std::vector<lie::ScalarField> obs;
  std::vector<Provenance> prov;
  int rho = 0;
  int n_y = 0;
  int n_x = 0;
  int m = 0;
  int raw_count = 0;  // chain size before pruning, n_y + (n_y+n_x) * sum_l (m+1)^l
  expr::Tape tape;    // evaluates all retained observables at once

  int n() const { return static_cast<int>(obs.size()); }
  /// Dimension of the stacked feature vector [z; u_1 z; ...; u_m z; u].
  int psi_dim() const { return (m + 1) * n() + m; }
};

/// Builds the derivative chains of every output row and every state row up
/// to `rho` applications past the first, fingerprints each candidate at the
/// probe states, and retains those that are neither (numerically) zero,
/// constant, nor duplicates of an earlier retained observable.
LiftingBasis build_basis(const lie::ControlAffineSystem& sys, int rho, const ProbeConfig& probe);

/// z = values of the retained observables at x. The first n_y entries
/// equal the plant output.
Eigen::VectorXd eval_psi_x(const LiftingBasis& basis, const State& x);
void eval_psi_x(const LiftingBasis& basis, std::span<const double> x, std::span<double> out,
                std::vector<double>& scratch);

/// Stacked regression features [z; u_1 z; ...; u_m z; u_1; ...; u_m].
Eigen::VectorXd eval_psi(const LiftingBasis& basis, const State& x, const Control& u);
void eval_psi(const LiftingBasis& basis, std::span<const double> x, std::span<const double> u,
              std::span<double> out, std::vector<double>& scratch);

/// Ordered JSON description of the retained observables (seed, level,
/// path, fingerprint hash) for reproducibility audits.
std::string basis_manifest_json(const LiftingBasis& basis);

/// Hash of the manifest; model files store it to detect basis mismatches.
std::uint64_t basis_hash(const LiftingBasis& basis);

/// Zero-order-hold Taylor step over the state: advances each state row by
/// its time derivatives up to order rho+1, with the input held constant.
/// Exact for rows whose higher derivatives vanish (tan_phi, v).
class TaylorPredictor {
 public:
  TaylorPredictor(const lie::ControlAffineSystem& sys, int rho);

  State step(const State& x, const Control& u, double ts) const;
  int rho() const { return rho_; }

 private:
  struct Term {
    int row;                // state row the term feeds
    int order;              // derivative order (>= 1)
    std::vector<int> u_ix;  // control indices whose product scales the field value
    int slot;               // output slot in the tape
  };
  expr::Tape tape_;
  std::vector<Term> terms_;
  int n_x_ = 0;
  int rho_ = 0;
};

/// Per-state-row maximum of |d^(rho+2) x_i / dt^(rho+2)| (one derivative
/// order past the predictor) over uniform samples of the given state and
/// input boxes.
Eigen::VectorXd estimate_fmax(const lie::ControlAffineSystem& sys, int rho, const Box& x_box,
                              const Box& u_box, int n_samples, std::uint64_t seed);

/// Worst-case accumulated truncation error after k steps of length ts:
/// (k ts)^(rho+1) / (rho+1)! * fmax, elementwise over state rows.
Eigen::VectorXd truncation_error_bound(int rho, int k, double ts, const Eigen::VectorXd& fmax);

}  // namespace kbmpc::lifting
