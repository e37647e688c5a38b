#pragma once

#include "kbmpc/bilinear.hpp"
#include "kbmpc/edmd.hpp"
#include "kbmpc/mpc.hpp"
#include "kbmpc/plant.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace kbmpc::cli {

inline constexpr const char* kToolName = "kbmpc";
inline constexpr const char* kToolVersion = "0.1.0";

struct LiftingConfig {
  int rho = 2;
  std::uint64_t probe_seed = 7777;
  int probe_points = 64;
};

struct FitConfig {
  std::optional<double> ridge;    // empty -> automatic scaling
  double holdout_fraction = 0.1;  // tail trajectories reserved for validation
};

/// Diagonal tracking weights; assembled into full matrices on demand.
struct MpcSection {
  int horizon = 20;
  Eigen::VectorXd q;           // 8 output weights
  Eigen::VectorXd q_terminal;  // 8
  Eigen::VectorXd r;           // 2 input weights
  int iter_max = 3;
  double eps_conv = 1e-4;
};

struct OpenLoopConfig {
  int n_rollouts = 1000;
  int steps = 20;
  std::uint64_t seed = 777001;
};

struct TrackConfig {
  double mu = 0.98;    // simulated truth slip
  double kappa = 0.94;
  double coarse_dt = 0.5;          // reference scripting grid
  std::string reference = "parking";  // built-in profile: "parking" | "straight"
  double straight_v = 0.8;
  double straight_duration = 8.0;
};

/// Whole-pipeline configuration document. JSON parsing is strict: unknown
/// keys are rejected; missing keys keep their defaults. `out_dir` and
/// `threads` are runtime placement/parallelism knobs and are excluded from
/// the canonical form, so the config hash identifies the experiment, not
/// where its files land.
struct RunConfig {
  PlantParams plant;  // geometry; slip factors here are ignored
  Limits limits;
  edmd::DataGenConfig data;
  LiftingConfig lifting;
  FitConfig edmd_fit;
  MpcSection mpc_weights;
  OpenLoopConfig openloop;
  TrackConfig track;
  std::string out_dir = "out";
  int threads = 0;  // 0 -> hardware concurrency; never serialized

  static RunConfig defaults();
  void validate() const;
  mpc::MpcConfig make_mpc_config() const;
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
/// Pretty-printed document including out_dir (a usable config file).
std::string config_to_json(const RunConfig& cfg);
/// Canonical form used for hashing (out_dir removed).
std::string canonical_config(const RunConfig& cfg);
std::uint64_t config_hash(const RunConfig& cfg);
/// "kbmpc <version> config <hex hash>", embedded in every artifact.
std::string provenance_line(const RunConfig& cfg);

struct GenerateResult {
  std::string dataset_path;
  std::string file_hash;  // hex digest of the file bytes
  int transitions = 0;
};

GenerateResult cmd_generate(const RunConfig& cfg);

struct IdentifyResult {
  std::string model_path;
  std::string manifest_path;
  std::string report_path;
  int observables = 0;
  double ridge = 0.0;
  double train_rms = 0.0;
  double holdout_rms = 0.0;  // NaN when no transitions were held out
};

/// Fits on the leading trajectories, validates one-step output prediction
/// on the held-out tail, and saves the model with the basis manifest.
IdentifyResult cmd_identify(const RunConfig& cfg, const std::string& dataset_path);

/// One randomized evaluation rollout; index `rollout` fixes the stream.
struct OpenLoopCase {
  State x0;
  double mu = 1.0;
  std::vector<Control> controls;
};

OpenLoopCase sample_openloop_case(const RunConfig& cfg, int rollout);

struct OpenLoopOptions {
  std::vector<std::string> variants = {"kbm", "lkbm", "nm", "llnm"};
  int debug_rollout = -1;  // >= 0 writes a single-rollout trace file
};

struct OpenLoopReport {
  std::vector<bilinear::Predictor> variants;
  std::vector<bilinear::ErrorMetrics> summary;                // per variant
  std::vector<std::vector<bilinear::ErrorMetrics>> per_step;  // [variant][step]
  std::string summary_path;
  std::string per_step_path;
  std::string debug_path;  // empty unless debug_rollout was set
};

OpenLoopReport cmd_eval_openloop(const RunConfig& cfg, const std::string& model_path,
                                 const OpenLoopOptions& opt = {});

struct TrackOptions {
  std::string controller = "both";  // "kbmpc" | "lmpc" | "both"
  std::string reference_path;       // empty -> build the configured profile
};

struct ControllerRun {
  std::string csv_path;
  std::string summary_path;
  bilinear::ErrorMetrics errors;
  double mean_cost = 0.0;
  int steps = 0;
};

struct TrackOutcome {
  std::string reference_path;  // reference actually tracked, saved alongside
  std::optional<ControllerRun> kbmpc;
  std::optional<ControllerRun> lmpc;
  std::string comparison_path;  // written when both controllers ran
};

TrackOutcome cmd_track(const RunConfig& cfg, const std::string& model_path,
                       const TrackOptions& opt = {});

struct DemoResult {
  GenerateResult generate;
  IdentifyResult identify;
  OpenLoopReport openloop;
  TrackOutcome track;
  std::string summary_path;
};

/// Full pipeline: generate -> identify -> eval-openloop -> track both
/// controllers, then a machine-readable summary. The summary contains no
/// wall-clock fields, so reruns with the same seeds are byte-identical.
DemoResult cmd_demo(const RunConfig& cfg);

/// Argument parsing, config loading and error-to-exit-code mapping:
/// 0 ok, 1 usage, 2 numerical failure, 3 I/O.
int run_cli(int argc, const char* const* argv);

}  // namespace kbmpc::cli
