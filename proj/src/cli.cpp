#include "kbmpc/cli.hpp"

#include "kbmpc/lie.hpp"
#include "kbmpc/lifting.hpp"
#include "kbmpc/util.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>

namespace kbmpc::cli {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr const char* kChannelNames[8] = {"x0",      "y0", "theta0", "theta1",
                                          "tan_phi", "v",  "x1",     "y1"};
constexpr const char* kErrorNames[4] = {"e_x0y0", "e_x1y1", "e_theta0", "e_theta1"};

[[noreturn]] void bad_config(const std::string& msg) {
  throw std::invalid_argument("config: " + msg);
}

void expect_keys(const ordered_json& j, const char* section,
                 std::initializer_list<const char*> keys) {
  if (!j.is_object()) bad_config(std::string(section) + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || item.key() == k;
    if (!known) bad_config("unknown key '" + item.key() + "' in " + section);
  }
}

Eigen::VectorXd get_vector(const ordered_json& j, const char* key, const Eigen::VectorXd& def,
                           int size, const char* section) {
  if (!j.contains(key)) return def;
  const auto& a = j.at(key);
  if (!a.is_array() || static_cast<int>(a.size()) != size)
    bad_config(std::string(key) + " in " + section + " must be an array of " +
               std::to_string(size) + " numbers");
  Eigen::VectorXd v(size);
  for (int i = 0; i < size; ++i) v[i] = a[i].get<double>();
  return v;
}

ordered_json vec_json(const Eigen::VectorXd& v) {
  ordered_json a = ordered_json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

ordered_json meta_json(const RunConfig& cfg) {
  ordered_json m;
  m["tool"] = kToolName;
  m["version"] = kToolVersion;
  m["config"] = to_hex(config_hash(cfg));
  return m;
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

lifting::LiftingBasis build_basis_from(const RunConfig& cfg) {
  const lie::ControlAffineSystem sys = lie::tractor_trailer_nominal(cfg.plant.nominal());
  lifting::ProbeConfig probe = lifting::ProbeConfig::defaults();
  probe.seed = cfg.lifting.probe_seed;
  probe.n_points = cfg.lifting.probe_points;
  return lifting::build_basis(sys, cfg.lifting.rho, probe);
}

ordered_json metrics_json(const bilinear::ErrorMetrics& em) {
  ordered_json j;
  for (int c = 0; c < 4; ++c) j[kErrorNames[c]] = em.channel(c);
  return j;
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.data = edmd::DataGenConfig::defaults();
  cfg.mpc_weights.q = Eigen::VectorXd(8);
  cfg.mpc_weights.q << 10, 10, 1, 1, 0, 0, 10, 10;
  cfg.mpc_weights.q_terminal = 10.0 * cfg.mpc_weights.q;
  cfg.mpc_weights.r = Eigen::VectorXd(2);
  cfg.mpc_weights.r << 0.01, 1.0;
  return cfg;
}

void RunConfig::validate() const {
  plant.validate();
  limits.validate();
  edmd::DataGenConfig d = data;
  d.geometry = plant;
  d.threads = 1;  // resolved at execution time
  d.validate();
  if (lifting.rho < 0 || lifting.rho > 3) bad_config("lifting.rho must be in [0, 3]");
  if (lifting.probe_points < 8) bad_config("lifting.probe_points must be at least 8");
  if (edmd_fit.ridge && !(*edmd_fit.ridge >= 0.0)) bad_config("edmd.ridge must be >= 0");
  if (!(edmd_fit.holdout_fraction >= 0.0 && edmd_fit.holdout_fraction <= 0.5))
    bad_config("edmd.holdout_fraction must be in [0, 0.5]");
  if (mpc_weights.q.size() != 8 || mpc_weights.q_terminal.size() != 8)
    bad_config("mpc.q and mpc.q_terminal must have 8 entries");
  if (mpc_weights.r.size() != 2) bad_config("mpc.r must have 2 entries");
  if (openloop.n_rollouts < 1 || openloop.steps < 1)
    bad_config("openloop counts must be positive");
  if (!(track.mu > 0.0) || !(track.kappa > 0.0)) bad_config("track slip factors must be positive");
  if (!(track.coarse_dt >= data.ts)) bad_config("track.coarse_dt must be at least the data ts");
  if (track.reference != "parking" && track.reference != "straight")
    bad_config("track.reference must be 'parking' or 'straight'");
  if (track.reference == "straight" &&
      (!(track.straight_v > 0.0) || !(track.straight_duration > 0.0)))
    bad_config("straight profile needs positive speed and duration");
  if (out_dir.empty()) bad_config("out_dir must not be empty");
  make_mpc_config().validate();
}

mpc::MpcConfig RunConfig::make_mpc_config() const {
  mpc::MpcConfig c;
  c.horizon = mpc_weights.horizon;
  c.Q = mpc_weights.q.asDiagonal();
  c.Q_terminal = mpc_weights.q_terminal.asDiagonal();
  c.R = mpc_weights.r.asDiagonal();
  c.iter_max = mpc_weights.iter_max;
  c.eps_conv = mpc_weights.eps_conv;
  c.ts = data.ts;
  c.limits = limits;
  return c;
}

RunConfig parse_config(const std::string& json_text) {
  const ordered_json j = ordered_json::parse(json_text);
  RunConfig cfg = RunConfig::defaults();
  expect_keys(j, "the top level",
              {"plant", "limits", "data", "lifting", "edmd", "mpc", "openloop", "track",
               "out_dir"});

  if (j.contains("plant")) {
    const auto& p = j.at("plant");
    expect_keys(p, "plant", {"l0", "l1", "lH"});
    cfg.plant.l0 = p.value("l0", cfg.plant.l0);
    cfg.plant.l1 = p.value("l1", cfg.plant.l1);
    cfg.plant.lH = p.value("lH", cfg.plant.lH);
  }
  if (j.contains("limits")) {
    const auto& l = j.at("limits");
    expect_keys(l, "limits", {"omega_max", "a_max", "tan_phi_max", "v_max", "dtheta_max"});
    cfg.limits.omega_max = l.value("omega_max", cfg.limits.omega_max);
    cfg.limits.a_max = l.value("a_max", cfg.limits.a_max);
    cfg.limits.tan_phi_max = l.value("tan_phi_max", cfg.limits.tan_phi_max);
    cfg.limits.v_max = l.value("v_max", cfg.limits.v_max);
    cfg.limits.dtheta_max = l.value("dtheta_max", cfg.limits.dtheta_max);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    expect_keys(d, "data",
                {"n_traj", "steps", "ts", "seed", "x_lo", "x_hi", "u_lo", "u_hi", "mu_lo",
                 "mu_hi", "kappa"});
    cfg.data.n_traj = d.value("n_traj", cfg.data.n_traj);
    cfg.data.steps = d.value("steps", cfg.data.steps);
    cfg.data.ts = d.value("ts", cfg.data.ts);
    cfg.data.seed = d.value("seed", cfg.data.seed);
    cfg.data.x_box.lo = get_vector(d, "x_lo", cfg.data.x_box.lo, 6, "data");
    cfg.data.x_box.hi = get_vector(d, "x_hi", cfg.data.x_box.hi, 6, "data");
    cfg.data.u_box.lo = get_vector(d, "u_lo", cfg.data.u_box.lo, 2, "data");
    cfg.data.u_box.hi = get_vector(d, "u_hi", cfg.data.u_box.hi, 2, "data");
    cfg.data.mu_lo = d.value("mu_lo", cfg.data.mu_lo);
    cfg.data.mu_hi = d.value("mu_hi", cfg.data.mu_hi);
    cfg.data.kappa = d.value("kappa", cfg.data.kappa);
  }
  if (j.contains("lifting")) {
    const auto& l = j.at("lifting");
    expect_keys(l, "lifting", {"rho", "probe_seed", "probe_points"});
    cfg.lifting.rho = l.value("rho", cfg.lifting.rho);
    cfg.lifting.probe_seed = l.value("probe_seed", cfg.lifting.probe_seed);
    cfg.lifting.probe_points = l.value("probe_points", cfg.lifting.probe_points);
  }
  if (j.contains("edmd")) {
    const auto& e = j.at("edmd");
    expect_keys(e, "edmd", {"ridge", "holdout_fraction"});
    if (e.contains("ridge") && !e.at("ridge").is_null())
      cfg.edmd_fit.ridge = e.at("ridge").get<double>();
    cfg.edmd_fit.holdout_fraction = e.value("holdout_fraction", cfg.edmd_fit.holdout_fraction);
  }
  if (j.contains("mpc")) {
    const auto& m = j.at("mpc");
    expect_keys(m, "mpc", {"horizon", "q", "q_terminal", "r", "iter_max", "eps_conv"});
    cfg.mpc_weights.horizon = m.value("horizon", cfg.mpc_weights.horizon);
    cfg.mpc_weights.q = get_vector(m, "q", cfg.mpc_weights.q, 8, "mpc");
    cfg.mpc_weights.q_terminal = get_vector(m, "q_terminal", cfg.mpc_weights.q_terminal, 8, "mpc");
    cfg.mpc_weights.r = get_vector(m, "r", cfg.mpc_weights.r, 2, "mpc");
    cfg.mpc_weights.iter_max = m.value("iter_max", cfg.mpc_weights.iter_max);
    cfg.mpc_weights.eps_conv = m.value("eps_conv", cfg.mpc_weights.eps_conv);
  }
  if (j.contains("openloop")) {
    const auto& o = j.at("openloop");
    expect_keys(o, "openloop", {"n_rollouts", "steps", "seed"});
    cfg.openloop.n_rollouts = o.value("n_rollouts", cfg.openloop.n_rollouts);
    cfg.openloop.steps = o.value("steps", cfg.openloop.steps);
    cfg.openloop.seed = o.value("seed", cfg.openloop.seed);
  }
  if (j.contains("track")) {
    const auto& t = j.at("track");
    expect_keys(t, "track",
                {"mu", "kappa", "coarse_dt", "reference", "straight_v", "straight_duration"});
    cfg.track.mu = t.value("mu", cfg.track.mu);
    cfg.track.kappa = t.value("kappa", cfg.track.kappa);
    cfg.track.coarse_dt = t.value("coarse_dt", cfg.track.coarse_dt);
    cfg.track.reference = t.value("reference", cfg.track.reference);
    cfg.track.straight_v = t.value("straight_v", cfg.track.straight_v);
    cfg.track.straight_duration = t.value("straight_duration", cfg.track.straight_duration);
  }
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) { return parse_config(read_file(path)); }

namespace {

ordered_json config_document(const RunConfig& cfg, bool with_out_dir) {
  ordered_json j;
  j["plant"] = {{"l0", cfg.plant.l0}, {"l1", cfg.plant.l1}, {"lH", cfg.plant.lH}};
  j["limits"] = {{"omega_max", cfg.limits.omega_max},
                 {"a_max", cfg.limits.a_max},
                 {"tan_phi_max", cfg.limits.tan_phi_max},
                 {"v_max", cfg.limits.v_max},
                 {"dtheta_max", cfg.limits.dtheta_max}};
  ordered_json d;
  d["n_traj"] = cfg.data.n_traj;
  d["steps"] = cfg.data.steps;
  d["ts"] = cfg.data.ts;
  d["seed"] = cfg.data.seed;
  d["x_lo"] = vec_json(cfg.data.x_box.lo);
  d["x_hi"] = vec_json(cfg.data.x_box.hi);
  d["u_lo"] = vec_json(cfg.data.u_box.lo);
  d["u_hi"] = vec_json(cfg.data.u_box.hi);
  d["mu_lo"] = cfg.data.mu_lo;
  d["mu_hi"] = cfg.data.mu_hi;
  d["kappa"] = cfg.data.kappa;
  j["data"] = std::move(d);
  j["lifting"] = {{"rho", cfg.lifting.rho},
                  {"probe_seed", cfg.lifting.probe_seed},
                  {"probe_points", cfg.lifting.probe_points}};
  j["edmd"] = {{"ridge", cfg.edmd_fit.ridge ? ordered_json(*cfg.edmd_fit.ridge)
                                            : ordered_json(nullptr)},
               {"holdout_fraction", cfg.edmd_fit.holdout_fraction}};
  ordered_json m;
  m["horizon"] = cfg.mpc_weights.horizon;
  m["q"] = vec_json(cfg.mpc_weights.q);
  m["q_terminal"] = vec_json(cfg.mpc_weights.q_terminal);
  m["r"] = vec_json(cfg.mpc_weights.r);
  m["iter_max"] = cfg.mpc_weights.iter_max;
  m["eps_conv"] = cfg.mpc_weights.eps_conv;
  j["mpc"] = std::move(m);
  j["openloop"] = {{"n_rollouts", cfg.openloop.n_rollouts},
                   {"steps", cfg.openloop.steps},
                   {"seed", cfg.openloop.seed}};
  j["track"] = {{"mu", cfg.track.mu},
                {"kappa", cfg.track.kappa},
                {"coarse_dt", cfg.track.coarse_dt},
                {"reference", cfg.track.reference},
                {"straight_v", cfg.track.straight_v},
                {"straight_duration", cfg.track.straight_duration}};
  if (with_out_dir) j["out_dir"] = cfg.out_dir;
  return j;
}

}  // namespace

std::string config_to_json(const RunConfig& cfg) {
  return config_document(cfg, true).dump(2) + "\n";
}

std::string canonical_config(const RunConfig& cfg) {
  return config_document(cfg, false).dump(2) + "\n";
}

std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(canonical_config(cfg)); }

std::string provenance_line(const RunConfig& cfg) {
  return std::string(kToolName) + " " + kToolVersion + " config " + to_hex(config_hash(cfg));
}

GenerateResult cmd_generate(const RunConfig& cfg) {
  cfg.validate();
  edmd::DataGenConfig d = cfg.data;
  d.geometry = cfg.plant;
  d.threads = resolve_threads(cfg.threads);
  const edmd::Dataset ds = edmd::generate_dataset(d);
  GenerateResult res;
  res.dataset_path = join_path(cfg.out_dir, "dataset.bin");
  edmd::save_dataset(res.dataset_path, ds, provenance_line(cfg));
  res.file_hash = to_hex(fnv1a64(read_file(res.dataset_path)));
  res.transitions = ds.size();
  return res;
}

IdentifyResult cmd_identify(const RunConfig& cfg, const std::string& dataset_path) {
  cfg.validate();
  const edmd::Dataset ds = edmd::load_dataset(dataset_path);
  if (ds.ts != cfg.data.ts)
    throw std::invalid_argument("dataset sampling time " + format_double(ds.ts) +
                                " does not match the configured " + format_double(cfg.data.ts));
  const lifting::LiftingBasis basis = build_basis_from(cfg);
  const int threads = resolve_threads(cfg.threads);

  // Hold out whole trajectories from the tail so validation transitions
  // never share a rollout with training ones.
  const int total = ds.size();
  int holdout = 0;
  if (cfg.edmd_fit.holdout_fraction > 0.0) {
    if (ds.n_traj > 1 && ds.steps > 0 && ds.n_traj * ds.steps == total) {
      const int h_traj = static_cast<int>(std::floor(cfg.edmd_fit.holdout_fraction * ds.n_traj));
      holdout = h_traj * ds.steps;
    } else {
      holdout = static_cast<int>(std::floor(cfg.edmd_fit.holdout_fraction * total));
    }
  }
  const int train = total - holdout;
  if (train <= 0) throw std::invalid_argument("identify: holdout leaves no training data");

  edmd::Dataset head = ds;
  head.x = ds.x.leftCols(train);
  head.u = ds.u.leftCols(train);
  head.x_next = ds.x_next.leftCols(train);
  const edmd::BilinearModel model = edmd::fit(head, basis, cfg.edmd_fit.ridge, threads);

  // One-step output prediction residuals over every transition.
  Eigen::MatrixXd sq(8, total);
  parallel_for(total, threads, [&](int k) {
    const State x = State::from_vec(ds.x.col(k));
    const Eigen::VectorXd z = lifting::eval_psi_x(basis, x);
    const Eigen::VectorXd zp = bilinear::step_bilinear(model, z, ds.u.col(k));
    const OutputVec y = output_map(State::from_vec(ds.x_next.col(k)), cfg.plant);
    sq.col(k) = (zp.head(8) - y).array().square();
  });
  const double train_rms = std::sqrt(sq.leftCols(train).mean());
  const double holdout_rms =
      holdout > 0 ? std::sqrt(sq.rightCols(holdout).mean()) : std::numeric_limits<double>::quiet_NaN();

  IdentifyResult res;
  res.model_path = join_path(cfg.out_dir, "model.bin");
  res.manifest_path = join_path(cfg.out_dir, "basis_manifest.json");
  res.report_path = join_path(cfg.out_dir, "identify_report.json");
  res.observables = basis.n();
  res.ridge = model.ridge;
  res.train_rms = train_rms;
  res.holdout_rms = holdout_rms;

  edmd::save_model(res.model_path, model, provenance_line(cfg));

  ordered_json man;
  man["meta"] = meta_json(cfg);
  man["basis"] = ordered_json::parse(lifting::basis_manifest_json(basis));
  write_file(res.manifest_path, man.dump(2) + "\n");

  ordered_json rep;
  rep["meta"] = meta_json(cfg);
  rep["transitions"] = {{"train", train}, {"holdout", holdout}};
  rep["rho"] = cfg.lifting.rho;
  rep["observables"] = basis.n();
  rep["ridge"] = model.ridge;
  rep["one_step_rms"] = {{"train", train_rms},
                         {"holdout", holdout > 0 ? ordered_json(holdout_rms)
                                                 : ordered_json(nullptr)}};
  if (holdout > 0) {
    ordered_json ch;
    for (int c = 0; c < 8; ++c)
      ch[kChannelNames[c]] = std::sqrt(sq.row(c).tail(holdout).mean());
    rep["holdout_channel_rms"] = std::move(ch);
  } else {
    rep["holdout_channel_rms"] = nullptr;
  }
  write_file(res.report_path, rep.dump(2) + "\n");
  return res;
}

OpenLoopCase sample_openloop_case(const RunConfig& cfg, int rollout) {
  Rng rng(cfg.openloop.seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(rollout + 1));
  OpenLoopCase c;
  c.mu = rng.uniform(cfg.data.mu_lo, cfg.data.mu_hi);
  const Eigen::VectorXd s = rng.uniform_in(cfg.data.x_box);
  c.x0.x0 = s[0];
  c.x0.y0 = s[1];
  c.x0.theta0 = s[2];
  c.x0.theta1 = s[2] - s[3];  // axis 3 parameterizes the hitch angle
  c.x0.tan_phi = s[4];
  c.x0.v = s[5];
  c.controls.resize(cfg.openloop.steps);
  for (Control& u : c.controls) {
    const Eigen::VectorXd uu = rng.uniform_in(cfg.data.u_box);
    u = Control{uu[0], uu[1]};
  }
  return c;
}

OpenLoopReport cmd_eval_openloop(const RunConfig& cfg, const std::string& model_path,
                                 const OpenLoopOptions& opt) {
  cfg.validate();
  if (opt.variants.empty()) throw std::invalid_argument("eval-openloop: no variants requested");
  std::vector<bilinear::Predictor> variants;
  for (const std::string& name : opt.variants)
    variants.push_back(bilinear::predictor_from_string(name));

  const lifting::LiftingBasis basis = build_basis_from(cfg);
  const edmd::BilinearModel model = edmd::load_model(model_path, basis);
  bilinear::PredictContext ctx;
  ctx.model = &model;
  ctx.basis = &basis;
  ctx.nominal = cfg.plant.nominal();
  ctx.ts = cfg.data.ts;

  const int n_roll = cfg.openloop.n_rollouts;
  const int steps = cfg.openloop.steps;
  const int n_var = static_cast<int>(variants.size());
  if (opt.debug_rollout >= n_roll)
    throw std::invalid_argument("eval-openloop: debug rollout index out of range");

  // Per-rollout per-step channel errors, reduced serially afterwards so the
  // result is independent of the thread count.
  std::vector<double> err(static_cast<std::size_t>(n_roll) * n_var * steps * 4);
  const auto slot = [&](int r, int v, int k, int c) -> double& {
    return err[((static_cast<std::size_t>(r) * n_var + v) * steps + k) * 4 + c];
  };
  parallel_for(n_roll, resolve_threads(cfg.threads), [&](int r) {
    const OpenLoopCase cse = sample_openloop_case(cfg, r);
    PlantParams truth_p = cfg.plant;
    truth_p.mu = cse.mu;
    truth_p.kappa = cfg.data.kappa;
    std::vector<OutputVec> truth(steps);
    State cur = cse.x0;
    for (int k = 0; k < steps; ++k) {
      cur = rk4_step(cur, cse.controls[k], truth_p, cfg.data.ts);
      truth[k] = output_map(cur, cfg.plant);
    }
    for (int v = 0; v < n_var; ++v) {
      const std::vector<OutputVec> pred =
          bilinear::predict(variants[v], cse.x0, cse.controls, ctx);
      for (int k = 0; k < steps; ++k) {
        const bilinear::ErrorMetrics em = bilinear::error_metrics({truth[k]}, {pred[k]});
        for (int c = 0; c < 4; ++c) slot(r, v, k, c) = em.channel(c);
      }
    }
  });

  OpenLoopReport rep;
  rep.variants = variants;
  rep.per_step.assign(n_var, std::vector<bilinear::ErrorMetrics>(steps));
  rep.summary.assign(n_var, {});
  for (int v = 0; v < n_var; ++v) {
    for (int k = 0; k < steps; ++k) {
      double mean[4] = {0, 0, 0, 0};
      for (int r = 0; r < n_roll; ++r)
        for (int c = 0; c < 4; ++c) mean[c] += slot(r, v, k, c) / n_roll;
      rep.per_step[v][k] =
          bilinear::ErrorMetrics{mean[0], mean[1], mean[2], mean[3]};
    }
    double total[4] = {0, 0, 0, 0};
    for (int k = 0; k < steps; ++k)
      for (int c = 0; c < 4; ++c) total[c] += rep.per_step[v][k].channel(c) / steps;
    rep.summary[v] = bilinear::ErrorMetrics{total[0], total[1], total[2], total[3]};
  }

  const std::string preamble = provenance_line(cfg);
  {
    std::string out = "# " + preamble + "\nvariant,e_x0y0,e_x1y1,e_theta0,e_theta1\n";
    for (int v = 0; v < n_var; ++v) {
      out += bilinear::to_string(variants[v]);
      for (int c = 0; c < 4; ++c) out += "," + format_double(rep.summary[v].channel(c));
      out += "\n";
    }
    rep.summary_path = join_path(cfg.out_dir, "openloop_summary.csv");
    write_file(rep.summary_path, out);
  }
  {
    std::string out = "# " + preamble + "\nvariant,step,e_x0y0,e_x1y1,e_theta0,e_theta1\n";
    for (int v = 0; v < n_var; ++v)
      for (int k = 0; k < steps; ++k) {
        out += bilinear::to_string(variants[v]) + "," + std::to_string(k + 1);
        for (int c = 0; c < 4; ++c) out += "," + format_double(rep.per_step[v][k].channel(c));
        out += "\n";
      }
    rep.per_step_path = join_path(cfg.out_dir, "openloop_per_step.csv");
    write_file(rep.per_step_path, out);
  }
  if (opt.debug_rollout >= 0) {
    const int r = opt.debug_rollout;
    const OpenLoopCase cse = sample_openloop_case(cfg, r);
    PlantParams truth_p = cfg.plant;
    truth_p.mu = cse.mu;
    truth_p.kappa = cfg.data.kappa;
    std::string out = "# " + preamble + "\nseries,step,x0,y0,theta0,theta1,tan_phi,v,x1,y1\n";
    const auto emit = [&](const std::string& series, const std::vector<OutputVec>& ys) {
      for (int k = 0; k < steps; ++k) {
        out += series + "," + std::to_string(k + 1);
        for (int c = 0; c < 8; ++c) out += "," + format_double(ys[k][c]);
        out += "\n";
      }
    };
    std::vector<OutputVec> truth(steps);
    State cur = cse.x0;
    for (int k = 0; k < steps; ++k) {
      cur = rk4_step(cur, cse.controls[k], truth_p, cfg.data.ts);
      truth[k] = output_map(cur, cfg.plant);
    }
    emit("truth", truth);
    for (int v = 0; v < n_var; ++v)
      emit(bilinear::to_string(variants[v]),
           bilinear::predict(variants[v], cse.x0, cse.controls, ctx));
    rep.debug_path =
        join_path(cfg.out_dir, "openloop_rollout_" + std::to_string(r) + ".csv");
    write_file(rep.debug_path, out);
  }
  return rep;
}

TrackOutcome cmd_track(const RunConfig& cfg, const std::string& model_path,
                       const TrackOptions& opt) {
  cfg.validate();
  const bool run_kb = opt.controller == "kbmpc" || opt.controller == "both";
  const bool run_lm = opt.controller == "lmpc" || opt.controller == "both";
  if (!run_kb && !run_lm)
    throw std::invalid_argument("track: controller must be 'kbmpc', 'lmpc' or 'both'");

  ReferenceTrajectory ref;
  if (!opt.reference_path.empty()) {
    ref = load_reference_csv(opt.reference_path);
  } else {
    const ReferenceProfile profile =
        cfg.track.reference == "parking"
            ? parking_profile()
            : straight_profile(cfg.track.straight_v, cfg.track.straight_duration);
    ref = generate_reference(profile, cfg.plant.nominal(), cfg.track.coarse_dt, cfg.data.ts,
                             cfg.limits);
  }

  TrackOutcome res;
  res.reference_path = join_path(cfg.out_dir, "reference.csv");
  save_reference_csv(res.reference_path, ref, provenance_line(cfg));

  std::optional<lifting::LiftingBasis> basis;
  std::optional<edmd::BilinearModel> model;
  if (run_kb) {
    basis.emplace(build_basis_from(cfg));
    model.emplace(edmd::load_model(model_path, *basis));
  }

  mpc::ClosedLoopSetup setup;
  setup.true_params = cfg.plant;
  setup.true_params.mu = cfg.track.mu;
  setup.true_params.kappa = cfg.track.kappa;
  setup.model = model ? &*model : nullptr;
  setup.basis = basis ? &*basis : nullptr;
  setup.cfg = cfg.make_mpc_config();

  const auto run_one = [&](mpc::ControllerKind kind, const std::string& name) {
    const mpc::TrackingLog log = mpc::closed_loop(setup, kind, ref);
    ControllerRun run;
    run.csv_path = join_path(cfg.out_dir, "track_" + name + ".csv");
    run.summary_path = join_path(cfg.out_dir, "track_" + name + "_summary.json");
    run.errors = log.mean_errors();
    run.mean_cost = log.mean_cost();
    run.steps = static_cast<int>(log.rows.size());
    mpc::save_tracking_csv(run.csv_path, log, provenance_line(cfg));
    ordered_json s;
    s["meta"] = meta_json(cfg);
    s["controller"] = name;
    const ordered_json body = ordered_json::parse(mpc::tracking_summary_json(log));
    for (const auto& item : body.items()) s[item.key()] = item.value();
    write_file(run.summary_path, s.dump(2) + "\n");
    return run;
  };

  if (run_kb) res.kbmpc = run_one(mpc::ControllerKind::kbmpc, "kbmpc");
  if (run_lm) res.lmpc = run_one(mpc::ControllerKind::lmpc, "lmpc");

  if (run_kb && run_lm) {
    ordered_json c;
    c["meta"] = meta_json(cfg);
    const auto one = [](const ControllerRun& r) {
      ordered_json j = metrics_json(r.errors);
      j["mean_cost"] = r.mean_cost;
      return j;
    };
    c["kbmpc"] = one(*res.kbmpc);
    c["lmpc"] = one(*res.lmpc);
    ordered_json delta;  // positive entries mean the linearized baseline is worse
    for (int ch = 0; ch < 4; ++ch)
      delta[kErrorNames[ch]] = res.lmpc->errors.channel(ch) - res.kbmpc->errors.channel(ch);
    c["delta"] = std::move(delta);
    c["lmpc_cost_increase_pct"] =
        res.kbmpc->mean_cost > 0.0
            ? ordered_json((res.lmpc->mean_cost - res.kbmpc->mean_cost) / res.kbmpc->mean_cost *
                           100.0)
            : ordered_json(nullptr);
    res.comparison_path = join_path(cfg.out_dir, "track_comparison.json");
    write_file(res.comparison_path, c.dump(2) + "\n");
  }
  return res;
}

DemoResult cmd_demo(const RunConfig& cfg) {
  cfg.validate();
  DemoResult res;
  res.generate = cmd_generate(cfg);
  res.identify = cmd_identify(cfg, res.generate.dataset_path);
  res.openloop = cmd_eval_openloop(cfg, res.identify.model_path);
  TrackOptions topt;
  topt.controller = "both";
  res.track = cmd_track(cfg, res.identify.model_path, topt);

  // File names are kept relative and no wall-clock statistics appear here,
  // so two runs with the same seeds agree byte for byte regardless of the
  // output directory.
  ordered_json j;
  j["meta"] = meta_json(cfg);
  j["dataset"] = {{"file", "dataset.bin"},
                  {"transitions", res.generate.transitions},
                  {"file_hash", res.generate.file_hash}};
  j["model"] = {{"file", "model.bin"},
                {"rho", cfg.lifting.rho},
                {"observables", res.identify.observables},
                {"ridge", res.identify.ridge},
                {"one_step_rms_train", res.identify.train_rms},
                {"one_step_rms_holdout", res.identify.holdout_rms}};
  ordered_json ol;
  ol["rollouts"] = cfg.openloop.n_rollouts;
  ol["steps"] = cfg.openloop.steps;
  for (std::size_t v = 0; v < res.openloop.variants.size(); ++v)
    ol[bilinear::to_string(res.openloop.variants[v])] = metrics_json(res.openloop.summary[v]);
  j["openloop"] = std::move(ol);
  ordered_json tr;
  tr["reference"] = cfg.track.reference;
  tr["steps"] = res.track.kbmpc->steps;
  const auto one = [](const ControllerRun& r) {
    ordered_json o = metrics_json(r.errors);
    o["mean_cost"] = r.mean_cost;
    return o;
  };
  tr["kbmpc"] = one(*res.track.kbmpc);
  tr["lmpc"] = one(*res.track.lmpc);
  tr["lmpc_cost_increase_pct"] =
      res.track.kbmpc->mean_cost > 0.0
          ? ordered_json((res.track.lmpc->mean_cost - res.track.kbmpc->mean_cost) /
                         res.track.kbmpc->mean_cost * 100.0)
          : ordered_json(nullptr);
  j["tracking"] = std::move(tr);

  res.summary_path = join_path(cfg.out_dir, "demo_summary.json");
  write_file(res.summary_path, j.dump(2) + "\n");
  return res;
}

namespace {

void print_metrics(const char* label, const bilinear::ErrorMetrics& em) {
  std::printf("  %-6s e_x0y0 %.6g  e_x1y1 %.6g  e_theta0 %.6g  e_theta1 %.6g\n", label,
              em.e_x0y0, em.e_x1y1, em.e_theta0, em.e_theta1);
}

void print_track(const TrackOutcome& tr) {
  if (tr.kbmpc) {
    print_metrics("kbmpc", tr.kbmpc->errors);
    std::printf("         mean cost %.6g over %d steps -> %s\n", tr.kbmpc->mean_cost,
                tr.kbmpc->steps, tr.kbmpc->csv_path.c_str());
  }
  if (tr.lmpc) {
    print_metrics("lmpc", tr.lmpc->errors);
    std::printf("         mean cost %.6g over %d steps -> %s\n", tr.lmpc->mean_cost,
                tr.lmpc->steps, tr.lmpc->csv_path.c_str());
  }
  if (!tr.comparison_path.empty())
    std::printf("  comparison -> %s\n", tr.comparison_path.c_str());
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Lifted bilinear MPC pipeline for tractor-trailer trajectory tracking"};
  app.require_subcommand(1);
  // Let global flags (--config, --seed, ...) appear after the subcommand too.
  app.fallthrough();

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  int threads = 0;
  app.add_option("--config", config_path, "JSON configuration file (defaults when omitted)")
      ->check(CLI::ExistingFile);
  CLI::Option* seed_opt = app.add_option(
      "--seed", seed, "override the data seed; the evaluation seed becomes seed + 777000");
  CLI::Option* out_opt = app.add_option("--out", out_dir, "output directory");
  CLI::Option* threads_opt =
      app.add_option("--threads", threads, "worker threads (0 = hardware concurrency)")
          ->check(CLI::NonNegativeNumber);

  CLI::App* c_gen = app.add_subcommand("generate", "simulate training transitions");
  CLI::App* c_ident = app.add_subcommand("identify", "build the lifting and fit the model");
  std::string dataset_path;
  c_ident->add_option("--dataset", dataset_path, "dataset file (default <out>/dataset.bin)");
  CLI::App* c_eval =
      app.add_subcommand("eval-openloop", "compare open-loop predictors on random rollouts");
  std::string model_path;
  OpenLoopOptions eval_opt;
  c_eval->add_option("--model", model_path, "model file (default <out>/model.bin)");
  c_eval->add_option("--variants", eval_opt.variants, "predictor variants to evaluate")
      ->delimiter(',');
  c_eval->add_option("--debug-rollout", eval_opt.debug_rollout,
                     "also write the per-step trace of this rollout index");
  CLI::App* c_track = app.add_subcommand("track", "closed-loop tracking of a reference");
  TrackOptions track_opt;
  c_track->add_option("--model", model_path, "model file (default <out>/model.bin)");
  c_track->add_option("--controller", track_opt.controller, "kbmpc, lmpc or both")
      ->check(CLI::IsMember({"kbmpc", "lmpc", "both"}));
  c_track->add_option("--reference", track_opt.reference_path,
                      "reference CSV (default: the configured built-in profile)");
  CLI::App* c_demo = app.add_subcommand("demo", "full pipeline with report files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig::defaults() : load_config(config_path);
    if (*seed_opt) {
      cfg.data.seed = seed;
      cfg.openloop.seed = seed + 777000;
    }
    if (*out_opt) cfg.out_dir = out_dir;
    if (*threads_opt) cfg.threads = threads;
    if (model_path.empty()) model_path = join_path(cfg.out_dir, "model.bin");
    if (dataset_path.empty()) dataset_path = join_path(cfg.out_dir, "dataset.bin");

    if (c_gen->parsed()) {
      const GenerateResult r = cmd_generate(cfg);
      std::printf("generate: %d transitions, file hash %s -> %s\n", r.transitions,
                  r.file_hash.c_str(), r.dataset_path.c_str());
    } else if (c_ident->parsed()) {
      const IdentifyResult r = cmd_identify(cfg, dataset_path);
      std::printf("identify: %d observables, ridge %.3g, one-step rms train %.6g", r.observables,
                  r.ridge, r.train_rms);
      if (std::isfinite(r.holdout_rms)) std::printf(" holdout %.6g", r.holdout_rms);
      std::printf(" -> %s\n", r.model_path.c_str());
    } else if (c_eval->parsed()) {
      const OpenLoopReport r = cmd_eval_openloop(cfg, model_path, eval_opt);
      std::printf("eval-openloop: %d rollouts x %d steps -> %s\n", cfg.openloop.n_rollouts,
                  cfg.openloop.steps, r.summary_path.c_str());
      for (std::size_t v = 0; v < r.variants.size(); ++v)
        print_metrics(bilinear::to_string(r.variants[v]).c_str(), r.summary[v]);
      if (!r.debug_path.empty()) std::printf("  rollout trace -> %s\n", r.debug_path.c_str());
    } else if (c_track->parsed()) {
      const TrackOutcome r = cmd_track(cfg, model_path, track_opt);
      std::printf("track: reference -> %s\n", r.reference_path.c_str());
      print_track(r);
    } else if (c_demo->parsed()) {
      const DemoResult r = cmd_demo(cfg);
      std::printf("demo: %d transitions -> model (%d observables) -> reports\n",
                  r.generate.transitions, r.identify.observables);
      for (std::size_t v = 0; v < r.openloop.variants.size(); ++v)
        print_metrics(bilinear::to_string(r.openloop.variants[v]).c_str(),
                      r.openloop.summary[v]);
      print_track(r.track);
      std::printf("demo: summary -> %s\n", r.summary_path.c_str());
    }
    return 0;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::ios_base::failure& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: malformed config: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

}  // namespace kbmpc::cli
