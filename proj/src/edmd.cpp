#include "kbmpc/edmd.hpp"

#include <Eigen/Cholesky>
#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <sstream>

namespace kbmpc::edmd {

namespace {

// Per-trajectory stream: decorrelated from neighbours, independent of how
// trajectories are distributed over threads.
Rng trajectory_rng(std::uint64_t seed, int traj) {
  return Rng(seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(traj + 1));
}

void write_exact(std::ostream& out, const void* data, size_t len) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
}

void read_exact(std::istream& in, void* data, size_t len, const std::string& what) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(len));
  if (static_cast<size_t>(in.gcount()) != len)
    throw IoError("truncated " + what);
}

void write_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
  // row-major float64 payload
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      write_exact(out, &v, sizeof(double));
    }
}

Eigen::MatrixXd read_matrix(std::istream& in, Eigen::Index rows, Eigen::Index cols,
                            const std::string& what) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      double v;
      read_exact(in, &v, sizeof(double), what);
      m(r, c) = v;
    }
  return m;
}

nlohmann::json read_header(std::istream& in, const char magic[8], const std::string& what) {
  char got[8];
  read_exact(in, got, 8, what);
  if (std::memcmp(got, magic, 8) != 0) throw IoError(what + ": bad magic");
  std::uint32_t len;
  read_exact(in, &len, sizeof(len), what);
  if (len > (1u << 20)) throw IoError(what + ": implausible header length");
  std::string header(len, '\0');
  read_exact(in, header.data(), len, what);
  try {
    return nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(what + ": bad header json: " + e.what());
  }
}

void write_header(std::ostream& out, const char magic[8], const nlohmann::json& j) {
  const std::string header = j.dump();
  write_exact(out, magic, 8);
  const std::uint32_t len = static_cast<std::uint32_t>(header.size());
  write_exact(out, &len, sizeof(len));
  write_exact(out, header.data(), header.size());
}

constexpr char kDatasetMagic[8] = {'K', 'B', 'M', 'D', 'S', 'E', 'T', '1'};
constexpr char kModelMagic[8] = {'K', 'B', 'M', 'M', 'O', 'D', 'L', '1'};

}  // namespace

DataGenConfig DataGenConfig::defaults() {
  DataGenConfig cfg;
  Eigen::VectorXd xlo(6), xhi(6), ulo(2), uhi(2);
  // [x0 y0 theta0 dtheta tan_phi v]: workspace, full heading circle,
  // jack-knife band, steering and speed limits.
  xlo << -10, -10, -M_PI, -M_PI / 3, -0.68413680834169226, -1;
  xhi << 10, 10, M_PI, M_PI / 3, 0.68413680834169226, 1;
  ulo << -2, -2;
  uhi << 2, 2;
  cfg.x_box = Box{xlo, xhi};
  cfg.u_box = Box{ulo, uhi};
  return cfg;
}

void DataGenConfig::validate() const {
  if (n_traj <= 0 || steps <= 0) throw std::invalid_argument("DataGenConfig: empty rollout plan");
  if (!(ts > 0)) throw std::invalid_argument("DataGenConfig: ts must be positive");
  if (x_box.dim() != 6 || u_box.dim() != 2)
    throw std::invalid_argument("DataGenConfig: sampling boxes have wrong dimensions");
  if (!(mu_lo <= mu_hi) || !(mu_lo > 0))
    throw std::invalid_argument("DataGenConfig: bad slip range");
  if (!(kappa > 0)) throw std::invalid_argument("DataGenConfig: bad side-slip factor");
  geometry.validate();
}

Dataset generate_dataset(const DataGenConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.ts = cfg.ts;
  ds.seed = cfg.seed;
  ds.n_traj = cfg.n_traj;
  ds.steps = cfg.steps;
  ds.mu_lo = cfg.mu_lo;
  ds.mu_hi = cfg.mu_hi;
  ds.kappa = cfg.kappa;
  const int k_total = cfg.n_traj * cfg.steps;
  ds.x.resize(6, k_total);
  ds.u.resize(2, k_total);
  ds.x_next.resize(6, k_total);

  parallel_for(cfg.n_traj, cfg.threads, [&](int traj) {
    Rng rng = trajectory_rng(cfg.seed, traj);
    PlantParams p = cfg.geometry;
    p.mu = rng.uniform(cfg.mu_lo, cfg.mu_hi);
    p.kappa = cfg.kappa;
    const Eigen::VectorXd s = rng.uniform_in(cfg.x_box);
    State x;
    x.x0 = s[0];
    x.y0 = s[1];
    x.theta0 = s[2];
    x.theta1 = s[2] - s[3];  // axis 3 is the hitch angle
    x.tan_phi = s[4];
    x.v = s[5];
    for (int k = 0; k < cfg.steps; ++k) {
      const Eigen::VectorXd uv = rng.uniform_in(cfg.u_box);
      const Control u{uv[0], uv[1]};
      const State xn = rk4_step(x, u, p, cfg.ts);
      const int col = traj * cfg.steps + k;
      ds.x.col(col) = x.vec();
      ds.u.col(col) = uv;
      ds.x_next.col(col) = xn.vec();
      x = xn;
    }
  });
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds, const std::string& provenance) {
  ensure_parent_dir(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  nlohmann::json j;
  if (!provenance.empty()) j["provenance"] = provenance;
  j["ts"] = ds.ts;
  j["k"] = ds.size();
  j["n_x"] = 6;
  j["n_u"] = 2;
  j["seed"] = ds.seed;
  j["n_traj"] = ds.n_traj;
  j["steps"] = ds.steps;
  j["mu_lo"] = ds.mu_lo;
  j["mu_hi"] = ds.mu_hi;
  j["kappa"] = ds.kappa;
  j["payload"] = "x,u,x_next row-major float64";
  write_header(out, kDatasetMagic, j);
  write_matrix(out, ds.x);
  write_matrix(out, ds.u);
  write_matrix(out, ds.x_next);
  if (!out) throw IoError("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  const nlohmann::json j = read_header(in, kDatasetMagic, "dataset file");
  Dataset ds;
  ds.ts = j.at("ts").get<double>();
  const int k = j.at("k").get<int>();
  if (k <= 0 || j.at("n_x").get<int>() != 6 || j.at("n_u").get<int>() != 2)
    throw IoError("dataset file: unsupported dimensions");
  ds.seed = j.at("seed").get<std::uint64_t>();
  ds.n_traj = j.at("n_traj").get<int>();
  ds.steps = j.at("steps").get<int>();
  ds.mu_lo = j.at("mu_lo").get<double>();
  ds.mu_hi = j.at("mu_hi").get<double>();
  ds.kappa = j.at("kappa").get<double>();
  ds.x = read_matrix(in, 6, k, "dataset payload");
  ds.u = read_matrix(in, 2, k, "dataset payload");
  ds.x_next = read_matrix(in, 6, k, "dataset payload");
  return ds;
}

Eigen::MatrixXd BilinearModel::C() const {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(n_y, n());
  c.leftCols(n_y).setIdentity();
  return c;
}

void BilinearModel::validate() const {
  const int N = n();
  if (A.rows() != N || A.cols() != N) throw std::invalid_argument("BilinearModel: A not square");
  if (B.rows() != N) throw std::invalid_argument("BilinearModel: B row mismatch");
  if (static_cast<int>(H.size()) != m())
    throw std::invalid_argument("BilinearModel: wrong number of H blocks");
  for (const auto& h : H)
    if (h.rows() != N || h.cols() != N)
      throw std::invalid_argument("BilinearModel: H block shape mismatch");
  if (n_y <= 0 || n_y > N) throw std::invalid_argument("BilinearModel: bad output dimension");
  if (!(ts > 0)) throw std::invalid_argument("BilinearModel: bad sampling time");
}

BilinearModel fit(const Dataset& ds, const lifting::LiftingBasis& basis,
                  std::optional<double> ridge, int threads) {
  const int k_total = ds.size();
  const int n = basis.n();
  const int d = basis.psi_dim();
  const int m = basis.m;
  if (k_total == 0) throw std::invalid_argument("fit: empty dataset");
  if (ds.x.rows() != basis.n_x) throw std::invalid_argument("fit: state dimension mismatch");
  if (ds.u.rows() != m) throw std::invalid_argument("fit: input dimension mismatch");
  if (ds.x_next.rows() != ds.x.rows() || ds.x_next.cols() != k_total ||
      ds.u.cols() != k_total)
    throw std::invalid_argument("fit: inconsistent dataset shapes");
  if (ridge && *ridge < 0) throw std::invalid_argument("fit: ridge must be non-negative");
  if (ridge && *ridge == 0.0 && k_total < d)
    throw std::invalid_argument("fit: fewer samples than features needs ridge > 0");

  // Streaming normal equations over fixed-size chunks; the serial
  // chunk-order reduction keeps the result independent of thread count.
  const int chunk = std::max(1024, (k_total + 255) / 256);
  const int n_chunks = (k_total + chunk - 1) / chunk;
  std::vector<Eigen::MatrixXd> s_parts(n_chunks), y_parts(n_chunks);
  parallel_for(n_chunks, threads, [&](int c) {
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(d, d);
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, d);
    Eigen::VectorXd psi(d), zn(n);
    std::vector<double> scratch;
    const int lo = c * chunk, hi = std::min(k_total, lo + chunk);
    for (int k = lo; k < hi; ++k) {
      lifting::eval_psi(
          basis, std::span<const double>(ds.x.col(k).data(), static_cast<size_t>(basis.n_x)),
          std::span<const double>(ds.u.col(k).data(), static_cast<size_t>(m)),
          std::span<double>(psi.data(), static_cast<size_t>(d)), scratch);
      lifting::eval_psi_x(
          basis,
          std::span<const double>(ds.x_next.col(k).data(), static_cast<size_t>(basis.n_x)),
          std::span<double>(zn.data(), static_cast<size_t>(n)), scratch);
      s.selfadjointView<Eigen::Lower>().rankUpdate(psi);
      y.noalias() += zn * psi.transpose();
    }
    s_parts[c] = std::move(s);
    y_parts[c] = std::move(y);
  });
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(d, d);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, d);
  for (int c = 0; c < n_chunks; ++c) {
    s += s_parts[c];
    y += y_parts[c];
  }
  s = s.selfadjointView<Eigen::Lower>();

  const double lambda = ridge ? *ridge : 1e-8 * s.trace() / d;
  Eigen::MatrixXd s_reg = s;
  s_reg.diagonal().array() += lambda;
  const Eigen::LLT<Eigen::MatrixXd> llt(s_reg);
  if (llt.info() != Eigen::Success)
    throw NumericalError(
        "fit: normal equations are rank deficient; pass a positive ridge value");
  const Eigen::MatrixXd g = llt.solve(y.transpose()).transpose();  // n x d

  BilinearModel model;
  model.A = g.leftCols(n);
  model.H.reserve(m);
  for (int j = 0; j < m; ++j) model.H.push_back(g.middleCols(n * (j + 1), n));
  model.B = g.rightCols(m);
  model.ts = ds.ts;
  model.n_y = basis.n_y;
  model.basis_hash = lifting::basis_hash(basis);
  model.ridge = lambda;
  model.validate();
  return model;
}

void save_model(const std::string& path, const BilinearModel& model,
                const std::string& provenance) {
  model.validate();
  ensure_parent_dir(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  nlohmann::json j;
  if (!provenance.empty()) j["provenance"] = provenance;
  j["version"] = 1;
  j["ts"] = model.ts;
  j["n"] = model.n();
  j["m"] = model.m();
  j["n_y"] = model.n_y;
  j["basis_hash"] = "0x" + to_hex(model.basis_hash);
  j["ridge"] = model.ridge;
  j["payload"] = "A,B,H[0..m),C row-major float64";
  write_header(out, kModelMagic, j);
  write_matrix(out, model.A);
  write_matrix(out, model.B);
  for (const auto& h : model.H) write_matrix(out, h);
  write_matrix(out, model.C());
  if (!out) throw IoError("write failed: " + path);
}

BilinearModel load_model(const std::string& path, const lifting::LiftingBasis& basis) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  const nlohmann::json j = read_header(in, kModelMagic, "model file");
  if (j.at("version").get<int>() != 1) throw IoError("model file: unsupported version");
  const int n = j.at("n").get<int>();
  const int m = j.at("m").get<int>();
  BilinearModel model;
  model.ts = j.at("ts").get<double>();
  model.n_y = j.at("n_y").get<int>();
  model.ridge = j.at("ridge").get<double>();
  const std::string hash = j.at("basis_hash").get<std::string>();
  model.basis_hash = std::stoull(hash, nullptr, 16);
  if (model.basis_hash != lifting::basis_hash(basis))
    throw IoError("model file: basis manifest hash mismatch (model fit over different basis)");
  if (n != basis.n() || m != basis.m || model.n_y != basis.n_y)
    throw IoError("model file: dimensions disagree with the basis");
  model.A = read_matrix(in, n, n, "model payload");
  model.B = read_matrix(in, n, m, "model payload");
  for (int jx = 0; jx < m; ++jx) model.H.push_back(read_matrix(in, n, n, "model payload"));
  const Eigen::MatrixXd c = read_matrix(in, model.n_y, n, "model payload");
  if (c != model.C()) throw IoError("model file: output selector is not [I 0]");
  model.validate();
  return model;
}

}  // namespace kbmpc::edmd
