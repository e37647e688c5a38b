#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kbmpc {

/// Thrown on malformed files, failed reads/writes, missing paths.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thrown when a numerical routine cannot produce a valid result
/// (rank-deficient regression, non-PD cost matrix, ...).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Axis-aligned box, used for sampling states/controls and probe points.
struct Box {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;

  Box() = default;
  Box(Eigen::VectorXd lo_, Eigen::VectorXd hi_);

  int dim() const { return static_cast<int>(lo.size()); }
  bool contains(const Eigen::VectorXd& x, double tol = 0.0) const;
};

/// Deterministic RNG wrapper. Uniform draws use an explicit 53-bit
/// mantissa mapping so sequences do not depend on the standard
/// library's distribution implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi);

  /// One uniform sample per box axis.
  Eigen::VectorXd uniform_in(const Box& box);

 private:
  std::mt19937_64 gen_;
};

/// FNV-1a 64-bit hash, used to fingerprint configs, manifests and files.
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(std::string_view s);
std::string to_hex(std::uint64_t v);

/// Shortest round-trip decimal formatting ("%.17g" fallback rendering),
/// identical across runs on the same platform.
std::string format_double(double v);

double wrap_angle(double a);  // wraps to (-pi, pi]

/// Runs fn(i) for i in [0, n) over `threads` workers on contiguous
/// index blocks. threads <= 1 runs inline. fn must only write to
/// disjoint slots; no reduction is performed here.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

int resolve_threads(int requested);  // 0 -> hardware_concurrency

// Small file helpers.
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);
void ensure_parent_dir(const std::string& path);

}  // namespace kbmpc
