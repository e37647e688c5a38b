#include "kbmpc/expr.hpp"

#include <cmath>
#include <cstring>
#include <mutex>
#include <stdexcept>
#include <unordered_map>

namespace kbmpc::expr {

namespace {

struct Node {
  Op op;
  std::int32_t a = -1;
  std::int32_t b = -1;
  double payload = 0.0;  // constant value, or variable index
};

struct NodeKey {
  Op op;
  std::int32_t a, b;
  std::uint64_t payload_bits;
  bool operator==(const NodeKey&) const = default;
};

struct NodeKeyHash {
  std::size_t operator()(const NodeKey& k) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](std::uint64_t v) {
      h ^= v;
      h *= 0x100000001b3ull;
    };
    mix(static_cast<std::uint64_t>(k.op));
    mix(static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.a)));
    mix(static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.b)));
    mix(k.payload_bits);
    return static_cast<std::size_t>(h);
  }
};

std::uint64_t bits(double v) {
  std::uint64_t b;
  std::memcpy(&b, &v, sizeof(b));
  return b;
}

// Process-wide interning pool. Nodes are append-only and never freed.
// Node storage uses fixed-size chunks addressed through a fixed-capacity
// pointer table, so reads of already-interned ids need no lock even while
// other threads intern new nodes.
class Pool {
 public:
  static Pool& instance() {
    static Pool pool;
    return pool;
  }

  std::int32_t intern(Node n) {
    NodeKey key{n.op, n.a, n.b, bits(n.payload)};
    std::lock_guard<std::mutex> lock(mu_);
    auto it = intern_.find(key);
    if (it != intern_.end()) return it->second;
    if (size_ >= kChunk * kMaxChunks) throw std::length_error("expression pool exhausted");
    const std::int32_t id = static_cast<std::int32_t>(size_);
    const std::size_t c = size_ / kChunk;
    if (chunks_[c] == nullptr) chunks_[c] = new Node[kChunk];
    chunks_[c][size_ % kChunk] = n;
    ++size_;
    intern_.emplace(key, id);
    return id;
  }

  const Node& node(std::int32_t id) const { return chunks_[id / kChunk][id % kChunk]; }

  std::int32_t derivative_cached(std::int32_t id, int var) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = deriv_cache_.find(dkey(id, var));
    return it == deriv_cache_.end() ? -1 : it->second;
  }

  void cache_derivative(std::int32_t id, int var, std::int32_t d) {
    std::lock_guard<std::mutex> lock(mu_);
    deriv_cache_.emplace(dkey(id, var), d);
  }

 private:
  static constexpr std::size_t kChunk = 1 << 14;
  static constexpr std::size_t kMaxChunks = 1 << 13;

  Pool() : chunks_(kMaxChunks, nullptr) {}

  static std::uint64_t dkey(std::int32_t id, int var) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(id)) << 8) |
           static_cast<std::uint32_t>(var & 0xff);
  }

  std::mutex mu_;
  std::vector<Node*> chunks_;  // fixed capacity, entries filled on demand
  std::size_t size_ = 0;
  std::unordered_map<NodeKey, std::int32_t, NodeKeyHash> intern_;
  std::unordered_map<std::uint64_t, std::int32_t> deriv_cache_;
};

std::int32_t make(Op op, std::int32_t a, std::int32_t b, double payload) {
  return Pool::instance().intern(Node{op, a, b, payload});
}

const Node& node_of(std::int32_t id) { return Pool::instance().node(id); }

bool is_const(std::int32_t id, double v) {
  const Node& n = node_of(id);
  return n.op == Op::Const && n.payload == v;
}

}  // namespace

struct PoolAccess {
  static std::int32_t id(Expr e) { return e.id_; }
  static Expr wrap(std::int32_t id) { return Expr(id); }
};

Expr::Expr() : id_(make(Op::Const, -1, -1, 0.0)) {}

Expr Expr::constant(double c) { return PoolAccess::wrap(make(Op::Const, -1, -1, c)); }

Expr Expr::var(int index) {
  if (index < 0) throw std::invalid_argument("Expr::var: negative index");
  return PoolAccess::wrap(make(Op::Var, -1, -1, static_cast<double>(index)));
}

Op Expr::op() const { return node_of(id_).op; }

bool Expr::is_constant() const { return node_of(id_).op == Op::Const; }

double Expr::constant_value() const {
  const Node& n = node_of(id_);
  if (n.op != Op::Const) throw std::logic_error("constant_value on non-constant expression");
  return n.payload;
}

namespace {

Expr wrap(std::int32_t id) { return PoolAccess::wrap(id); }
std::int32_t id_of(Expr e) { return PoolAccess::id(e); }

}  // namespace

Expr operator+(Expr a, Expr b) {
  const Node &na = node_of(id_of(a)), &nb = node_of(id_of(b));
  if (na.op == Op::Const && nb.op == Op::Const) return Expr::constant(na.payload + nb.payload);
  if (is_const(id_of(a), 0.0)) return b;
  if (is_const(id_of(b), 0.0)) return a;
  std::int32_t x = id_of(a), y = id_of(b);
  if (x > y) std::swap(x, y);  // commutative: canonical operand order
  return wrap(make(Op::Add, x, y, 0.0));
}

Expr operator-(Expr a, Expr b) {
  const Node &na = node_of(id_of(a)), &nb = node_of(id_of(b));
  if (na.op == Op::Const && nb.op == Op::Const) return Expr::constant(na.payload - nb.payload);
  if (is_const(id_of(b), 0.0)) return a;
  if (id_of(a) == id_of(b)) return Expr::constant(0.0);
  if (is_const(id_of(a), 0.0)) return -b;
  return wrap(make(Op::Sub, id_of(a), id_of(b), 0.0));
}

Expr operator*(Expr a, Expr b) {
  const Node &na = node_of(id_of(a)), &nb = node_of(id_of(b));
  if (na.op == Op::Const && nb.op == Op::Const) return Expr::constant(na.payload * nb.payload);
  if (is_const(id_of(a), 0.0) || is_const(id_of(b), 0.0)) return Expr::constant(0.0);
  if (is_const(id_of(a), 1.0)) return b;
  if (is_const(id_of(b), 1.0)) return a;
  if (is_const(id_of(a), -1.0)) return -b;
  if (is_const(id_of(b), -1.0)) return -a;
  std::int32_t x = id_of(a), y = id_of(b);
  if (x > y) std::swap(x, y);
  return wrap(make(Op::Mul, x, y, 0.0));
}

Expr operator/(Expr a, Expr b) {
  const Node &na = node_of(id_of(a)), &nb = node_of(id_of(b));
  if (nb.op == Op::Const) {
    if (nb.payload == 0.0) throw std::invalid_argument("expression division by constant zero");
    if (na.op == Op::Const) return Expr::constant(na.payload / nb.payload);
    if (nb.payload == 1.0) return a;
  }
  if (is_const(id_of(a), 0.0)) return Expr::constant(0.0);
  return wrap(make(Op::Div, id_of(a), id_of(b), 0.0));
}

Expr operator-(Expr a) {
  const Node& na = node_of(id_of(a));
  if (na.op == Op::Const) return Expr::constant(-na.payload);
  if (na.op == Op::Neg) return wrap(na.a);
  return wrap(make(Op::Neg, id_of(a), -1, 0.0));
}

Expr sin(Expr a) {
  const Node& na = node_of(id_of(a));
  if (na.op == Op::Const) return Expr::constant(std::sin(na.payload));
  return wrap(make(Op::Sin, id_of(a), -1, 0.0));
}

Expr cos(Expr a) {
  const Node& na = node_of(id_of(a));
  if (na.op == Op::Const) return Expr::constant(std::cos(na.payload));
  return wrap(make(Op::Cos, id_of(a), -1, 0.0));
}

Expr tan(Expr a) {
  const Node& na = node_of(id_of(a));
  if (na.op == Op::Const) return Expr::constant(std::tan(na.payload));
  return wrap(make(Op::Tan, id_of(a), -1, 0.0));
}

Expr atan(Expr a) {
  const Node& na = node_of(id_of(a));
  if (na.op == Op::Const) return Expr::constant(std::atan(na.payload));
  return wrap(make(Op::Atan, id_of(a), -1, 0.0));
}

Expr sqrt(Expr a) {
  const Node& na = node_of(id_of(a));
  if (na.op == Op::Const) return Expr::constant(std::sqrt(na.payload));
  return wrap(make(Op::Sqrt, id_of(a), -1, 0.0));
}

Expr Expr::derivative(int var) const {
  Pool& pool = Pool::instance();
  const std::int32_t cached = pool.derivative_cached(id_, var);
  if (cached >= 0) return wrap(cached);

  const Node n = node_of(id_);
  Expr self = *this;
  Expr result;
  switch (n.op) {
    case Op::Const:
      result = Expr::constant(0.0);
      break;
    case Op::Var:
      result = Expr::constant(static_cast<int>(n.payload) == var ? 1.0 : 0.0);
      break;
    case Op::Add:
      result = wrap(n.a).derivative(var) + wrap(n.b).derivative(var);
      break;
    case Op::Sub:
      result = wrap(n.a).derivative(var) - wrap(n.b).derivative(var);
      break;
    case Op::Mul:
      result = wrap(n.a).derivative(var) * wrap(n.b) + wrap(n.a) * wrap(n.b).derivative(var);
      break;
    case Op::Div:
      // d(a/b) = (da - (a/b) db) / b, reusing this node for sharing
      result = (wrap(n.a).derivative(var) - self * wrap(n.b).derivative(var)) / wrap(n.b);
      break;
    case Op::Neg:
      result = -wrap(n.a).derivative(var);
      break;
    case Op::Sin:
      result = cos(wrap(n.a)) * wrap(n.a).derivative(var);
      break;
    case Op::Cos:
      result = -(sin(wrap(n.a)) * wrap(n.a).derivative(var));
      break;
    case Op::Tan:
      result = (Expr::constant(1.0) + self * self) * wrap(n.a).derivative(var);
      break;
    case Op::Atan:
      result = wrap(n.a).derivative(var) /
               (Expr::constant(1.0) + wrap(n.a) * wrap(n.a));
      break;
    case Op::Sqrt:
      result = wrap(n.a).derivative(var) / (Expr::constant(2.0) * self);
      break;
  }
  pool.cache_derivative(id_, var, id_of(result));
  return result;
}

namespace {

double apply(Op op, double a, double b, double payload, std::span<const double> x) {
  switch (op) {
    case Op::Const:
      return payload;
    case Op::Var:
      return x[static_cast<int>(payload)];
    case Op::Add:
      return a + b;
    case Op::Sub:
      return a - b;
    case Op::Mul:
      return a * b;
    case Op::Div:
      return a / b;
    case Op::Neg:
      return -a;
    case Op::Sin:
      return std::sin(a);
    case Op::Cos:
      return std::cos(a);
    case Op::Tan:
      return std::tan(a);
    case Op::Atan:
      return std::atan(a);
    case Op::Sqrt:
      return std::sqrt(a);
  }
  return 0.0;
}

double eval_rec(std::int32_t id, std::span<const double> x,
                std::unordered_map<std::int32_t, double>& memo) {
  auto it = memo.find(id);
  if (it != memo.end()) return it->second;
  const Node& n = node_of(id);
  double a = 0.0, b = 0.0;
  if (n.a >= 0) a = eval_rec(n.a, x, memo);
  if (n.b >= 0) b = eval_rec(n.b, x, memo);
  const double v = apply(n.op, a, b, n.payload, x);
  memo.emplace(id, v);
  return v;
}

int min_vars_rec(std::int32_t id, std::unordered_map<std::int32_t, int>& memo) {
  auto it = memo.find(id);
  if (it != memo.end()) return it->second;
  const Node& n = node_of(id);
  int v = 0;
  if (n.op == Op::Var) v = static_cast<int>(n.payload) + 1;
  if (n.a >= 0) v = std::max(v, min_vars_rec(n.a, memo));
  if (n.b >= 0) v = std::max(v, min_vars_rec(n.b, memo));
  memo.emplace(id, v);
  return v;
}

}  // namespace

double Expr::eval(std::span<const double> x) const {
  std::unordered_map<std::int32_t, double> memo;
  return eval_rec(id_, x, memo);
}

double Expr::eval_with_gradient(std::span<const double> x, Eigen::VectorXd& grad) const {
  const Expr self = *this;
  Tape tape(std::span<const Expr>(&self, 1), static_cast<int>(x.size()));
  double out;
  Eigen::MatrixXd jac;
  tape.eval_with_jacobian(x, std::span<double>(&out, 1), jac);
  grad = jac.row(0).transpose();
  return out;
}

int Expr::min_vars() const {
  std::unordered_map<std::int32_t, int> memo;
  return min_vars_rec(id_, memo);
}

Tape::Tape(std::span<const Expr> outputs, int n_vars) : n_vars_(n_vars) {
  std::unordered_map<std::int32_t, std::int32_t> slot;
  std::vector<std::int32_t> stack;
  // iterative post-order over the union DAG
  for (const Expr& e : outputs) stack.push_back(PoolAccess::id(e));
  while (!stack.empty()) {
    const std::int32_t id = stack.back();
    if (slot.count(id)) {
      stack.pop_back();
      continue;
    }
    const Node& n = node_of(id);
    bool ready = true;
    if (n.a >= 0 && !slot.count(n.a)) {
      stack.push_back(n.a);
      ready = false;
    }
    if (n.b >= 0 && !slot.count(n.b)) {
      stack.push_back(n.b);
      ready = false;
    }
    if (!ready) continue;
    stack.pop_back();
    Instr ins;
    ins.op = n.op;
    ins.a = n.a >= 0 ? slot.at(n.a) : -1;
    ins.b = n.b >= 0 ? slot.at(n.b) : -1;
    ins.c = n.payload;
    if (n.op == Op::Var && static_cast<int>(n.payload) >= n_vars)
      throw std::invalid_argument("Tape: expression uses variable beyond n_vars");
    slot.emplace(id, static_cast<std::int32_t>(prog_.size()));
    prog_.push_back(ins);
  }
  out_slots_.reserve(outputs.size());
  for (const Expr& e : outputs) out_slots_.push_back(slot.at(PoolAccess::id(e)));
}

void Tape::eval(std::span<const double> x, std::span<double> out) const {
  std::vector<double> scratch;
  eval(x, out, scratch);
}

void Tape::eval(std::span<const double> x, std::span<double> out,
                std::vector<double>& scratch) const {
  if (static_cast<int>(x.size()) < n_vars_) throw std::invalid_argument("Tape::eval: short input");
  if (out.size() != out_slots_.size()) throw std::invalid_argument("Tape::eval: bad output size");
  scratch.resize(prog_.size());
  double* v = scratch.data();
  for (std::size_t i = 0; i < prog_.size(); ++i) {
    const Instr& ins = prog_[i];
    const double a = ins.a >= 0 ? v[ins.a] : 0.0;
    const double b = ins.b >= 0 ? v[ins.b] : 0.0;
    v[i] = apply(ins.op, a, b, ins.c, x);
  }
  for (std::size_t i = 0; i < out_slots_.size(); ++i) out[i] = v[out_slots_[i]];
}

void Tape::eval_with_jacobian(std::span<const double> x, std::span<double> out,
                              Eigen::MatrixXd& jac) const {
  if (static_cast<int>(x.size()) < n_vars_)
    throw std::invalid_argument("Tape::eval_with_jacobian: short input");
  const int nv = n_vars_;
  const int stride = nv + 1;  // value followed by nv partials
  std::vector<double> buf(prog_.size() * stride, 0.0);
  for (std::size_t i = 0; i < prog_.size(); ++i) {
    const Instr& ins = prog_[i];
    double* d = &buf[i * stride];
    const double* da = ins.a >= 0 ? &buf[ins.a * stride] : nullptr;
    const double* db = ins.b >= 0 ? &buf[ins.b * stride] : nullptr;
    switch (ins.op) {
      case Op::Const:
        d[0] = ins.c;
        break;
      case Op::Var: {
        d[0] = x[static_cast<int>(ins.c)];
        d[1 + static_cast<int>(ins.c)] = 1.0;
        break;
      }
      case Op::Add:
        for (int k = 0; k < stride; ++k) d[k] = da[k] + db[k];
        break;
      case Op::Sub:
        for (int k = 0; k < stride; ++k) d[k] = da[k] - db[k];
        break;
      case Op::Mul:
        d[0] = da[0] * db[0];
        for (int k = 1; k < stride; ++k) d[k] = da[k] * db[0] + da[0] * db[k];
        break;
      case Op::Div: {
        d[0] = da[0] / db[0];
        const double inv = 1.0 / db[0];
        for (int k = 1; k < stride; ++k) d[k] = (da[k] - d[0] * db[k]) * inv;
        break;
      }
      case Op::Neg:
        for (int k = 0; k < stride; ++k) d[k] = -da[k];
        break;
      case Op::Sin: {
        d[0] = std::sin(da[0]);
        const double c = std::cos(da[0]);
        for (int k = 1; k < stride; ++k) d[k] = c * da[k];
        break;
      }
      case Op::Cos: {
        d[0] = std::cos(da[0]);
        const double s = -std::sin(da[0]);
        for (int k = 1; k < stride; ++k) d[k] = s * da[k];
        break;
      }
      case Op::Tan: {
        d[0] = std::tan(da[0]);
        const double s = 1.0 + d[0] * d[0];
        for (int k = 1; k < stride; ++k) d[k] = s * da[k];
        break;
      }
      case Op::Atan: {
        d[0] = std::atan(da[0]);
        const double s = 1.0 / (1.0 + da[0] * da[0]);
        for (int k = 1; k < stride; ++k) d[k] = s * da[k];
        break;
      }
      case Op::Sqrt: {
        d[0] = std::sqrt(da[0]);
        const double s = 0.5 / d[0];
        for (int k = 1; k < stride; ++k) d[k] = s * da[k];
        break;
      }
    }
  }
  if (out.size() != out_slots_.size())
    throw std::invalid_argument("Tape::eval_with_jacobian: bad output size");
  jac.resize(static_cast<Eigen::Index>(out_slots_.size()), nv);
  for (std::size_t i = 0; i < out_slots_.size(); ++i) {
    const double* d = &buf[out_slots_[i] * stride];
    out[i] = d[0];
    for (int k = 0; k < nv; ++k) jac(static_cast<Eigen::Index>(i), k) = d[1 + k];
  }
}

}  // namespace kbmpc::expr
