#include "eegdg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "eegdg/errors.hpp"

namespace eegdg {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<double>&)> backward;

  std::vector<double>& grad_buf() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

std::atomic<std::uint64_t> g_sequence{0};
thread_local bool t_grad_enabled = true;
std::atomic<std::size_t> g_num_threads{1};

NodePtr new_node(Shape shape, std::vector<double> data) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return node;
}

using BackwardFn = std::function<void(const std::vector<double>&)>;

Tensor make_op(Shape shape, std::vector<double> data,
               std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  auto node = new_node(std::move(shape), std::move(data));
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor* t : inputs) node->parents.push_back(t->node());
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

Tensor make_op_list(Shape shape, std::vector<double> data,
                    const std::vector<Tensor>& inputs, BackwardFn fn) {
  auto node = new_node(std::move(shape), std::move(data));
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor& t : inputs) node->parents.push_back(t.node());
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  require_defined(a, op);
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(a.shape()));
  }
}

void require_axis(const Tensor& a, std::size_t axis, const char* op) {
  require_defined(a, op);
  if (axis >= a.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(a.shape()));
  }
}

// outer × n × inner decomposition around an axis.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
  require_defined(a, op);
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  NodePtr pa = a.node();
  std::vector<double> y = out;
  return make_op(a.shape(), std::move(out), {&a},
                 [pa, y = std::move(y), deriv](const std::vector<double>& g) {
                   if (!pa->requires_grad) return;
                   auto& ga = pa->grad_buf();
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     ga[i] += g[i] * deriv(pa->data[i], y[i]);
                   }
                 });
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(num_threads(), n);
  if (workers <= 1) {
    fn(std::size_t{0}, std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = n * w / workers;
    const std::size_t hi = n * (w + 1) / workers;
    pool.emplace_back([&fn, w, lo, hi] { fn(w, lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  auto node = new_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  require_axis(*this, axis, "dim");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return node_->data;
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("at(): index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t k = 0;
  for (std::size_t i : index) {
    if (i >= s[k]) throw DimensionError("at(): index out of range for " + shape_str(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  require_defined(*this, "set_requires_grad");
  if (node_->backward) throw ContractError("set_requires_grad() is only valid on leaf tensors");
  node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return node_->grad;
}

void Tensor::zero_grad() {
  require_defined(*this, "zero_grad");
  node_->grad.clear();
}

std::uint64_t Tensor::sequence() const {
  require_defined(*this, "sequence");
  return node_->seq;
}

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) {
    throw ContractError("backward() called on a tensor that does not require grad");
  }

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });

  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  node_->grad_buf()[0] += 1.0;
  for (Node* n : order) {
    if (n->backward) n->backward(n->grad);
  }
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return from(node_->shape, node_->data, false);
}

Tensor Tensor::clone() const {
  require_defined(*this, "clone");
  return from(node_->shape, node_->data, node_->requires_grad && !node_->backward);
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

void set_num_threads(std::size_t n) { g_num_threads = std::max<std::size_t>(1, n); }
std::size_t num_threads() { return g_num_threads; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  NodePtr pa = a.node(), pb = b.node();
  return make_op(a.shape(), std::move(out), {&a, &b}, [pa, pb](const std::vector<double>& g) {
    for (const NodePtr& p : {pa, pb}) {
      if (!p->requires_grad) continue;
      auto& gp = p->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  NodePtr pa = a.node(), pb = b.node();
  return make_op(a.shape(), std::move(out), {&a, &b}, [pa, pb](const std::vector<double>& g) {
    if (pa->requires_grad) {
      auto& ga = pa->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  NodePtr pa = a.node(), pb = b.node();
  return make_op(a.shape(), std::move(out), {&a, &b}, [pa, pb](const std::vector<double>& g) {
    if (pa->requires_grad) {
      auto& ga = pa->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, "scale", [factor](double x) { return factor * x; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, "add_scalar", [value](double x) { return x + value; },
               [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, "square", [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  require_defined(a, "sqrt");
  for (double v : a.data()) {
    if (v < 0.0) throw NumericError("sqrt: negative input " + std::to_string(v));
  }
  return unary(a, "sqrt", [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
}

Tensor sqrt_zero_safe(const Tensor& a) {
  require_defined(a, "sqrt_zero_safe");
  for (double v : a.data()) {
    if (v < 0.0) throw NumericError("sqrt_zero_safe: negative input " + std::to_string(v));
  }
  return unary(a, "sqrt_zero_safe", [](double x) { return std::sqrt(x); },
               [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Tensor elu(const Tensor& a, double alpha) {
  return unary(a, "elu", [alpha](double x) { return x >= 0.0 ? x : alpha * std::expm1(x); },
               [alpha](double x, double y) { return x >= 0.0 ? 1.0 : y + alpha; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary(a, "clamp_min", [floor](double x) { return x < floor ? floor : x; },
               [floor](double x, double) { return x < floor ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  auto x = a.data();
  double s = 0.0;
  for (double v : x) s += v;
  NodePtr pa = a.node();
  return make_op({}, {s}, {&a}, [pa](const std::vector<double>& g) {
    if (!pa->requires_grad) return;
    auto& ga = pa->grad_buf();
    for (double& v : ga) v += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, std::size_t axis) {
  require_axis(a, axis, "sum");
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto x = a.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.n + k) * s.inner + i];
  NodePtr pa = a.node();
  return make_op(std::move(out_shape), std::move(out), {&a}, [pa, s](const std::vector<double>& g) {
    if (!pa->requires_grad) return;
    auto& ga = pa->grad_buf();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.n + k) * s.inner + i] += g[o * s.inner + i];
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  require_axis(a, axis, "mean");
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  require_axis(a, axis, "softmax");
  const AxisSplit s = split_axis(a.shape(), axis);
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto idx = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
      double mx = x[idx(0)];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, x[idx(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        out[idx(k)] = std::exp(x[idx(k)] - mx);
        z += out[idx(k)];
      }
      for (std::size_t k = 0; k < s.n; ++k) out[idx(k)] /= z;
    }
  }
  NodePtr pa = a.node();
  std::vector<double> y = out;
  return make_op(a.shape(), std::move(out), {&a}, [pa, s, y = std::move(y)](const std::vector<double>& g) {
    if (!pa->requires_grad) return;
    auto& ga = pa->grad_buf();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto idx = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
        double dot = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) dot += g[idx(k)] * y[idx(k)];
        for (std::size_t k = 0; k < s.n; ++k) ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  require_axis(a, axis, "log_softmax");
  const AxisSplit s = split_axis(a.shape(), axis);
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto idx = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
      double mx = x[idx(0)];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, x[idx(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) z += std::exp(x[idx(k)] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < s.n; ++k) out[idx(k)] = x[idx(k)] - lse;
    }
  }
  NodePtr pa = a.node();
  std::vector<double> y = out;
  return make_op(a.shape(), std::move(out), {&a}, [pa, s, y = std::move(y)](const std::vector<double>& g) {
    if (!pa->requires_grad) return;
    auto& ga = pa->grad_buf();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto idx = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
        double gs = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) gs += g[idx(k)];
        for (std::size_t k = 0; k < s.n; ++k) ga[idx(k)] += g[idx(k)] - std::exp(y[idx(k)]) * gs;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and shape ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  auto x = a.data(), y = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double v = x[i * k + p];
      if (v == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += v * y[p * n + j];
    }
  NodePtr pa = a.node(), pb = b.node();
  return make_op({m, n}, std::move(out), {&a, &b}, [pa, pb, m, k, n](const std::vector<double>& g) {
    if (pa->requires_grad) {
      auto& ga = pa->grad_buf();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb->data[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_buf();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double v = pa->data[i * k + p];
          if (v == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += v * g[i * n + j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto x = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  NodePtr pa = a.node();
  return make_op({n, m}, std::move(out), {&a}, [pa, m, n](const std::vector<double>& g) {
    if (!pa->requires_grad) return;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  NodePtr pa = a.node();
  return make_op(std::move(shape), a.to_vector(), {&a}, [pa](const std::vector<double>& g) {
    if (!pa->requires_grad) return;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: empty input list");
  require_axis(parts[0], axis, "concat");
  Shape out_shape = parts[0].shape();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_defined(p, "concat");
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat: rank mismatch " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != out_shape[i]) {
        throw DimensionError("concat: shapes " + shape_str(out_shape) + " and " + shape_str(s) +
                             " differ off the concat axis");
      }
    }
    total += s[axis];
  }
  out_shape[axis] = total;
  const AxisSplit so = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::size_t n = p.dim(axis);
    auto x = p.data();
    for (std::size_t o = 0; o < so.outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * n + k) * so.inner), so.inner,
                    out.begin() + static_cast<std::ptrdiff_t>((o * so.n + off + k) * so.inner));
    off += n;
  }
  std::vector<NodePtr> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  return make_op_list(out_shape, std::move(out), parts,
                      [nodes, offsets, so, axis](const std::vector<double>& g) {
                        for (std::size_t t = 0; t < nodes.size(); ++t) {
                          const NodePtr& p = nodes[t];
                          if (!p->requires_grad) continue;
                          auto& gp = p->grad_buf();
                          const std::size_t n = p->shape[axis];
                          for (std::size_t o = 0; o < so.outer; ++o)
                            for (std::size_t k = 0; k < n; ++k)
                              for (std::size_t i = 0; i < so.inner; ++i)
                                gp[(o * n + k) * so.inner + i] +=
                                    g[(o * so.n + offsets[t] + k) * so.inner + i];
                        }
                      });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  require_axis(a, axis, "slice");
  if (length == 0 || start + length > a.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of bounds for axis " +
                         std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  auto x = a.data();
  std::vector<double> out(s.outer * length * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < length; ++k)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * s.n + start + k) * s.inner), s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * length + k) * s.inner));
  NodePtr pa = a.node();
  return make_op(std::move(out_shape), std::move(out), {&a},
                 [pa, s, start, length](const std::vector<double>& g) {
                   if (!pa->requires_grad) return;
                   auto& ga = pa->grad_buf();
                   for (std::size_t o = 0; o < s.outer; ++o)
                     for (std::size_t k = 0; k < length; ++k)
                       for (std::size_t i = 0; i < s.inner; ++i)
                         ga[(o * s.n + start + k) * s.inner + i] += g[(o * length + k) * s.inner + i];
                 });
}

Tensor pick(const Tensor& a, std::span<const int> index) {
  require_rank(a, 2, "pick");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (index.size() != m) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for " + shape_str(a.shape()));
  }
  std::vector<int> idx(index.begin(), index.end());
  for (int v : idx) {
    if (v < 0 || static_cast<std::size_t>(v) >= n) {
      throw DimensionError("pick: index " + std::to_string(v) + " out of range for " + shape_str(a.shape()));
    }
  }
  auto x = a.data();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = x[i * n + static_cast<std::size_t>(idx[i])];
  NodePtr pa = a.node();
  return make_op({m}, std::move(out), {&a}, [pa, idx = std::move(idx), n](const std::vector<double>& g) {
    if (!pa->requires_grad) return;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i * n + static_cast<std::size_t>(idx[i])] += g[i];
  });
}

Tensor column(const Tensor& a, std::size_t j) {
  require_rank(a, 2, "column");
  return reshape(slice(a, 1, j, 1), {a.dim(0)});
}

Tensor add_rowwise(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "add_rowwise");
  require_rank(b, 1, "add_rowwise");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (b.dim(0) != n) {
    throw DimensionError("add_rowwise: " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  }
  auto x = a.data(), y = b.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + y[j];
  NodePtr pa = a.node(), pb = b.node();
  return make_op({m, n}, std::move(out), {&a, &b}, [pa, pb, m, n](const std::vector<double>& g) {
    if (pa->requires_grad) {
      auto& ga = pa->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_buf();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  require_rank(a, 2, "scale_rows");
  require_rank(s, 1, "scale_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (s.dim(0) != m) {
    throw DimensionError("scale_rows: " + shape_str(a.shape()) + " by " + shape_str(s.shape()));
  }
  auto x = a.data(), w = s.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * w[i];
  NodePtr pa = a.node(), ps = s.node();
  return make_op({m, n}, std::move(out), {&a, &s}, [pa, ps, m, n](const std::vector<double>& g) {
    if (pa->requires_grad) {
      auto& ga = pa->grad_buf();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * ps->data[i];
    }
    if (ps->requires_grad) {
      auto& gs = ps->grad_buf();
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pa->data[i * n + j];
        gs[i] += acc;
      }
    }
  });
}

Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "pairwise_sq_dist");
  require_rank(b, 2, "pairwise_sq_dist");
  const std::size_t m = a.dim(0), n = b.dim(0), d = a.dim(1);
  if (b.dim(1) != d) {
    throw DimensionError("pairwise_sq_dist: feature dimensions differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  auto x = a.data(), y = b.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = x[i * d + k] - y[j * d + k];
        acc += diff * diff;
      }
      out[i * n + j] = acc;
    }
  NodePtr pa = a.node(), pb = b.node();
  return make_op({m, n}, std::move(out), {&a, &b}, [pa, pb, m, n, d](const std::vector<double>& g) {
    std::vector<double>* ga = pa->requires_grad ? &pa->grad_buf() : nullptr;
    std::vector<double>* gb = pb->requires_grad ? &pb->grad_buf() : nullptr;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double gij = g[i * n + j];
        if (gij == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = 2.0 * gij * (pa->data[i * d + k] - pb->data[j * d + k]);
          if (ga) (*ga)[i * d + k] += diff;
          if (gb) (*gb)[j * d + k] -= diff;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Convolution, pooling, normalization

Conv2dOptions Conv2dOptions::same(std::size_t kh, std::size_t kw, std::size_t groups) {
  Conv2dOptions o;
  o.groups = groups;
  o.pad_top = (kh - 1) / 2;
  o.pad_bottom = kh - 1 - o.pad_top;
  o.pad_left = (kw - 1) / 2;
  o.pad_right = kw - 1 - o.pad_left;
  return o;
}

namespace {

struct ConvGeometry {
  std::ptrdiff_t batch, cin, h, w, cout, cin_g, kh, kw, oh, ow, sh, sw, pt, pl, cout_g;
};

// Valid output range [lo, hi) along one axis for kernel tap `tap`.
inline void tap_range(std::ptrdiff_t tap, std::ptrdiff_t pad, std::ptrdiff_t stride,
                      std::ptrdiff_t in_len, std::ptrdiff_t out_len, std::ptrdiff_t& lo,
                      std::ptrdiff_t& hi) {
  // in = o*stride + tap - pad must lie in [0, in_len)
  const std::ptrdiff_t shift = pad - tap;
  lo = shift > 0 ? (shift + stride - 1) / stride : 0;
  const std::ptrdiff_t top = in_len - 1 + pad - tap;
  hi = top < 0 ? 0 : std::min(out_len, top / stride + 1);
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Conv2dOptions& opt) {
  require_rank(input, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (opt.groups == 0 || opt.stride_h == 0 || opt.stride_w == 0) {
    throw ConfigError("conv2d: groups and strides must be positive");
  }
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  if (is[1] % opt.groups != 0 || ks[0] % opt.groups != 0) {
    throw ConfigError("conv2d: channel counts (in " + std::to_string(is[1]) + ", out " +
                      std::to_string(ks[0]) + ") not divisible by groups " + std::to_string(opt.groups));
  }
  if (ks[1] != is[1] / opt.groups) {
    throw DimensionError("conv2d: kernel " + shape_str(ks) + " incompatible with input " +
                         shape_str(is) + " and groups " + std::to_string(opt.groups));
  }
  const std::size_t ph = is[2] + opt.pad_top + opt.pad_bottom;
  const std::size_t pw = is[3] + opt.pad_left + opt.pad_right;
  if (ks[2] > ph || ks[3] > pw) {
    throw DimensionError("conv2d: kernel " + shape_str(ks) + " larger than padded input " + shape_str(is));
  }
  ConvGeometry c{};
  c.batch = static_cast<std::ptrdiff_t>(is[0]);
  c.cin = static_cast<std::ptrdiff_t>(is[1]);
  c.h = static_cast<std::ptrdiff_t>(is[2]);
  c.w = static_cast<std::ptrdiff_t>(is[3]);
  c.cout = static_cast<std::ptrdiff_t>(ks[0]);
  c.cin_g = static_cast<std::ptrdiff_t>(ks[1]);
  c.kh = static_cast<std::ptrdiff_t>(ks[2]);
  c.kw = static_cast<std::ptrdiff_t>(ks[3]);
  c.sh = static_cast<std::ptrdiff_t>(opt.stride_h);
  c.sw = static_cast<std::ptrdiff_t>(opt.stride_w);
  c.pt = static_cast<std::ptrdiff_t>(opt.pad_top);
  c.pl = static_cast<std::ptrdiff_t>(opt.pad_left);
  c.oh = static_cast<std::ptrdiff_t>((ph - ks[2]) / opt.stride_h + 1);
  c.ow = static_cast<std::ptrdiff_t>((pw - ks[3]) / opt.stride_w + 1);
  c.cout_g = c.cout / static_cast<std::ptrdiff_t>(opt.groups);

  // Visits every (output, input, weight) triple; `fn(out_idx, in_idx, w_idx, count)`
  // is called for contiguous runs along the output width.
  auto for_each_tap = [c](std::ptrdiff_t b, auto&& fn) {
    for (std::ptrdiff_t co = 0; co < c.cout; ++co) {
      const std::ptrdiff_t grp = co / c.cout_g;
      for (std::ptrdiff_t cl = 0; cl < c.cin_g; ++cl) {
        const std::ptrdiff_t ci = grp * c.cin_g + cl;
        for (std::ptrdiff_t i = 0; i < c.kh; ++i) {
          std::ptrdiff_t oh_lo, oh_hi;
          tap_range(i, c.pt, c.sh, c.h, c.oh, oh_lo, oh_hi);
          for (std::ptrdiff_t j = 0; j < c.kw; ++j) {
            std::ptrdiff_t ow_lo, ow_hi;
            tap_range(j, c.pl, c.sw, c.w, c.ow, ow_lo, ow_hi);
            if (ow_lo >= ow_hi) continue;
            const std::ptrdiff_t widx = ((co * c.cin_g + cl) * c.kh + i) * c.kw + j;
            for (std::ptrdiff_t o = oh_lo; o < oh_hi; ++o) {
              const std::ptrdiff_t ih = o * c.sh + i - c.pt;
              const std::ptrdiff_t out_base = ((b * c.cout + co) * c.oh + o) * c.ow;
              const std::ptrdiff_t in_base = ((b * c.cin + ci) * c.h + ih) * c.w;
              fn(out_base, in_base, widx, ow_lo, ow_hi, j);
            }
          }
        }
      }
    }
  };

  auto x = input.data();
  auto k = kernel.data();
  std::vector<double> out(static_cast<std::size_t>(c.batch * c.cout * c.oh * c.ow), 0.0);
  parallel_for(static_cast<std::size_t>(c.batch), [&](std::size_t, std::size_t lo, std::size_t hi) {
    for (std::size_t bb = lo; bb < hi; ++bb) {
      for_each_tap(static_cast<std::ptrdiff_t>(bb),
                   [&](std::ptrdiff_t ob, std::ptrdiff_t ib, std::ptrdiff_t wi, std::ptrdiff_t l,
                       std::ptrdiff_t h, std::ptrdiff_t j) {
                     const double wv = k[static_cast<std::size_t>(wi)];
                     double* op = out.data() + ob;
                     const double* xd = x.data();
                     const std::ptrdiff_t base = ib + j - c.pl;
                     if (c.sw == 1) {
                       for (std::ptrdiff_t q = l; q < h; ++q) op[q] += wv * xd[base + q];
                     } else {
                       for (std::ptrdiff_t q = l; q < h; ++q) op[q] += wv * xd[base + q * c.sw];
                     }
                   });
    }
  });

  Shape out_shape{is[0], ks[0], static_cast<std::size_t>(c.oh), static_cast<std::size_t>(c.ow)};
  NodePtr pi = input.node(), pk = kernel.node();
  return make_op(std::move(out_shape), std::move(out), {&input, &kernel},
                 [pi, pk, c, for_each_tap](const std::vector<double>& g) {
                   std::vector<double>* gi = pi->requires_grad ? &pi->grad_buf() : nullptr;
                   const std::size_t kn = pk->data.size();
                   const std::size_t workers = std::min(num_threads(), static_cast<std::size_t>(c.batch));
                   std::vector<std::vector<double>> partial(
                       pk->requires_grad ? std::max<std::size_t>(workers, 1) : 0,
                       std::vector<double>(kn, 0.0));
                   parallel_for(static_cast<std::size_t>(c.batch),
                                [&](std::size_t w, std::size_t lo, std::size_t hi) {
                                  for (std::size_t bb = lo; bb < hi; ++bb) {
                                    for_each_tap(static_cast<std::ptrdiff_t>(bb),
                                                 [&](std::ptrdiff_t ob, std::ptrdiff_t ib, std::ptrdiff_t wi,
                                                     std::ptrdiff_t l, std::ptrdiff_t h, std::ptrdiff_t j) {
                                                   const double* gp = g.data() + ob;
                                                   const std::ptrdiff_t base = ib + j - c.pl;
                                                   if (gi) {
                                                     const double wv = pk->data[static_cast<std::size_t>(wi)];
                                                     double* gd = gi->data();
                                                     for (std::ptrdiff_t q = l; q < h; ++q) gd[base + q * c.sw] += wv * gp[q];
                                                   }
                                                   if (!partial.empty()) {
                                                     const double* xd = pi->data.data();
                                                     double acc = 0.0;
                                                     for (std::ptrdiff_t q = l; q < h; ++q) acc += gp[q] * xd[base + q * c.sw];
                                                     partial[w][static_cast<std::size_t>(wi)] += acc;
                                                   }
                                                 });
                                  }
                                });
                   if (!partial.empty()) {
                     auto& gk = pk->grad_buf();
                     for (const auto& p : partial)
                       for (std::size_t i = 0; i < kn; ++i) gk[i] += p[i];
                   }
                 });
}

Tensor avg_pool2d(const Tensor& input, std::size_t kh, std::size_t kw) {
  require_rank(input, 4, "avg_pool2d");
  if (kh == 0 || kw == 0) throw ConfigError("avg_pool2d: pool size must be positive");
  const Shape& s = input.shape();
  if (s[2] < kh || s[3] < kw) {
    throw DimensionError("avg_pool2d: pool " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than input " + shape_str(s));
  }
  const std::size_t bc = s[0] * s[1], h = s[2], w = s[3], oh = h / kh, ow = w / kw;
  const double inv = 1.0 / static_cast<double>(kh * kw);
  auto x = input.data();
  std::vector<double> out(bc * oh * ow, 0.0);
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t a = 0; a < kh; ++a)
          for (std::size_t b = 0; b < kw; ++b) acc += x[(p * h + i * kh + a) * w + j * kw + b];
        out[(p * oh + i) * ow + j] = acc * inv;
      }
  NodePtr pa = input.node();
  return make_op({s[0], s[1], oh, ow}, std::move(out), {&input},
                 [pa, bc, h, w, oh, ow, kh, kw, inv](const std::vector<double>& g) {
                   if (!pa->requires_grad) return;
                   auto& ga = pa->grad_buf();
                   for (std::size_t p = 0; p < bc; ++p)
                     for (std::size_t i = 0; i < oh; ++i)
                       for (std::size_t j = 0; j < ow; ++j) {
                         const double v = g[(p * oh + i) * ow + j] * inv;
                         for (std::size_t a = 0; a < kh; ++a)
                           for (std::size_t b = 0; b < kw; ++b) ga[(p * h + i * kh + a) * w + j * kw + b] += v;
                       }
                 });
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  BatchNormBuffers& buffers, bool train, double momentum, double eps) {
  require_defined(input, "batch_norm");
  if (input.rank() < 2) throw DimensionError("batch_norm: input rank must be >= 2, got " + shape_str(input.shape()));
  const std::size_t ch = input.dim(1);
  require_rank(gamma, 1, "batch_norm");
  require_rank(beta, 1, "batch_norm");
  if (gamma.dim(0) != ch || beta.dim(0) != ch) {
    throw DimensionError("batch_norm: affine parameters do not match " + std::to_string(ch) + " channels");
  }
  if (buffers.running_mean.empty()) buffers.running_mean.assign(ch, 0.0);
  if (buffers.running_var.empty()) buffers.running_var.assign(ch, 1.0);
  if (buffers.running_mean.size() != ch || buffers.running_var.size() != ch) {
    throw DimensionError("batch_norm: running statistics do not match channel count");
  }
  const AxisSplit s = split_axis(input.shape(), 1);
  const double count = static_cast<double>(s.outer * s.inner);
  auto x = input.data();
  auto gm = gamma.data(), bt = beta.data();

  std::vector<double> mu(ch, 0.0), inv_std(ch, 0.0);
  if (train) {
    for (std::size_t c = 0; c < ch; ++c) {
      double acc = 0.0;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) acc += x[(o * ch + c) * s.inner + i];
      mu[c] = acc / count;
      double var = 0.0;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const double d = x[(o * ch + c) * s.inner + i] - mu[c];
          var += d * d;
        }
      var /= count;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
      buffers.running_mean[c] = (1.0 - momentum) * buffers.running_mean[c] + momentum * mu[c];
      buffers.running_var[c] = (1.0 - momentum) * buffers.running_var[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mu[c] = buffers.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(buffers.running_var[c] + eps);
    }
  }

  std::vector<double> xhat(x.size()), out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t idx = (o * ch + c) * s.inner + i;
        xhat[idx] = (x[idx] - mu[c]) * inv_std[c];
        out[idx] = gm[c] * xhat[idx] + bt[c];
      }

  NodePtr px = input.node(), pg = gamma.node(), pb = beta.node();
  return make_op(input.shape(), std::move(out), {&input, &gamma, &beta},
                 [px, pg, pb, s, ch, count, train, inv_std = std::move(inv_std),
                  xhat = std::move(xhat)](const std::vector<double>& g) {
                   std::vector<double> sum_g(ch, 0.0), sum_gx(ch, 0.0);
                   for (std::size_t o = 0; o < s.outer; ++o)
                     for (std::size_t c = 0; c < ch; ++c)
                       for (std::size_t i = 0; i < s.inner; ++i) {
                         const std::size_t idx = (o * ch + c) * s.inner + i;
                         sum_g[c] += g[idx];
                         sum_gx[c] += g[idx] * xhat[idx];
                       }
                   if (pg->requires_grad) {
                     auto& gg = pg->grad_buf();
                     for (std::size_t c = 0; c < ch; ++c) gg[c] += sum_gx[c];
                   }
                   if (pb->requires_grad) {
                     auto& gb = pb->grad_buf();
                     for (std::size_t c = 0; c < ch; ++c) gb[c] += sum_g[c];
                   }
                   if (!px->requires_grad) return;
                   auto& gx = px->grad_buf();
                   for (std::size_t o = 0; o < s.outer; ++o)
                     for (std::size_t c = 0; c < ch; ++c) {
                       const double scale_c = pg->data[c] * inv_std[c];
                       for (std::size_t i = 0; i < s.inner; ++i) {
                         const std::size_t idx = (o * ch + c) * s.inner + i;
                         if (train) {
                           gx[idx] += scale_c * (g[idx] - sum_g[c] / count - xhat[idx] * sum_gx[c] / count);
                         } else {
                           gx[idx] += scale_c * g[idx];
                         }
                       }
                     }
                 });
}

Tensor dropout(const Tensor& input, double p, bool train, std::mt19937_64& rng) {
  require_defined(input, "dropout");
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (!train || p == 0.0) return input;
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> mask(input.numel());
  for (double& m : mask) m = keep(rng) ? inv : 0.0;
  return mul(input, Tensor::from(input.shape(), std::move(mask)));
}

}  // namespace eegdg
