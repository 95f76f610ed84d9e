#pragma once

// Reverse-mode automatic differentiation over dense float64 tensors.
//
// Every op builds a new immutable node that remembers its parents and a
// closure that pushes the node's gradient into its parents' gradient
// buffers. `backward` walks the graph in reverse topological order and
// returns a fresh GradientMap, so a graph can be differentiated from any
// thread without touching shared state. Parameter leaves are the only
// nodes whose values change, and only between graphs (optimizer step).

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "das/rng.hpp"

namespace das {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

// Tensor storage. Aligned to the widest packet Eigen uses, so vectorized
// loops split the same way on every run.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Elementwise gradient multiplier attached to one node. `rows` and `cols`
// broadcast a vector along the first / last axis of a 2-D node.
struct GradScaleHook {
  enum class Broadcast { full, rows, cols };
  std::vector<double> scale;
  Broadcast broadcast = Broadcast::full;
};

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(const Node& self, std::span<const double> grad,
                                      std::span<Buffer*> parent_grads)>;

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

struct Node {
  std::uint64_t id = next_node_id();
  Shape shape;
  Buffer data;
  bool requires_grad = false;
  std::string op;
  std::vector<NodePtr> parents;
  BackwardFn backward;
  std::optional<GradScaleHook> hook;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, const std::vector<double>& data, bool requires_grad = false) {
    return leaf(std::move(shape), Buffer(data.begin(), data.end()), requires_grad);
  }

  static Tensor leaf(Shape shape, std::initializer_list<double> data, bool requires_grad = false) {
    return leaf(std::move(shape), Buffer(data), requires_grad);
  }

  static Tensor leaf(Shape shape, Buffer data, bool requires_grad = false) {
    if (data.size() != numel(shape)) {
      throw ShapeError("leaf: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->op = "leaf";
    return Tensor(std::move(node));
  }

  static Tensor constant(Shape shape, double value) {
    const auto n = numel(shape);
    return leaf(std::move(shape), Buffer(n, value), false);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return leaf({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  std::uint64_t id() const { return node_->id; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.size() == 1 ? 1 : node_->shape.front(); }
  std::size_t cols() const { return node_->shape.back(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& op() const { return node_->op; }
  std::span<const double> data() const { return node_->data; }
  double item() const {
    if (size() != 1) throw ShapeError("item: tensor is not a scalar " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  // Only valid on leaves between graph builds (optimizer updates).
  std::span<double> mutable_data() {
    if (!node_->parents.empty()) throw Error("mutable_data: only leaves may be mutated");
    return node_->data;
  }

  Tensor clone() const {
    return leaf(node_->shape, node_->data, node_->requires_grad);
  }

  const detail::NodePtr& node() const { return node_; }

  static Tensor from_node(detail::NodePtr node) { return Tensor(std::move(node)); }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  detail::NodePtr node_;
};

// Gradients of one backward pass, keyed by node id.
class GradientMap {
 public:
  bool has(const Tensor& t) const { return grads_.count(t.id()) != 0; }

  std::span<const double> of(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) throw Error("GradientMap: no gradient for node " + t.op());
    return it->second;
  }

  Buffer& mutable_of(const Tensor& t) {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) throw Error("GradientMap: no gradient for node " + t.op());
    return it->second;
  }

  std::size_t size() const { return grads_.size(); }

  std::unordered_map<std::uint64_t, Buffer>& raw() { return grads_; }

 private:
  std::unordered_map<std::uint64_t, Buffer> grads_;
};

inline void attach_grad_scale(const Tensor& node, GradScaleHook hook) {
  const auto& shape = node.shape();
  std::size_t expected = 0;
  switch (hook.broadcast) {
    case GradScaleHook::Broadcast::full: expected = node.size(); break;
    case GradScaleHook::Broadcast::rows: expected = node.rows(); break;
    case GradScaleHook::Broadcast::cols: expected = node.cols(); break;
  }
  if (hook.scale.size() != expected) {
    throw ShapeError("attach_grad_scale: scale of length " + std::to_string(hook.scale.size()) +
                     " does not broadcast to " + shape_str(shape));
  }
  for (double s : hook.scale) {
    if (!std::isfinite(s) || s < 0.0 || s > 1.0) {
      throw Error("attach_grad_scale: scale entries must be finite and in [0,1]");
    }
  }
  if (node.node()->hook) throw Error("attach_grad_scale: node already carries a hook");
  node.node()->hook = std::move(hook);
}

inline void clear_grad_scale(const Tensor& node) { node.node()->hook.reset(); }

namespace detail {

inline void apply_hook(const GradScaleHook& hook, const Shape& shape, Buffer& g) {
  const std::size_t cols = shape.back();
  switch (hook.broadcast) {
    case GradScaleHook::Broadcast::full:
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= hook.scale[i];
      break;
    case GradScaleHook::Broadcast::rows:
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= hook.scale[i / cols];
      break;
    case GradScaleHook::Broadcast::cols:
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= hook.scale[i % cols];
      break;
  }
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline Tensor make_result(std::string op, Shape shape, Buffer data,
                          std::vector<Tensor> inputs, BackwardFn backward) {
  if (!all_finite(data)) throw NumericError("non-finite value produced by op '" + op + "'");
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->data = std::move(data);
  for (auto& in : inputs) {
    node->requires_grad = node->requires_grad || in.requires_grad();
    node->parents.push_back(in.node());
  }
  if (node->requires_grad) node->backward = std::move(backward);
  return Tensor::from_node(std::move(node));
}

}  // namespace detail

// Differentiates a scalar root. Gradients of every reachable node that
// requires grad are returned; hooks scale a node's total incoming gradient
// once, before it flows on to the node's parents.
inline GradientMap backward(const Tensor& root) {
  if (!root.defined() || root.size() != 1) {
    throw ShapeError("backward: root must be a scalar, got " +
                     (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  if (!std::isfinite(root.item())) {
    throw NumericError("backward: non-finite root produced by op '" + root.op() + "'");
  }
  GradientMap result;
  if (!root.requires_grad()) return result;

  // Iterative post-order DFS.
  std::vector<detail::Node*> order;
  std::unordered_map<const detail::Node*, bool> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited[root.node().get()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited[parent]) {
        visited[parent] = true;
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto& grads = result.raw();
  grads[root.id()] = Buffer{1.0};
  std::vector<Buffer*> parent_buffers;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    auto found = grads.find(node->id);
    if (found == grads.end()) continue;
    auto& g = found->second;
    if (node->hook) detail::apply_hook(*node->hook, node->shape, g);
    if (node->parents.empty() || !node->backward) continue;
    parent_buffers.assign(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      auto* parent = node->parents[i].get();
      if (!parent->requires_grad) continue;
      auto [slot, inserted] = grads.try_emplace(parent->id);
      if (inserted) slot->second.assign(parent->data.size(), 0.0);
      parent_buffers[i] = &slot->second;
    }
    node->backward(*node, g, parent_buffers);
    for (auto* buf : parent_buffers) {
      if (buf && !detail::all_finite(*buf)) {
        throw NumericError("backward: non-finite gradient produced by op '" + node->op + "'");
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ops. All tensors are row-major; 2-D ops treat the last axis as columns.

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_mat(std::span<const double> v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMap as_mat(Buffer& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_2d(const Tensor& a, const char* op) {
  if (a.shape().size() != 2) throw ShapeError(std::string(op) + ": expected a 2-D tensor");
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b},
                             [](const detail::Node&, std::span<const double> g, auto pg) {
                               for (auto* buf : pg)
                                 if (buf)
                                   for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b},
                             [](const detail::Node&, std::span<const double> g, auto pg) {
                               if (pg[0])
                                 for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                               if (pg[1])
                                 for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(
      "mul", a.shape(), std::move(out), {a, b},
      [](const detail::Node& self, std::span<const double> g, auto pg) {
        const auto& x = self.parents[0]->data;
        const auto& y = self.parents[1]->data;
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * y[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * x[i];
      });
}

inline Tensor scale(const Tensor& a, double c) {
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return detail::make_result("scale", a.shape(), std::move(out), {a},
                             [c](const detail::Node&, std::span<const double> g, auto pg) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * c;
                             });
}

// [M x K] * [K x N]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  }
  Buffer out(m * n);
  detail::as_mat(out, m, n).noalias() = detail::as_mat(a.data(), m, k) * detail::as_mat(b.data(), k, n);
  return detail::make_result(
      "matmul", {m, n}, std::move(out), {a, b},
      [m, k, n](const detail::Node& self, std::span<const double> g, auto pg) {
        auto G = detail::as_mat(g, m, n);
        if (pg[0])
          detail::as_mat(*pg[0], m, k).noalias() +=
              G * detail::as_mat(self.parents[1]->data, k, n).transpose();
        if (pg[1])
          detail::as_mat(*pg[1], k, n).noalias() +=
              detail::as_mat(self.parents[0]->data, m, k).transpose() * G;
      });
}

// x [M x K] * W [K x N] + b [N]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::require_2d(x, "linear");
  detail::require_2d(w, "linear");
  const std::size_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  if (w.shape()[0] != k || b.size() != n) {
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " " +
                     shape_str(w.shape()) + " " + shape_str(b.shape()));
  }
  Buffer out(m * n);
  auto Y = detail::as_mat(out, m, n);
  Y.noalias() = detail::as_mat(x.data(), m, k) * detail::as_mat(w.data(), k, n);
  Y.rowwise() += detail::as_mat(b.data(), 1, n).row(0);
  return detail::make_result(
      "linear", {m, n}, std::move(out), {x, w, b},
      [m, k, n](const detail::Node& self, std::span<const double> g, auto pg) {
        auto G = detail::as_mat(g, m, n);
        if (pg[0])
          detail::as_mat(*pg[0], m, k).noalias() +=
              G * detail::as_mat(self.parents[1]->data, k, n).transpose();
        if (pg[1])
          detail::as_mat(*pg[1], k, n).noalias() +=
              detail::as_mat(self.parents[0]->data, m, k).transpose() * G;
        if (pg[2]) detail::as_mat(*pg[2], 1, n) += G.colwise().sum();
      });
}

namespace detail {
template <class F, class DF>
Tensor unary(const char* name, const Tensor& a, F f, DF df) {
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
  return make_result(name, a.shape(), std::move(out), {a},
                     [df](const Node& self, std::span<const double> g, auto pg) {
                       const auto& x = self.parents[0]->data;
                       const auto& y = self.data;
                       for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * df(x[i], y[i]);
                     });
}
}  // namespace detail

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return detail::unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result("sum", {1}, {s}, {a},
                             [](const detail::Node&, std::span<const double> g, auto pg) {
                               for (auto& v : *pg[0]) v += g[0];
                             });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result("mean", {1}, {s * inv}, {a},
                             [inv](const detail::Node&, std::span<const double> g, auto pg) {
                               for (auto& v : *pg[0]) v += g[0] * inv;
                             });
}

// Row-wise softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  const std::size_t c = a.cols(), r = a.size() / c;
  Buffer out(a.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a.data().data() + i * c;
    double* y = out.data() + i * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  return detail::make_result("softmax", a.shape(), std::move(out), {a},
                             [r, c](const detail::Node& self, std::span<const double> g, auto pg) {
                               const auto& y = self.data;
                               for (std::size_t i = 0; i < r; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                                 for (std::size_t j = 0; j < c; ++j)
                                   (*pg[0])[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                               }
                             });
}

// Layer normalization over the last axis with affine gain and bias.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t c = x.cols(), r = x.size() / c;
  if (gamma.size() != c || beta.size() != c) throw ShapeError("layernorm: affine size mismatch");
  Buffer out(x.size());
  auto xhat = std::make_shared<Buffer>(x.size());
  auto inv_std = std::make_shared<Buffer>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data().data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xi[j] - mu) * is;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * gamma[j] + beta[j];
    }
  }
  return detail::make_result(
      "layernorm", x.shape(), std::move(out), {x, gamma, beta},
      [r, c, xhat, inv_std](const detail::Node& self, std::span<const double> g, auto pg) {
        const auto& gam = self.parents[1]->data;
        for (std::size_t i = 0; i < r; ++i) {
          const double* gi = g.data() + i * c;
          const double* hi = xhat->data() + i * c;
          if (pg[1])
            for (std::size_t j = 0; j < c; ++j) (*pg[1])[j] += gi[j] * hi[j];
          if (pg[2])
            for (std::size_t j = 0; j < c; ++j) (*pg[2])[j] += gi[j];
          if (pg[0]) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = gi[j] * gam[j];
              s1 += dh;
              s2 += dh * hi[j];
            }
            const double inv_c = 1.0 / static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = gi[j] * gam[j];
              (*pg[0])[i * c + j] += (*inv_std)[i] * (dh - inv_c * s1 - hi[j] * inv_c * s2);
            }
          }
        }
      });
}

// Inverted dropout driven by a counter-based stream: the keep decision for
// element i depends only on (key, i).
inline Tensor dropout(const Tensor& a, double p, std::uint64_t key) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout: probability must be in [0,1)");
  if (p == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<Buffer>(a.size());
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = counter_uniform(key, i) < p ? 0.0 : keep_scale;
    (*mask)[i] = m;
    out[i] = a[i] * m;
  }
  return detail::make_result("dropout", a.shape(), std::move(out), {a},
                             [mask](const detail::Node&, std::span<const double> g, auto pg) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * (*mask)[i];
                             });
}

// Rows of `table` selected by `ids`.
inline Tensor gather(const Tensor& table, std::span<const std::size_t> ids) {
  detail::require_2d(table, "gather");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  Buffer out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) throw Error("gather: index " + std::to_string(ids[i]) + " out of range");
    std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return detail::make_result("gather", {ids.size(), d}, std::move(out), {table},
                             [idx = std::move(idx), d](const detail::Node&, std::span<const double> g, auto pg) {
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) (*pg[0])[idx[i] * d + j] += g[i * d + j];
                             });
}

// x [R x C] scaled by gate [G x U]: row r uses gate row r / rows_per_group,
// column c uses gate unit c / cols_per_unit. G == 1 broadcasts one gate
// vector over all rows.
inline Tensor gate_mul(const Tensor& x, const Tensor& gate, std::size_t rows_per_group,
                       std::size_t cols_per_unit) {
  detail::require_2d(x, "gate_mul");
  detail::require_2d(gate, "gate_mul");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  const std::size_t groups = gate.shape()[0], units = gate.shape()[1];
  if (units * cols_per_unit != c || (groups != 1 && groups * rows_per_group != r)) {
    throw ShapeError("gate_mul: gate " + shape_str(gate.shape()) + " does not fit " + shape_str(x.shape()));
  }
  auto gate_row = [groups, rows_per_group](std::size_t i) { return groups == 1 ? 0 : i / rows_per_group; };
  Buffer out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* gi = gate.data().data() + gate_row(i) * units;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * gi[j / cols_per_unit];
  }
  return detail::make_result(
      "gate_mul", x.shape(), std::move(out), {x, gate},
      [r, c, units, cols_per_unit, gate_row](const detail::Node& self, std::span<const double> g, auto pg) {
        const auto& xv = self.parents[0]->data;
        const auto& gv = self.parents[1]->data;
        for (std::size_t i = 0; i < r; ++i) {
          const std::size_t gr = gate_row(i) * units;
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t u = gr + j / cols_per_unit;
            if (pg[0]) (*pg[0])[i * c + j] += g[i * c + j] * gv[u];
            if (pg[1]) (*pg[1])[u] += g[i * c + j] * xv[i * c + j];
          }
        }
      });
}

// Weighted pooling of token rows into per-sequence rows:
// out[n] = sum_t weights[n*T + t] * x[n*T + t].
inline Tensor pool_rows(const Tensor& x, std::span<const double> weights, std::size_t seq_len) {
  detail::require_2d(x, "pool_rows");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (seq_len == 0 || rows % seq_len != 0 || weights.size() != rows) {
    throw ShapeError("pool_rows: weights/sequence length do not fit " + shape_str(x.shape()));
  }
  const std::size_t n = rows / seq_len;
  Buffer out(n * d, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[(r / seq_len) * d + j] += weights[r] * x[r * d + j];
  Buffer w(weights.begin(), weights.end());
  return detail::make_result("pool_rows", {n, d}, std::move(out), {x},
                             [w = std::move(w), d, seq_len](const detail::Node&, std::span<const double> g, auto pg) {
                               for (std::size_t r = 0; r < w.size(); ++r)
                                 for (std::size_t j = 0; j < d; ++j)
                                   (*pg[0])[r * d + j] += w[r] * g[(r / seq_len) * d + j];
                             });
}

// Multi-head scaled dot-product attention over N sequences of length T.
// q, k, v: [N*T x H*dh]. key_valid[n*T + t] == false excludes key t of
// sequence n. Attention probabilities are dropped out with `dropout_p`
// under `dropout_key`. Output: concatenated per-head contexts [N*T x H*dh].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_seq,
                        std::size_t seq_len, std::size_t n_heads, const std::vector<bool>& key_valid,
                        double dropout_p, std::uint64_t dropout_key) {
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  const std::size_t d = q.cols(), T = seq_len, H = n_heads;
  if (q.rows() != n_seq * T || d % H != 0 || key_valid.size() != n_seq * T) {
    throw ShapeError("attention: inconsistent shapes " + shape_str(q.shape()));
  }
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const double keep_scale = dropout_p > 0.0 ? 1.0 / (1.0 - dropout_p) : 1.0;
  // probs and dropped probs per (n, h): [T x T]
  auto probs = std::make_shared<Buffer>(n_seq * H * T * T);
  auto dropped = std::make_shared<Buffer>(dropout_p > 0.0 ? n_seq * H * T * T : 0);
  Buffer out(n_seq * T * d);
  detail::RowMat qh(T, dh), kh(T, dh), vh(T, dh), s(T, T);
  for (std::size_t n = 0; n < n_seq; ++n) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < dh; ++j) {
          const std::size_t src = (n * T + t) * d + h * dh + j;
          qh(t, j) = q[src];
          kh(t, j) = k[src];
          vh(t, j) = v[src];
        }
      s.noalias() = qh * kh.transpose() * inv_sqrt;
      double* p = probs->data() + (n * H + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < T; ++j)
          if (key_valid[n * T + j]) mx = std::max(mx, s(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          const double e = key_valid[n * T + j] ? std::exp(s(i, j) - mx) : 0.0;
          p[i * T + j] = e;
          z += e;
        }
        for (std::size_t j = 0; j < T; ++j) p[i * T + j] /= z;
      }
      const double* pd = p;
      if (dropout_p > 0.0) {
        double* dp = dropped->data() + (n * H + h) * T * T;
        const std::size_t base = (n * H + h) * T * T;
        for (std::size_t e = 0; e < T * T; ++e)
          dp[e] = counter_uniform(dropout_key, base + e) < dropout_p ? 0.0 : p[e] * keep_scale;
        pd = dp;
      }
      detail::RowMat ctx = detail::as_mat(std::span<const double>(pd, T * T), T, T) * vh;
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < dh; ++j) out[(n * T + t) * d + h * dh + j] = ctx(t, j);
    }
  }
  return detail::make_result(
      "attention", q.shape(), std::move(out), {q, k, v},
      [=](const detail::Node& self, std::span<const double> g, auto pg) {
        const auto& qv = self.parents[0]->data;
        const auto& kv = self.parents[1]->data;
        const auto& vv = self.parents[2]->data;
        detail::RowMat qh(T, dh), kh(T, dh), vh(T, dh), gh(T, dh), dpd(T, T), ds(T, T);
        for (std::size_t n = 0; n < n_seq; ++n) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < T; ++t)
              for (std::size_t j = 0; j < dh; ++j) {
                const std::size_t src = (n * T + t) * d + h * dh + j;
                qh(t, j) = qv[src];
                kh(t, j) = kv[src];
                vh(t, j) = vv[src];
                gh(t, j) = g[src];
              }
            const std::size_t base = (n * H + h) * T * T;
            const double* p = probs->data() + base;
            const double* pd = dropout_p > 0.0 ? dropped->data() + base : p;
            auto P = detail::as_mat(std::span<const double>(p, T * T), T, T);
            auto PD = detail::as_mat(std::span<const double>(pd, T * T), T, T);
            if (pg[2]) {
              detail::RowMat dv = PD.transpose() * gh;
              for (std::size_t t = 0; t < T; ++t)
                for (std::size_t j = 0; j < dh; ++j) (*pg[2])[(n * T + t) * d + h * dh + j] += dv(t, j);
            }
            if (!pg[0] && !pg[1]) continue;
            dpd.noalias() = gh * vh.transpose();
            if (dropout_p > 0.0) {
              for (std::size_t e = 0; e < T * T; ++e)
                dpd.data()[e] *= counter_uniform(dropout_key, base + e) < dropout_p ? 0.0 : keep_scale;
            }
            for (std::size_t i = 0; i < T; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < T; ++j) dot += dpd(i, j) * P(i, j);
              for (std::size_t j = 0; j < T; ++j) ds(i, j) = P(i, j) * (dpd(i, j) - dot) * inv_sqrt;
            }
            if (pg[0]) {
              detail::RowMat dq = ds * kh;
              for (std::size_t t = 0; t < T; ++t)
                for (std::size_t j = 0; j < dh; ++j) (*pg[0])[(n * T + t) * d + h * dh + j] += dq(t, j);
            }
            if (pg[1]) {
              detail::RowMat dk = ds.transpose() * qh;
              for (std::size_t t = 0; t < T; ++t)
                for (std::size_t j = 0; j < dh; ++j) (*pg[1])[(n * T + t) * d + h * dh + j] += dk(t, j);
            }
          }
        }
      });
}

// sum_r weights[r] * CE(softmax(logits[r]), labels[r]); rows with zero
// weight are skipped entirely.
inline Tensor weighted_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels,
                                     std::span<const double> weights) {
  detail::require_2d(logits, "cross_entropy");
  const std::size_t r = logits.rows(), c = logits.cols();
  if (labels.size() != r || weights.size() != r) throw ShapeError("cross_entropy: label count mismatch");
  auto probs = std::make_shared<Buffer>(r * c, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (weights[i] == 0.0) continue;
    if (labels[i] >= c) throw Error("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    const double* x = logits.data().data() + i * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += ((*probs)[i * c + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= z;
    loss += weights[i] * (std::log(z) + mx - x[labels[i]]);
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  Buffer w(weights.begin(), weights.end());
  return detail::make_result(
      "cross_entropy", {1}, {loss}, {logits},
      [probs, lab = std::move(lab), w = std::move(w), c](const detail::Node&, std::span<const double> g, auto pg) {
        for (std::size_t i = 0; i < w.size(); ++i) {
          if (w[i] == 0.0) continue;
          const double s = g[0] * w[i];
          for (std::size_t j = 0; j < c; ++j) (*pg[0])[i * c + j] += s * (*probs)[i * c + j];
          (*pg[0])[i * c + lab[i]] -= s;
        }
      });
}

// sum_r weights[r] * KL(softmax(p_logits[r]) || softmax(q_logits[r])).
inline Tensor weighted_kl(const Tensor& p_logits, const Tensor& q_logits, std::span<const double> weights) {
  detail::require_same_shape(p_logits, q_logits, "kl");
  const std::size_t r = p_logits.rows(), c = p_logits.cols();
  if (weights.size() != r) throw ShapeError("kl: weight count mismatch");
  auto p = std::make_shared<Buffer>(r * c, 0.0);
  auto q = std::make_shared<Buffer>(r * c, 0.0);
  auto logp = std::make_shared<Buffer>(r * c, 0.0);
  auto logq = std::make_shared<Buffer>(r * c, 0.0);
  auto row_kl = std::make_shared<Buffer>(r, 0.0);
  auto log_softmax = [c](const double* x, double* prob, double* logprob) {
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const double lz = std::log(z) + mx;
    for (std::size_t j = 0; j < c; ++j) {
      logprob[j] = x[j] - lz;
      prob[j] = std::exp(logprob[j]);
    }
  };
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (weights[i] == 0.0) continue;
    log_softmax(p_logits.data().data() + i * c, p->data() + i * c, logp->data() + i * c);
    log_softmax(q_logits.data().data() + i * c, q->data() + i * c, logq->data() + i * c);
    double kl = 0.0;
    for (std::size_t j = 0; j < c; ++j) kl += (*p)[i * c + j] * ((*logp)[i * c + j] - (*logq)[i * c + j]);
    (*row_kl)[i] = kl;
    loss += weights[i] * kl;
  }
  Buffer w(weights.begin(), weights.end());
  return detail::make_result(
      "kl", {1}, {loss}, {p_logits, q_logits},
      [=, w = std::move(w)](const detail::Node&, std::span<const double> g, auto pg) {
        for (std::size_t i = 0; i < r; ++i) {
          if (w[i] == 0.0) continue;
          const double s = g[0] * w[i];
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t e = i * c + j;
            if (pg[0]) (*pg[0])[e] += s * (*p)[e] * ((*logp)[e] - (*logq)[e] - (*row_kl)[i]);
            if (pg[1]) (*pg[1])[e] += s * ((*q)[e] - (*p)[e]);
          }
        }
      });
}

}  // namespace das
