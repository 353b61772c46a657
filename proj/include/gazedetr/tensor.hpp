#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gazedetr/common.hpp"
#include "gazedetr/rng.hpp"

namespace gazedetr {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    check(e > 0, "tensor extents must be positive, got " + shape_str(s));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
  // Graph linkage, recorded per forward pass and freed after backward.
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backfn;
};

inline std::vector<double>& grad_buf(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

}  // namespace detail

// Dense row-major 64-bit float tensor with reverse-mode differentiation.
// Value-semantics handle over a shared node; ops record a dynamic graph
// whenever any input requires gradients.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->values.assign(n, value);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    check(n == values.size(), "value count " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_values({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return node_->values.size(); }

  std::vector<double>& values() { return node_->values; }
  const std::vector<double>& values() const { return node_->values; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

  double item() const {
    check(size() == 1, "item() needs a scalar tensor, got " + shape_str(shape()));
    return node_->values[0];
  }

  double at(int r, int c) const {  // 2-D convenience
    return node_->values[static_cast<std::size_t>(r) * dim(1) + c];
  }
  double& at(int r, int c) {
    return node_->values[static_cast<std::size_t>(r) * dim(1) + c];
  }

  // Deep copy of shape+values; drops graph linkage.
  Tensor detached_copy(bool requires_grad = false) const {
    return from_values(shape(), values(), requires_grad);
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  std::shared_ptr<detail::Node> node() const { return node_; }

  friend void backward(const Tensor& loss);
  friend Tensor make_op(Shape shape, std::vector<double> values,
                        const std::vector<Tensor>& inputs,
                        std::function<void(const detail::Node&)> backfn);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Builds an op result node; records graph linkage only when some input
// requires gradients.
inline Tensor make_op(Shape shape, std::vector<double> values,
                      const std::vector<Tensor>& inputs,
                      std::function<void(const detail::Node&)> backfn) {
  Tensor out = Tensor::from_values(std::move(shape), std::move(values));
  bool needs = false;
  for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) out.node_->parents.push_back(t.node());
    out.node_->backfn = std::move(backfn);
  }
  return out;
}

// Populates grad for every requires_grad leaf reachable from `loss`.
// Gradients accumulate additively across fan-out and across calls; the
// recorded graph is freed once traversed.
inline void backward(const Tensor& loss) {
  check(loss.size() == 1, "backward() needs a scalar loss, got " + shape_str(loss.shape()));
  using detail::Node;
  using NodePtr = std::shared_ptr<Node>;
  // Topological order holds shared ownership: intermediate nodes are kept
  // alive only by graph linkage, which gets freed as the traversal runs.
  std::vector<NodePtr> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(loss.node_, 0);
  seen.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr p = node->parents[next++];
      if (seen.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  detail::grad_buf(*loss.node_)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = it->get();
    if (n->backfn) {
      if (n->grad.empty()) n->grad.assign(n->values.size(), 0.0);
      n->backfn(*n);
      n->backfn = nullptr;
      n->parents.clear();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic

namespace detail {

enum class BroadcastKind { Same, Scalar, TrailingDim };

inline BroadcastKind classify_broadcast(const Shape& a, const Shape& b) {
  if (a == b) return BroadcastKind::Same;
  if (shape_numel(b) == 1) return BroadcastKind::Scalar;
  if (b.size() == 1 && !a.empty() && a.back() == b[0]) return BroadcastKind::TrailingDim;
  fail("shapes " + shape_str(a) + " and " + shape_str(b) +
       " are incompatible (only same-shape, scalar, and trailing-dimension broadcasts are supported)");
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  auto kind = detail::classify_broadcast(a.shape(), b.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  const std::size_t d = (kind == detail::BroadcastKind::TrailingDim) ? bv.size() : 0;
  switch (kind) {
    case detail::BroadcastKind::Same:
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
      break;
    case detail::BroadcastKind::Scalar:
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[0];
      break;
    case detail::BroadcastKind::TrailingDim:
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % d];
      break;
  }
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn, kind, d](const detail::Node& o) {
    if (an->requires_grad) {
      auto& ga = detail::grad_buf(*an);
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& gb = detail::grad_buf(*bn);
      switch (kind) {
        case detail::BroadcastKind::Same:
          for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] += o.grad[i];
          break;
        case detail::BroadcastKind::Scalar:
          for (double g : o.grad) gb[0] += g;
          break;
        case detail::BroadcastKind::TrailingDim:
          for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i % d] += o.grad[i];
          break;
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  auto kind = detail::classify_broadcast(a.shape(), b.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  const std::size_t d = (kind == detail::BroadcastKind::TrailingDim) ? bv.size() : 0;
  switch (kind) {
    case detail::BroadcastKind::Same:
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
      break;
    case detail::BroadcastKind::Scalar:
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[0];
      break;
    case detail::BroadcastKind::TrailingDim:
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i % d];
      break;
  }
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn, kind, d](const detail::Node& o) {
    if (an->requires_grad) {
      auto& ga = detail::grad_buf(*an);
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& gb = detail::grad_buf(*bn);
      switch (kind) {
        case detail::BroadcastKind::Same:
          for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] -= o.grad[i];
          break;
        case detail::BroadcastKind::Scalar:
          for (double g : o.grad) gb[0] -= g;
          break;
        case detail::BroadcastKind::TrailingDim:
          for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i % d] -= o.grad[i];
          break;
      }
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto kind = detail::classify_broadcast(a.shape(), b.shape());
  check(kind != detail::BroadcastKind::TrailingDim || b.size() == a.values().size(),
        "mul supports same-shape and scalar broadcast only");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  if (kind == detail::BroadcastKind::Scalar) {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[0];
  } else {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  }
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn, kind](const detail::Node& o) {
    if (kind == detail::BroadcastKind::Scalar) {
      if (an->requires_grad) {
        auto& ga = detail::grad_buf(*an);
        for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * bn->values[0];
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buf(*bn);
        for (std::size_t i = 0; i < o.grad.size(); ++i) gb[0] += o.grad[i] * an->values[i];
      }
    } else {
      if (an->requires_grad) {
        auto& ga = detail::grad_buf(*an);
        for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * bn->values[i];
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buf(*bn);
        for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] += o.grad[i] * an->values[i];
      }
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  auto kind = detail::classify_broadcast(a.shape(), b.shape());
  check(kind != detail::BroadcastKind::TrailingDim, "div supports same-shape and scalar broadcast only");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  if (kind == detail::BroadcastKind::Scalar) {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[0];
  } else {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
  }
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn, kind](const detail::Node& o) {
    if (kind == detail::BroadcastKind::Scalar) {
      const double inv = 1.0 / bn->values[0];
      if (an->requires_grad) {
        auto& ga = detail::grad_buf(*an);
        for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * inv;
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buf(*bn);
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          gb[0] -= o.grad[i] * an->values[i] * inv * inv;
      }
    } else {
      if (an->requires_grad) {
        auto& ga = detail::grad_buf(*an);
        for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] / bn->values[i];
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buf(*bn);
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          gb[i] -= o.grad[i] * an->values[i] / (bn->values[i] * bn->values[i]);
      }
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {a}, [an, s](const detail::Node& o) {
    auto& ga = detail::grad_buf(*an);
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * s;
  });
}

inline Tensor add_const(const Tensor& a, double c) {
  std::vector<double> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + c;
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {a}, [an](const detail::Node& o) {
    auto& ga = detail::grad_buf(*an);
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

namespace detail {

template <typename Fwd, typename Dfn>
Tensor unary_op(const Tensor& a, Fwd f, Dfn dfn) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {a}, [an, dfn](const Node& o) {
    auto& ga = grad_buf(*an);
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      ga[i] += o.grad[i] * dfn(an->values[i], o.values[i]);
  });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// log(1 + exp(x)), overflow-safe.
inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "minimum needs matching shapes, got " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::min(av[i], bv[i]);
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](const detail::Node& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const bool a_side = an->values[i] <= bn->values[i];
      if (a_side && an->requires_grad) detail::grad_buf(*an)[i] += o.grad[i];
      if (!a_side && bn->requires_grad) detail::grad_buf(*bn)[i] += o.grad[i];
    }
  });
}

inline Tensor maximum(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "maximum needs matching shapes, got " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::max(av[i], bv[i]);
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](const detail::Node& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const bool a_side = an->values[i] >= bn->values[i];
      if (a_side && an->requires_grad) detail::grad_buf(*an)[i] += o.grad[i];
      if (!a_side && bn->requires_grad) detail::grad_buf(*bn)[i] += o.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and structure ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2,
        "matmul needs 2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  check(a.dim(1) == b.dim(0), "matmul inner extents disagree: " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* arow = av.data() + static_cast<std::size_t>(i) * k;
    double* orow = out.data() + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  auto an = a.node(), bn = b.node();
  return make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](const detail::Node& o) {
    if (an->requires_grad) {
      auto& ga = detail::grad_buf(*an);
      for (int i = 0; i < m; ++i) {
        const double* grow = o.grad.data() + static_cast<std::size_t>(i) * n;
        double* garow = ga.data() + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
          const double* brow = bn->values.data() + static_cast<std::size_t>(kk) * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          garow[kk] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      auto& gb = detail::grad_buf(*bn);
      for (int kk = 0; kk < k; ++kk) {
        double* gbrow = gb.data() + static_cast<std::size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
          const double aik = an->values[static_cast<std::size_t>(i) * k + kk];
          if (aik == 0.0) continue;
          const double* grow = o.grad.data() + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
        }
      }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  check(a.ndim() == 2, "transpose needs a 2-D tensor, got " + shape_str(a.shape()));
  const int r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(j) * r + i] = a.values()[static_cast<std::size_t>(i) * c + j];
  auto an = a.node();
  return make_op({c, r}, std::move(out), {a}, [an, r, c](const detail::Node& o) {
    auto& ga = detail::grad_buf(*an);
    for (int j = 0; j < c; ++j)
      for (int i = 0; i < r; ++i)
        ga[static_cast<std::size_t>(i) * c + j] += o.grad[static_cast<std::size_t>(j) * r + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  check(shape_numel(shape) == a.size(), "reshape from " + shape_str(a.shape()) + " to " +
                                            shape_str(shape) + " changes element count");
  auto an = a.node();
  return make_op(std::move(shape), a.values(), {a}, [an](const detail::Node& o) {
    auto& ga = detail::grad_buf(*an);
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols needs at least one input");
  const int rows = parts[0].dim(0);
  int cols = 0;
  for (const Tensor& p : parts) {
    check(p.ndim() == 2 && p.dim(0) == rows,
          "concat_cols needs 2-D inputs with matching rows, got " + shape_str(p.shape()));
    cols += p.dim(1);
  }
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  int off = 0;
  for (const Tensor& p : parts) {
    const int pc = p.dim(1);
    for (int i = 0; i < rows; ++i)
      std::copy_n(p.values().data() + static_cast<std::size_t>(i) * pc, pc,
                  out.data() + static_cast<std::size_t>(i) * cols + off);
    off += pc;
  }
  std::vector<std::shared_ptr<detail::Node>> nodes;
  std::vector<int> widths;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.dim(1));
  }
  return make_op({rows, cols}, std::move(out), parts,
                 [nodes, widths, rows, cols](const detail::Node& o) {
                   int off = 0;
                   for (std::size_t p = 0; p < nodes.size(); ++p) {
                     const int pc = widths[p];
                     if (nodes[p]->requires_grad) {
                       auto& g = detail::grad_buf(*nodes[p]);
                       for (int i = 0; i < rows; ++i)
                         for (int j = 0; j < pc; ++j)
                           g[static_cast<std::size_t>(i) * pc + j] +=
                               o.grad[static_cast<std::size_t>(i) * cols + off + j];
                     }
                     off += pc;
                   }
                 });
}

inline Tensor slice_cols(const Tensor& a, int start, int len) {
  check(a.ndim() == 2, "slice_cols needs a 2-D tensor, got " + shape_str(a.shape()));
  check(start >= 0 && len > 0 && start + len <= a.dim(1),
        "slice_cols range [" + std::to_string(start) + ", " + std::to_string(start + len) +
            ") out of bounds for " + shape_str(a.shape()));
  const int rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(rows) * len);
  for (int i = 0; i < rows; ++i)
    std::copy_n(a.values().data() + static_cast<std::size_t>(i) * cols + start, len,
                out.data() + static_cast<std::size_t>(i) * len);
  auto an = a.node();
  return make_op({rows, len}, std::move(out), {a}, [an, start, len, rows, cols](const detail::Node& o) {
    auto& ga = detail::grad_buf(*an);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < len; ++j)
        ga[static_cast<std::size_t>(i) * cols + start + j] +=
            o.grad[static_cast<std::size_t>(i) * len + j];
  });
}

inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  check(a.ndim() == 2, "gather_rows needs a 2-D tensor, got " + shape_str(a.shape()));
  const int rows = a.dim(0), cols = a.dim(1);
  for (int i : idx)
    check(i >= 0 && i < rows,
          "gather_rows index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  std::vector<double> out(idx.size() * static_cast<std::size_t>(cols));
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(a.values().data() + static_cast<std::size_t>(idx[r]) * cols, cols,
                out.data() + r * cols);
  auto an = a.node();
  return make_op({static_cast<int>(idx.size()), cols}, std::move(out), {a},
                 [an, idx, cols](const detail::Node& o) {
                   auto& ga = detail::grad_buf(*an);
                   for (std::size_t r = 0; r < idx.size(); ++r)
                     for (int j = 0; j < cols; ++j)
                       ga[static_cast<std::size_t>(idx[r]) * cols + j] +=
                           o.grad[r * static_cast<std::size_t>(cols) + j];
                 });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto an = a.node();
  return make_op({1}, {s}, {a}, [an](const detail::Node& o) {
    auto& ga = detail::grad_buf(*an);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto an = a.node();
  return make_op({1}, {s * inv}, {a}, [an, inv](const detail::Node& o) {
    auto& ga = detail::grad_buf(*an);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// Neural-net ops

// Softmax over the last dimension, stabilized by max-subtraction.
inline Tensor softmax_lastdim(const Tensor& a) {
  check(a.size() > 0 && a.ndim() >= 1, "softmax_lastdim needs a non-empty tensor");
  const int d = a.shape().back();
  check(d >= 1, "softmax_lastdim needs last extent >= 1");
  const std::size_t rows = a.size() / static_cast<std::size_t>(d);
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = av.data() + r * d;
    double* o = out.data() + r * d;
    double mx = in[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < d; ++j) o[j] *= inv;
  }
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {a}, [an, rows, d](const detail::Node& o) {
    auto& ga = detail::grad_buf(*an);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.values.data() + r * d;
      const double* gy = o.grad.data() + r * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += gy[j] * y[j];
      double* gx = ga.data() + r * d;
      for (int j = 0; j < d; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
}

// 2-D convolution over a [C_in, H, W] input with [C_out, C_in, kh, kw]
// kernels and optional [C_out] bias.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  check(x.ndim() == 3, "conv2d input must be [C,H,W], got " + shape_str(x.shape()));
  check(w.ndim() == 4, "conv2d kernels must be [Cout,Cin,kh,kw], got " + shape_str(w.shape()));
  check(stride >= 1 && pad >= 0, "conv2d needs stride >= 1 and pad >= 0");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check(w.dim(1) == cin, "conv2d channel mismatch: input " + shape_str(x.shape()) +
                             " vs kernels " + shape_str(w.shape()));
  check(kh <= h + 2 * pad && kw <= wd + 2 * pad,
        "conv2d kernel " + shape_str(w.shape()) + " exceeds padded input " + shape_str(x.shape()));
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  check(ho > 0 && wo > 0, "conv2d output extent is nonpositive for input " + shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias)
    check(bias.ndim() == 1 && bias.dim(0) == cout,
          "conv2d bias must be [Cout], got " + shape_str(bias.shape()));

  std::vector<double> out(static_cast<std::size_t>(cout) * ho * wo, 0.0);
  const auto& xv = x.values();
  const auto& wv = w.values();
  for (int oc = 0; oc < cout; ++oc) {
    const double b = has_bias ? bias.values()[oc] : 0.0;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double acc = b;
        for (int ic = 0; ic < cin; ++ic) {
          const double* xplane = xv.data() + static_cast<std::size_t>(ic) * h * wd;
          const double* wplane =
              wv.data() + (static_cast<std::size_t>(oc) * cin + ic) * kh * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += xplane[static_cast<std::size_t>(iy) * wd + ix] * wplane[ky * kw + kx];
            }
          }
        }
        out[(static_cast<std::size_t>(oc) * ho + oy) * wo + ox] = acc;
      }
    }
  }

  auto xn = x.node(), wn = w.node();
  auto bn = has_bias ? bias.node() : nullptr;
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_op(
      {cout, ho, wo}, std::move(out), inputs,
      [xn, wn, bn, cin, h, wd, cout, kh, kw, ho, wo, stride, pad](const detail::Node& o) {
        const bool gx = xn->requires_grad;
        const bool gw = wn->requires_grad;
        const bool gb = bn && bn->requires_grad;
        auto* gxv = gx ? &detail::grad_buf(*xn) : nullptr;
        auto* gwv = gw ? &detail::grad_buf(*wn) : nullptr;
        auto* gbv = gb ? &detail::grad_buf(*bn) : nullptr;
        for (int oc = 0; oc < cout; ++oc) {
          for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
              const double g = o.grad[(static_cast<std::size_t>(oc) * ho + oy) * wo + ox];
              if (g == 0.0) continue;
              if (gbv) (*gbv)[oc] += g;
              for (int ic = 0; ic < cin; ++ic) {
                const std::size_t xoff = static_cast<std::size_t>(ic) * h * wd;
                const std::size_t woff = (static_cast<std::size_t>(oc) * cin + ic) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * stride + ky - pad;
                  if (iy < 0 || iy >= h) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= wd) continue;
                    const std::size_t xi = xoff + static_cast<std::size_t>(iy) * wd + ix;
                    if (gxv) (*gxv)[xi] += g * wn->values[woff + ky * kw + kx];
                    if (gwv) (*gwv)[woff + ky * kw + kx] += g * xn->values[xi];
                  }
                }
              }
            }
          }
        }
      });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  return conv2d(x, w, Tensor(), stride, pad);
}

// Per-row normalization over the last dimension with learned scale/shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const int d = x.shape().back();
  check(gamma.ndim() == 1 && gamma.dim(0) == d && beta.ndim() == 1 && beta.dim(0) == d,
        "layer_norm scale/shift must be [d] with d = " + std::to_string(d));
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += in[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (int j = 0; j < d; ++j) {
      const double xh = (in[j] - mu) * inv;
      xhat[r * d + j] = xh;
      out[r * d + j] = gamma.values()[j] * xh + beta.values()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op(x.shape(), std::move(out), {x, gamma, beta},
                 [xn, gn, bn, rows, d, xhat = std::move(xhat),
                  inv_std = std::move(inv_std)](const detail::Node& o) {
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* gy = o.grad.data() + r * d;
                     const double* xh = xhat.data() + r * d;
                     if (gn->requires_grad) {
                       auto& gg = detail::grad_buf(*gn);
                       for (int j = 0; j < d; ++j) gg[j] += gy[j] * xh[j];
                     }
                     if (bn->requires_grad) {
                       auto& gb = detail::grad_buf(*bn);
                       for (int j = 0; j < d; ++j) gb[j] += gy[j];
                     }
                     if (xn->requires_grad) {
                       auto& gx = detail::grad_buf(*xn);
                       double m1 = 0.0, m2 = 0.0;
                       for (int j = 0; j < d; ++j) {
                         const double gh = gy[j] * gn->values[j];
                         m1 += gh;
                         m2 += gh * xh[j];
                       }
                       m1 /= d;
                       m2 /= d;
                       for (int j = 0; j < d; ++j) {
                         const double gh = gy[j] * gn->values[j];
                         gx[r * d + j] += inv_std[r] * (gh - m1 - xh[j] * m2);
                       }
                     }
                   }
                 });
}

// Inverted dropout; identity when not training. The mask is drawn from `rng`
// in element order, so fixed seeds reproduce runs exactly.
inline Tensor dropout(const Tensor& x, double rate, Rng* rng, bool training) {
  if (!training || rate <= 0.0) return x;
  check(rate < 1.0, "dropout rate must be < 1");
  check(rng != nullptr, "dropout in training mode needs an rng");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = rng->uniform() >= rate ? keep_scale : 0.0;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * mask[i];
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, mask = std::move(mask)](const detail::Node& o) {
    auto& gx = detail::grad_buf(*xn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * mask[i];
  });
}

inline void assert_finite(const Tensor& t, const std::string& what) {
  for (double v : t.values())
    if (!std::isfinite(v)) throw NumericError(what + " contains a non-finite value");
}

// ---------------------------------------------------------------------------
// Gradient checking

// Central-difference check against the analytic gradient accumulated on a
// live parameter tensor. The loss closure must rebuild its graph per call.
inline double grad_check_param(const std::function<Tensor()>& loss_fn, Tensor param,
                               double eps = 1e-5) {
  check(eps > 0.0, "grad_check_param needs eps > 0");
  param.zero_grad();
  Tensor loss = loss_fn();
  check(loss.size() == 1, "grad_check_param needs a scalar loss");
  backward(loss);
  const std::vector<double> analytic = param.grad();
  double worst = 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param.values()[i];
    param.values()[i] = saved + eps;
    const double fp = loss_fn().item();
    param.values()[i] = saved - eps;
    const double fm = loss_fn().item();
    param.values()[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check_param: non-finite intermediate at coordinate " +
                         std::to_string(i));
    const double numeric = (fp - fm) / (2.0 * eps);
    worst = std::max(worst,
                     std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(analytic[i])));
  }
  return worst;
}

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-5) {
  check(eps > 0.0, "grad_check needs eps > 0");
  Tensor leaf = x.detached_copy(/*requires_grad=*/true);
  Tensor y = f(leaf);
  check(y.size() == 1, "grad_check needs a scalar-valued function");
  if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value");
  backward(y);
  std::vector<double> analytic = leaf.has_grad()
                                     ? leaf.grad()
                                     : std::vector<double>(leaf.size(), 0.0);

  double worst = 0.0;
  for (std::size_t i = 0; i < leaf.size(); ++i) {
    Tensor xp = x.detached_copy();
    xp.values()[i] += eps;
    const double fp = f(xp).item();
    Tensor xm = x.detached_copy();
    xm.values()[i] -= eps;
    const double fm = f(xm).item();
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite intermediate at coordinate " + std::to_string(i));
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace gazedetr
