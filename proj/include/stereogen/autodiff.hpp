#pragma once

// Reverse-mode autodiff over Tensor. A Var wraps a graph node; ops build the
// DAG only while some input requires a gradient, so the same code path serves
// both training and cheap no-grad evaluation (nodes keep no parents and the
// chain is freed as it goes out of scope).
//
// Gradients accumulate into Param::grad in reverse topological order, which
// is a pure function of graph construction order; runs are bit-reproducible.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "stereogen/tensor.hpp"

namespace sgen::ad {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;  // lazily allocated, zeroed between optimizer steps
  bool trainable = true;

  void zero_grad() { grad = Tensor(); }
  void add_grad(const Tensor& g) {
    if (grad.empty()) grad = Tensor(value.shape());
    for (int i = 0; i < grad.size(); ++i) grad[i] += g[i];
  }
};

using ParamPtr = std::shared_ptr<Param>;

inline ParamPtr make_param(std::string name, Tensor value, bool trainable = true) {
  auto p = std::make_shared<Param>();
  p->name = std::move(name);
  p->value = std::move(value);
  p->trainable = trainable;
  return p;
}

// Ordered parameter registry; iteration order is registration order so that
// optimizer updates and checkpoint layout are deterministic.
class ParamSet {
 public:
  ParamPtr add(const ParamPtr& p) {
    if (index_.count(p->name)) throw std::invalid_argument("ParamSet: duplicate name " + p->name);
    index_[p->name] = params_.size();
    params_.push_back(p);
    return p;
  }
  ParamPtr add(std::string name, Tensor value, bool trainable = true) {
    return add(make_param(std::move(name), std::move(value), trainable));
  }
  const std::vector<ParamPtr>& all() const { return params_; }
  ParamPtr find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second];
  }
  std::vector<ParamPtr> trainable() const {
    std::vector<ParamPtr> out;
    for (const auto& p : params_)
      if (p->trainable) out.push_back(p);
    return out;
  }
  size_t size() const { return params_.size(); }

 private:
  std::vector<ParamPtr> params_;
  std::unordered_map<std::string, size_t> index_;
};

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  Param* param = nullptr;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

using NodePtr = std::shared_ptr<Node>;

inline void accum_grad(Node& n, const Tensor& g) {
  if (!n.requires_grad) return;
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  if (!n.grad.same_shape(g)) throw std::logic_error("accum_grad: shape mismatch");
  for (int i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value) : n_(std::make_shared<Node>()) { n_->value = std::move(value); }

  static Var constant(Tensor value) { return Var(std::move(value)); }

  static Var leaf(const ParamPtr& p) {
    Var v(p->value);  // shares storage with the parameter
    v.n_->requires_grad = p->trainable;
    v.n_->param = p.get();
    return v;
  }

  const Tensor& val() const { return n_->value; }
  const NodePtr& node() const { return n_; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  bool defined() const { return static_cast<bool>(n_); }
  float scalar() const {
    if (n_->value.size() != 1) throw std::logic_error("Var::scalar on non-scalar");
    return n_->value[0];
  }

  const std::vector<int>& shape() const { return n_->value.shape(); }

 private:
  explicit Var(NodePtr n) : n_(std::move(n)) {}
  NodePtr n_;
  friend Var make_op(Tensor, std::vector<Var>, std::function<void(Node&)>);
};

// Thread-local gradient switch; ops created while disabled never build tape.
inline bool& grad_enabled() {
  static thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Central op factory: parents and the backward closure are retained only if
// a gradient can actually flow.
inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled())
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

// A gradient-free view of the same values.
inline Var detach(const Var& a) { return Var::constant(a.val()); }

// Backpropagate from `root` (seeded with ones), accumulating into the grad
// field of every reachable trainable Param. Node grads are released as soon
// as they have been consumed.
inline void backward(const Var& root) {
  Node* r = root.node().get();
  if (!r->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(r, 0);
  visited.insert(r);
  while (!stack.empty()) {
    auto& [n, ci] = stack.back();
    if (ci < n->parents.size()) {
      Node* p = n->parents[ci++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  r->grad = Tensor(r->value.shape(), 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.empty()) continue;
    if (n->backward) n->backward(*n);
    if (n->param && n->param->trainable) n->param->add_grad(n->grad);
    n->grad = Tensor();
  }
}

// ---------------------------------------------------------------------------
// Broadcasting (numpy trailing-dimension rules)
// ---------------------------------------------------------------------------

inline std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
  size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  std::vector<int> out(r);
  for (size_t i = 0; i < r; ++i) {
    int da = i < r - ra ? 1 : a[i - (r - ra)];
    int db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) throw std::invalid_argument("broadcast: incompatible shapes");
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

// Strides of `shape` aligned to an output of rank `r`; broadcast dims get 0.
inline void aligned_strides(const std::vector<int>& shape, size_t r, std::vector<int64_t>& strides) {
  strides.assign(r, 0);
  int64_t s = 1;
  size_t rs = shape.size();
  for (size_t i = 0; i < rs; ++i) {
    size_t d = rs - 1 - i;                  // dim index in shape
    size_t od = r - 1 - i;                  // dim index in output
    strides[od] = (shape[d] == 1) ? 0 : s;  // broadcast dims contribute nothing
    s *= shape[d];
  }
}

template <class F>
inline void broadcast_loop(const std::vector<int>& out_shape, const std::vector<int>& ash,
                           const std::vector<int>& bsh, F&& f) {
  size_t r = out_shape.size();
  std::vector<int64_t> as, bs;
  aligned_strides(ash, r, as);
  aligned_strides(bsh, r, bs);
  std::vector<int> idx(r, 0);
  int64_t total = 1;
  for (int d : out_shape) total *= d;
  int64_t ai = 0, bi = 0;
  for (int64_t o = 0; o < total; ++o) {
    f(o, ai, bi);
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      ai += as[d];
      bi += bs[d];
      if (idx[d] < out_shape[d]) break;
      ai -= as[d] * out_shape[d];
      bi -= bs[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// Sum `g` down to `shape` (inverse of broadcasting).
inline Tensor reduce_to_shape(const Tensor& g, const std::vector<int>& shape) {
  if (g.shape() == shape) return g;
  Tensor out(shape);
  detail::broadcast_loop(g.shape(), shape, shape,
                         [&](int64_t o, int64_t ai, int64_t) { out[static_cast<int>(ai)] += g[static_cast<int>(o)]; });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

namespace detail {

template <class FwdF>
inline Tensor zip(const Tensor& a, const Tensor& b, FwdF&& f) {
  if (a.same_shape(b)) {
    Tensor out(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int i = 0; i < a.size(); ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  Tensor out(broadcast_shape(a.shape(), b.shape()));
  broadcast_loop(out.shape(), a.shape(), b.shape(), [&](int64_t o, int64_t ai, int64_t bi) {
    out[static_cast<int>(o)] = f(a[static_cast<int>(ai)], b[static_cast<int>(bi)]);
  });
  return out;
}

// dfa(g, a, b) and dfb(g, a, b) give per-element input grads.
template <class DA, class DB>
inline std::function<void(Node&)> zip_backward(DA&& dfa, DB&& dfb) {
  return [dfa, dfb](Node& n) {
    const Tensor& a = n.parents[0]->value;
    const Tensor& b = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor ga(n.grad.shape());
      broadcast_loop(n.grad.shape(), a.shape(), b.shape(), [&](int64_t o, int64_t ai, int64_t bi) {
        ga[static_cast<int>(o)] = dfa(n.grad[static_cast<int>(o)], a[static_cast<int>(ai)], b[static_cast<int>(bi)]);
      });
      accum_grad(*n.parents[0], reduce_to_shape(ga, a.shape()));
    }
    if (n.parents[1]->requires_grad) {
      Tensor gb(n.grad.shape());
      broadcast_loop(n.grad.shape(), a.shape(), b.shape(), [&](int64_t o, int64_t ai, int64_t bi) {
        gb[static_cast<int>(o)] = dfb(n.grad[static_cast<int>(o)], a[static_cast<int>(ai)], b[static_cast<int>(bi)]);
      });
      accum_grad(*n.parents[1], reduce_to_shape(gb, b.shape()));
    }
  };
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  return make_op(detail::zip(a.val(), b.val(), [](float x, float y) { return x + y; }), {a, b},
                 detail::zip_backward([](float g, float, float) { return g; },
                                      [](float g, float, float) { return g; }));
}

inline Var sub(const Var& a, const Var& b) {
  return make_op(detail::zip(a.val(), b.val(), [](float x, float y) { return x - y; }), {a, b},
                 detail::zip_backward([](float g, float, float) { return g; },
                                      [](float g, float, float) { return -g; }));
}

inline Var mul(const Var& a, const Var& b) {
  return make_op(detail::zip(a.val(), b.val(), [](float x, float y) { return x * y; }), {a, b},
                 detail::zip_backward([](float g, float, float y) { return g * y; },
                                      [](float g, float x, float) { return g * x; }));
}

inline Var div(const Var& a, const Var& b) {
  return make_op(detail::zip(a.val(), b.val(), [](float x, float y) { return x / y; }), {a, b},
                 detail::zip_backward([](float g, float, float y) { return g / y; },
                                      [](float g, float x, float y) { return -g * x / (y * y); }));
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

inline Var constant_scalar(float v) { return Var::constant(Tensor::scalar(v)); }
inline Var operator+(const Var& a, float s) { return add(a, constant_scalar(s)); }
inline Var operator-(const Var& a, float s) { return sub(a, constant_scalar(s)); }
inline Var operator*(const Var& a, float s) { return mul(a, constant_scalar(s)); }
inline Var operator/(const Var& a, float s) { return div(a, constant_scalar(s)); }
inline Var operator+(float s, const Var& a) { return add(constant_scalar(s), a); }
inline Var operator-(float s, const Var& a) { return sub(constant_scalar(s), a); }
inline Var operator*(float s, const Var& a) { return mul(constant_scalar(s), a); }
inline Var operator/(float s, const Var& a) { return div(constant_scalar(s), a); }

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <class FwdF, class BwdF>
inline Var unary(const Var& a, FwdF&& f, BwdF&& df) {
  Tensor out(a.shape());
  const float* pa = a.val().data();
  float* po = out.data();
  for (int i = 0; i < out.size(); ++i) po[i] = f(pa[i]);
  return make_op(std::move(out), {a}, [df](Node& n) {
    const Tensor& x = n.parents[0]->value;
    Tensor g(n.grad.shape());
    for (int i = 0; i < g.size(); ++i) g[i] = df(n.grad[i], x[i], n.value[i]);
    accum_grad(*n.parents[0], g);
  });
}

}  // namespace detail

inline Var neg(const Var& a) {
  return detail::unary(a, [](float x) { return -x; }, [](float g, float, float) { return -g; });
}
inline Var exp(const Var& a) {
  return detail::unary(a, [](float x) { return std::exp(x); }, [](float g, float, float y) { return g * y; });
}
inline Var log(const Var& a) {
  return detail::unary(a, [](float x) { return std::log(x); }, [](float g, float x, float) { return g / x; });
}
inline Var sqrt(const Var& a) {
  return detail::unary(a, [](float x) { return std::sqrt(x); },
                       [](float g, float, float y) { return 0.5f * g / y; });
}
inline Var square(const Var& a) {
  return detail::unary(a, [](float x) { return x * x; }, [](float g, float x, float) { return 2.0f * g * x; });
}
inline Var relu(const Var& a) {
  return detail::unary(a, [](float x) { return x > 0.0f ? x : 0.0f; },
                       [](float g, float x, float) { return x > 0.0f ? g : 0.0f; });
}
inline Var sigmoid(const Var& a) {
  return detail::unary(a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
                       [](float g, float, float y) { return g * y * (1.0f - y); });
}
inline Var silu(const Var& a) {
  return detail::unary(a,
                       [](float x) { return x / (1.0f + std::exp(-x)); },
                       [](float g, float x, float) {
                         float s = 1.0f / (1.0f + std::exp(-x));
                         return g * (s + x * s * (1.0f - s));
                       });
}
inline Var tanh(const Var& a) {
  return detail::unary(a, [](float x) { return std::tanh(x); },
                       [](float g, float, float y) { return g * (1.0f - y * y); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (int i = 0; i < a.val().size(); ++i) s += a.val()[i];
  return make_op(Tensor::scalar(static_cast<float>(s)), {a}, [](Node& n) {
    Tensor g(n.parents[0]->value.shape(), n.grad[0]);
    accum_grad(*n.parents[0], g);
  });
}

inline Var mean_all(const Var& a) {
  int cnt = a.val().size();
  double s = 0.0;
  for (int i = 0; i < cnt; ++i) s += a.val()[i];
  return make_op(Tensor::scalar(static_cast<float>(s / cnt)), {a}, [cnt](Node& n) {
    Tensor g(n.parents[0]->value.shape(), n.grad[0] / static_cast<float>(cnt));
    accum_grad(*n.parents[0], g);
  });
}

// Max over all elements; gradient routes to the first max position.
inline Var max_all(const Var& a) {
  const Tensor& x = a.val();
  int arg = 0;
  for (int i = 1; i < x.size(); ++i)
    if (x[i] > x[arg]) arg = i;
  return make_op(Tensor::scalar(x[arg]), {a}, [arg](Node& n) {
    Tensor g(n.parents[0]->value.shape());
    g[arg] = n.grad[0];
    accum_grad(*n.parents[0], g);
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out = a.val().reshaped(std::move(shape));
  return make_op(std::move(out), {a}, [](Node& n) {
    accum_grad(*n.parents[0], n.grad.reshaped(n.parents[0]->value.shape()));
  });
}

inline Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const auto& s0 = parts[0].shape();
  int r = static_cast<int>(s0.size());
  if (axis < 0 || axis >= r) throw std::invalid_argument("concat: bad axis");
  std::vector<int> out_shape = s0;
  int total_axis = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (static_cast<int>(s.size()) != r) throw std::invalid_argument("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && s[d] != s0[d]) throw std::invalid_argument("concat: shape mismatch");
    total_axis += s[axis];
  }
  out_shape[axis] = total_axis;

  int outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  for (int d = axis + 1; d < r; ++d) inner *= s0[d];

  Tensor out(out_shape);
  std::vector<int> axis_sizes;
  int off = 0;
  for (const auto& p : parts) {
    int na = p.shape()[axis];
    axis_sizes.push_back(na);
    const float* src = p.val().data();
    for (int o = 0; o < outer; ++o) {
      float* dst = out.data() + (static_cast<int64_t>(o) * total_axis + off) * inner;
      std::copy(src + static_cast<int64_t>(o) * na * inner, src + static_cast<int64_t>(o + 1) * na * inner, dst);
    }
    off += na;
  }
  return make_op(std::move(out), parts, [axis_sizes, outer, inner, total_axis](Node& n) {
    int off2 = 0;
    for (size_t k = 0; k < n.parents.size(); ++k) {
      int na = axis_sizes[k];
      if (n.parents[k]->requires_grad) {
        Tensor g(n.parents[k]->value.shape());
        for (int o = 0; o < outer; ++o) {
          const float* src = n.grad.data() + (static_cast<int64_t>(o) * total_axis + off2) * inner;
          std::copy(src, src + static_cast<int64_t>(na) * inner, g.data() + static_cast<int64_t>(o) * na * inner);
        }
        accum_grad(*n.parents[k], g);
      }
      off2 += na;
    }
  });
}

inline Var slice(const Var& a, int axis, int start, int len) {
  const auto& s = a.shape();
  int r = static_cast<int>(s.size());
  if (axis < 0 || axis >= r) throw std::invalid_argument("slice: bad axis");
  if (start < 0 || len <= 0 || start + len > s[axis]) throw std::invalid_argument("slice: out of range");
  int outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < r; ++d) inner *= s[d];
  std::vector<int> out_shape = s;
  out_shape[axis] = len;
  Tensor out(out_shape);
  int na = s[axis];
  for (int o = 0; o < outer; ++o) {
    const float* src = a.val().data() + (static_cast<int64_t>(o) * na + start) * inner;
    std::copy(src, src + static_cast<int64_t>(len) * inner, out.data() + static_cast<int64_t>(o) * len * inner);
  }
  return make_op(std::move(out), {a}, [axis, start, len, outer, inner, na](Node& n) {
    Tensor g(n.parents[0]->value.shape());
    for (int o = 0; o < outer; ++o) {
      const float* src = n.grad.data() + static_cast<int64_t>(o) * len * inner;
      std::copy(src, src + static_cast<int64_t>(len) * inner,
                g.data() + (static_cast<int64_t>(o) * na + start) * inner);
    }
    accum_grad(*n.parents[0], g);
  });
}

// Softmax along the last axis (used by attention).
inline Var softmax_lastdim(const Var& a) {
  const auto& s = a.shape();
  int inner = s.back();
  int outer = a.val().size() / inner;
  Tensor out(s);
  const float* px = a.val().data();
  float* po = out.data();
  for (int o = 0; o < outer; ++o) {
    const float* row = px + static_cast<int64_t>(o) * inner;
    float* orow = po + static_cast<int64_t>(o) * inner;
    float m = row[0];
    for (int i = 1; i < inner; ++i) m = std::max(m, row[i]);
    double z = 0.0;
    for (int i = 0; i < inner; ++i) {
      orow[i] = std::exp(row[i] - m);
      z += orow[i];
    }
    float inv = static_cast<float>(1.0 / z);
    for (int i = 0; i < inner; ++i) orow[i] *= inv;
  }
  Tensor saved = out;
  return make_op(std::move(out), {a}, [saved, outer, inner](Node& n) {
    Tensor g(n.parents[0]->value.shape());
    for (int o = 0; o < outer; ++o) {
      const float* y = saved.data() + static_cast<int64_t>(o) * inner;
      const float* gy = n.grad.data() + static_cast<int64_t>(o) * inner;
      float* gx = g.data() + static_cast<int64_t>(o) * inner;
      double dot = 0.0;
      for (int i = 0; i < inner; ++i) dot += static_cast<double>(gy[i]) * y[i];
      for (int i = 0; i < inner; ++i) gx[i] = y[i] * (gy[i] - static_cast<float>(dot));
    }
    accum_grad(*n.parents[0], g);
  });
}

}  // namespace sgen::ad
