#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ldl/error.hpp"
#include "ldl/linalg.hpp"
#include "ldl/tensor.hpp"

namespace ldl {

enum class Mode { train, eval };

/// What a parameter is used for. Optimizers and layer counting key off this.
enum class ParamRole { conv_weight, shortcut_weight, dense_weight, dense_bias, bn_gamma, bn_beta, free };

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  ParamRole role = ParamRole::free;
};

template <typename T>
struct Buffer {
  std::string name;
  Tensor<T> value;
};

/// Named trainable tensors (theta) plus non-trainable buffers such as
/// batch-norm running statistics. Insertion order is preserved and is the
/// serialization order.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { *this = other; }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this == &other) return *this;
    params_.clear();
    buffers_.clear();
    for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter<T>>(*p));
    for (const auto& b : other.buffers_) buffers_.push_back(std::make_unique<Buffer<T>>(*b));
    rebuild_index();
    return *this;
  }
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> value, ParamRole role = ParamRole::free) {
    if (param_index_.count(name) || buffer_index_.count(name)) {
      throw ConfigurationError("duplicate parameter name '" + name + "'");
    }
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Tensor<T>(value.shape());
    p->value = std::move(value);
    p->role = role;
    param_index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Tensor<T>& add_buffer(const std::string& name, Tensor<T> value) {
    if (param_index_.count(name) || buffer_index_.count(name)) {
      throw ConfigurationError("duplicate buffer name '" + name + "'");
    }
    auto b = std::make_unique<Buffer<T>>();
    b->name = name;
    b->value = std::move(value);
    buffer_index_[name] = buffers_.size();
    buffers_.push_back(std::move(b));
    return buffers_.back()->value;
  }

  bool contains(const std::string& name) const { return param_index_.count(name) > 0; }
  bool contains_buffer(const std::string& name) const { return buffer_index_.count(name) > 0; }

  Parameter<T>& at(const std::string& name) { return *params_.at(lookup(param_index_, name, "parameter")); }
  const Parameter<T>& at(const std::string& name) const {
    return *params_.at(lookup(param_index_, name, "parameter"));
  }
  Tensor<T>& buffer(const std::string& name) { return buffers_.at(lookup(buffer_index_, name, "buffer"))->value; }
  const Tensor<T>& buffer(const std::string& name) const {
    return buffers_.at(lookup(buffer_index_, name, "buffer"))->value;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }
  std::size_t buffer_count() const { return buffers_.size(); }
  Buffer<T>& buffer_at(std::size_t i) { return *buffers_[i]; }
  const Buffer<T>& buffer_at(std::size_t i) const { return *buffers_[i]; }

  /// Total number of trainable scalars.
  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T{0});
  }

 private:
  static std::size_t lookup(const std::map<std::string, std::size_t>& index, const std::string& name,
                            const char* what) {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigurationError(std::string("no ") + what + " named '" + name + "'");
    return it->second;
  }

  void rebuild_index() {
    param_index_.clear();
    buffer_index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) param_index_[params_[i]->name] = i;
    for (std::size_t i = 0; i < buffers_.size(); ++i) buffer_index_[buffers_[i]->name] = i;
  }

  // Stable addresses: graphs hold raw pointers to parameters.
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::vector<std::unique_ptr<Buffer<T>>> buffers_;
  std::map<std::string, std::size_t> param_index_;
  std::map<std::string, std::size_t> buffer_index_;
};

struct Var {
  static constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::size_t id = none;
  bool valid() const { return id != none; }
};

/// Define-by-run tape. Nodes are appended in execution order, so the tape is
/// always topologically sorted; backward walks it in reverse.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  explicit Graph(ParameterStore<T>* store = nullptr) : store_(store) {}

  ParameterStore<T>& store() {
    if (!store_) throw ConfigurationError("graph has no parameter store");
    return *store_;
  }

  Var constant(Tensor<T> value, std::string op = "constant") {
    check_finite(value, op);
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Leaf node bound to a stored parameter; repeated lookups share one node.
  Var param(const std::string& name) {
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return Var{it->second};
    Node n;
    n.op = "param:" + name;
    n.param = &store().at(name);
    n.requires_grad = true;
    Var v = push(std::move(n));
    param_nodes_[name] = v.id;
    return v;
  }

  /// Appends an op output. Inputs must already be on the tape.
  Var record(std::string op, std::vector<Var> inputs, Tensor<T> value, BackwardFn backward) {
    check_finite(value, op);
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    for (auto in : inputs) {
      if (in.id >= nodes_.size()) throw ConfigurationError("op '" + n.op + "' uses a variable from another graph");
      n.inputs.push_back(in.id);
      n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? n.param->value : n.value;
  }

  /// Gradient slot of a node, allocated on first use.
  Tensor<T>& grad(Var v) { return grad_of(v.id); }
  bool has_grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? true : !n.grad.empty();
  }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const std::string& op(Var v) const { return nodes_.at(v.id).op; }
  const std::vector<std::size_t>& inputs(Var v) const { return nodes_.at(v.id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse pass from a scalar node. Returns the number of op nodes visited.
  std::size_t backward(Var loss, T seed = T{1}) {
    if (value(loss).size() != 1) {
      throw DimensionError("backward requires a scalar loss, got " + shape_string(value(loss).shape()));
    }
    grad_of(loss.id)[0] += seed;
    std::size_t visited = 0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.param || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
      ++visited;
    }
    return visited;
  }

  /// Drops the tape; parameters and their gradients are untouched.
  void clear() {
    nodes_.clear();
    param_nodes_.clear();
  }

  // Helpers for op implementations.
  const Tensor<T>& value_at(std::size_t id) const { return value(Var{id}); }
  Tensor<T>& grad_at(std::size_t id) { return grad_of(id); }
  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t input_id(std::size_t self, std::size_t k) const { return nodes_[self].inputs[k]; }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Tensor<T>& grad_of(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.param) return n.param->grad;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  static void check_finite(const Tensor<T>& t, const std::string& op) {
    if (!t.all_finite()) throw NumericalError("non-finite value produced by op '" + op + "'");
  }

  ParameterStore<T>* store_ = nullptr;
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_nodes_;
};

namespace ad {

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_string(s));
  }
}

}  // namespace detail

/// out[N,M] = x[N,K] W[K,M] + b[M]
template <typename T>
Var dense(Graph<T>& g, Var x, Var w, Var b) {
  const auto& xs = g.value(x).shape();
  const auto& ws = g.value(w).shape();
  const auto& bs = g.value(b).shape();
  detail::require_rank(xs, 2, "dense", "input");
  detail::require_rank(ws, 2, "dense", "weight");
  if (xs[1] != ws[0]) {
    throw DimensionError("dense: inner dimensions disagree between input " + shape_string(xs) + " and weight " +
                         shape_string(ws));
  }
  if (bs.size() != 1 || bs[0] != ws[1]) {
    throw DimensionError("dense: bias " + shape_string(bs) + " does not match weight " + shape_string(ws));
  }
  const std::size_t n = xs[0], k = xs[1], m = ws[1];
  Tensor<T> out({n, m});
  linalg::gemm(g.value(x).raw(), false, g.value(w).raw(), false, out.raw(), n, m, k, false);
  const auto& bias = g.value(b);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bias[j];

  return g.record("dense", {x, w, b}, std::move(out), [n, k, m](Graph<T>& gr, std::size_t self) {
    const auto xi = gr.input_id(self, 0), wi = gr.input_id(self, 1), bi = gr.input_id(self, 2);
    const T* dout = gr.grad_at(self).raw();
    if (gr.wants_grad(xi)) linalg::gemm(dout, false, gr.value_at(wi).raw(), true, gr.grad_at(xi).raw(), n, k, m, true);
    if (gr.wants_grad(wi)) linalg::gemm(gr.value_at(xi).raw(), true, dout, false, gr.grad_at(wi).raw(), k, m, n, true);
    if (gr.wants_grad(bi)) {
      auto& db = gr.grad_at(bi);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) db[j] += dout[i * m + j];
    }
  });
}

/// Cross-correlation (no kernel flip) of x[N,C,H,W] with k[F,C,kh,kw].
template <typename T>
Var conv2d(Graph<T>& g, Var x, Var k, std::size_t stride, std::size_t pad) {
  const auto& xs = g.value(x).shape();
  const auto& ks = g.value(k).shape();
  detail::require_rank(xs, 4, "conv2d", "input");
  detail::require_rank(ks, 4, "conv2d", "kernel");
  if (xs[1] != ks[1]) {
    throw DimensionError("conv2d: input channels of " + shape_string(xs) + " do not match kernel " +
                         shape_string(ks));
  }
  if (stride < 1) throw ConfigurationError("conv2d: stride must be >= 1");
  const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const std::size_t f = ks[0], kh = ks[2], kw = ks[3];
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw ConfigurationError("conv2d: kernel " + shape_string(ks) + " exceeds padded input " + shape_string(xs) +
                             " (pad " + std::to_string(pad) + "), output would have non-positive size");
  }
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  const std::size_t hw_out = ho * wo;
  const std::size_t rows = c * kh * kw;
  const std::size_t cols_n = n * hw_out;

  // cols[(ci*kh + i)*kw + j, b*hw_out + oh*wo + ow]
  std::vector<T> cols(rows * cols_n, T{0});
  const T* xin = g.value(x).raw();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = cols.data() + ((ci * kh + i) * kw + j) * cols_n;
        for (std::size_t b = 0; b < n; ++b) {
          const T* plane = xin + (b * c + ci) * h * w;
          T* dst = row + b * hw_out;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(pad);
            if (ih < 0 || ih >= static_cast<long>(h)) continue;
            const T* src = plane + static_cast<std::size_t>(ih) * w;
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(pad);
              if (iw >= 0 && iw < static_cast<long>(w)) dst[oh * wo + ow] = src[iw];
            }
          }
        }
      }

  std::vector<T> tmp(f * cols_n);
  linalg::gemm(g.value(k).raw(), false, cols.data(), false, tmp.data(), f, cols_n, rows, false);
  Tensor<T> out({n, f, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t fi = 0; fi < f; ++fi)
      std::copy_n(tmp.data() + fi * cols_n + b * hw_out, hw_out, out.raw() + (b * f + fi) * hw_out);

  return g.record(
      "conv2d", {x, k}, std::move(out),
      [cols = std::move(cols), n, c, h, w, f, kh, kw, ho, wo, stride, pad](Graph<T>& gr, std::size_t self) {
        const std::size_t hw_out = ho * wo, rows = c * kh * kw, cols_n = n * hw_out;
        const auto xi = gr.input_id(self, 0), ki = gr.input_id(self, 1);
        const T* dout = gr.grad_at(self).raw();
        std::vector<T> dtmp(f * cols_n);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t fi = 0; fi < f; ++fi)
            std::copy_n(dout + (b * f + fi) * hw_out, hw_out, dtmp.data() + fi * cols_n + b * hw_out);
        if (gr.wants_grad(ki)) {
          linalg::gemm(dtmp.data(), false, cols.data(), true, gr.grad_at(ki).raw(), f, rows, cols_n, true);
        }
        if (gr.wants_grad(xi)) {
          std::vector<T> dcols(rows * cols_n);
          linalg::gemm(gr.value_at(ki).raw(), true, dtmp.data(), false, dcols.data(), rows, cols_n, f, false);
          T* dx = gr.grad_at(xi).raw();
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const T* row = dcols.data() + ((ci * kh + i) * kw + j) * cols_n;
                for (std::size_t b = 0; b < n; ++b) {
                  T* plane = dx + (b * c + ci) * h * w;
                  const T* src = row + b * hw_out;
                  for (std::size_t oh = 0; oh < ho; ++oh) {
                    const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(pad);
                    if (ih < 0 || ih >= static_cast<long>(h)) continue;
                    T* dst = plane + static_cast<std::size_t>(ih) * w;
                    for (std::size_t ow = 0; ow < wo; ++ow) {
                      const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(pad);
                      if (iw >= 0 && iw < static_cast<long>(w)) dst[iw] += src[oh * wo + ow];
                    }
                  }
                }
              }
        }
      });
}

struct BatchNormOptions {
  double epsilon = 1e-5;
  /// Weight kept on the old running statistic at each update.
  double momentum = 0.9;
};

/// Per-channel batch normalization of x[N,C,H,W]. In train mode the batch
/// statistics are used and the running statistics are updated in place.
template <typename T>
Var batch_norm(Graph<T>& g, Var x, Var gamma, Var beta, Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
               BatchNormOptions opt = {}) {
  const auto& xs = g.value(x).shape();
  detail::require_rank(xs, 4, "batch_norm", "input");
  const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  const Shape cshape{c};
  if (g.value(gamma).shape() != cshape || g.value(beta).shape() != cshape || running_mean.shape() != cshape ||
      running_var.shape() != cshape) {
    throw DimensionError("batch_norm: per-channel tensors must have shape " + shape_string(cshape) +
                         " for input " + shape_string(xs));
  }
  if (mode == Mode::train && n < 2) {
    throw BatchSizeError("batch_norm: train mode needs a batch of at least 2, got " + std::to_string(n));
  }
  const std::size_t m = n * hw;
  const T* xin = g.value(x).raw();
  const auto& gm = g.value(gamma);
  const auto& bt = g.value(beta);

  Tensor<T> xhat(xs);
  std::vector<T> inv_std(c);
  for (std::size_t ci = 0; ci < c; ++ci) {
    double mean, var;
    if (mode == Mode::train) {
      double sum = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xin + (b * c + ci) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      mean = sum / static_cast<double>(m);
      double sq = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xin + (b * c + ci) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(m);
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      running_mean[ci] = static_cast<T>(opt.momentum * running_mean[ci] + (1 - opt.momentum) * mean);
      running_var[ci] = static_cast<T>(opt.momentum * running_var[ci] + (1 - opt.momentum) * unbiased);
    } else {
      mean = running_mean[ci];
      var = running_var[ci];
    }
    const double is = 1.0 / std::sqrt(var + opt.epsilon);
    inv_std[ci] = static_cast<T>(is);
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = xin + (b * c + ci) * hw;
      T* q = xhat.raw() + (b * c + ci) * hw;
      for (std::size_t i = 0; i < hw; ++i) q[i] = static_cast<T>((p[i] - mean) * is);
    }
  }
  Tensor<T> out(xs);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const T* q = xhat.raw() + (b * c + ci) * hw;
      T* o = out.raw() + (b * c + ci) * hw;
      for (std::size_t i = 0; i < hw; ++i) o[i] = gm[ci] * q[i] + bt[ci];
    }

  return g.record(mode == Mode::train ? "batch_norm(train)" : "batch_norm(eval)", {x, gamma, beta}, std::move(out),
                  [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, m, mode](Graph<T>& gr,
                                                                                           std::size_t self) {
                    const auto xi = gr.input_id(self, 0), gi = gr.input_id(self, 1), bi = gr.input_id(self, 2);
                    const T* dy = gr.grad_at(self).raw();
                    const auto& gm = gr.value_at(gi);
                    for (std::size_t ci = 0; ci < c; ++ci) {
                      double sum_dy = 0, sum_dy_xhat = 0;
                      for (std::size_t b = 0; b < n; ++b) {
                        const T* d = dy + (b * c + ci) * hw;
                        const T* q = xhat.raw() + (b * c + ci) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                          sum_dy += d[i];
                          sum_dy_xhat += static_cast<double>(d[i]) * q[i];
                        }
                      }
                      if (gr.wants_grad(gi)) gr.grad_at(gi)[ci] += static_cast<T>(sum_dy_xhat);
                      if (gr.wants_grad(bi)) gr.grad_at(bi)[ci] += static_cast<T>(sum_dy);
                      if (!gr.wants_grad(xi)) continue;
                      T* dx = gr.grad_at(xi).raw();
                      const double scale = static_cast<double>(gm[ci]) * inv_std[ci];
                      const double md = static_cast<double>(m);
                      for (std::size_t b = 0; b < n; ++b) {
                        const T* d = dy + (b * c + ci) * hw;
                        const T* q = xhat.raw() + (b * c + ci) * hw;
                        T* o = dx + (b * c + ci) * hw;
                        if (mode == Mode::train) {
                          for (std::size_t i = 0; i < hw; ++i)
                            o[i] += static_cast<T>(scale * (d[i] - sum_dy / md - q[i] * sum_dy_xhat / md));
                        } else {
                          for (std::size_t i = 0; i < hw; ++i) o[i] += static_cast<T>(scale * d[i]);
                        }
                      }
                    }
                  });
}

template <typename T>
Var relu(Graph<T>& g, Var x) {
  const auto& xv = g.value(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
  return g.record("relu", {x}, std::move(out), [](Graph<T>& gr, std::size_t self) {
    const auto xi = gr.input_id(self, 0);
    const auto& xv = gr.value_at(xi);
    const auto& dy = gr.grad_at(self);
    auto& dx = gr.grad_at(xi);
    for (std::size_t i = 0; i < xv.size(); ++i)
      if (xv[i] > T{0}) dx[i] += dy[i];
  });
}

enum class PoolMode { max, avg };

/// Unpadded pooling over x[N,C,H,W]. window equal to the spatial size gives global pooling.
template <typename T>
Var pool(Graph<T>& g, Var x, PoolMode mode, std::size_t window, std::size_t stride) {
  const auto& xs = g.value(x).shape();
  detail::require_rank(xs, 4, "pool", "input");
  if (window < 1 || stride < 1) throw ConfigurationError("pool: window and stride must be >= 1");
  const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  if (window > h || window > w) {
    throw ConfigurationError("pool: window " + std::to_string(window) + " exceeds spatial dims of " +
                             shape_string(xs));
  }
  const std::size_t ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  const T* xin = g.value(x).raw();
  Tensor<T> out({n, c, ho, wo});
  std::vector<std::size_t> argmax;
  if (mode == PoolMode::max) argmax.resize(out.size());
  const T inv_area = T{1} / static_cast<T>(window * window);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = xin + p * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow) {
        const std::size_t o = (p * ho + oh) * wo + ow;
        if (mode == PoolMode::max) {
          std::size_t best = (oh * stride) * w + ow * stride;
          for (std::size_t i = 0; i < window; ++i)
            for (std::size_t j = 0; j < window; ++j) {
              const std::size_t idx = (oh * stride + i) * w + ow * stride + j;
              if (plane[idx] > plane[best]) best = idx;
            }
          argmax[o] = p * h * w + best;
          out[o] = plane[best];
        } else {
          T sum{0};
          for (std::size_t i = 0; i < window; ++i)
            for (std::size_t j = 0; j < window; ++j) sum += plane[(oh * stride + i) * w + ow * stride + j];
          out[o] = sum * inv_area;
        }
      }
  }
  return g.record(mode == PoolMode::max ? "max_pool" : "avg_pool", {x}, std::move(out),
                  [argmax = std::move(argmax), mode, n, c, h, w, ho, wo, window, stride, inv_area](
                      Graph<T>& gr, std::size_t self) {
                    const auto xi = gr.input_id(self, 0);
                    const auto& dy = gr.grad_at(self);
                    auto& dx = gr.grad_at(xi);
                    if (mode == PoolMode::max) {
                      for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
                      return;
                    }
                    for (std::size_t p = 0; p < n * c; ++p)
                      for (std::size_t oh = 0; oh < ho; ++oh)
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                          const T d = dy[(p * ho + oh) * wo + ow] * inv_area;
                          for (std::size_t i = 0; i < window; ++i)
                            for (std::size_t j = 0; j < window; ++j)
                              dx[p * h * w + (oh * stride + i) * w + ow * stride + j] += d;
                        }
                  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("add: shapes " + shape_string(av.shape()) + " and " + shape_string(bv.shape()) +
                         " differ");
  }
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return g.record("add", {a, b}, std::move(out), [](Graph<T>& gr, std::size_t self) {
    const auto& dy = gr.grad_at(self);
    for (std::size_t k = 0; k < 2; ++k) {
      const auto in = gr.input_id(self, k);
      if (!gr.wants_grad(in)) continue;
      auto& dx = gr.grad_at(in);
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var scale(Graph<T>& g, Var x, T alpha) {
  const auto& xv = g.value(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = alpha * xv[i];
  return g.record("scale", {x}, std::move(out), [alpha](Graph<T>& gr, std::size_t self) {
    const auto xi = gr.input_id(self, 0);
    const auto& dy = gr.grad_at(self);
    auto& dx = gr.grad_at(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += alpha * dy[i];
  });
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape) {
  Tensor<T> out = g.value(x).reshaped(std::move(shape));
  return g.record("reshape", {x}, std::move(out), [](Graph<T>& gr, std::size_t self) {
    const auto xi = gr.input_id(self, 0);
    const auto& dy = gr.grad_at(self);
    auto& dx = gr.grad_at(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

/// Row-wise softmax of z[N,c], max-subtracted.
template <typename T>
Var softmax(Graph<T>& g, Var z) {
  const auto& zv = g.value(z);
  detail::require_rank(zv.shape(), 2, "softmax", "input");
  const std::size_t n = zv.dim(0), c = zv.dim(1);
  if (c < 2) throw DimensionError("softmax: need at least 2 classes, got " + shape_string(zv.shape()));
  Tensor<T> out(zv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = zv.raw() + i * c;
    T* o = out.raw() + i * c;
    const T mx = *std::max_element(row, row + c);
    T sum{0};
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(row[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < c; ++j) o[j] /= sum;
  }
  return g.record("softmax", {z}, std::move(out), [n, c](Graph<T>& gr, std::size_t self) {
    const auto zi = gr.input_id(self, 0);
    const auto& f = gr.value_at(self);
    const auto& dy = gr.grad_at(self);
    auto& dz = gr.grad_at(zi);
    for (std::size_t i = 0; i < n; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < c; ++j) dot += f[i * c + j] * dy[i * c + j];
      for (std::size_t j = 0; j < c; ++j) dz[i * c + j] += f[i * c + j] * (dy[i * c + j] - dot);
    }
  });
}

/// Scalar sum over all elements.
template <typename T>
Var sum(Graph<T>& g, Var x) {
  const auto& xv = g.value(x);
  T s{0};
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
  return g.record("sum", {x}, Tensor<T>({1}, {s}), [](Graph<T>& gr, std::size_t self) {
    const auto xi = gr.input_id(self, 0);
    const T d = gr.grad_at(self)[0];
    auto& dx = gr.grad_at(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d;
  });
}

/// Scalar sum(x * weights) with constant weights of the same shape.
template <typename T>
Var dot(Graph<T>& g, Var x, Tensor<T> weights) {
  const auto& xv = g.value(x);
  if (xv.shape() != weights.shape()) {
    throw DimensionError("dot: shapes " + shape_string(xv.shape()) + " and " + shape_string(weights.shape()) +
                         " differ");
  }
  T s{0};
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * weights[i];
  return g.record("dot", {x}, Tensor<T>({1}, {s}), [weights = std::move(weights)](Graph<T>& gr, std::size_t self) {
    const auto xi = gr.input_id(self, 0);
    const T d = gr.grad_at(self)[0];
    auto& dx = gr.grad_at(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d * weights[i];
  });
}

/// Gradient stabilizer added under the square root of the unsquared Euclidean loss.
inline constexpr double kEuclideanEpsilon = 1e-12;
inline constexpr double kKlClamp = 1e-7;

/// Batch Euclidean loss between pred[N,c] and target[N,c], summed over rows.
/// Unsquared: sum_i ||d_i - f_i||_2. Squared: sum_i 0.5 ||d_i - f_i||^2.
template <typename T>
Var euclidean_loss(Graph<T>& g, Var pred, const Tensor<T>& target, bool squared) {
  const auto& fv = g.value(pred);
  if (fv.shape() != target.shape() || fv.rank() != 2) {
    throw DimensionError("euclidean_loss: prediction " + shape_string(fv.shape()) + " and target " +
                         shape_string(target.shape()) + " differ");
  }
  const std::size_t n = fv.dim(0), c = fv.dim(1);
  Tensor<T> diff(fv.shape());
  std::vector<T> norms(n);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(fv[i * c + j]) - target[i * c + j];
      diff[i * c + j] = static_cast<T>(d);
      sq += d * d;
    }
    norms[i] = static_cast<T>(std::sqrt(sq + kEuclideanEpsilon));
    total += squared ? 0.5 * sq : std::sqrt(sq);
  }
  return g.record(squared ? "euclidean_sq_loss" : "euclidean_loss", {pred}, Tensor<T>({1}, {static_cast<T>(total)}),
                  [diff = std::move(diff), norms = std::move(norms), squared, n, c](Graph<T>& gr, std::size_t self) {
                    const auto fi = gr.input_id(self, 0);
                    const T d = gr.grad_at(self)[0];
                    auto& df = gr.grad_at(fi);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < c; ++j)
                        df[i * c + j] += squared ? d * diff[i * c + j] : d * diff[i * c + j] / norms[i];
                  });
}

/// Batch KL divergence sum_i sum_j d_ij ln(d_ij / max(f_ij, clamp)), with 0 ln 0 = 0.
template <typename T>
Var kl_loss(Graph<T>& g, Var pred, const Tensor<T>& target, double clamp = kKlClamp) {
  const auto& fv = g.value(pred);
  if (fv.shape() != target.shape()) {
    throw DimensionError("kl_loss: prediction " + shape_string(fv.shape()) + " and target " +
                         shape_string(target.shape()) + " differ");
  }
  double total = 0;
  for (std::size_t i = 0; i < fv.size(); ++i) {
    const double d = target[i];
    if (d <= 0) continue;
    const double f = std::max(static_cast<double>(fv[i]), clamp);
    total += d * std::log(d / f);
  }
  return g.record("kl_loss", {pred}, Tensor<T>({1}, {static_cast<T>(total)}),
                  [target, clamp](Graph<T>& gr, std::size_t self) {
                    const auto fi = gr.input_id(self, 0);
                    const auto& fv = gr.value_at(fi);
                    const T d = gr.grad_at(self)[0];
                    auto& df = gr.grad_at(fi);
                    for (std::size_t i = 0; i < fv.size(); ++i) {
                      if (target[i] <= 0 || static_cast<double>(fv[i]) < clamp) continue;
                      df[i] -= d * target[i] / fv[i];
                    }
                  });
}

}  // namespace ad
}  // namespace ldl
