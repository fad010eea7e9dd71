#pragma once

// Eager reverse-mode differentiation over dense double tensors.
//
// A Graph records every operation on a tape as it executes. Interior values
// can be tapped before their consumers are built; backward() then hands back
// copies of the gradients at those taps together with gradients for every
// trainable parameter leaf. Dense kernels go through Eigen maps.

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdt/errors.hpp"
#include "cdt/tensor.hpp"

namespace cdt::diff {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline MatMap as_mat(Tensor& t) {
  return MatMap(t.storage().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}
inline ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.storage().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}

class Graph;

/// Handle to one value on a graph's tape.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Identifies an interior value whose gradient survives backward().
struct TapHandle {
  std::uint64_t graph_id = 0;
  std::uint32_t node = 0;
  friend bool operator==(const TapHandle&, const TapHandle&) = default;
  friend auto operator<=>(const TapHandle&, const TapHandle&) = default;
};

/// Gradients produced by one backward pass. Tap gradients are owned copies.
class GradientMap {
 public:
  const Tensor& tap(const TapHandle& h) const {
    for (std::size_t i = 0; i < tap_handles_.size(); ++i)
      if (tap_handles_[i] == h) return tap_grads_[i];
    throw UnknownTapError("gradient map holds no entry for tap " + std::to_string(h.node));
  }

  /// Gradient for parameter slot `slot`, or nullptr when that slot was
  /// frozen or absent from the graph.
  const Tensor* param(std::size_t slot) const {
    if (slot >= params_.size() || !params_[slot]) return nullptr;
    return &*params_[slot];
  }
  std::size_t param_slots() const noexcept { return params_.size(); }
  bool has_param_grads() const {
    for (const auto& p : params_)
      if (p) return true;
    return false;
  }

  std::vector<std::optional<Tensor>>& params() { return params_; }
  const std::vector<std::optional<Tensor>>& params() const { return params_; }
  std::size_t tap_count() const noexcept { return tap_handles_.size(); }

 private:
  friend class Graph;
  std::vector<TapHandle> tap_handles_;
  std::vector<Tensor> tap_grads_;
  std::vector<std::optional<Tensor>> params_;
};

/// Tape of recorded operations. Confined to one thread; not copyable or
/// movable because Vars point back into it.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;

  Graph() : id_(next_graph_id()) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::uint64_t id() const noexcept { return id_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Free input leaf; its gradient is retrievable only through a tap.
  Var input(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, {});
  }

  /// Parameter leaf bound to `slot` of the caller's parameter list. Frozen
  /// parameters behave as constants and never receive gradients. The value
  /// is borrowed, not copied: it must outlive the graph and stay unchanged.
  Var parameter(const Tensor& value, std::size_t slot, bool trainable) {
    Var v = push(Tensor(), trainable, {});
    nodes_[v.id()].borrowed = &value;
    nodes_[v.id()].param_slot = static_cast<std::int64_t>(slot);
    return v;
  }
  Var parameter(Tensor&&, std::size_t, bool) = delete;

  /// Marks `v` for gradient retention. Call before building consumers of
  /// `v`; the tap forces gradient flow through it even when every
  /// parameter is frozen.
  TapHandle tap(Var v) {
    check_owner(v);
    nodes_[v.id()].requires_grad = true;
    nodes_[v.id()].tapped = true;
    return TapHandle{id_, v.id()};
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& in : inputs) {
      check_owner(in);
      rg = rg || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(std::uint32_t id) const { return nodes_[id].current(); }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of node `id`, allocated as zeros on first use.
  Tensor& grad(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.current().shape());
    return n.grad;
  }
  const Tensor& grad_or_empty(std::uint32_t id) const { return nodes_[id].grad; }

  GradientMap backward(Var loss, std::span<const TapHandle> taps = {}) {
    check_owner(loss);
    if (loss.value().size() != 1)
      throw PreconditionError("backward needs a scalar loss, got shape " +
                              shape_str(loss.value().shape()));
    for (const TapHandle& h : taps) {
      if (h.graph_id != id_ || h.node >= nodes_.size() || !nodes_[h.node].tapped)
        throw UnknownTapError("tap " + std::to_string(h.node) + " is not on the active graph");
      if (h.node > loss.id())
        throw UnknownTapError("tap " + std::to_string(h.node) + " is downstream of the loss");
    }
    for (Node& n : nodes_) n.grad = Tensor();

    if (nodes_[loss.id()].requires_grad) {
      grad(loss.id()).fill(1.0);
      for (std::int64_t i = loss.id(); i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.grad.empty() || !n.backward) continue;
        n.backward(*this, static_cast<std::uint32_t>(i));
      }
    }

    GradientMap out;
    for (const TapHandle& h : taps) {
      out.tap_handles_.push_back(h);
      const Node& n = nodes_[h.node];
      out.tap_grads_.push_back(n.grad.empty() ? Tensor(n.current().shape()) : n.grad);
    }
    for (Node& n : nodes_) {
      if (n.param_slot < 0 || !n.requires_grad) continue;
      auto slot = static_cast<std::size_t>(n.param_slot);
      if (out.params_.size() <= slot) out.params_.resize(slot + 1);
      Tensor g = n.grad.empty() ? Tensor(n.current().shape()) : std::move(n.grad);
      if (out.params_[slot]) {
        auto& acc = out.params_[slot]->storage();
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
      } else {
        out.params_[slot] = std::move(g);
      }
    }
    return out;
  }

  void check_owner(const Var& v) const {
    if (&v.graph() != this) throw PreconditionError("value belongs to a different graph");
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* borrowed = nullptr;  // parameter leaves alias the caller's tensor
    Tensor grad;
    BackwardFn backward;
    std::int64_t param_slot = -1;
    bool requires_grad = false;
    bool tapped = false;
    const Tensor& current() const { return borrowed ? *borrowed : value; }
  };

  static std::uint64_t next_graph_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

namespace detail {

inline void require_same_graph(const Var& a, const Var& b) {
  if (&a.graph() != &b.graph()) throw PreconditionError("operands live on different graphs");
}

inline void require_matrix(const Var& v, const char* op) {
  if (v.value().rank() != 2)
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(v.shape()));
}

inline void accumulate(Tensor& dst, const Tensor& src) {
  auto& d = dst.storage();
  const auto& s = src.storage();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a (m×k) · b (k×n).
inline Var matmul(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows())
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  Tensor out({av.rows(), bv.cols()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(ia)) as_mat(g.grad(ia)).noalias() += as_mat(go) * as_mat(g.value(ib)).transpose();
    if (g.requires_grad(ib)) as_mat(g.grad(ib)).noalias() += as_mat(g.value(ia)).transpose() * as_mat(go);
  });
}

/// a (m×k) · bᵀ where b is (n×k).
inline Var matmul_bt(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_matrix(a, "matmul_bt");
  detail::require_matrix(b, "matmul_bt");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols())
    throw DimensionError("matmul_bt inner dimensions disagree: " + shape_str(av.shape()) +
                         " x " + shape_str(bv.shape()) + "^T");
  Tensor out({av.rows(), bv.rows()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv).transpose();
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(ia)) as_mat(g.grad(ia)).noalias() += as_mat(go) * as_mat(g.value(ib));
    if (g.requires_grad(ib)) as_mat(g.grad(ib)).noalias() += as_mat(go).transpose() * as_mat(g.value(ia));
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  detail::require_same_graph(a, b);
  if (a.shape() != b.shape())
    throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  detail::accumulate(out, b.value());
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
    if (g.requires_grad(ia)) detail::accumulate(g.grad(ia), g.grad(self));
    if (g.requires_grad(ib)) detail::accumulate(g.grad(ib), g.grad(self));
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_graph(a, b);
  if (a.shape() != b.shape())
    throw DimensionError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad(ia);
      const Tensor& bv = g.value(ib);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad(ib);
      const Tensor& av = g.value(ia);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

inline Var scale(Var x, double c) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v *= c;
  const auto ix = x.id();
  return x.graph().record(std::move(out), {x}, [ix, c](Graph& g, std::uint32_t self) {
    Tensor& gx = g.grad(ix);
    const Tensor& go = g.grad(self);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += c * go[i];
  });
}

/// x (n×d) plus a length-d bias broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  detail::require_same_graph(x, bias);
  detail::require_matrix(x, "add_bias");
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (bias.value().size() != d)
    throw DimensionError("bias of shape " + shape_str(bias.shape()) + " cannot broadcast over " +
                         shape_str(x.shape()));
  Tensor out = x.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) += bias.value()[c];
  const auto ix = x.id(), ib = bias.id();
  return x.graph().record(std::move(out), {x, bias}, [ix, ib, n, d](Graph& g, std::uint32_t self) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(ix)) detail::accumulate(g.grad(ix), go);
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad(ib);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gb[c] += go(r, c);
    }
  });
}

/// tanh-approximated GELU.
inline Var gelu(Var x) {
  constexpr double k0 = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k1 = 0.044715;
  Tensor out = x.value();
  for (auto& v : out.storage()) v = 0.5 * v * (1.0 + std::tanh(k0 * (v + k1 * v * v * v)));
  const auto ix = x.id();
  return x.graph().record(std::move(out), {x}, [ix](Graph& g, std::uint32_t self) {
    const Tensor& xv = g.value(ix);
    const Tensor& go = g.grad(self);
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double u = k0 * (v + k1 * v * v * v);
      const double t = std::tanh(u);
      const double du = k0 * (1.0 + 3.0 * k1 * v * v);
      gx[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().storage()) s += v;
  const auto ix = x.id();
  return x.graph().record(Tensor::scalar(s), {x}, [ix](Graph& g, std::uint32_t self) {
    const double go = g.grad(self)[0];
    for (auto& v : g.grad(ix).storage()) v += go;
  });
}

/// Takes the value of `replacement` while routing gradients to `x`
/// unchanged. Used to feed an externally modified tensor into a graph while
/// the upstream computation still receives the gradient.
inline Var substitute(Var x, const Tensor& replacement) {
  if (replacement.shape() != x.shape())
    throw DimensionError("substitute expects shape " + shape_str(x.shape()) + ", got " +
                         shape_str(replacement.shape()));
  const auto ix = x.id();
  return x.graph().record(replacement, {x}, [ix](Graph& g, std::uint32_t self) {
    detail::accumulate(g.grad(ix), g.grad(self));
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

/// Columns [begin, begin + width) of a matrix.
inline Var slice_cols(Var x, std::size_t begin, std::size_t width) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (width == 0 || begin + width > d)
    throw DimensionError("column slice [" + std::to_string(begin) + "," +
                         std::to_string(begin + width) + ") out of " + shape_str(x.shape()));
  Tensor out({n, width});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < width; ++c) out(r, c) = x.value()(r, begin + c);
  const auto ix = x.id();
  return x.graph().record(std::move(out), {x}, [ix, begin, width, n](Graph& g, std::uint32_t self) {
    const Tensor& go = g.grad(self);
    Tensor& gx = g.grad(ix);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < width; ++c) gx(r, begin + c) += go(r, c);
  });
}

/// Rows [begin, begin + count) of a matrix.
inline Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  detail::require_matrix(x, "slice_rows");
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (count == 0 || begin + count > n)
    throw DimensionError("row slice [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") out of " + shape_str(x.shape()));
  std::vector<double> data(x.value().storage().begin() + std::ptrdiff_t(begin * d),
                           x.value().storage().begin() + std::ptrdiff_t((begin + count) * d));
  const auto ix = x.id();
  return x.graph().record(Tensor({count, d}, std::move(data)), {x},
                          [ix, begin, d](Graph& g, std::uint32_t self) {
                            const Tensor& go = g.grad(self);
                            Tensor& gx = g.grad(ix);
                            for (std::size_t k = 0; k < go.size(); ++k) gx[begin * d + k] += go[k];
                          });
}

/// Horizontal concatenation of equally tall matrices.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols needs at least one operand");
  Graph& graph = parts[0].graph();
  const std::size_t n = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    detail::require_same_graph(parts[0], p);
    detail::require_matrix(p, "concat_cols");
    if (p.value().rows() != n)
      throw DimensionError("concat_cols row mismatch: " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor out({n, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, off + c) = v(r, c);
    off += v.cols();
  }
  return graph.record(std::move(out), parts,
                         [ids, widths, n](Graph& g, std::uint32_t self) {
                           const Tensor& go = g.grad(self);
                           std::size_t o = 0;
                           for (std::size_t k = 0; k < ids.size(); ++k) {
                             if (g.requires_grad(ids[k])) {
                               Tensor& gp = g.grad(ids[k]);
                               for (std::size_t r = 0; r < n; ++r)
                                 for (std::size_t c = 0; c < widths[k]; ++c) gp(r, c) += go(r, o + c);
                             }
                             o += widths[k];
                           }
                         });
}

/// Rows of `table` selected by `ids` (embedding lookup).
inline Var gather_rows(Var table, std::span<const int> ids) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t v = table.value().rows(), d = table.value().cols();
  if (ids.empty()) throw DimensionError("gather_rows needs at least one id");
  Tensor out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v)
      throw IndexError("row id " + std::to_string(ids[r]) + " outside table of " + std::to_string(v) + " rows");
    const auto src = table.value().row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  const auto it = table.id();
  return table.graph().record(std::move(out), {table}, [it, idv, d](Graph& g, std::uint32_t self) {
    const Tensor& go = g.grad(self);
    Tensor& gt = g.grad(it);
    for (std::size_t r = 0; r < idv.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) gt(static_cast<std::size_t>(idv[r]), c) += go(r, c);
  });
}

// ---------------------------------------------------------------------------
// Normalisation and probabilities

/// Row-wise softmax. With `causal`, entries above the diagonal are excluded
/// and come out exactly zero.
inline Var masked_softmax_rows(Var scores, bool causal) {
  detail::require_matrix(scores, "masked_softmax_rows");
  const std::size_t n = scores.value().rows(), m = scores.value().cols();
  if (causal && n != m)
    throw DimensionError("causal softmax needs a square matrix, got " + shape_str(scores.shape()));
  Tensor out({n, m});
  const Tensor& s = scores.value();
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t lim = causal ? r + 1 : m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < lim; ++c) mx = std::max(mx, s(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < lim; ++c) {
      const double e = std::exp(s(r, c) - mx);
      out(r, c) = e;
      z += e;
    }
    for (std::size_t c = 0; c < lim; ++c) out(r, c) /= z;
  }
  const auto is = scores.id();
  return scores.graph().record(std::move(out), {scores}, [is, n, m, causal](Graph& g, std::uint32_t self) {
    const Tensor& a = g.value(self);
    const Tensor& go = g.grad(self);
    Tensor& gs = g.grad(is);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t lim = causal ? r + 1 : m;
      double dot = 0.0;
      for (std::size_t c = 0; c < lim; ++c) dot += a(r, c) * go(r, c);
      for (std::size_t c = 0; c < lim; ++c) gs(r, c) += a(r, c) * (go(r, c) - dot);
    }
  });
}

/// Per-row layer normalisation with learned gain and bias (length d each).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  detail::require_same_graph(x, gain);
  detail::require_same_graph(x, bias);
  detail::require_matrix(x, "layer_norm");
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (gain.value().size() != d || bias.value().size() != d)
    throw DimensionError("layer_norm gain/bias must have " + std::to_string(d) + " elements");
  const Tensor& xv = x.value();
  Tensor out({n, d});
  // xhat and 1/sigma are kept for backward.
  auto xhat = std::make_shared<Tensor>(Shape{n, d});
  auto inv = std::make_shared<std::vector<double>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xv(r, c);
    mu /= double(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xv(r, c) - mu) * (xv(r, c) - mu);
    var /= double(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xv(r, c) - mu) * is;
      (*xhat)(r, c) = h;
      out(r, c) = h * gain.value()[c] + bias.value()[c];
    }
  }
  Graph& graph = x.graph();
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return graph.record(std::move(out), {x, gain, bias}, [ix, ig, ib, n, d, xhat, inv](Graph& g, std::uint32_t self) {
    const Tensor& go = g.grad(self);
    const Tensor& gv = g.value(ig);
    if (g.requires_grad(ig) || g.requires_grad(ib)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) {
          if (g.requires_grad(ig)) g.grad(ig)[c] += go(r, c) * (*xhat)(r, c);
          if (g.requires_grad(ib)) g.grad(ib)[c] += go(r, c);
        }
    }
    if (g.requires_grad(ix)) {
      Tensor& gx = g.grad(ix);
      for (std::size_t r = 0; r < n; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double dh = go(r, c) * gv[c];
          s1 += dh;
          s2 += dh * (*xhat)(r, c);
        }
        s1 /= double(d);
        s2 /= double(d);
        for (std::size_t c = 0; c < d; ++c) {
          const double dh = go(r, c) * gv[c];
          gx(r, c) += (*inv)[r] * (dh - s1 - (*xhat)(r, c) * s2);
        }
      }
    }
  });
}

/// Mean negative log-likelihood of `targets` under row-softmax(`logits`),
/// over rows where `loss_mask` is nonzero.
inline Var cross_entropy(Var logits, std::span<const int> targets, std::span<const std::uint8_t> loss_mask) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.value().rows(), v = logits.value().cols();
  if (targets.size() != n || loss_mask.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(n) + " logit rows but " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(loss_mask.size()) + " mask entries");
  std::size_t count = 0;
  for (auto m : loss_mask) count += m ? 1 : 0;
  if (count == 0) throw PreconditionError("cross_entropy loss mask selects no positions");
  const Tensor& lv = logits.value();
  auto probs = std::make_shared<Tensor>(Shape{n, v});
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!loss_mask[r]) continue;
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw IndexError("target " + std::to_string(t) + " outside vocabulary of " + std::to_string(v));
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < v; ++c) mx = std::max(mx, lv(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      const double e = std::exp(lv(r, c) - mx);
      (*probs)(r, c) = e;
      z += e;
    }
    for (std::size_t c = 0; c < v; ++c) (*probs)(r, c) /= z;
    total += (mx + std::log(z)) - lv(r, static_cast<std::size_t>(t));
  }
  const double inv_count = 1.0 / double(count);
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<std::uint8_t> mv(loss_mask.begin(), loss_mask.end());
  const auto il = logits.id();
  return logits.graph().record(
      Tensor::scalar(total * inv_count), {logits},
      [il, probs, tv, mv, inv_count, v](Graph& g, std::uint32_t self) {
        const double go = g.grad(self)[0] * inv_count;
        Tensor& gl = g.grad(il);
        for (std::size_t r = 0; r < tv.size(); ++r) {
          if (!mv[r]) continue;
          for (std::size_t c = 0; c < v; ++c) gl(r, c) += go * (*probs)(r, c);
          gl(r, static_cast<std::size_t>(tv[r])) -= go;
        }
      });
}

}  // namespace cdt::diff
