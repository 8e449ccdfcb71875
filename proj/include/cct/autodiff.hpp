#pragma once

// Define-by-run reverse-mode differentiation over rank 0..2 tensors.
//
// A Tape records every operation executed on its Vars. Values are immutable
// once recorded; backward() walks the record in reverse and adds the adjoints
// into each node's persistent gradient buffer, so two backward passes without
// zero_grad() double every gradient exactly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cct/tensor.hpp"

namespace cct {

/// Raised when a forward operation produces NaN or Inf.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

template <class T>
class Tape;

/// Handle to a node recorded on a Tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const BasicTensor<T>& value() const { return tape_->value(id_); }
  const BasicTensor<T>& grad() const { return tape_->grad(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Lazily allocated adjoint buffers for one backward traversal.
template <class T>
class Adjoints {
 public:
  explicit Adjoints(const Tape<T>& tape) : tape_(tape), buffers_(tape.size()) {}

  bool wants(std::size_t id) const { return tape_.requires_grad(id); }

  BasicTensor<T>& at(std::size_t id) {
    auto& buf = buffers_[id];
    if (buf.shape() != tape_.value(id).shape() || buf.size() != tape_.value(id).size()) {
      buf = BasicTensor<T>::zeros_like(tape_.value(id));
    }
    return buf;
  }

  std::vector<BasicTensor<T>>& buffers() { return buffers_; }

 private:
  const Tape<T>& tape_;
  std::vector<BasicTensor<T>> buffers_;
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Adjoints<T>&, const BasicTensor<T>& out_adj,
                                        const BasicTensor<T>& out_value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(BasicTensor<T> value) {
    return push(std::move(value), false, nullptr);
  }

  /// Leaf that receives gradients.
  Var<T> variable(BasicTensor<T> value) {
    return push(std::move(value), true, nullptr);
  }

  /// Leaf bound to an external parameter tensor. Repeated calls with the same
  /// tensor return the same node, so fan-out accumulates into one gradient.
  Var<T> param(const BasicTensor<T>& tensor) {
    auto it = params_.find(&tensor);
    if (it != params_.end()) return Var<T>(this, it->second);
    Var<T> v = variable(tensor);
    params_.emplace(&tensor, v.id());
    return v;
  }

  /// Gradient accumulated for a parameter; zeros if it never entered the tape.
  BasicTensor<T> param_grad(const BasicTensor<T>& tensor) const {
    auto it = params_.find(&tensor);
    if (it == params_.end()) return BasicTensor<T>::zeros_like(tensor);
    const auto& g = nodes_[it->second].grad;
    return g.empty() && !tensor.empty() ? BasicTensor<T>::zeros_like(tensor) : g;
  }

  bool has_param(const BasicTensor<T>& tensor) const { return params_.count(&tensor) != 0; }

  /// Records an operation. `inputs` decide whether the result needs a gradient.
  Var<T> record(BasicTensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn,
                const char* op) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(fn), op);
  }

  Var<T> record(BasicTensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn,
                const char* op) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.valid() && &in.tape() != this) {
        throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
      }
      needs = needs || requires_grad(in.id());
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const BasicTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  const BasicTensor<T>& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Adds d(loss)/d(node) into every node's gradient buffer.
  void backward(const Var<T>& loss) {
    if (&loss.tape() != this) throw std::invalid_argument("backward: loss is on another tape");
    const auto& lv = value(loss.id());
    if (lv.size() != 1 || lv.rank() > 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_string(lv.shape()));
    }
    Adjoints<T> adj(*this);
    adj.at(loss.id()).fill(T{1});
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.requires_grad || !node.backward) continue;
      auto& buf = adj.buffers()[i];
      if (buf.empty()) continue;
      node.backward(adj, buf, node.value);
    }
    for (std::size_t i = 0; i <= loss.id(); ++i) {
      auto& buf = adj.buffers()[i];
      if (buf.empty() || !nodes_[i].requires_grad) continue;
      auto& g = nodes_[i].grad;
      if (g.empty()) {
        g = std::move(buf);
      } else {
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += buf[k];
      }
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = BasicTensor<T>();
  }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(BasicTensor<T> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), BasicTensor<T>(), requires_grad, std::move(fn)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const BasicTensor<T>*, std::size_t> params_;
};

namespace detail {

inline bool is_row_of(const Shape& row, const Shape& mat) {
  if (mat.size() != 2) return false;
  if (row.size() == 1) return row[0] == mat[1];
  if (row.size() == 2) return row[0] == 1 && row[1] == mat[1] && mat[0] != 1;
  return false;
}

enum class Broadcast { None, Row };

inline Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::None;
  if (is_row_of(b, a)) return Broadcast::Row;
  throw ShapeError(std::string(op) + ": cannot combine shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

/// One contiguous or strided run of elements along a reduction axis.
struct Line {
  std::size_t offset;
  std::size_t stride;
};

struct Lines {
  std::vector<Line> lines;
  std::size_t length = 0;
};

inline Lines lines_along(const Shape& shape, std::size_t axis, const char* op) {
  Lines out;
  if (shape.size() == 1 && axis == 0) {
    out.lines.push_back({0, 1});
    out.length = shape[0];
  } else if (shape.size() == 2 && axis == 0) {
    for (std::size_t c = 0; c < shape[1]; ++c) out.lines.push_back({c, shape[1]});
    out.length = shape[0];
  } else if (shape.size() == 2 && axis == 1) {
    for (std::size_t r = 0; r < shape[0]; ++r) out.lines.push_back({r * shape[1], 1});
    out.length = shape[1];
  } else {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " invalid for shape " + shape_string(shape));
  }
  return out;
}

template <class T>
Tape<T>& tape_of(const Var<T>& a) {
  if (!a.valid()) throw std::invalid_argument("operation on an unbound Var");
  return a.tape();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::tape_of(a);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() < 1 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_string(av.shape()) + " and " +
                     shape_string(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Shape out_shape = av.rank() == 1 ? Shape{n} : Shape{m, n};
  BasicTensor<T> out(out_shape);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(
      std::move(out), {a, b},
      [&tape, ia, ib, m, k, n](Adjoints<T>& adj, const BasicTensor<T>& g, const BasicTensor<T>&) {
        const auto& av = tape.value(ia);
        const auto& bv = tape.value(ib);
        if (adj.wants(ia)) {
          auto& ga = adj.at(ia);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T s{0};
              for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
              ga[i * k + p] += s;
            }
        }
        if (adj.wants(ib)) {
          auto& gb = adj.at(ib);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T aip = av[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
        }
      },
      "matmul");
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  auto& tape = detail::tape_of(a);
  const auto& av = a.value();
  if (av.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_string(av.shape()));
  const std::size_t r = av.rows(), c = av.cols();
  BasicTensor<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  const std::size_t ia = a.id();
  return tape.record(
      std::move(out), {a},
      [ia, r, c](Adjoints<T>& adj, const BasicTensor<T>& g, const BasicTensor<T>&) {
        auto& ga = adj.at(ia);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
      },
      "transpose");
}

// ---------------------------------------------------------------------------
// Elementwise binary ops; `b` may be a row vector broadcast over matrix `a`.

namespace detail {

template <class T, class Fwd, class Bwd>
Var<T> binary(const Var<T>& a, const Var<T>& b, const char* op, Fwd fwd, Bwd bwd) {
  auto& tape = tape_of(a);
  const auto& av = a.value();
  const auto& bv = b.value();
  const Broadcast kind = broadcast_kind(av.shape(), bv.shape(), op);
  const std::size_t cols = av.cols();
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = fwd(av[i], bv[kind == Broadcast::Row ? i % cols : i]);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(
      std::move(out), {a, b},
      [&tape, ia, ib, kind, cols, bwd](Adjoints<T>& adj, const BasicTensor<T>& g, const BasicTensor<T>&) {
        const auto& av = tape.value(ia);
        const auto& bv = tape.value(ib);
        const bool wa = adj.wants(ia), wb = adj.wants(ib);
        BasicTensor<T>* ga = wa ? &adj.at(ia) : nullptr;
        BasicTensor<T>* gb = wb ? &adj.at(ib) : nullptr;
        for (std::size_t i = 0; i < av.size(); ++i) {
          const std::size_t j = kind == Broadcast::Row ? i % cols : i;
          const auto [da, db] = bwd(av[i], bv[j]);
          if (wa) (*ga)[i] += g[i] * da;
          if (wb) (*gb)[j] += g[i] * db;
        }
      },
      op);
}

template <class T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& a, const char* op, Fwd fwd, Deriv deriv) {
  auto& tape = tape_of(a);
  const auto& av = a.value();
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id();
  return tape.record(
      std::move(out), {a},
      [&tape, ia, deriv](Adjoints<T>& adj, const BasicTensor<T>& g, const BasicTensor<T>& y) {
        const auto& av = tape.value(ia);
        auto& ga = adj.at(ia);
        for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g[i] * deriv(av[i], y[i]);
      },
      op);
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, "add", [](T x, T y) { return x + y; },
                        [](T, T) { return std::pair<T, T>{T{1}, T{1}}; });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, "sub", [](T x, T y) { return x - y; },
                        [](T, T) { return std::pair<T, T>{T{1}, T{-1}}; });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary(a, b, "mul", [](T x, T y) { return x * y; },
                        [](T x, T y) { return std::pair<T, T>{y, x}; });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  return detail::unary(a, "scale", [factor](T x) { return factor * x; },
                       [factor](T, T) { return factor; });
}

/// a + c elementwise for a constant c.
template <class T>
Var<T> shift(const Var<T>& a, T c) {
  return detail::unary(a, "shift", [c](T x) { return x + c; }, [](T, T) { return T{1}; });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a, "sigmoid",
      [](T x) {
        if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
        const T e = std::exp(x);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(a, "tanh", [](T x) { return std::tanh(x); },
                       [](T, T y) { return T{1} - y * y; });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return detail::unary(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& a) {
  for (const T& x : a.value().data()) {
    if (!(x > T{0})) throw std::domain_error("log: argument must be positive");
  }
  return detail::unary(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

/// max(a, floor); the gradient is passed only where a > floor.
template <class T>
Var<T> clamp_min(const Var<T>& a, T floor) {
  return detail::unary(a, "clamp_min", [floor](T x) { return x > floor ? x : floor; },
                       [floor](T x, T) { return x > floor ? T{1} : T{0}; });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return detail::unary(a, "square", [](T x) { return x * x; }, [](T x, T) { return T{2} * x; });
}

/// Stops gradient flow; the forward value is copied unchanged.
template <class T>
Var<T> detach(const Var<T>& a) {
  return detail::tape_of(a).constant(a.value());
}

// ---------------------------------------------------------------------------
// Axis-wise normalizations

template <class T>
Var<T> softmax_axis(const Var<T>& x, std::size_t axis) {
  auto& tape = detail::tape_of(x);
  const auto& xv = x.value();
  const auto lines = detail::lines_along(xv.shape(), axis, "softmax_axis");
  BasicTensor<T> out(xv.shape());
  for (const auto& ln : lines.lines) {
    T hi = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < lines.length; ++i) hi = std::max(hi, xv[ln.offset + i * ln.stride]);
    T total{0};
    for (std::size_t i = 0; i < lines.length; ++i) {
      const std::size_t k = ln.offset + i * ln.stride;
      out[k] = std::exp(xv[k] - hi);
      total += out[k];
    }
    for (std::size_t i = 0; i < lines.length; ++i) out[ln.offset + i * ln.stride] /= total;
  }
  const std::size_t ix = x.id();
  return tape.record(
      std::move(out), {x},
      [ix, lines](Adjoints<T>& adj, const BasicTensor<T>& g, const BasicTensor<T>& y) {
        auto& gx = adj.at(ix);
        for (const auto& ln : lines.lines) {
          T dot{0};
          for (std::size_t i = 0; i < lines.length; ++i) {
            const std::size_t k = ln.offset + i * ln.stride;
            dot += g[k] * y[k];
          }
          for (std::size_t i = 0; i < lines.length; ++i) {
            const std::size_t k = ln.offset + i * ln.stride;
            gx[k] += y[k] * (g[k] - dot);
          }
        }
      },
      "softmax_axis");
}

/// Divides every element by the sum of its line along `axis`.
template <class T>
Var<T> normalize_axis(const Var<T>& x, std::size_t axis) {
  auto& tape = detail::tape_of(x);
  const auto& xv = x.value();
  const auto lines = detail::lines_along(xv.shape(), axis, "normalize_axis");
  BasicTensor<T> out(xv.shape());
  std::vector<T> sums;
  sums.reserve(lines.lines.size());
  for (const auto& ln : lines.lines) {
    T total{0};
    for (std::size_t i = 0; i < lines.length; ++i) total += xv[ln.offset + i * ln.stride];
    if (total == T{0}) throw std::domain_error("normalize_axis: line sums to zero");
    for (std::size_t i = 0; i < lines.length; ++i) {
      const std::size_t k = ln.offset + i * ln.stride;
      out[k] = xv[k] / total;
    }
    sums.push_back(total);
  }
  const std::size_t ix = x.id();
  return tape.record(
      std::move(out), {x},
      [ix, lines, sums](Adjoints<T>& adj, const BasicTensor<T>& g, const BasicTensor<T>& y) {
        auto& gx = adj.at(ix);
        for (std::size_t l = 0; l < lines.lines.size(); ++l) {
          const auto& ln = lines.lines[l];
          T dot{0};
          for (std::size_t i = 0; i < lines.length; ++i) {
            const std::size_t k = ln.offset + i * ln.stride;
            dot += g[k] * y[k];
          }
          for (std::size_t i = 0; i < lines.length; ++i) {
            const std::size_t k = ln.offset + i * ln.stride;
            gx[k] += (g[k] - dot) / sums[l];
          }
        }
      },
      "normalize_axis");
}

/// Per-row normalization with population variance, then gain and bias.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  auto& tape = detail::tape_of(x);
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), d = xv.cols();
  if (xv.rank() == 0 || d == 0) throw ShapeError("layer_norm: empty feature axis");
  if (gain.value().size() != d || bias.value().size() != d || gain.value().rank() > 1 ||
      bias.value().rank() > 1) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " entries, got " +
                     shape_string(gain.shape()) + " and " + shape_string(bias.shape()));
  }
  if (eps < T{0}) throw std::invalid_argument("layer_norm: eps must be non-negative");
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  BasicTensor<T> xhat(xv.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += xv[r * d + j];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T c = xv[r * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) xhat[r * d + j] = (xv[r * d + j] - mean) * inv_std[r];
  }
  BasicTensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.record(
      std::move(out), {x, gain, bias},
      [&tape, ix, ig, ib, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Adjoints<T>& adj, const BasicTensor<T>& g, const BasicTensor<T>&) {
        const auto& gv = tape.value(ig);
        if (adj.wants(ig)) {
          auto& gg = adj.at(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (adj.wants(ib)) {
          auto& gb = adj.at(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (adj.wants(ix)) {
          auto& gx = adj.at(ix);
          const T inv_d = T{1} / static_cast<T>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh{0}, mean_dh_xh{0};
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[r * d + j] * gv[j];
              mean_dh += dh;
              mean_dh_xh += dh * xhat[r * d + j];
            }
            mean_dh *= inv_d;
            mean_dh_xh *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[r * d + j] * gv[j];
              gx[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_xh);
            }
          }
        }
      },
      "layer_norm");
}

// ---------------------------------------------------------------------------
// Reductions

/// Arithmetic mean along `axis`; the axis is removed from the shape.
template <class T>
Var<T> reduce_mean_axis(const Var<T>& x, std::size_t axis) {
  auto& tape = detail::tape_of(x);
  const auto& xv = x.value();
  const auto lines = detail::lines_along(xv.shape(), axis, "reduce_mean_axis");
  if (lines.length == 0) throw ShapeError("reduce_mean_axis: zero-length axis");
  Shape out_shape;
  if (xv.rank() == 2) out_shape = Shape{xv.shape()[1 - axis]};
  BasicTensor<T> out(out_shape);
  const T inv = T{1} / static_cast<T>(lines.length);
  for (std::size_t l = 0; l < lines.lines.size(); ++l) {
    T total{0};
    for (std::size_t i = 0; i < lines.length; ++i)
      total += xv[lines.lines[l].offset + i * lines.lines[l].stride];
    out[l] = total * inv;
  }
  const std::size_t ix = x.id();
  return tape.record(
      std::move(out), {x},
      [ix, lines, inv](Adjoints<T>& adj, const BasicTensor<T>& g, const BasicTensor<T>&) {
        auto& gx = adj.at(ix);
        for (std::size_t l = 0; l < lines.lines.size(); ++l)
          for (std::size_t i = 0; i < lines.length; ++i)
            gx[lines.lines[l].offset + i * lines.lines[l].stride] += g[l] * inv;
      },
      "reduce_mean_axis");
}

/// Sum of all elements as a scalar.
template <class T>
Var<T> sum(const Var<T>& x) {
  auto& tape = detail::tape_of(x);
  T total{0};
  for (const T& v : x.value().data()) total += v;
  const std::size_t ix = x.id();
  return tape.record(
      BasicTensor<T>::scalar(total), {x},
      [ix](Adjoints<T>& adj, const BasicTensor<T>& g, const BasicTensor<T>&) {
        auto& gx = adj.at(ix);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
      },
      "sum");
}

/// Mean of all elements as a scalar.
template <class T>
Var<T> mean(const Var<T>& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T{1} / static_cast<T>(n));
}

/// log(sum(exp(x))) over all elements, evaluated with max-subtraction.
template <class T>
Var<T> logsumexp(const Var<T>& x) {
  auto& tape = detail::tape_of(x);
  const auto& xv = x.value();
  if (xv.empty()) throw ShapeError("logsumexp: empty tensor");
  const T hi = *std::max_element(xv.data().begin(), xv.data().end());
  T total{0};
  for (const T& v : xv.data()) total += std::exp(v - hi);
  const T lse = hi + std::log(total);
  const std::size_t ix = x.id();
  return tape.record(
      BasicTensor<T>::scalar(lse), {x},
      [&tape, ix](Adjoints<T>& adj, const BasicTensor<T>& g, const BasicTensor<T>& y) {
        const auto& xv = tape.value(ix);
        auto& gx = adj.at(ix);
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[0] * std::exp(xv[i] - y[0]);
      },
      "logsumexp");
}

/// Element at flat index `index` as a scalar.
template <class T>
Var<T> select(const Var<T>& x, std::size_t index) {
  auto& tape = detail::tape_of(x);
  if (index >= x.value().size()) {
    throw std::out_of_range("select: index " + std::to_string(index) + " outside " +
                            shape_string(x.shape()));
  }
  const std::size_t ix = x.id();
  return tape.record(
      BasicTensor<T>::scalar(x.value()[index]), {x},
      [ix, index](Adjoints<T>& adj, const BasicTensor<T>& g, const BasicTensor<T>&) {
        adj.at(ix)[index] += g[0];
      },
      "select");
}

// ---------------------------------------------------------------------------
// Column blocks (multi-head splitting)

template <class T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t count) {
  auto& tape = detail::tape_of(x);
  const auto& xv = x.value();
  if (xv.rank() != 2 || begin + count > xv.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + shape_string(xv.shape()));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  BasicTensor<T> out(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < count; ++j) out[r * count + j] = xv[r * cols + begin + j];
  const std::size_t ix = x.id();
  return tape.record(
      std::move(out), {x},
      [ix, rows, cols, begin, count](Adjoints<T>& adj, const BasicTensor<T>& g,
                                     const BasicTensor<T>&) {
        auto& gx = adj.at(ix);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < count; ++j) gx[r * cols + begin + j] += g[r * count + j];
      },
      "slice_cols");
}

template <class T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  auto& tape = detail::tape_of(parts.front());
  const std::size_t rows = parts.front().value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.value().rows() != rows) {
      throw ShapeError("concat_cols: row counts differ (" + shape_string(p.shape()) + ")");
    }
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  BasicTensor<T> out(Shape{rows, total});
  std::size_t at = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < widths[k]; ++j) out[r * total + at + j] = pv[r * widths[k] + j];
    at += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return tape.record(
      std::move(out), parts,
      [ids, widths, rows, total](Adjoints<T>& adj, const BasicTensor<T>& g,
                                 const BasicTensor<T>&) {
        std::size_t at = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (adj.wants(ids[k])) {
            auto& gp = adj.at(ids[k]);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < widths[k]; ++j)
                gp[r * widths[k] + j] += g[r * total + at + j];
          }
          at += widths[k];
        }
      },
      "concat_cols");
}

}  // namespace cct
