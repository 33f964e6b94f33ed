#pragma once

// Dense row-major tensors templated on scalar type, plus reverse-mode
// autodiff over a dynamically recorded tape. Eigen backs the matrix
// products; everything else is plain loops over contiguous storage.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "moa/errors.hpp"

namespace moa {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <class S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class S>
class Tape;

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), S(0)); }

  static Tensor full(Shape shape, S value) { return Tensor(std::move(shape), value); }

  static Tensor from(Shape shape, std::vector<S> values) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    if (shape_numel(t.node_->shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor init: shape " + shape_str(t.node_->shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    t.node_->data = std::make_shared<std::vector<S>>(std::move(values));
    return t;
  }

  static Tensor scalar(S value) { return from({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t size(int64_t axis) const { return node_->shape[static_cast<size_t>(axis)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->data->size()); }

  std::span<const S> values() const { return {node_->data->data(), node_->data->size()}; }
  // In-place mutation is reserved for parameter updates and data staging;
  // tensors produced by recorded ops are treated as immutable.
  std::span<S> mutable_values() { return {node_->data->data(), node_->data->size()}; }

  S item() const {
    if (numel() != 1) throw ContractError("item(): tensor " + shape_str(shape()) + " is not scalar");
    return (*node_->data)[0];
  }
  S at(std::initializer_list<int64_t> idx) const {
    int64_t flat = 0;
    size_t a = 0;
    for (int64_t i : idx) flat = flat * node_->shape[a] + i, ++a;
    return (*node_->data)[static_cast<size_t>(flat)];
  }

  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    node_->track = on;
    return *this;
  }
  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const S> grad() const {
    if (node_->grad.empty())
      throw ContractError("grad(): no gradient populated; run backward first");
    return {node_->grad.data(), node_->grad.size()};
  }
  void clear_grad() { node_->grad.clear(); }

 private:
  struct Node {
    Shape shape;
    std::shared_ptr<std::vector<S>> data;  // shared so reshape is zero-copy
    std::vector<S> grad;                   // allocated lazily by backward
    bool requires_grad = false;
    bool track = false;  // participates in the active tape
  };

  Tensor(Shape shape, S fill) {
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data =
        std::make_shared<std::vector<S>>(static_cast<size_t>(shape_numel(node_->shape)), fill);
  }

  std::shared_ptr<Node> node_;

  friend class Tape<S>;
  template <class T>
  friend struct OpBuilder;
};

// Reverse-mode tape. Constructing a Tape makes it the active recorder for the
// current thread; ops whose inputs are tracked append a backward rule. A tape
// is single-use: backward() consumes it, and further recording or a second
// backward() is an error.
template <class S>
class Tape {
 public:
  Tape() : parent_(active_) { active_ = this; }
  ~Tape() { active_ = parent_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  bool consumed() const { return consumed_; }
  size_t size() const { return rules_.size(); }

  void record(std::function<void()> backward_rule) {
    if (consumed_) throw ContractError("tape: recording after backward");
    rules_.push_back(std::move(backward_rule));
  }

  void backward(const Tensor<S>& loss) {
    if (consumed_) throw ContractError("tape: backward called twice on the same graph");
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    consumed_ = true;
    loss.node_->grad.assign(1, S(1));
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
  }

 private:
  static thread_local Tape* active_;
  Tape* parent_ = nullptr;
  std::vector<std::function<void()>> rules_;
  bool consumed_ = false;
};

template <class S>
thread_local Tape<S>* Tape<S>::active_ = nullptr;

namespace detail {

template <class S>
inline void ensure_grad(std::vector<S>& g, size_t n) {
  if (g.empty()) g.assign(n, S(0));
}

template <class S>
inline void debug_check_finite(const Tensor<S>& t, const char* op) {
#ifndef NDEBUG
  for (S v : t.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericsError(std::string("non-finite value out of ") + op);
#endif
  (void)t;
  (void)op;
}

}  // namespace detail

// Shared machinery for defining a differentiable op: computes tracking, and
// records the backward closure only when a tape is live and an input tracks.
template <class S>
struct OpBuilder {
  using Node = typename Tensor<S>::Node;
  using NodePtr = std::shared_ptr<Node>;

  static NodePtr node(const Tensor<S>& t) { return t.node_; }

  static Tensor<S> make(Shape shape, std::vector<S> data) {
    return Tensor<S>::from(std::move(shape), std::move(data));
  }

  static Tensor<S> alias(const Tensor<S>& src, Shape shape) {
    Tensor<S> t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = src.node_->data;
    return t;
  }

  static bool tracked(const Tensor<S>& t) { return t.node_->track; }

  template <class... In>
  static bool wants_grad(const In&... inputs) {
    return Tape<S>::active() != nullptr && (... || inputs.node_->track);
  }

  static void mark(Tensor<S>& out) { out.node_->track = true; }

  static std::vector<S>& grad_of(const std::shared_ptr<Node>& n) {
    detail::ensure_grad(n->grad, n->data->size());
    return n->grad;
  }
  static const std::vector<S>& out_grad(const std::shared_ptr<Node>& n) {
    detail::ensure_grad(n->grad, n->data->size());  // zero if nothing flowed
    return n->grad;
  }
};

// ---------------------------------------------------------------------------
// matmul

namespace detail {

// Leading (batch) dims of a and b must be equal, or one side may have none.
// Returns {batch, m, k, n, a_batched, b_batched, batch_shape}.
struct MatmulDims {
  int64_t batch, m, k, n;
  bool a_batched, b_batched;
  Shape out_shape;
};

inline MatmulDims matmul_dims(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2)
    throw ShapeError("matmul: need >=2 dims, got " + shape_str(a) + " and " + shape_str(b));
  MatmulDims d;
  d.m = a[a.size() - 2];
  d.k = a[a.size() - 1];
  int64_t kb = b[b.size() - 2];
  d.n = b[b.size() - 1];
  if (d.k != kb)
    throw ShapeError("matmul: inner dims differ, " + shape_str(a) + " x " + shape_str(b));
  Shape alead(a.begin(), a.end() - 2), blead(b.begin(), b.end() - 2);
  int64_t abatch = shape_numel(alead), bbatch = shape_numel(blead);
  if (!alead.empty() && !blead.empty() && alead != blead)
    throw ShapeError("matmul: batch dims differ, " + shape_str(a) + " x " + shape_str(b));
  d.a_batched = !alead.empty();
  d.b_batched = !blead.empty();
  d.batch = std::max(abatch, bbatch);
  d.out_shape = d.a_batched ? alead : blead;
  d.out_shape.push_back(d.m);
  d.out_shape.push_back(d.n);
  return d;
}

}  // namespace detail

// Batched matrix product. transpose_b multiplies by the transpose of b's
// trailing matrix (b shaped [..., n, k]), which avoids materializing K^T in
// attention. Gradients: dA = dC*B^T, dB = A^T*dC (transposed variants follow).
template <class S>
Tensor<S> matmul_impl(const Tensor<S>& a, const Tensor<S>& b, bool transpose_b) {
  using OB = OpBuilder<S>;
  Shape bshape = b.shape();
  if (transpose_b && bshape.size() >= 2) std::swap(bshape[bshape.size() - 1], bshape[bshape.size() - 2]);
  auto d = detail::matmul_dims(a.shape(), bshape);
  std::vector<S> out(static_cast<size_t>(d.batch * d.m * d.n));
  const S* pa = a.values().data();
  const S* pb = b.values().data();
  for (int64_t g = 0; g < d.batch; ++g) {
    ConstMatMap<S> A(pa + (d.a_batched ? g * d.m * d.k : 0), d.m, d.k);
    MatMap<S> C(out.data() + g * d.m * d.n, d.m, d.n);
    if (transpose_b) {
      ConstMatMap<S> B(pb + (d.b_batched ? g * d.n * d.k : 0), d.n, d.k);
      C.noalias() = A * B.transpose();
    } else {
      ConstMatMap<S> B(pb + (d.b_batched ? g * d.k * d.n : 0), d.k, d.n);
      C.noalias() = A * B;
    }
  }
  Tensor<S> c = OB::make(d.out_shape, std::move(out));
  detail::debug_check_finite(c, "matmul");
  if (OB::wants_grad(a, b)) {
    OB::mark(c);
    auto an = OB::node(a), bn = OB::node(b), cn = OB::node(c);
    bool ga = OB::tracked(a), gb = OB::tracked(b);
    Tape<S>::active()->record([an, bn, cn, d, transpose_b, ga, gb]() {
      const auto& gc = OB::out_grad(cn);
      for (int64_t g = 0; g < d.batch; ++g) {
        ConstMatMap<S> dC(gc.data() + g * d.m * d.n, d.m, d.n);
        const S* pa = an->data->data() + (d.a_batched ? g * d.m * d.k : 0);
        const S* pb = bn->data->data() + (d.b_batched ? g * (d.k * d.n) : 0);
        if (ga) {
          auto& gav = OB::grad_of(an);
          MatMap<S> dA(gav.data() + (d.a_batched ? g * d.m * d.k : 0), d.m, d.k);
          if (transpose_b) {
            ConstMatMap<S> B(pb, d.n, d.k);
            dA.noalias() += dC * B;
          } else {
            ConstMatMap<S> B(pb, d.k, d.n);
            dA.noalias() += dC * B.transpose();
          }
        }
        if (gb) {
          auto& gbv = OB::grad_of(bn);
          ConstMatMap<S> A(pa, d.m, d.k);
          if (transpose_b) {
            MatMap<S> dB(gbv.data() + (d.b_batched ? g * d.n * d.k : 0), d.n, d.k);
            dB.noalias() += dC.transpose() * A;
          } else {
            MatMap<S> dB(gbv.data() + (d.b_batched ? g * d.k * d.n : 0), d.k, d.n);
            dB.noalias() += A.transpose() * dC;
          }
        }
      }
    });
  }
  return c;
}

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  return matmul_impl(a, b, false);
}

// a x b^T over the trailing two dims.
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  return matmul_impl(a, b, true);
}

// ---------------------------------------------------------------------------
// elementwise / shape family

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  using OB = OpBuilder<S>;
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.values().begin(), a.values().end());
  const S* pb = b.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  Tensor<S> c = OB::make(a.shape(), std::move(out));
  if (OB::wants_grad(a, b)) {
    OB::mark(c);
    auto an = OB::node(a), bn = OB::node(b), cn = OB::node(c);
    bool ga = OB::tracked(a), gb = OB::tracked(b);
    Tape<S>::active()->record([an, bn, cn, ga, gb]() {
      const auto& gc = OB::out_grad(cn);
      if (ga) {
        auto& g = OB::grad_of(an);
        for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i];
      }
      if (gb) {
        auto& g = OB::grad_of(bn);
        for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i];
      }
    });
  }
  return c;
}

// Adds b to a with trailing-dimension alignment: b's shape must equal the
// trailing dims of a's shape.
template <class S>
Tensor<S> broadcast_add(const Tensor<S>& a, const Tensor<S>& b) {
  using OB = OpBuilder<S>;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() ||
      !std::equal(bs.rbegin(), bs.rend(), as.rbegin()))
    throw ShapeError("broadcast_add: " + shape_str(bs) + " does not align with trailing dims of " +
                     shape_str(as));
  int64_t bn_elems = b.numel();
  int64_t reps = a.numel() / bn_elems;
  std::vector<S> out(a.values().begin(), a.values().end());
  const S* pb = b.values().data();
  for (int64_t r = 0; r < reps; ++r) {
    S* po = out.data() + r * bn_elems;
    for (int64_t i = 0; i < bn_elems; ++i) po[i] += pb[i];
  }
  Tensor<S> c = OB::make(as, std::move(out));
  if (OB::wants_grad(a, b)) {
    OB::mark(c);
    auto an = OB::node(a), bn = OB::node(b), cn = OB::node(c);
    bool ga = OB::tracked(a), gb = OB::tracked(b);
    Tape<S>::active()->record([an, bn, cn, ga, gb, reps, bn_elems]() {
      const auto& gc = OB::out_grad(cn);
      if (ga) {
        auto& g = OB::grad_of(an);
        for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i];
      }
      if (gb) {
        auto& g = OB::grad_of(bn);
        for (int64_t r = 0; r < reps; ++r)
          for (int64_t i = 0; i < bn_elems; ++i) g[static_cast<size_t>(i)] += gc[r * bn_elems + i];
      }
    });
  }
  return c;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  using OB = OpBuilder<S>;
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.numel());
  const S* pa = a.values().data();
  const S* pb = b.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  Tensor<S> c = OB::make(a.shape(), std::move(out));
  if (OB::wants_grad(a, b)) {
    OB::mark(c);
    auto an = OB::node(a), bn = OB::node(b), cn = OB::node(c);
    bool ga = OB::tracked(a), gb = OB::tracked(b);
    Tape<S>::active()->record([an, bn, cn, ga, gb]() {
      const auto& gc = OB::out_grad(cn);
      if (ga) {
        auto& g = OB::grad_of(an);
        const S* pb = bn->data->data();
        for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i] * pb[i];
      }
      if (gb) {
        auto& g = OB::grad_of(bn);
        const S* pa = an->data->data();
        for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i] * pa[i];
      }
    });
  }
  return c;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  using OB = OpBuilder<S>;
  std::vector<S> out(a.values().begin(), a.values().end());
  for (S& v : out) v *= factor;
  Tensor<S> c = OB::make(a.shape(), std::move(out));
  if (OB::wants_grad(a)) {
    OB::mark(c);
    auto an = OB::node(a), cn = OB::node(c);
    Tape<S>::active()->record([an, cn, factor]() {
      const auto& gc = OB::out_grad(cn);
      auto& g = OB::grad_of(an);
      for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i] * factor;
    });
  }
  return c;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

// Zero-copy view with a new shape; element count must be preserved.
template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  using OB = OpBuilder<S>;
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " has " + std::to_string(a.numel()) +
                     " elements, target " + shape_str(shape) + " wants " +
                     std::to_string(shape_numel(shape)));
  Tensor<S> c = OB::alias(a, std::move(shape));
  if (OB::wants_grad(a)) {
    OB::mark(c);
    auto an = OB::node(a), cn = OB::node(c);
    Tape<S>::active()->record([an, cn]() {
      const auto& gc = OB::out_grad(cn);
      auto& g = OB::grad_of(an);
      for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i];
    });
  }
  return c;
}

namespace detail {

inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

}  // namespace detail

// Swaps two axes (materialized copy; storage stays row-major).
template <class S>
Tensor<S> transpose(const Tensor<S>& a, int64_t axis_a, int64_t axis_b) {
  using OB = OpBuilder<S>;
  int64_t nd = a.ndim();
  if (axis_a < 0) axis_a += nd;
  if (axis_b < 0) axis_b += nd;
  if (axis_a < 0 || axis_a >= nd || axis_b < 0 || axis_b >= nd)
    throw ShapeError("transpose: axis out of range for " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  std::swap(out_shape[axis_a], out_shape[axis_b]);
  auto in_st = detail::strides_of(a.shape());
  auto out_st = detail::strides_of(out_shape);
  std::swap(in_st[axis_a], in_st[axis_b]);  // permuted view of input
  std::vector<S> out(a.numel());
  const S* pa = a.values().data();
  // walk the output in order, reading the input through permuted strides
  std::vector<int64_t> idx(out_shape.size(), 0);
  for (int64_t o = 0; o < a.numel(); ++o) {
    int64_t src = 0;
    for (size_t d = 0; d < idx.size(); ++d) src += idx[d] * in_st[d];
    out[static_cast<size_t>(o)] = pa[src];
    for (int64_t d = static_cast<int64_t>(idx.size()) - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  Tensor<S> c = OB::make(out_shape, std::move(out));
  if (OB::wants_grad(a)) {
    OB::mark(c);
    auto an = OB::node(a), cn = OB::node(c);
    Shape ash = a.shape();
    Tape<S>::active()->record([an, cn, ash, out_shape, axis_a, axis_b]() {
      const auto& gc = OB::out_grad(cn);
      auto& g = OB::grad_of(an);
      auto in_st = detail::strides_of(ash);
      std::swap(in_st[axis_a], in_st[axis_b]);
      std::vector<int64_t> idx(out_shape.size(), 0);
      for (size_t o = 0; o < gc.size(); ++o) {
        int64_t src = 0;
        for (size_t d = 0; d < idx.size(); ++d) src += idx[d] * in_st[d];
        g[static_cast<size_t>(src)] += gc[o];
        for (int64_t d = static_cast<int64_t>(idx.size()) - 1; d >= 0; --d) {
          if (++idx[d] < out_shape[d]) break;
          idx[d] = 0;
        }
      }
    });
  }
  return c;
}

template <class S>
Tensor<S> concat_lastdim(const std::vector<Tensor<S>>& parts) {
  using OB = OpBuilder<S>;
  if (parts.empty()) throw ContractError("concat_lastdim: no inputs");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  int64_t total_last = 0;
  for (const auto& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead)
      throw ShapeError("concat_lastdim: leading dims differ, " + shape_str(parts[0].shape()) +
                       " vs " + shape_str(p.shape()));
    total_last += p.shape().back();
  }
  int64_t rows = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total_last);
  std::vector<S> out(static_cast<size_t>(rows * total_last));
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t w = p.shape().back();
    const S* pp = p.values().data();
    for (int64_t r = 0; r < rows; ++r)
      std::copy(pp + r * w, pp + (r + 1) * w, out.data() + r * total_last + off);
    off += w;
  }
  Tensor<S> c = OB::make(out_shape, std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || OB::tracked(p);
  if (Tape<S>::active() && any) {
    OB::mark(c);
    std::vector<typename OB::NodePtr> ins;
    std::vector<int64_t> widths;
    std::vector<bool> track;
    for (const auto& p : parts) {
      ins.push_back(OB::node(p));
      widths.push_back(p.shape().back());
      track.push_back(OB::tracked(p));
    }
    auto cn = OB::node(c);
    Tape<S>::active()->record([ins, widths, track, cn, rows, total_last]() {
      const auto& gc = OB::out_grad(cn);
      int64_t off = 0;
      for (size_t i = 0; i < ins.size(); ++i) {
        if (track[i]) {
          auto& g = OB::grad_of(ins[i]);
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < widths[i]; ++j)
              g[static_cast<size_t>(r * widths[i] + j)] += gc[r * total_last + off + j];
        }
        off += widths[i];
      }
    });
  }
  return c;
}

template <class S>
Tensor<S> mean_over_axis(const Tensor<S>& a, int64_t axis) {
  using OB = OpBuilder<S>;
  int64_t nd = a.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("mean_over_axis: axis out of range for " + shape_str(a.shape()));
  int64_t n = a.size(axis);
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= a.size(d);
  for (int64_t d = axis + 1; d < nd; ++d) inner *= a.size(d);
  Shape out_shape;
  for (int64_t d = 0; d < nd; ++d)
    if (d != axis) out_shape.push_back(a.size(d));
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<S> out(static_cast<size_t>(outer * inner), S(0));
  const S* pa = a.values().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t i = 0; i < inner; ++i) out[o * inner + i] += pa[(o * n + j) * inner + i];
  S inv = S(1) / static_cast<S>(n);
  for (S& v : out) v *= inv;
  Tensor<S> c = OB::make(out_shape, std::move(out));
  if (OB::wants_grad(a)) {
    OB::mark(c);
    auto an = OB::node(a), cn = OB::node(c);
    Tape<S>::active()->record([an, cn, outer, n, inner, inv]() {
      const auto& gc = OB::out_grad(cn);
      auto& g = OB::grad_of(an);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n; ++j)
          for (int64_t i = 0; i < inner; ++i)
            g[static_cast<size_t>((o * n + j) * inner + i)] += gc[o * inner + i] * inv;
    });
  }
  return c;
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  using OB = OpBuilder<S>;
  S total = S(0);
  for (S v : a.values()) total += v;
  Tensor<S> c = Tensor<S>::scalar(total);
  if (OB::wants_grad(a)) {
    OB::mark(c);
    auto an = OB::node(a), cn = OB::node(c);
    Tape<S>::active()->record([an, cn]() {
      const auto& gc = OB::out_grad(cn);
      auto& g = OB::grad_of(an);
      for (size_t i = 0; i < g.size(); ++i) g[i] += gc[0];
    });
  }
  return c;
}

// Row gather: views x as [numel/row_width, row_width] and returns the listed
// rows as [rows.size(), row_width]. Index -1 yields a zero row (used for the
// padded ring in overlapped patch extraction). Backward scatter-adds.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int64_t>& rows, int64_t row_width) {
  using OB = OpBuilder<S>;
  if (row_width < 1 || x.numel() % row_width != 0)
    throw ShapeError("gather_rows: row width " + std::to_string(row_width) +
                     " does not divide tensor " + shape_str(x.shape()));
  int64_t nrows_in = x.numel() / row_width;
  for (int64_t r : rows)
    if (r < -1 || r >= nrows_in)
      throw ShapeError("gather_rows: row index " + std::to_string(r) + " out of range [0," +
                       std::to_string(nrows_in) + ")");
  std::vector<S> out(rows.size() * static_cast<size_t>(row_width), S(0));
  const S* px = x.values().data();
  for (size_t i = 0; i < rows.size(); ++i)
    if (rows[i] >= 0)
      std::copy(px + rows[i] * row_width, px + (rows[i] + 1) * row_width,
                out.data() + static_cast<int64_t>(i) * row_width);
  Tensor<S> c = OB::make({static_cast<int64_t>(rows.size()), row_width}, std::move(out));
  if (OB::wants_grad(x)) {
    OB::mark(c);
    auto xn = OB::node(x), cn = OB::node(c);
    Tape<S>::active()->record([xn, cn, rows, row_width]() {
      const auto& gc = OB::out_grad(cn);
      auto& g = OB::grad_of(xn);
      for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0) continue;
        S* gd = g.data() + rows[i] * row_width;
        const S* gs = gc.data() + static_cast<int64_t>(i) * row_width;
        for (int64_t j = 0; j < row_width; ++j) gd[j] += gs[j];
      }
    });
  }
  return c;
}

// ---------------------------------------------------------------------------
// softmax family (max-subtraction stabilized)

template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  using OB = OpBuilder<S>;
  int64_t n = x.shape().back();
  int64_t rows = x.numel() / n;
  std::vector<S> out(x.numel());
  const S* px = x.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * n;
    S* yr = out.data() + r * n;
    S mx = xr[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
    S sum = S(0);
    for (int64_t i = 0; i < n; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      sum += yr[i];
    }
    S inv = S(1) / sum;
    for (int64_t i = 0; i < n; ++i) yr[i] *= inv;
  }
  Tensor<S> y = OB::make(x.shape(), std::move(out));
  if (OB::wants_grad(x)) {
    OB::mark(y);
    auto xn = OB::node(x), yn = OB::node(y);
    Tape<S>::active()->record([xn, yn, rows, n]() {
      const auto& gy = OB::out_grad(yn);
      auto& gx = OB::grad_of(xn);
      const S* py = yn->data->data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* yr = py + r * n;
        const S* gr = gy.data() + r * n;
        S dot = S(0);
        for (int64_t i = 0; i < n; ++i) dot += yr[i] * gr[i];
        S* go = gx.data() + r * n;
        for (int64_t i = 0; i < n; ++i) go[i] += yr[i] * (gr[i] - dot);
      }
    });
  }
  return y;
}

template <class S>
Tensor<S> log_softmax_lastdim(const Tensor<S>& x) {
  using OB = OpBuilder<S>;
  int64_t n = x.shape().back();
  int64_t rows = x.numel() / n;
  std::vector<S> out(x.numel());
  const S* px = x.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * n;
    S* yr = out.data() + r * n;
    S mx = xr[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
    S sum = S(0);
    for (int64_t i = 0; i < n; ++i) sum += std::exp(xr[i] - mx);
    S lse = mx + std::log(sum);
    for (int64_t i = 0; i < n; ++i) yr[i] = xr[i] - lse;
  }
  Tensor<S> y = OB::make(x.shape(), std::move(out));
  if (OB::wants_grad(x)) {
    OB::mark(y);
    auto xn = OB::node(x), yn = OB::node(y);
    Tape<S>::active()->record([xn, yn, rows, n]() {
      const auto& gy = OB::out_grad(yn);
      auto& gx = OB::grad_of(xn);
      const S* py = yn->data->data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* yr = py + r * n;
        const S* gr = gy.data() + r * n;
        S gsum = S(0);
        for (int64_t i = 0; i < n; ++i) gsum += gr[i];
        S* go = gx.data() + r * n;
        for (int64_t i = 0; i < n; ++i) go[i] += gr[i] - std::exp(yr[i]) * gsum;
      }
    });
  }
  return y;
}

}  // namespace moa
