#pragma once

// Parameterized layers shared by the local and global branches: linear,
// layer norm, GELU, two-layer MLP, 1x1 convolution, stochastic depth.

#include <cmath>
#include <random>
#include <string>

#include "moa/params.hpp"
#include "moa/tensor.hpp"

namespace moa {

// Fused affine map over the trailing dim: y = x W^T + b, W is [out, in].
template <class S>
Tensor<S> linear_forward(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  using OB = OpBuilder<S>;
  int64_t in_dim = weight.size(1);
  int64_t out_dim = weight.size(0);
  if (x.shape().back() != in_dim)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  if (bias.numel() != out_dim)
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  int64_t rows = x.numel() / in_dim;
  std::vector<S> out(static_cast<size_t>(rows * out_dim));
  {
    ConstMatMap<S> X(x.values().data(), rows, in_dim);
    ConstMatMap<S> W(weight.values().data(), out_dim, in_dim);
    MatMap<S> Y(out.data(), rows, out_dim);
    Y.noalias() = X * W.transpose();
    const S* pb = bias.values().data();
    for (int64_t r = 0; r < rows; ++r) {
      S* yr = out.data() + r * out_dim;
      for (int64_t j = 0; j < out_dim; ++j) yr[j] += pb[j];
    }
  }
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor<S> y = OB::make(out_shape, std::move(out));
  detail::debug_check_finite(y, "linear");
  if (OB::wants_grad(x, weight, bias)) {
    OB::mark(y);
    auto xn = OB::node(x), wn = OB::node(weight), bn = OB::node(bias), yn = OB::node(y);
    bool gx = OB::tracked(x), gw = OB::tracked(weight), gb = OB::tracked(bias);
    Tape<S>::active()->record([xn, wn, bn, yn, rows, in_dim, out_dim, gx, gw, gb]() {
      const auto& gy = OB::out_grad(yn);
      ConstMatMap<S> dY(gy.data(), rows, out_dim);
      if (gx) {
        auto& g = OB::grad_of(xn);
        ConstMatMap<S> W(wn->data->data(), out_dim, in_dim);
        MatMap<S> dX(g.data(), rows, in_dim);
        dX.noalias() += dY * W;
      }
      if (gw) {
        auto& g = OB::grad_of(wn);
        ConstMatMap<S> X(xn->data->data(), rows, in_dim);
        MatMap<S> dW(g.data(), out_dim, in_dim);
        dW.noalias() += dY.transpose() * X;
      }
      if (gb) {
        auto& g = OB::grad_of(bn);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < out_dim; ++j) g[static_cast<size_t>(j)] += gy[r * out_dim + j];
      }
    });
  }
  return y;
}

// Per-slice normalization over the trailing dim, then affine gamma/beta.
template <class S>
Tensor<S> layernorm_forward(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                            S epsilon) {
  using OB = OpBuilder<S>;
  int64_t n = x.shape().back();
  if (gamma.numel() != n || beta.numel() != n)
    throw ShapeError("layernorm: gamma/beta " + shape_str(gamma.shape()) +
                     " do not match trailing dim of " + shape_str(x.shape()));
  int64_t rows = x.numel() / n;
  std::vector<S> out(x.numel());
  std::vector<S> xhat(x.numel());
  std::vector<S> inv_std(static_cast<size_t>(rows));
  const S* px = x.values().data();
  const S* pg = gamma.values().data();
  const S* pb = beta.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * n;
    S mean = S(0);
    for (int64_t i = 0; i < n; ++i) mean += xr[i];
    mean /= static_cast<S>(n);
    S var = S(0);
    for (int64_t i = 0; i < n; ++i) {
      S d = xr[i] - mean;
      var += d * d;
    }
    var /= static_cast<S>(n);
    S istd = S(1) / std::sqrt(var + epsilon);
    inv_std[static_cast<size_t>(r)] = istd;
    S* hr = xhat.data() + r * n;
    S* yr = out.data() + r * n;
    for (int64_t i = 0; i < n; ++i) {
      hr[i] = (xr[i] - mean) * istd;
      yr[i] = pg[i] * hr[i] + pb[i];
    }
  }
  Tensor<S> y = OB::make(x.shape(), std::move(out));
  detail::debug_check_finite(y, "layernorm");
  if (OB::wants_grad(x, gamma, beta)) {
    OB::mark(y);
    auto xn = OB::node(x), gn = OB::node(gamma), bn = OB::node(beta), yn = OB::node(y);
    bool gx = OB::tracked(x), gg = OB::tracked(gamma), gb = OB::tracked(beta);
    auto xh = std::make_shared<std::vector<S>>(std::move(xhat));
    auto is = std::make_shared<std::vector<S>>(std::move(inv_std));
    Tape<S>::active()->record([xn, gn, bn, yn, xh, is, rows, n, gx, gg, gb]() {
      const auto& gy = OB::out_grad(yn);
      const S* pg = gn->data->data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = gy.data() + r * n;
        const S* hr = xh->data() + r * n;
        if (gg) {
          auto& g = OB::grad_of(gn);
          for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i)] += gr[i] * hr[i];
        }
        if (gb) {
          auto& g = OB::grad_of(bn);
          for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i)] += gr[i];
        }
        if (gx) {
          auto& g = OB::grad_of(xn);
          S mean_dh = S(0), mean_dh_h = S(0);
          for (int64_t i = 0; i < n; ++i) {
            S dh = gr[i] * pg[i];
            mean_dh += dh;
            mean_dh_h += dh * hr[i];
          }
          mean_dh /= static_cast<S>(n);
          mean_dh_h /= static_cast<S>(n);
          S istd = (*is)[static_cast<size_t>(r)];
          S* go = g.data() + r * n;
          for (int64_t i = 0; i < n; ++i)
            go[i] += istd * (gr[i] * pg[i] - mean_dh - hr[i] * mean_dh_h);
        }
      }
    });
  }
  return y;
}

// Exact-erf GELU: x * Phi(x).
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  using OB = OpBuilder<S>;
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  std::vector<S> out(x.numel());
  const S* px = x.values().data();
  for (size_t i = 0; i < out.size(); ++i) {
    double v = static_cast<double>(px[i]);
    out[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)));
  }
  Tensor<S> y = OB::make(x.shape(), std::move(out));
  if (OB::wants_grad(x)) {
    OB::mark(y);
    auto xn = OB::node(x), yn = OB::node(y);
    Tape<S>::active()->record([xn, yn]() {
      const auto& gy = OB::out_grad(yn);
      auto& gx = OB::grad_of(xn);
      const S* px = xn->data->data();
      for (size_t i = 0; i < gy.size(); ++i) {
        double v = static_cast<double>(px[i]);
        double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx[i] += gy[i] * static_cast<S>(phi + v * pdf);
      }
    });
  }
  return y;
}

// Stochastic depth over the leading axis: in training, each leading slice
// keeps its residual with probability keep_prob (rescaled by 1/keep_prob);
// in eval the residual is always added.
template <class S>
Tensor<S> drop_path(const Tensor<S>& x, const Tensor<S>& residual, S keep_prob, bool training,
                    std::mt19937_64* rng) {
  using OB = OpBuilder<S>;
  if (!(keep_prob > S(0)) || keep_prob > S(1))
    throw ContractError("drop_path: keep_prob must be in (0,1], got " + std::to_string(keep_prob));
  if (x.shape() != residual.shape())
    throw ShapeError("drop_path: shapes differ, " + shape_str(x.shape()) + " vs " +
                     shape_str(residual.shape()));
  if (!training || keep_prob == S(1)) return add(x, residual);
  if (!rng) throw ContractError("drop_path: training mode needs an RNG");
  int64_t lead = x.size(0);
  int64_t slice = x.numel() / lead;
  std::vector<S> mask(static_cast<size_t>(lead));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& m : mask) m = (u(*rng) < static_cast<double>(keep_prob)) ? S(1) / keep_prob : S(0);
  std::vector<S> out(x.values().begin(), x.values().end());
  const S* pr = residual.values().data();
  for (int64_t g = 0; g < lead; ++g) {
    S m = mask[static_cast<size_t>(g)];
    if (m == S(0)) continue;
    S* po = out.data() + g * slice;
    const S* ri = pr + g * slice;
    for (int64_t i = 0; i < slice; ++i) po[i] += m * ri[i];
  }
  Tensor<S> y = OB::make(x.shape(), std::move(out));
  if (OB::wants_grad(x, residual)) {
    OB::mark(y);
    auto xn = OB::node(x), rn = OB::node(residual), yn = OB::node(y);
    bool gx = OB::tracked(x), gr = OB::tracked(residual);
    auto mk = std::make_shared<std::vector<S>>(std::move(mask));
    Tape<S>::active()->record([xn, rn, yn, mk, lead, slice, gx, gr]() {
      const auto& gy = OB::out_grad(yn);
      if (gx) {
        auto& g = OB::grad_of(xn);
        for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
      }
      if (gr) {
        auto& g = OB::grad_of(rn);
        for (int64_t b = 0; b < lead; ++b) {
          S m = (*mk)[static_cast<size_t>(b)];
          if (m == S(0)) continue;
          for (int64_t i = 0; i < slice; ++i)
            g[static_cast<size_t>(b * slice + i)] += m * gy[b * slice + i];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// layer objects

template <class S>
struct LinearLayer {
  Tensor<S> weight;  // [out, in]
  Tensor<S> bias;    // [out]

  LinearLayer() = default;
  LinearLayer(ParamStore<S>& ps, const std::string& name, int64_t in_dim, int64_t out_dim) {
    weight = ps.create_trunc_normal(name + ".weight", {out_dim, in_dim});
    bias = ps.create_zeros(name + ".bias", {out_dim});
  }

  int64_t in_dim() const { return weight.size(1); }
  int64_t out_dim() const { return weight.size(0); }

  Tensor<S> forward(const Tensor<S>& x) const { return linear_forward(x, weight, bias); }
};

template <class S>
struct LayerNorm {
  Tensor<S> gamma;
  Tensor<S> beta;
  S epsilon = S(1e-5);

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& ps, const std::string& name, int64_t dim) {
    gamma = ps.create_ones(name + ".gamma", {dim});
    beta = ps.create_zeros(name + ".beta", {dim});
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    return layernorm_forward(x, gamma, beta, epsilon);
  }
};

// Two-layer MLP with GELU in between; hidden = 4 * dim.
template <class S>
struct Mlp {
  LinearLayer<S> fc1;
  LinearLayer<S> fc2;

  Mlp() = default;
  Mlp(ParamStore<S>& ps, const std::string& name, int64_t dim, int64_t hidden) :
      fc1(ps, name + ".fc1", dim, hidden), fc2(ps, name + ".fc2", hidden, dim) {}

  Tensor<S> forward(const Tensor<S>& x) const {
    return fc2.forward(gelu(fc1.forward(x)));
  }
};

constexpr int64_t kMlpRatio = 4;

// Pointwise channel map: x is [..., Cin], applies the same linear at every
// spatial site. Identical computation path to linear_forward by construction.
template <class S>
Tensor<S> conv1x1(const Tensor<S>& x, const LinearLayer<S>& layer) {
  return layer.forward(x);
}

}  // namespace moa
