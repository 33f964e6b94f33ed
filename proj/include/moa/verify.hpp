#pragma once

// Independent oracles and the finite-difference gradient harness. Everything
// here recomputes reference values with plain scalar loops, never through the
// batched forward paths it checks.

#include <cmath>
#include <cstring>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "moa/model.hpp"
#include "moa/tensor.hpp"
#include "moa/window.hpp"

namespace moa {

// Reference attention: per-query scalar loops over Softmax(QK^T/sqrt(d)+B)V.
// q: [heads, M2, d], k,v: [heads, N2, d], b: [heads, M2, N2].
template <class S>
Tensor<S> naive_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                          const Tensor<S>& b) {
  int64_t heads = q.size(0), m2 = q.size(1), d = q.size(2), n2 = k.size(1);
  std::vector<S> out(static_cast<size_t>(heads * m2 * d), S(0));
  const S* pq = q.values().data();
  const S* pk = k.values().data();
  const S* pv = v.values().data();
  const S* pb = b.values().data();
  double inv_sqrt_d = 1.0 / std::sqrt(double(d));
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < m2; ++i) {
      std::vector<double> logit(static_cast<size_t>(n2));
      for (int64_t j = 0; j < n2; ++j) {
        double dot = 0;
        for (int64_t e = 0; e < d; ++e)
          dot += double(pq[(h * m2 + i) * d + e]) * double(pk[(h * n2 + j) * d + e]);
        logit[static_cast<size_t>(j)] = dot * inv_sqrt_d + double(pb[(h * m2 + i) * n2 + j]);
      }
      double mx = logit[0];
      for (double l : logit) mx = std::max(mx, l);
      double sum = 0;
      for (double& l : logit) {
        l = std::exp(l - mx);
        sum += l;
      }
      for (int64_t j = 0; j < n2; ++j) {
        double w = logit[static_cast<size_t>(j)] / sum;
        for (int64_t e = 0; e < d; ++e)
          out[static_cast<size_t>((h * m2 + i) * d + e)] +=
              S(w * double(pv[(h * n2 + j) * d + e]));
      }
    }
  return Tensor<S>::from({heads, m2, d}, std::move(out));
}

// Reference sliding-window extraction over an explicitly zero-padded copy.
template <class S>
std::vector<std::vector<S>> naive_sliding_patches(const Tensor<S>& map, int64_t k, int64_t s,
                                                  int64_t p) {
  int64_t H = map.size(0), W = map.size(1), C = map.size(2);
  int64_t ph = H + 2 * p, pw = W + 2 * p;
  std::vector<S> padded(static_cast<size_t>(ph * pw * C), S(0));
  const S* pm = map.values().data();
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j)
      for (int64_t c = 0; c < C; ++c)
        padded[static_cast<size_t>(((i + p) * pw + j + p) * C + c)] = pm[(i * W + j) * C + c];
  std::vector<std::vector<S>> tokens;
  for (int64_t y = 0; y + k <= ph; y += s)
    for (int64_t x = 0; x + k <= pw; x += s) {
      std::vector<S> tok;
      tok.reserve(static_cast<size_t>(k * k * C));
      for (int64_t i = 0; i < k; ++i)
        for (int64_t j = 0; j < k; ++j)
          for (int64_t c = 0; c < C; ++c)
            tok.push_back(padded[static_cast<size_t>(((y + i) * pw + x + j) * C + c)]);
      tokens.push_back(std::move(tok));
    }
  return tokens;
}

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  int64_t worst_index = -1;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double threshold = 1e-4;

  bool passed() const {
    for (const auto& e : entries)
      if (!(e.max_rel_error < threshold)) return false;
    return true;
  }
  double worst() const {
    double w = 0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
};

inline double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

// Central differences against the recorded-graph gradients. loss_fn must be
// a deterministic function of the checked tensors' current values. Large
// tensors are subsampled (seeded) to at most max_scalars entries each.
inline constexpr int64_t kGradCheckMaxScalars = 200;

template <class S>
GradCheckReport finite_diff_grad(const std::function<Tensor<S>()>& loss_fn,
                                 std::vector<std::pair<std::string, Tensor<S>>> checked,
                                 double epsilon = 1e-5, uint64_t seed = 7,
                                 int64_t max_scalars = kGradCheckMaxScalars) {
  static_assert(std::is_same_v<S, double>, "gradcheck runs in 64-bit mode");
  for (auto& [name, t] : checked) t.set_requires_grad(true);
  {
    Tape<S> tape;
    Tensor<S> loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckReport report;
  for (auto& [name, t] : checked) {
    auto analytic = std::vector<S>(t.grad().begin(), t.grad().end());
    std::vector<int64_t> picks(static_cast<size_t>(t.numel()));
    std::iota(picks.begin(), picks.end(), 0);
    if (t.numel() > max_scalars) {
      std::mt19937_64 rng(seed ^ fnv1a(name));
      std::shuffle(picks.begin(), picks.end(), rng);
      picks.resize(static_cast<size_t>(max_scalars));
    }
    GradCheckEntry entry;
    entry.name = name;
    auto vals = t.mutable_values();
    for (int64_t i : picks) {
      S keep = vals[static_cast<size_t>(i)];
      vals[static_cast<size_t>(i)] = keep + S(epsilon);
      double up = double(loss_fn().item());
      vals[static_cast<size_t>(i)] = keep - S(epsilon);
      double down = double(loss_fn().item());
      vals[static_cast<size_t>(i)] = keep;
      double numeric = (up - down) / (2 * epsilon);
      double err = rel_error(double(analytic[static_cast<size_t>(i)]), numeric);
      if (err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
      }
    }
    report.entries.push_back(std::move(entry));
    t.clear_grad();
  }
  return report;
}

// True iff the full model with freshly built (zero out_conv) MOA blocks
// produces bit-identical logits to the same seed/config with MOA disabled.
template <class S>
bool local_global_equivalence(const ModelConfig& cfg, uint64_t seed = 42) {
  ModelConfig with = cfg;
  with.moa.enabled = true;
  ModelConfig without = cfg;
  without.moa.enabled = false;
  Model<S> a(with, seed);
  Model<S> b(without, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<S> img(static_cast<size_t>(2 * cfg.input_size * cfg.input_size * cfg.in_channels));
  for (S& v : img) v = S(n(rng));
  Tensor<S> x = Tensor<S>::from({2, cfg.input_size, cfg.input_size, cfg.in_channels}, img);
  Tensor<S> la = a.forward(x);
  Tensor<S> lb = b.forward(x);
  return la.numel() == lb.numel() &&
         std::memcmp(la.values().data(), lb.values().data(),
                     static_cast<size_t>(la.numel()) * sizeof(S)) == 0;
}

// Same comparison against an explicitly supplied model (e.g. after a
// training step has moved out_conv off zero).
template <class S>
bool logits_bit_identical(const Tensor<S>& a, const Tensor<S>& b) {
  return a.numel() == b.numel() &&
         std::memcmp(a.values().data(), b.values().data(),
                     static_cast<size_t>(a.numel()) * sizeof(S)) == 0;
}

// ---------------------------------------------------------------------------
// layer-by-layer gradcheck suite (used by tests and `moa gradcheck`)

// Test hook: when enabled, faulty_identity() records a sign-flipped backward
// rule, which every downstream gradcheck must flag.
inline bool& inject_backward_fault() {
  static bool fault = false;
  return fault;
}

template <class S>
Tensor<S> faulty_identity(const Tensor<S>& x) {
  using OB = OpBuilder<S>;
  std::vector<S> out(x.values().begin(), x.values().end());
  Tensor<S> y = OB::make(x.shape(), std::move(out));
  if (OB::wants_grad(x)) {
    OB::mark(y);
    auto xn = OB::node(x), yn = OB::node(y);
    bool flip = inject_backward_fault();
    Tape<S>::active()->record([xn, yn, flip]() {
      const auto& gy = OB::out_grad(yn);
      auto& gx = OB::grad_of(xn);
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += flip ? -gy[i] : gy[i];
    });
  }
  return y;
}

namespace detail {

template <class S>
Tensor<S> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<S> v(static_cast<size_t>(shape_numel(shape)));
  for (S& x : v) x = S(n(rng));
  return Tensor<S>::from(std::move(shape), std::move(v));
}

// Weighted sum so that gradient errors cannot cancel row-wise. The exact
// power-of-two downscale keeps central-difference roundoff below the
// rel_error floor without disturbing the ratio for real gradients.
template <class S>
Tensor<S> probe_loss(const Tensor<S>& out, std::mt19937_64& rng) {
  Tensor<S> w = random_tensor<S>(out.shape(), rng);
  return scale(sum_all(mul(faulty_identity(out), w)), S(1) / S(8192));
}

}  // namespace detail

struct GradCheckCase {
  std::string scope;
  GradCheckReport report;
};

std::vector<std::string> gradcheck_scopes();

// Runs the named scope ("all" runs everything) at 64-bit precision.
std::vector<GradCheckCase> run_gradcheck(const std::string& scope, uint64_t seed = 42);

}  // namespace moa
