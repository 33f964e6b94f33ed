#pragma once

// Multi-resolution overlapped attention, applied between stages: 1x1 channel
// reduction, non-overlapped query patches the size of the local window,
// slightly larger overlapped key/value patches over a zero-padded map, global
// multi-head attention with relative position bias, an MLP, and a broadcast
// add of one global vector per window back onto the feature map.

#include <cmath>
#include <string>
#include <vector>

#include "moa/nn.hpp"
#include "moa/params.hpp"
#include "moa/tensor.hpp"
#include "moa/window.hpp"

namespace moa {

struct MoaGeometry {
  int64_t height = 0, width = 0, channels = 0;
  int64_t reduction = 1;    // channel shrink factor R
  int64_t query_patch = 0;  // q, equals the local window size
  int64_t kv_patch = 0;     // k
  int64_t kv_stride = 0;    // s
  int64_t kv_padding = 0;   // p

  // floor(C/R), never below one channel
  int64_t reduced_channels() const { return std::max<int64_t>(1, channels / reduction); }

  int64_t query_grid_h() const { return height / query_patch; }
  int64_t query_grid_w() const { return width / query_patch; }

  void validate() const {
    if (query_patch < 1 || height % query_patch != 0 || width % query_patch != 0)
      throw GeometryError("moa: query patch " + std::to_string(query_patch) +
                          " does not divide map " + std::to_string(height) + "x" +
                          std::to_string(width));
    if (kv_stride < 1 || kv_patch < kv_stride)
      throw GeometryError("moa: kv patch " + std::to_string(kv_patch) +
                          " must be >= stride " + std::to_string(kv_stride));
    key_grid_dims(height, width, kv_patch, kv_padding, kv_stride);  // throws if inexact
  }

  // Key/value grid extents: (H - k + 2p)/s + 1 per axis, required exact.
  static std::pair<int64_t, int64_t> key_grid_dims(int64_t h, int64_t w, int64_t k, int64_t p,
                                                   int64_t s) {
    auto one = [&](int64_t extent, const char* axis) {
      int64_t span = extent - k + 2 * p;
      if (span < 0 || span % s != 0) {
        int64_t pad_fix = -1;
        for (int64_t cand = 0; cand <= k; ++cand)
          if (extent - k + 2 * cand >= 0 && (extent - k + 2 * cand) % s == 0) {
            pad_fix = cand;
            break;
          }
        throw GeometryError(std::string("moa: key grid inexact along ") + axis + ": (" +
                            std::to_string(extent) + " - " + std::to_string(k) + " + 2*" +
                            std::to_string(p) + ") not a multiple of stride " + std::to_string(s) +
                            (pad_fix >= 0 ? "; padding " + std::to_string(pad_fix) + " would work"
                                          : ""));
      }
      return span / s + 1;
    };
    return {one(h, "height"), one(w, "width")};
  }
};

inline std::pair<int64_t, int64_t> key_grid_dims(int64_t h, int64_t w, int64_t k, int64_t p,
                                                 int64_t s) {
  return MoaGeometry::key_grid_dims(h, w, k, p, s);
}

// Linear overlap between horizontally adjacent key patches: (k - s) / k.
inline double overlap_fraction(int64_t k, int64_t s) {
  if (s < 1 || k < s)
    throw ContractError("overlap_fraction: need k >= s >= 1, got k=" + std::to_string(k) +
                        " s=" + std::to_string(s));
  return static_cast<double>(k - s) / static_cast<double>(k);
}

// Non-overlapping q x q patches of the reduced map, flattened in raster
// order: [B,H,W,Cr] -> [B, M2, q*q*Cr].
template <class S>
Tensor<S> extract_query_tokens(const Tensor<S>& x, int64_t q) {
  int64_t B = x.size(0), H = x.size(1), W = x.size(2), C = x.size(3);
  if (q < 1 || H % q != 0 || W % q != 0)
    throw GeometryError("moa: query patch " + std::to_string(q) + " does not divide map " +
                        std::to_string(H) + "x" + std::to_string(W));
  Tensor<S> win = window_partition(x, q);  // [B*M2, q*q, C]
  return reshape(win, {B, (H / q) * (W / q), q * q * C});
}

// Sliding k x k patches at stride s over the zero-padded map, raster order:
// [B,H,W,Cr] -> [B, N2, k*k*Cr]. Sites outside the map contribute zeros.
template <class S>
Tensor<S> extract_kv_tokens(const Tensor<S>& x, int64_t k, int64_t s, int64_t p) {
  int64_t B = x.size(0), H = x.size(1), W = x.size(2), C = x.size(3);
  auto [nh, nw] = key_grid_dims(H, W, k, p, s);
  std::vector<int64_t> rows;
  rows.reserve(static_cast<size_t>(B * nh * nw * k * k));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t ti = 0; ti < nh; ++ti)
      for (int64_t tj = 0; tj < nw; ++tj)
        for (int64_t i = 0; i < k; ++i)
          for (int64_t j = 0; j < k; ++j) {
            int64_t y = ti * s - p + i;
            int64_t xcol = tj * s - p + j;
            bool inside = y >= 0 && y < H && xcol >= 0 && xcol < W;
            rows.push_back(inside ? (b * H + y) * W + xcol : -1);
          }
  Tensor<S> g = gather_rows(x, rows, C);
  return reshape(g, {B, nh * nw, k * k * C});
}

// Bias index between the query grid and the key grid. Key patch centers are
// mapped into query-grid units and snapped to the nearest cell; offsets are
// clamped so the table stays (2Mh-1)x(2Mw-1). When the grids coincide this
// reduces to relative_position_index(mh, mw).
inline std::vector<int64_t> moa_rel_pos_index(int64_t mh, int64_t mw, int64_t nh, int64_t nw,
                                              int64_t q, int64_t k, int64_t s, int64_t p) {
  auto snap = [&](int64_t t) {
    // key patch t spans [t*s - p, t*s - p + k); center in query-grid units
    double center = static_cast<double>(t) * s - p + (static_cast<double>(k) - 1) / 2.0;
    double cell = (center - (static_cast<double>(q) - 1) / 2.0) / static_cast<double>(q);
    return static_cast<int64_t>(std::llround(cell));
  };
  auto clampi = [](int64_t v, int64_t lo, int64_t hi) { return std::min(std::max(v, lo), hi); };
  std::vector<int64_t> idx(static_cast<size_t>(mh * mw * nh * nw));
  for (int64_t qi = 0; qi < mh * mw; ++qi) {
    int64_t qr = qi / mw, qc = qi % mw;
    for (int64_t ki = 0; ki < nh * nw; ++ki) {
      int64_t kr = snap(ki / nw), kc = snap(ki % nw);
      int64_t dr = clampi(qr - kr, -(mh - 1), mh - 1);
      int64_t dc = clampi(qc - kc, -(mw - 1), mw - 1);
      idx[static_cast<size_t>(qi * nh * nw + ki)] = (dr + mh - 1) * (2 * mw - 1) + (dc + mw - 1);
    }
  }
  return idx;
}

// The MOA block. The hidden dimension of the global attention equals the
// stage dimension C; the channel reduction only shrinks the patch features
// the projections read. The final 1x1 conv starts at zero, so a freshly
// built block is an exact identity on the feature map.
template <class S>
struct MoaBlock {
  MoaGeometry geom;
  LinearLayer<S> reduce;  // 1x1 conv, C -> Cr
  LinearLayer<S> q_proj;  // q*q*Cr -> C
  LinearLayer<S> k_proj;  // k*k*Cr -> C
  LinearLayer<S> v_proj;  // k*k*Cr -> C
  LayerNorm<S> norm1;
  LayerNorm<S> norm2;
  Mlp<S> mlp;
  LinearLayer<S> out_conv;  // 1x1 conv, C -> C, zero-initialized
  RelPosBias<S> rel_pos_bias;
  int64_t num_heads = 1;

  MoaBlock() = default;
  MoaBlock(ParamStore<S>& ps, const std::string& name, const MoaGeometry& g, int64_t heads) :
      geom(g), num_heads(heads) {
    geom.validate();
    int64_t C = geom.channels;
    if (C % heads != 0)
      throw GeometryError("moa: dim " + std::to_string(C) + " not divisible by heads " +
                          std::to_string(heads));
    int64_t cr = geom.reduced_channels();
    int64_t q = geom.query_patch, k = geom.kv_patch;
    reduce = LinearLayer<S>(ps, name + ".reduce", C, cr);
    q_proj = LinearLayer<S>(ps, name + ".q_proj", q * q * cr, C);
    k_proj = LinearLayer<S>(ps, name + ".k_proj", k * k * cr, C);
    v_proj = LinearLayer<S>(ps, name + ".v_proj", k * k * cr, C);
    norm1 = LayerNorm<S>(ps, name + ".norm1", C);
    norm2 = LayerNorm<S>(ps, name + ".norm2", C);
    mlp = Mlp<S>(ps, name + ".mlp", C, kMlpRatio * C);
    out_conv.weight = ps.create_zeros(name + ".out.weight", {C, C});
    out_conv.bias = ps.create_zeros(name + ".out.bias", {C});
    auto [nh, nw] = key_grid_dims(geom.height, geom.width, k, geom.kv_padding, geom.kv_stride);
    int64_t mh = geom.query_grid_h(), mw = geom.query_grid_w();
    rel_pos_bias = RelPosBias<S>(
        ps, name + ".rel_pos", (2 * mh - 1) * (2 * mw - 1),
        moa_rel_pos_index(mh, mw, nh, nw, q, k, geom.kv_stride, geom.kv_padding), mh * mw, nh * nw,
        heads);
  }

  // x: [B,H,W,C] -> [B,H,W,C]
  Tensor<S> forward(const Tensor<S>& x) const {
    int64_t B = x.size(0), H = x.size(1), W = x.size(2), C = x.size(3);
    if (H != geom.height || W != geom.width || C != geom.channels)
      throw GeometryError("moa: input " + shape_str(x.shape()) + " does not match geometry " +
                          std::to_string(geom.height) + "x" + std::to_string(geom.width) + "x" +
                          std::to_string(geom.channels));
    Tensor<S> r = conv1x1(x, reduce);
    Tensor<S> tq = q_proj.forward(extract_query_tokens(r, geom.query_patch));  // [B, M2, C]
    Tensor<S> kv = extract_kv_tokens(r, geom.kv_patch, geom.kv_stride, geom.kv_padding);
    Tensor<S> tk = k_proj.forward(kv);  // [B, N2, C]
    Tensor<S> tv = v_proj.forward(kv);
    int64_t m2 = tq.size(1), n2 = tk.size(1);

    Tensor<S> q = detail::split_heads(norm1.forward(tq), num_heads);  // [B*h, M2, d]
    Tensor<S> k = detail::split_heads(tk, num_heads);
    Tensor<S> v = detail::split_heads(tv, num_heads);
    int64_t d = q.shape().back();
    Tensor<S> logits = scale(matmul_nt(q, k), S(1) / static_cast<S>(std::sqrt(double(d))));
    logits = reshape(logits, {B, num_heads, m2, n2});
    Tensor<S> a = softmax_lastdim(broadcast_add(logits, rel_pos_bias.bias()));
    Tensor<S> attn = matmul(reshape(a, {B * num_heads, m2, n2}), v);
    Tensor<S> t = add(tq, detail::merge_heads(attn, B, num_heads));
    t = add(t, mlp.forward(norm2.forward(t)));

    Tensor<S> g = out_conv.forward(t);  // [B, M2, C], one global vector per window
    // broadcast add: every site of window (i/q, j/q) receives that window's vector
    int64_t qp = geom.query_patch;
    int64_t mw = geom.query_grid_w();
    std::vector<int64_t> rows;
    rows.reserve(static_cast<size_t>(B * H * W));
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j)
          rows.push_back((b * m2) + (i / qp) * mw + (j / qp));
    Tensor<S> spread = reshape(gather_rows(g, rows, C), {B, H, W, C});
    return add(x, spread);
  }
};

}  // namespace moa
