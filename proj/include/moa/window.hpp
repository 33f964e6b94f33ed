#pragma once

// Non-overlapping window partitioning, relative position bias, multi-head
// self-attention with a learnable per-offset bias added to the logits, and
// the local pre-norm transformer block.

#include <cmath>
#include <string>
#include <vector>

#include "moa/nn.hpp"
#include "moa/params.hpp"
#include "moa/tensor.hpp"

namespace moa {

// [B,H,W,C] -> [B*(H/w)*(W/w), w*w, C], windows and sites in raster order.
template <class S>
Tensor<S> window_partition(const Tensor<S>& x, int64_t w) {
  if (x.ndim() != 4)
    throw ShapeError("window_partition: expected [B,H,W,C], got " + shape_str(x.shape()));
  int64_t B = x.size(0), H = x.size(1), W = x.size(2), C = x.size(3);
  if (w < 1 || H % w != 0 || W % w != 0)
    throw GeometryError("window_partition: window " + std::to_string(w) +
                        " does not divide feature map " + std::to_string(H) + "x" +
                        std::to_string(W));
  int64_t wh = H / w, ww = W / w;
  std::vector<int64_t> rows;
  rows.reserve(static_cast<size_t>(B * H * W));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t wi = 0; wi < wh; ++wi)
      for (int64_t wj = 0; wj < ww; ++wj)
        for (int64_t i = 0; i < w; ++i)
          for (int64_t j = 0; j < w; ++j)
            rows.push_back(((b * H + wi * w + i) * W) + wj * w + j);
  Tensor<S> g = gather_rows(x, rows, C);
  return reshape(g, {B * wh * ww, w * w, C});
}

// Inverse of window_partition.
template <class S>
Tensor<S> window_reverse(const Tensor<S>& xw, int64_t w, int64_t B, int64_t H, int64_t W) {
  int64_t C = xw.shape().back();
  int64_t wh = H / w, ww = W / w;
  if (xw.numel() != B * H * W * C)
    throw ShapeError("window_reverse: " + shape_str(xw.shape()) + " does not hold a " +
                     std::to_string(H) + "x" + std::to_string(W) + " map");
  // row index inside the windowed layout for each (b,i,j) site
  std::vector<int64_t> rows(static_cast<size_t>(B * H * W));
  int64_t r = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t wi = 0; wi < wh; ++wi)
      for (int64_t wj = 0; wj < ww; ++wj)
        for (int64_t i = 0; i < w; ++i)
          for (int64_t j = 0; j < w; ++j)
            rows[static_cast<size_t>(((b * H + wi * w + i) * W) + wj * w + j)] = r++;
  Tensor<S> g = gather_rows(xw, rows, C);
  return reshape(g, {B, H, W, C});
}

// Relative-offset index for an Mh x Mw token grid: entry (i,j) encodes the
// offset of token i from token j, shifted to [0, (2Mh-1)(2Mw-1)).
inline std::vector<int64_t> relative_position_index(int64_t mh, int64_t mw) {
  if (mh < 1 || mw < 1) throw GeometryError("relative_position_index: grid must be positive");
  int64_t m = mh * mw;
  std::vector<int64_t> idx(static_cast<size_t>(m * m));
  for (int64_t i = 0; i < m; ++i) {
    int64_t ri = i / mw, ci = i % mw;
    for (int64_t j = 0; j < m; ++j) {
      int64_t rj = j / mw, cj = j % mw;
      idx[static_cast<size_t>(i * m + j)] = (ri - rj + mh - 1) * (2 * mw - 1) + (ci - cj + mw - 1);
    }
  }
  return idx;
}

// Learnable per-head bias table plus a precomputed index; materializes the
// [heads, M2, N2] bias tensor added to the attention logits.
template <class S>
struct RelPosBias {
  Tensor<S> table;             // [(2Mh-1)*(2Mw-1), heads]
  std::vector<int64_t> index;  // [M2*N2] rows into the table
  int64_t m2 = 0, n2 = 0, heads = 0;

  RelPosBias() = default;
  RelPosBias(ParamStore<S>& ps, const std::string& name, int64_t table_rows,
             std::vector<int64_t> idx, int64_t m2_, int64_t n2_, int64_t heads_) :
      index(std::move(idx)), m2(m2_), n2(n2_), heads(heads_) {
    table = ps.create_trunc_normal(name + ".table", {table_rows, heads});
  }

  Tensor<S> bias() const {
    // bias[h, i, j] = table[index[i*n2+j], h]; gather rows of width `heads`
    // then swap the head axis to the front.
    Tensor<S> rows = gather_rows(table, index, heads);           // [m2*n2, heads]
    Tensor<S> cube = reshape(rows, {m2, n2, heads});
    return transpose(transpose(cube, 0, 2), 1, 2);               // [heads, m2, n2]
  }
};

// Scaled dot-product attention with additive bias: Softmax(Q K^T / sqrt(d) + B) V.
// Q: [..., M2, d], K,V: [..., N2, d], B: [..., M2, N2] trailing-broadcastable.
template <class S>
Tensor<S> attention_eq1(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                        const Tensor<S>& b) {
  int64_t d = q.shape().back();
  if (k.shape().back() != d || v.shape().back() != d)
    throw ShapeError("attention: head dims differ, q " + shape_str(q.shape()) + " k " +
                     shape_str(k.shape()) + " v " + shape_str(v.shape()));
  Tensor<S> logits = scale(matmul_nt(q, k), S(1) / static_cast<S>(std::sqrt(double(d))));
  if (b.shape().back() != logits.shape().back() ||
      b.shape()[b.ndim() - 2] != logits.shape()[logits.ndim() - 2])
    throw ShapeError("attention: bias " + shape_str(b.shape()) + " does not match logits " +
                     shape_str(logits.shape()));
  Tensor<S> a = softmax_lastdim(broadcast_add(logits, b));
  return matmul(a, v);
}

namespace detail {

// [G, T, 3C] fused qkv -> three [G*heads, T, d] tensors.
template <class S>
std::array<Tensor<S>, 3> split_qkv_heads(const Tensor<S>& qkv, int64_t heads) {
  int64_t G = qkv.size(0), T = qkv.size(1), c3 = qkv.size(2);
  int64_t C = c3 / 3, d = C / heads;
  std::array<Tensor<S>, 3> out;
  for (int64_t which = 0; which < 3; ++which) {
    std::vector<int64_t> rows;
    rows.reserve(static_cast<size_t>(G * heads * T));
    for (int64_t g = 0; g < G; ++g)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t t = 0; t < T; ++t)
          rows.push_back(((g * T + t) * 3 + which) * heads + h);
    out[static_cast<size_t>(which)] =
        reshape(gather_rows(qkv, rows, d), {G * heads, T, d});
  }
  return out;
}

// [G*heads, T, d] -> [G, T, C]
template <class S>
Tensor<S> merge_heads(const Tensor<S>& x, int64_t G, int64_t heads) {
  int64_t T = x.size(1), d = x.size(2);
  std::vector<int64_t> rows;
  rows.reserve(static_cast<size_t>(G * T * heads));
  for (int64_t g = 0; g < G; ++g)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t h = 0; h < heads; ++h) rows.push_back((g * heads + h) * T + t);
  return reshape(gather_rows(x, rows, d), {G, T, heads * d});
}

// [B, T, C] -> [B*heads, T, d]
template <class S>
Tensor<S> split_heads(const Tensor<S>& x, int64_t heads) {
  int64_t B = x.size(0), T = x.size(1), C = x.size(2);
  int64_t d = C / heads;
  std::vector<int64_t> rows;
  rows.reserve(static_cast<size_t>(B * heads * T));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < T; ++t) rows.push_back((b * T + t) * heads + h);
  return reshape(gather_rows(x, rows, d), {B * heads, T, d});
}

}  // namespace detail

// Window multi-head self-attention: fused qkv projection, per-head attention
// with shared relative position bias, output projection.
template <class S>
struct WindowMsaLayer {
  LinearLayer<S> qkv;   // C -> 3C
  LinearLayer<S> proj;  // C -> C
  RelPosBias<S> rel_pos_bias;
  int64_t num_heads = 1;
  int64_t window = 1;

  WindowMsaLayer() = default;
  WindowMsaLayer(ParamStore<S>& ps, const std::string& name, int64_t dim, int64_t heads,
                 int64_t window_size) :
      qkv(ps, name + ".qkv", dim, 3 * dim),
      proj(ps, name + ".proj", dim, dim),
      num_heads(heads),
      window(window_size) {
    if (dim % heads != 0)
      throw GeometryError("window msa: dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(heads));
    int64_t t = window_size * window_size;
    rel_pos_bias = RelPosBias<S>(ps, name + ".rel_pos",
                                 (2 * window_size - 1) * (2 * window_size - 1),
                                 relative_position_index(window_size, window_size), t, t, heads);
  }

  // x: [G, w*w, C] windowed tokens
  Tensor<S> forward(const Tensor<S>& x) const {
    int64_t G = x.size(0), T = x.size(1);
    auto [q, k, v] = detail::split_qkv_heads(qkv.forward(x), num_heads);
    int64_t d = q.shape().back();
    Tensor<S> logits = scale(matmul_nt(q, k), S(1) / static_cast<S>(std::sqrt(double(d))));
    logits = reshape(logits, {G, num_heads, T, T});
    Tensor<S> a = softmax_lastdim(broadcast_add(logits, rel_pos_bias.bias()));
    Tensor<S> o = matmul(reshape(a, {G * num_heads, T, T}), v);
    return proj.forward(detail::merge_heads(o, G, num_heads));
  }
};

// Pre-norm local block: x += DropPath(MSA(LN(x))); x += DropPath(MLP(LN(x))).
template <class S>
struct LocalBlock {
  LayerNorm<S> norm1;
  WindowMsaLayer<S> attn;
  LayerNorm<S> norm2;
  Mlp<S> mlp;
  S drop_path_rate = S(0);

  LocalBlock() = default;
  LocalBlock(ParamStore<S>& ps, const std::string& name, int64_t dim, int64_t heads,
             int64_t window, S dp_rate) :
      norm1(ps, name + ".norm1", dim),
      attn(ps, name + ".attn", dim, heads, window),
      norm2(ps, name + ".norm2", dim),
      mlp(ps, name + ".mlp", dim, kMlpRatio * dim),
      drop_path_rate(dp_rate) {}

  // x: [G, w*w, C]
  Tensor<S> forward(const Tensor<S>& x, bool training, std::mt19937_64* rng) const {
    S keep = S(1) - drop_path_rate;
    Tensor<S> y = drop_path(x, attn.forward(norm1.forward(x)), keep, training, rng);
    return drop_path(y, mlp.forward(norm2.forward(y)), keep, training, rng);
  }
};

}  // namespace moa
