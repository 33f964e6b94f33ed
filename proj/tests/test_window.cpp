#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "moa/verify.hpp"
#include "moa/window.hpp"
#include "oracles.hpp"

using moa::ParamStore;
using moa::Shape;
using moa::Tape;
using moa::Tensor;
using D = Tensor<double>;

namespace {

D random_map(Shape shape, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return moa::detail::random_tensor<double>(std::move(shape), rng);
}

}  // namespace

TEST_CASE("window_partition of a 4x4 map with window 4 is one raster-order window") {
  std::vector<double> v(16);
  std::iota(v.begin(), v.end(), 0.0);
  D x = D::from({1, 4, 4, 1}, v);
  D w = moa::window_partition(x, 4);
  CHECK(w.shape() == Shape{1, 16, 1});
  for (int64_t i = 0; i < 16; ++i) CHECK(w.values()[i] == double(i));
}

TEST_CASE("56x56 map with window 14 yields 16 windows per image") {
  D x = D::zeros({1, 56, 56, 2});
  D w = moa::window_partition(x, 14);
  CHECK(w.shape() == Shape{16, 196, 2});
}

TEST_CASE("window partition and reverse round-trip exactly") {
  D x = random_map({2, 8, 8, 3}, 41);
  D back = moa::window_reverse(moa::window_partition(x, 4), 4, 2, 8, 8);
  CHECK(back.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.values()[i] == x.values()[i]);
  CHECK_THROWS_AS(moa::window_partition(x, 3), moa::GeometryError);
}

TEST_CASE("relative_position_index enumeration properties") {
  CHECK(moa::relative_position_index(1, 1) == std::vector<int64_t>{0});

  auto idx = moa::relative_position_index(2, 2);
  REQUIRE(idx.size() == 16);
  std::set<int64_t> distinct(idx.begin(), idx.end());
  CHECK(distinct.size() == 9);
  for (int64_t i = 0; i < 4; ++i) CHECK(idx[static_cast<size_t>(i * 4 + i)] == idx[0]);

  // enumeration oracle over all coordinate pairs
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      int64_t dr = i / 2 - j / 2, dc = i % 2 - j % 2;
      CHECK(idx[static_cast<size_t>(i * 4 + j)] == (dr + 1) * 3 + (dc + 1));
    }

  // extreme offsets occur exactly once each
  auto idx35 = moa::relative_position_index(3, 5);
  int64_t max_index = (2 * 3 - 1) * (2 * 5 - 1) - 1;
  CHECK(std::count(idx35.begin(), idx35.end(), max_index) == 1);
  CHECK(std::count(idx35.begin(), idx35.end(), int64_t{0}) == 1);

  // antisymmetry: offsets negate when the pair swaps
  int64_t m = 15;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < m; ++j) {
      int64_t a = idx35[static_cast<size_t>(i * m + j)];
      int64_t b = idx35[static_cast<size_t>(j * m + i)];
      int64_t dra = a / 9 - 2, dca = a % 9 - 4;
      int64_t drb = b / 9 - 2, dcb = b % 9 - 4;
      CHECK(dra == -drb);
      CHECK(dca == -dcb);
    }
}

TEST_CASE("attention with zero logits averages the values") {
  D q = D::zeros({1, 1, 1});
  D k = D::zeros({1, 2, 1});
  D v = D::from({1, 2, 1}, {1, 3});
  D b = D::zeros({1, 1, 2});
  D out = moa::attention_eq1(q, k, v, b);
  CHECK(out.values()[0] == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("attention with bias ln3 weights values 0.75/0.25") {
  D q = D::zeros({1, 1, 1});
  D k = D::zeros({1, 2, 1});
  D v = D::from({1, 2, 1}, {1, 3});
  D b = D::from({1, 1, 2}, {std::log(3.0), 0.0});
  D out = moa::attention_eq1(q, k, v, b);
  CHECK(std::abs(out.values()[0] - 1.5) < 1e-12);
}

TEST_CASE("attention matches the naive loop oracle on random instances") {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 10; ++trial) {
    D q = moa::detail::random_tensor<double>({2, 4, 3}, rng);
    D k = moa::detail::random_tensor<double>({2, 6, 3}, rng);
    D v = moa::detail::random_tensor<double>({2, 6, 3}, rng);
    D b = moa::detail::random_tensor<double>({2, 4, 6}, rng);
    D fast = moa::attention_eq1(q, k, v, b);
    D slow = moa::naive_attention(q, k, v, b);
    for (int64_t i = 0; i < fast.numel(); ++i)
      CHECK(std::abs(fast.values()[i] - slow.values()[i]) < 1e-12);
  }
  CHECK_THROWS_AS(
      moa::attention_eq1(D::zeros({1, 2, 3}), D::zeros({1, 2, 4}), D::zeros({1, 2, 4}),
                         D::zeros({1, 2, 2})),
      moa::ShapeError);
}

TEST_CASE("attention weights per query sum to one for every head") {
  // recover each weight by attending over channel-0 one-hot value matrices
  std::mt19937_64 rng(44);
  D q = moa::detail::random_tensor<double>({3, 4, 5}, rng);
  D k = moa::detail::random_tensor<double>({3, 6, 5}, rng);
  D b = moa::detail::random_tensor<double>({3, 4, 6}, rng);
  std::vector<double> sums(3 * 4, 0.0);
  for (int64_t col = 0; col < 6; ++col) {
    std::vector<double> vv(3 * 6 * 5, 0.0);
    for (int64_t h = 0; h < 3; ++h) vv[static_cast<size_t>((h * 6 + col) * 5)] = 1.0;
    D v = D::from({3, 6, 5}, vv);
    D out = moa::attention_eq1(q, k, v, b);  // out[h,i,0] = weight(h,i,col)
    for (int64_t h = 0; h < 3; ++h)
      for (int64_t i = 0; i < 4; ++i) {
        double wgt = out.values()[(h * 4 + i) * 5];
        CHECK(wgt > 0.0);
        sums[static_cast<size_t>(h * 4 + i)] += wgt;
      }
  }
  for (double s : sums) CHECK(std::abs(s - 1.0) < 1e-12);
}

TEST_CASE("adding a constant to one query's logits row leaves its output unchanged") {
  std::mt19937_64 rng(45);
  D q = moa::detail::random_tensor<double>({2, 3, 4}, rng);
  D k = moa::detail::random_tensor<double>({2, 5, 4}, rng);
  D v = moa::detail::random_tensor<double>({2, 5, 4}, rng);
  std::vector<double> bv(2 * 3 * 5, 0.0);
  D b0 = D::from({2, 3, 5}, bv);
  for (int64_t j = 0; j < 5; ++j) bv[static_cast<size_t>(1 * 3 * 5 + 1 * 5 + j)] += 7.3;
  D b1 = D::from({2, 3, 5}, bv);
  D o0 = moa::attention_eq1(q, k, v, b0);
  D o1 = moa::attention_eq1(q, k, v, b1);
  for (int64_t i = 0; i < o0.numel(); ++i) CHECK(std::abs(o0.values()[i] - o1.values()[i]) < 1e-12);
}

TEST_CASE("local block with zero-weight branches is the identity") {
  ParamStore<double> ps(46);
  moa::LocalBlock<double> block(ps, "b", 8, 2, 2, 0.0);
  for (const auto& [name, t] : ps.items()) {
    if (name.find("norm") != std::string::npos) continue;  // keep LN affine defaults
    if (name.find("rel_pos") != std::string::npos) continue;
    D handle = t;
    for (auto& v : handle.mutable_values()) v = 0.0;
  }
  D x = random_map({2, 4, 8}, 47);
  D y = block.forward(x, false, nullptr);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("single-token window reduces attention to the value path") {
  ParamStore<double> ps(48);
  moa::WindowMsaLayer<double> msa(ps, "m", 4, 2, 1);
  D x = random_map({1, 1, 4}, 49);
  D y = msa.forward(x);
  // with one token softmax weight is 1, so output = proj(v(x)) by hand
  std::vector<double> xv(x.values().begin(), x.values().end());
  std::vector<double> wq(msa.qkv.weight.values().begin(), msa.qkv.weight.values().end());
  std::vector<double> bq(msa.qkv.bias.values().begin(), msa.qkv.bias.values().end());
  auto qkv = oracle::linear(xv, wq, bq, 1, 4, 12);
  std::vector<double> vpart(qkv.begin() + 8, qkv.end());  // heads interleave, v block is last
  // head h of v is qkv[8 + h*2 .. ]; concatenation restores channel order
  std::vector<double> wp(msa.proj.weight.values().begin(), msa.proj.weight.values().end());
  std::vector<double> bp(msa.proj.bias.values().begin(), msa.proj.bias.values().end());
  auto expect = oracle::linear(vpart, wp, bp, 1, 4, 4);
  for (int64_t i = 0; i < 4; ++i) CHECK(std::abs(y.values()[i] - expect[static_cast<size_t>(i)]) < 1e-12);
}

TEST_CASE("two windows share the same bias table entries") {
  ParamStore<double> ps(50);
  moa::WindowMsaLayer<double> msa(ps, "m", 4, 1, 2);
  // zero projections so attention weights come from the bias alone
  for (auto& v : msa.qkv.weight.mutable_values()) v = 0.0;
  for (auto& v : msa.qkv.bias.mutable_values()) v = 0.0;
  // make v pass channel 0 through: v block of qkv outputs constant per token?
  // instead give each window distinct values and check identical weights via
  // identical outputs after removing the value difference
  D x = random_map({2, 4, 4}, 51);
  D bias = msa.rel_pos_bias.bias();
  CHECK(bias.shape() == Shape{1, 4, 4});
  // with q=k=0 the attention weights equal softmax(bias) for every window;
  // feed one-hot values through a fresh layer where v is identity
  ParamStore<double> ps2(52);
  moa::WindowMsaLayer<double> msa2(ps2, "m", 4, 1, 2);
  for (auto& v : msa2.qkv.weight.mutable_values()) v = 0.0;
  for (auto& v : msa2.qkv.bias.mutable_values()) v = 0.0;
  auto wvals = msa2.qkv.weight.mutable_values();
  for (int64_t c = 0; c < 4; ++c) wvals[(8 + c) * 4 + c] = 1.0;  // v = x
  for (auto& v : msa2.proj.bias.mutable_values()) v = 0.0;
  auto pvals = msa2.proj.weight.mutable_values();
  for (auto& v : pvals) v = 0.0;
  for (int64_t c = 0; c < 4; ++c) pvals[c * 4 + c] = 1.0;  // proj = identity
  D y = msa2.forward(x);
  // expected: softmax(bias row) blending the window's tokens, same weights both windows
  D sb = moa::softmax_lastdim(msa2.rel_pos_bias.bias());
  for (int64_t g = 0; g < 2; ++g)
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t c = 0; c < 4; ++c) {
        double expect = 0;
        for (int64_t j = 0; j < 4; ++j)
          expect += sb.values()[i * 4 + j] * x.values()[(g * 4 + j) * 4 + c];
        CHECK(std::abs(y.values()[(g * 4 + i) * 4 + c] - expect) < 1e-12);
      }
}

TEST_CASE("window locality: perturbing a pixel only changes its own window") {
  ParamStore<double> ps(53);
  moa::LocalBlock<double> block(ps, "b", 6, 2, 2, 0.0);
  D x = random_map({1, 4, 4, 6}, 54);
  D xw = moa::window_partition(x, 2);
  D y = moa::window_reverse(block.forward(xw, false, nullptr), 2, 1, 4, 4);
  // perturb pixel (0,0), in window 0
  std::vector<double> xv(x.values().begin(), x.values().end());
  xv[0] += 0.5;
  D x2 = D::from({1, 4, 4, 6}, xv);
  D y2 = moa::window_reverse(block.forward(moa::window_partition(x2, 2), false, nullptr), 2, 1, 4, 4);
  bool changed_inside = false;
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      bool same_window = i < 2 && j < 2;
      for (int64_t c = 0; c < 6; ++c) {
        double diff = std::abs(y.at({0, i, j, c}) - y2.at({0, i, j, c}));
        if (same_window && diff > 0) changed_inside = true;
        if (!same_window) CHECK(diff == 0.0);
      }
    }
  CHECK(changed_inside);
}

TEST_CASE("local block gradcheck on a 2-window, C=8, heads=2 instance") {
  ParamStore<double> ps(55);
  moa::LocalBlock<double> block(ps, "b", 8, 2, 2, 0.0);
  std::mt19937_64 rng(56);
  D x = moa::detail::random_tensor<double>({2, 4, 8}, rng);
  x.set_requires_grad(true);
  auto loss_fn = [&]() {
    std::mt19937_64 pr(57);
    return moa::detail::probe_loss(block.forward(x, false, nullptr), pr);
  };
  std::vector<std::pair<std::string, D>> checked{{"x", x}};
  for (const auto& [name, t] : ps.items()) checked.emplace_back(name, t);
  auto report = moa::finite_diff_grad<double>(loss_fn, checked);
  INFO("worst rel err ", report.worst());
  CHECK(report.passed());
}
