#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "moa/nn.hpp"
#include "moa/verify.hpp"
#include "oracles.hpp"

using moa::ParamStore;
using moa::Shape;
using moa::Tape;
using moa::Tensor;
using D = Tensor<double>;

TEST_CASE("linear with identity weight and zero bias is the identity") {
  D w = D::from({2, 2}, {1, 0, 0, 1});
  D b = D::zeros({2});
  D x = D::from({3, 2}, {1, 2, 3, 4, 5, 6});
  D y = moa::linear_forward(x, w, b);
  for (int64_t i = 0; i < 6; ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("linear hand-computed case") {
  D y = moa::linear_forward(D::from({2}, {1, 1}), D::from({1, 2}, {2, 3}), D::from({1}, {1}));
  CHECK(y.values()[0] == doctest::Approx(6));
}

TEST_CASE("linear matches the loop oracle on a random case") {
  std::mt19937_64 rng(31);
  auto xv = oracle::random_vec(6 * 5, rng);
  auto wv = oracle::random_vec(4 * 5, rng);
  auto bv = oracle::random_vec(4, rng);
  auto expect = oracle::linear(xv, wv, bv, 6, 5, 4);
  D y = moa::linear_forward(D::from({6, 5}, xv), D::from({4, 5}, wv), D::from({4}, bv));
  for (size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(y.values()[i] - expect[i]) < 1e-12);
  CHECK_THROWS_AS(
      moa::linear_forward(D::zeros({3, 4}), D::from({4, 5}, wv), D::from({4}, bv)),
      moa::ShapeError);
}

TEST_CASE("layernorm of a constant slice is all zeros") {
  D gamma = D::from({3}, {1, 1, 1});
  D beta = D::zeros({3});
  D y = moa::layernorm_forward(D::from({3}, {5, 5, 5}), gamma, beta, 1e-5);
  for (double v : y.values()) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("layernorm with zero gamma outputs beta everywhere") {
  D y = moa::layernorm_forward(D::from({2, 2}, {1, 9, -4, 2}), D::zeros({2}),
                               D::from({2}, {2.5, 2.5}), 1e-5);
  for (double v : y.values()) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("layernorm pre-affine slices have mean 0 and variance 1") {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 10; ++trial) {
    auto xv = oracle::random_vec(64, rng, 3.0);
    D y = moa::layernorm_forward(D::from({64}, xv), D::from({64}, std::vector<double>(64, 1.0)),
                                 D::zeros({64}), 1e-10);
    double mean = 0, var = 0;
    for (double v : y.values()) mean += v;
    mean /= 64;
    for (double v : y.values()) var += (v - mean) * (v - mean);
    var /= 64;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("gelu fixed points and high-precision oracle") {
  D y = moa::gelu(D::from({1}, {0.0}));
  CHECK(y.values()[0] == 0.0);
  D z = moa::gelu(D::from({1}, {5.0}));
  CHECK(std::abs(z.values()[0] - 5.0 * oracle::normal_cdf(5.0)) < 1e-6);
  // gelu(x) - x == gelu(-x), both sides against the oracle
  D p = moa::gelu(D::from({1}, {1.3}));
  D n = moa::gelu(D::from({1}, {-1.3}));
  CHECK(std::abs((p.values()[0] - 1.3) - n.values()[0]) < 1e-12);
  CHECK(std::abs(n.values()[0] - oracle::gelu(-1.3)) < 1e-12);
}

TEST_CASE("conv1x1 equals a per-pixel linear map") {
  std::mt19937_64 rng(33);
  ParamStore<double> ps(33);
  moa::LinearLayer<double> layer(ps, "w", 3, 4);
  auto xv = oracle::random_vec(2 * 4 * 4 * 3, rng);
  D x = D::from({2, 4, 4, 3}, xv);
  D y = moa::conv1x1(x, layer);
  CHECK(y.shape() == Shape{2, 4, 4, 4});
  // per-pixel loop oracle
  std::vector<double> wv(layer.weight.values().begin(), layer.weight.values().end());
  std::vector<double> bv(layer.bias.values().begin(), layer.bias.values().end());
  for (int64_t p = 0; p < 2 * 4 * 4; ++p) {
    std::vector<double> pix(xv.begin() + p * 3, xv.begin() + (p + 1) * 3);
    auto expect = oracle::linear(pix, wv, bv, 1, 3, 4);
    for (int64_t c = 0; c < 4; ++c)
      CHECK(std::abs(y.values()[p * 4 + c] - expect[static_cast<size_t>(c)]) < 1e-12);
  }
  // identity weights -> identity map
  moa::LinearLayer<double> id;
  ParamStore<double> ps2(1);
  id.weight = D::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  id.bias = D::zeros({3});
  D same = moa::conv1x1(x, id);
  for (size_t i = 0; i < xv.size(); ++i) CHECK(same.values()[i] == xv[i]);
}

TEST_CASE("drop_path is exact pass-through at keep_prob 1 and in eval mode") {
  std::mt19937_64 rng(34);
  D x = D::from({2, 3}, {1, 2, 3, 4, 5, 6});
  D r = D::from({2, 3}, {10, 20, 30, 40, 50, 60});
  D y = moa::drop_path(x, r, 1.0, true, &rng);
  for (int64_t i = 0; i < 6; ++i) CHECK(y.values()[i] == x.values()[i] + r.values()[i]);
  D z = moa::drop_path(x, r, 0.3, false, nullptr);
  for (int64_t i = 0; i < 6; ++i) CHECK(z.values()[i] == x.values()[i] + r.values()[i]);
  CHECK_THROWS_AS(moa::drop_path(x, r, 0.0, true, &rng), moa::ContractError);
  CHECK_THROWS_AS(moa::drop_path(x, r, -0.5, false, nullptr), moa::ContractError);
}

TEST_CASE("drop_path Monte-Carlo mean approaches x + residual") {
  std::mt19937_64 rng(35);
  D x = D::from({1, 2}, {1.0, -2.0});
  D r = D::from({1, 2}, {0.5, 4.0});
  const int trials = 100000;
  double sum0 = 0, sum1 = 0;
  for (int t = 0; t < trials; ++t) {
    D y = moa::drop_path(x, r, 0.8, true, &rng);
    sum0 += y.values()[0];
    sum1 += y.values()[1];
  }
  CHECK(std::abs(sum0 / trials - 1.5) < 0.01 * 1.5);
  CHECK(std::abs(sum1 / trials - 2.0) < 0.01 * 2.0);
}

TEST_CASE("layers pass finite-difference gradcheck on three random shapes") {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    std::mt19937_64 rng(seed);
    ParamStore<double> ps(seed);
    moa::LinearLayer<double> lin(ps, "lin", 4, 4);
    moa::LayerNorm<double> ln(ps, "ln", 4);
    moa::Mlp<double> mlp(ps, "mlp", 4, 8);
    D x = moa::detail::random_tensor<double>({2, 3, 4}, rng);
    x.set_requires_grad(true);
    auto loss_fn = [&]() {
      std::mt19937_64 pr(seed + 100);
      D h = mlp.forward(moa::gelu(lin.forward(ln.forward(x))));
      return moa::detail::probe_loss(h, pr);
    };
    std::vector<std::pair<std::string, D>> checked{{"x", x}};
    for (const auto& [name, t] : ps.items()) checked.emplace_back(name, t);
    auto report = moa::finite_diff_grad<double>(loss_fn, checked);
    INFO("worst rel err ", report.worst());
    CHECK(report.passed());
  }
}

TEST_CASE("drop_path gradient respects the sampled mask") {
  std::mt19937_64 rng(77);
  D x = moa::detail::random_tensor<double>({8, 3}, rng);
  D r = moa::detail::random_tensor<double>({8, 3}, rng);
  x.set_requires_grad(true);
  r.set_requires_grad(true);
  std::mt19937_64 dp_rng(5);
  Tape<double> tape;
  D y = moa::drop_path(x, r, 0.6, true, &dp_rng);
  tape.backward(moa::sum_all(y));
  // x always passes through; r's grad per row is 0 or 1/keep_prob
  for (double g : x.grad()) CHECK(g == 1.0);
  for (int64_t row = 0; row < 8; ++row) {
    double g = r.grad()[row * 3];
    CHECK((g == 0.0 || g == doctest::Approx(1.0 / 0.6)));
    double scale = y.values()[row * 3] - x.values()[row * 3];
    bool kept = std::abs(scale) > 1e-12;
    CHECK((kept ? g != 0.0 : g == 0.0));
  }
}
