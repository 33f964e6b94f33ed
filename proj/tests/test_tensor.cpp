#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "moa/tensor.hpp"
#include "oracles.hpp"

using moa::Shape;
using moa::Tape;
using moa::Tensor;
using D = Tensor<double>;

TEST_CASE("matmul identity returns the operand exactly") {
  D eye = D::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  D m = D::from({3, 3}, {0.3, -1.7, 2.9, 4.1, 0.02, -5.3, 6.7, 7.01, -0.8});
  D out = moa::matmul(eye, m);
  for (int64_t i = 0; i < 9; ++i) CHECK(out.values()[i] == m.values()[i]);
}

TEST_CASE("matmul hand-computed 2x2") {
  D a = D::from({2, 2}, {1, 2, 3, 4});
  D b = D::from({2, 2}, {5, 6, 7, 8});
  D c = moa::matmul(a, b);
  CHECK(c.values()[0] == 19);
  CHECK(c.values()[1] == 22);
  CHECK(c.values()[2] == 43);
  CHECK(c.values()[3] == 50);
}

TEST_CASE("matmul matches the triple-loop oracle on random 7x5 x 5x3") {
  std::mt19937_64 rng(11);
  auto av = oracle::random_vec(35, rng);
  auto bv = oracle::random_vec(15, rng);
  auto expect = oracle::matmul(av, bv, 7, 5, 3);
  D c = moa::matmul(D::from({7, 5}, av), D::from({5, 3}, bv));
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK(std::abs(c.values()[i] - expect[i]) < 1e-12);
}

TEST_CASE("matmul batched against per-slice oracle, including shared rhs") {
  std::mt19937_64 rng(12);
  auto av = oracle::random_vec(2 * 4 * 3, rng);
  auto bv = oracle::random_vec(2 * 3 * 5, rng);
  D c = moa::matmul(D::from({2, 4, 3}, av), D::from({2, 3, 5}, bv));
  for (int64_t g = 0; g < 2; ++g) {
    auto ea = std::vector<double>(av.begin() + g * 12, av.begin() + (g + 1) * 12);
    auto eb = std::vector<double>(bv.begin() + g * 15, bv.begin() + (g + 1) * 15);
    auto expect = oracle::matmul(ea, eb, 4, 3, 5);
    for (int64_t i = 0; i < 20; ++i)
      CHECK(std::abs(c.values()[g * 20 + i] - expect[static_cast<size_t>(i)]) < 1e-12);
  }
  // one shared rhs across the batch
  auto shared = oracle::random_vec(3 * 5, rng);
  D c2 = moa::matmul(D::from({2, 4, 3}, av), D::from({3, 5}, shared));
  for (int64_t g = 0; g < 2; ++g) {
    auto ea = std::vector<double>(av.begin() + g * 12, av.begin() + (g + 1) * 12);
    auto expect = oracle::matmul(ea, shared, 4, 3, 5);
    for (int64_t i = 0; i < 20; ++i)
      CHECK(std::abs(c2.values()[g * 20 + i] - expect[static_cast<size_t>(i)]) < 1e-12);
  }
}

TEST_CASE("matmul_nt equals matmul against the transposed operand") {
  std::mt19937_64 rng(13);
  auto av = oracle::random_vec(4 * 3, rng);
  auto bv = oracle::random_vec(6 * 3, rng);
  std::vector<double> bt(3 * 6);
  for (int64_t i = 0; i < 6; ++i)
    for (int64_t j = 0; j < 3; ++j) bt[static_cast<size_t>(j * 6 + i)] = bv[i * 3 + j];
  auto expect = oracle::matmul(av, bt, 4, 3, 6);
  D c = moa::matmul_nt(D::from({4, 3}, av), D::from({6, 3}, bv));
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK(std::abs(c.values()[i] - expect[i]) < 1e-12);
}

TEST_CASE("matmul shape errors name both shapes") {
  D a = D::zeros({2, 3});
  D b = D::zeros({4, 2});
  CHECK_THROWS_WITH_AS(moa::matmul(a, b), doctest::Contains("[2x3]"), moa::ShapeError);
  CHECK_THROWS_AS(moa::matmul(D::zeros({2, 2, 3}), D::zeros({3, 3, 2})), moa::ShapeError);
}

TEST_CASE("softmax symmetry and analytic values") {
  D s = moa::softmax_lastdim(D::from({2}, {0.0, 0.0}));
  CHECK(s.values()[0] == doctest::Approx(0.5).epsilon(1e-15));
  D t = moa::softmax_lastdim(D::from({2}, {std::log(3.0), 0.0}));
  CHECK(std::abs(t.values()[0] - 0.75) < 1e-12);
  CHECK(std::abs(t.values()[1] - 0.25) < 1e-12);
}

TEST_CASE("softmax matches the extended-precision oracle on a random length-9 vector") {
  std::mt19937_64 rng(21);
  auto xv = oracle::random_vec(9, rng, 3.0);
  auto expect = oracle::softmax(xv);
  D y = moa::softmax_lastdim(D::from({9}, xv));
  for (size_t i = 0; i < 9; ++i) CHECK(std::abs(y.values()[i] - expect[i]) < 1e-12);
}

TEST_CASE("softmax rows sum to one and entries lie in (0,1]") {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    auto xv = oracle::random_vec(6 * 5, rng, 4.0);
    D y = moa::softmax_lastdim(D::from({6, 5}, xv));
    for (int64_t r = 0; r < 6; ++r) {
      double sum = 0;
      for (int64_t i = 0; i < 5; ++i) {
        double v = y.values()[r * 5 + i];
        CHECK(v > 0.0);
        CHECK(v <= 1.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax is invariant to a constant shift of one row") {
  std::mt19937_64 rng(23);
  auto xv = oracle::random_vec(7, rng);
  auto shifted = xv;
  for (double& v : shifted) v += 13.75;
  D a = moa::softmax_lastdim(D::from({7}, xv));
  D b = moa::softmax_lastdim(D::from({7}, shifted));
  for (size_t i = 0; i < 7; ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) < 1e-12);
}

TEST_CASE("backward of sum gives all-ones gradient") {
  D w = D::from({2, 3}, {1, -2, 3, 0.5, 4, -7});
  w.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(moa::sum_all(w));
  for (double g : w.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum of squares gives 2w") {
  D w = D::from({3}, {1, 2, 3});
  w.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(moa::sum_all(moa::mul(w, w)));
  CHECK(w.grad()[0] == doctest::Approx(2));
  CHECK(w.grad()[1] == doctest::Approx(4));
  CHECK(w.grad()[2] == doctest::Approx(6));
}

TEST_CASE("backward rejects non-scalar loss and double invocation") {
  D w = D::from({2}, {1.0, 2.0});
  w.set_requires_grad(true);
  Tape<double> tape;
  D y = moa::scale(w, 2.0);
  CHECK_THROWS_AS(tape.backward(y), moa::ContractError);
  D loss = moa::sum_all(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), moa::ContractError);
}

TEST_CASE("recording into a consumed tape is an error") {
  D w = D::from({2}, {1.0, 2.0});
  w.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(moa::sum_all(w));
  CHECK_THROWS_AS(moa::scale(w, 2.0), moa::ContractError);
}

TEST_CASE("gradients accumulate over reuse of the same tensor") {
  D w = D::from({2}, {3.0, 5.0});
  w.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(moa::sum_all(moa::add(w, w)));
  CHECK(w.grad()[0] == doctest::Approx(2));
  CHECK(w.grad()[1] == doctest::Approx(2));
}

TEST_CASE("broadcast_add adds the vector to each row") {
  D x = D::from({2, 3}, {1, 2, 3, 4, 5, 6});
  D b = D::from({3}, {10, 20, 30});
  D y = moa::broadcast_add(x, b);
  CHECK(y.values()[0] == 11);
  CHECK(y.values()[4] == 25);
  CHECK(y.values()[5] == 36);
  CHECK_THROWS_AS(moa::broadcast_add(x, D::zeros({2})), moa::ShapeError);
}

TEST_CASE("broadcast_add gradient sums over the broadcast dims") {
  D x = D::zeros({2, 3});
  D b = D::from({3}, {1, 2, 3});
  b.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(moa::sum_all(moa::broadcast_add(x, b)));
  for (double g : b.grad()) CHECK(g == doctest::Approx(2));
}

TEST_CASE("reshape preserves data and round-trips") {
  D x = D::from({2, 3}, {1, 2, 3, 4, 5, 6});
  D y = moa::reshape(moa::reshape(x, {3, 2}), {2, 3});
  for (int64_t i = 0; i < 6; ++i) CHECK(y.values()[i] == x.values()[i]);
  CHECK_THROWS_AS(moa::reshape(x, {4, 2}), moa::ShapeError);
}

TEST_CASE("transpose swaps axes and inverts itself") {
  D x = D::from({2, 3}, {1, 2, 3, 4, 5, 6});
  D t = moa::transpose(x, 0, 1);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at({0, 1}) == 4);
  CHECK(t.at({2, 0}) == 3);
  D back = moa::transpose(t, 0, 1);
  for (int64_t i = 0; i < 6; ++i) CHECK(back.values()[i] == x.values()[i]);
}

TEST_CASE("mean_over_axis matches hand arithmetic") {
  D x = D::from({2, 2}, {1, 3, 5, 7});
  D m0 = moa::mean_over_axis(x, 0);
  CHECK(m0.values()[0] == doctest::Approx(3));
  CHECK(m0.values()[1] == doctest::Approx(5));
  D m1 = moa::mean_over_axis(x, 1);
  CHECK(m1.values()[0] == doctest::Approx(2));
  CHECK(m1.values()[1] == doctest::Approx(6));
}

TEST_CASE("concat_lastdim stitches and splits gradients") {
  D a = D::from({2, 2}, {1, 2, 3, 4});
  D b = D::from({2, 1}, {9, 8});
  a.set_requires_grad(true);
  D c = [&] {
    Tape<double> tape;
    D c = moa::concat_lastdim(std::vector<D>{a, b});
    tape.backward(moa::sum_all(c));
    return c;
  }();
  CHECK(c.shape() == Shape{2, 3});
  CHECK(c.values()[2] == 9);
  CHECK(c.values()[5] == 8);
  for (double g : a.grad()) CHECK(g == 1.0);
}

TEST_CASE("gather_rows picks rows, zero-fills -1, and scatter-adds gradients") {
  D x = D::from({3, 2}, {1, 2, 3, 4, 5, 6});
  x.set_requires_grad(true);
  Tape<double> tape;
  D g = moa::gather_rows(x, {2, -1, 0, 2}, 2);
  CHECK(g.shape() == Shape{4, 2});
  CHECK(g.values()[0] == 5);
  CHECK(g.values()[2] == 0);
  CHECK(g.values()[3] == 0);
  CHECK(g.values()[4] == 1);
  tape.backward(moa::sum_all(g));
  CHECK(x.grad()[0] == 1);  // row 0 appears once
  CHECK(x.grad()[2] == 0);  // row 1 never gathered
  CHECK(x.grad()[4] == 2);  // row 2 appears twice
}

TEST_CASE("elementwise op gradients match central finite differences over 20 seeds") {
  auto fd_check = [](auto forward, Shape shape, uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto xv = oracle::random_vec(static_cast<size_t>(moa::shape_numel(shape)), rng);
    Shape out_shape = forward(D::from(shape, xv)).shape();
    auto wv = oracle::random_vec(static_cast<size_t>(moa::shape_numel(out_shape)), rng);
    D x = D::from(shape, xv);
    x.set_requires_grad(true);
    D w = D::from(out_shape, wv);
    {
      Tape<double> tape;
      tape.backward(moa::sum_all(moa::mul(forward(x), w)));
    }
    auto analytic = std::vector<double>(x.grad().begin(), x.grad().end());
    const double eps = 1e-5;
    for (size_t i = 0; i < xv.size(); ++i) {
      auto up = xv, down = xv;
      up[i] += eps;
      down[i] -= eps;
      double fu =
          moa::sum_all(moa::mul(forward(D::from(shape, up)), D::from(out_shape, wv))).item();
      double fd =
          moa::sum_all(moa::mul(forward(D::from(shape, down)), D::from(out_shape, wv))).item();
      double numeric = (fu - fd) / (2 * eps);
      double rel = std::abs(analytic[i] - numeric) /
                   std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      CHECK(rel < 1e-4);
    }
  };
  for (uint64_t seed = 0; seed < 20; ++seed) {
    fd_check([](const D& x) { return moa::softmax_lastdim(x); }, {2, 4}, 100 + seed);
    fd_check([](const D& x) { return moa::log_softmax_lastdim(x); }, {2, 4}, 200 + seed);
    fd_check([](const D& x) { return moa::scale(moa::mul(x, x), 0.5); }, {3, 3}, 300 + seed);
    fd_check([](const D& x) { return moa::mean_over_axis(x, 1); }, {2, 5}, 400 + seed);
    fd_check([](const D& x) { return moa::transpose(x, 0, 1); }, {3, 4}, 500 + seed);
    fd_check([](const D& x) { return moa::matmul_nt(x, x); }, {3, 3}, 600 + seed);
  }
}

TEST_CASE("no recording happens outside a tape") {
  D w = D::from({2}, {1.0, 2.0});
  w.set_requires_grad(true);
  D y = moa::scale(w, 3.0);  // no active tape
  CHECK(y.values()[1] == 6.0);
  CHECK_THROWS_AS((void)w.grad(), moa::ContractError);
}
