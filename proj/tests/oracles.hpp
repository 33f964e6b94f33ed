#pragma once

// Test-only reference implementations, kept independent of the library's
// compute paths: plain scalar loops, long-double accumulation where the
// tolerance asks for it.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

// C[m,n] = sum_k A[m,k] B[k,n], naive triple loop.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  int64_t m, int64_t k, int64_t n) {
  std::vector<double> c(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (int64_t e = 0; e < k; ++e) s += a[i * k + e] * b[e * n + j];
      c[static_cast<size_t>(i * n + j)] = s;
    }
  return c;
}

// Direct softmax at extended precision.
inline std::vector<double> softmax(const std::vector<double>& x) {
  long double mx = x[0];
  for (double v : x) mx = std::max<long double>(mx, v);
  long double sum = 0;
  std::vector<long double> e(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    e[i] = expl(static_cast<long double>(x[i]) - mx);
    sum += e[i];
  }
  std::vector<double> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] = static_cast<double>(e[i] / sum);
  return y;
}

// x * Phi(x) with long-double erf.
inline double gelu(double x) {
  long double v = x;
  return static_cast<double>(v * 0.5L * (1.0L + erfl(v / sqrtl(2.0L))));
}

inline double normal_cdf(double x) {
  return static_cast<double>(0.5L * (1.0L + erfl(static_cast<long double>(x) / sqrtl(2.0L))));
}

// y = x W^T + b by explicit loops; x is [rows, in], W [out, in].
inline std::vector<double> linear(const std::vector<double>& x, const std::vector<double>& w,
                                  const std::vector<double>& b, int64_t rows, int64_t in,
                                  int64_t out) {
  std::vector<double> y(static_cast<size_t>(rows * out));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t o = 0; o < out; ++o) {
      double s = b[static_cast<size_t>(o)];
      for (int64_t i = 0; i < in; ++i) s += x[r * in + i] * w[o * in + i];
      y[static_cast<size_t>(r * out + o)] = s;
    }
  return y;
}

inline std::vector<double> random_vec(size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

}  // namespace oracle
