#pragma once

// Named, ordered store of trainable tensors. Each parameter is initialized
// from an RNG seeded by (global seed ^ hash(name)), so a parameter's initial
// value depends only on its name and the seed, not on how many other modules
// exist. Disabling a branch (e.g. the global attention module) leaves every
// remaining parameter bit-identical.

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "moa/errors.hpp"
#include "moa/tensor.hpp"

namespace moa {

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

template <class S>
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed = 42) : seed_(seed) {}

  Tensor<S> create_zeros(const std::string& name, Shape shape) {
    return add(name, Tensor<S>::zeros(std::move(shape)));
  }
  Tensor<S> create_ones(const std::string& name, Shape shape) {
    return add(name, Tensor<S>::full(std::move(shape), S(1)));
  }

  // Truncated normal, sigma 0.02, resampled beyond +-2 sigma.
  Tensor<S> create_trunc_normal(const std::string& name, Shape shape, double sigma = 0.02) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    std::mt19937_64 rng(seed_ ^ fnv1a(name));
    std::normal_distribution<double> n(0.0, sigma);
    for (S& v : t.mutable_values()) {
      double d;
      do {
        d = n(rng);
      } while (std::abs(d) > 2.0 * sigma);
      v = static_cast<S>(d);
    }
    return add(name, std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("param store: unknown parameter " + name);
    return items_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor<S>>>& items() const { return items_; }
  size_t size() const { return items_.size(); }

  int64_t scalar_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void clear_grads() {
    for (auto& [name, t] : items_) t.clear_grad();
  }

  uint64_t seed() const { return seed_; }

 private:
  Tensor<S> add(const std::string& name, Tensor<S> t) {
    if (index_.count(name)) throw ContractError("param store: duplicate parameter " + name);
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
  }

  uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<S>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace moa
