#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "cnflow/tensor.hpp"

namespace cnflow {

/// Deterministic random source. Uniform and normal draws are generated by
/// hand (not via std:: distributions) so that a seed produces the same
/// stream on every standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  /// +1 or -1 with equal probability.
  double rademacher() { return (engine_() & 1u) ? 1.0 : -1.0; }

  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(engine_() % n);
  }

  Tensor normal_tensor(std::vector<std::size_t> shape) {
    Tensor proto = Tensor::zeros(shape);
    std::vector<double> v(proto.size());
    for (double& x : v) x = normal();
    return Tensor::from(std::move(shape), std::move(v));
  }

  Tensor rademacher_tensor(std::vector<std::size_t> shape) {
    Tensor proto = Tensor::zeros(shape);
    std::vector<double> v(proto.size());
    for (double& x : v) x = rademacher();
    return Tensor::from(std::move(shape), std::move(v));
  }

  Tensor uniform_tensor(std::vector<std::size_t> shape, double lo, double hi) {
    Tensor proto = Tensor::zeros(shape);
    std::vector<double> v(proto.size());
    for (double& x : v) x = uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v));
  }

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = index(i);
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cnflow
