#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "cnflow/rng.hpp"
#include "cnflow/tensor.hpp"

namespace testutil {

/// Fixed 6-D correlated Gaussian used by the tabular smoke pipeline. The
/// Cholesky factor and mean are constants so the analytic density is exact.
struct CorrelatedGaussian6 {
  static constexpr std::size_t kDim = 6;

  // Lower-triangular Cholesky factor with moderate conditioning.
  static const std::vector<double>& chol() {
    static const std::vector<double> l = {
        1.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        0.6, 0.9, 0.0, 0.0, 0.0, 0.0,
        -0.4, 0.3, 1.2, 0.0, 0.0, 0.0,
        0.2, -0.5, 0.4, 0.8, 0.0, 0.0,
        0.1, 0.2, -0.3, 0.5, 1.1, 0.0,
        -0.2, 0.1, 0.2, -0.4, 0.3, 0.7,
    };
    return l;
  }

  static const std::vector<double>& mean() {
    static const std::vector<double> m = {1.5, -2.0, 0.5, 3.0, -1.0, 0.25};
    return m;
  }

  static cnflow::Tensor sample(std::size_t n, std::uint64_t seed) {
    cnflow::Rng rng(seed);
    const auto& l = chol();
    const auto& mu = mean();
    std::vector<double> out(n * kDim);
    std::vector<double> eps(kDim);
    for (std::size_t r = 0; r < n; ++r) {
      for (double& e : eps) e = rng.normal();
      for (std::size_t i = 0; i < kDim; ++i) {
        double acc = mu[i];
        for (std::size_t j = 0; j <= i; ++j) acc += l[i * kDim + j] * eps[j];
        out[r * kDim + i] = acc;
      }
    }
    return cnflow::Tensor::from({n, kDim}, std::move(out));
  }

  /// Exact log-density of one row under the generating distribution.
  static double log_density(const double* x) {
    const auto& l = chol();
    const auto& mu = mean();
    // Forward substitution: solve L u = (x - mu).
    double u[kDim];
    double quad = 0.0, logdet = 0.0;
    for (std::size_t i = 0; i < kDim; ++i) {
      double acc = x[i] - mu[i];
      for (std::size_t j = 0; j < i; ++j) acc -= l[i * kDim + j] * u[j];
      u[i] = acc / l[i * kDim + i];
      quad += u[i] * u[i];
      logdet += std::log(l[i * kDim + i]);
    }
    return -0.5 * quad - 0.5 * kDim * std::log(2.0 * M_PI) - logdet;
  }

  static double mean_nll(const cnflow::Tensor& rows) {
    double acc = 0.0;
    for (std::size_t r = 0; r < rows.rows(); ++r) {
      acc -= log_density(rows.data().data() + r * kDim);
    }
    return acc / static_cast<double>(rows.rows());
  }

  static void write_csv(const std::string& path, std::size_t n, std::uint64_t seed) {
    cnflow::Tensor rows = sample(n, seed);
    std::ofstream out(path);
    out.precision(17);
    out << "c0,c1,c2,c3,c4,c5\n";
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < kDim; ++c) out << (c ? "," : "") << rows.at(r, c);
      out << "\n";
    }
  }
};

}  // namespace testutil
