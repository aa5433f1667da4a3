#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "cnflow/errors.hpp"
#include "cnflow/rng.hpp"
#include "cnflow/tensor.hpp"

namespace cnflow {

// ---------------------------------------------------------------------------
// Synthetic 2D families. Geometry constants are fixed here; each mixture
// family has a closed-form density used as the training oracle.
// ---------------------------------------------------------------------------

enum class ToyFamily {
  kTwoGaussians,       // modes at (+-2, 0), std 0.5
  kEightGaussiansRing, // eight modes on a radius-2.5 ring, std 0.25
  kCheckerboard,       // uniform over the dark cells of a 4x4 board on [-4,4]^2
  kTwoCircles,         // radii 1.0 and 2.5 with radial noise 0.1
  kSpiral,             // one arm, radius growing to 2.75, noise 0.1
};

inline ToyFamily toy_family_from_string(const std::string& s) {
  if (s == "two_gaussians") return ToyFamily::kTwoGaussians;
  if (s == "eight_gaussians_ring") return ToyFamily::kEightGaussiansRing;
  if (s == "checkerboard") return ToyFamily::kCheckerboard;
  if (s == "two_circles") return ToyFamily::kTwoCircles;
  if (s == "spiral") return ToyFamily::kSpiral;
  throw ConfigError("unknown toy family '" + s + "'");
}

inline const char* to_string(ToyFamily f) {
  switch (f) {
    case ToyFamily::kTwoGaussians: return "two_gaussians";
    case ToyFamily::kEightGaussiansRing: return "eight_gaussians_ring";
    case ToyFamily::kCheckerboard: return "checkerboard";
    case ToyFamily::kTwoCircles: return "two_circles";
    case ToyFamily::kSpiral: return "spiral";
  }
  return "?";
}

struct Toy2DSpec {
  ToyFamily family = ToyFamily::kTwoGaussians;
  double noise = 1.0;  // multiplies the family's base noise scale
  std::uint64_t seed = 0;
};

namespace toyconst {
inline constexpr double kTwoGaussStd = 0.5;
inline constexpr double kRingRadius = 2.5;
inline constexpr double kRingStd = 0.25;
inline constexpr double kBoardHalf = 4.0;  // board spans [-4, 4]^2
inline constexpr double kCellSize = 2.0;
inline constexpr double kCircleR1 = 1.0;
inline constexpr double kCircleR2 = 2.5;
inline constexpr double kCircleStd = 0.1;
inline constexpr double kSpiralStd = 0.1;
}  // namespace toyconst

inline Tensor generate_toy(const Toy2DSpec& spec, std::size_t n) {
  if (n < 1) throw DataError("generate_toy: n must be at least 1");
  Rng rng(spec.seed);
  std::vector<double> out(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0.0, y = 0.0;
    switch (spec.family) {
      case ToyFamily::kTwoGaussians: {
        const double mx = (rng.next_u64() & 1u) ? 2.0 : -2.0;
        const double s = toyconst::kTwoGaussStd * spec.noise;
        x = mx + s * rng.normal();
        y = s * rng.normal();
        break;
      }
      case ToyFamily::kEightGaussiansRing: {
        const std::size_t k = rng.index(8);
        const double ang = 2.0 * M_PI * static_cast<double>(k) / 8.0;
        const double s = toyconst::kRingStd * spec.noise;
        x = toyconst::kRingRadius * std::cos(ang) + s * rng.normal();
        y = toyconst::kRingRadius * std::sin(ang) + s * rng.normal();
        break;
      }
      case ToyFamily::kCheckerboard: {
        // Cells (i, j) with i + j even are support; eight of sixteen.
        std::size_t cell = rng.index(8);
        std::size_t ci = 0, cj = 0, seen = 0;
        for (std::size_t i = 0; i < 4 && seen <= cell; ++i) {
          for (std::size_t j = 0; j < 4 && seen <= cell; ++j) {
            if ((i + j) % 2 == 0) {
              ci = i;
              cj = j;
              ++seen;
            }
          }
        }
        x = -toyconst::kBoardHalf + toyconst::kCellSize * (static_cast<double>(ci) + rng.uniform());
        y = -toyconst::kBoardHalf + toyconst::kCellSize * (static_cast<double>(cj) + rng.uniform());
        break;
      }
      case ToyFamily::kTwoCircles: {
        const double r0 = (rng.next_u64() & 1u) ? toyconst::kCircleR1 : toyconst::kCircleR2;
        const double ang = 2.0 * M_PI * rng.uniform();
        const double r = r0 + toyconst::kCircleStd * spec.noise * rng.normal();
        x = r * std::cos(ang);
        y = r * std::sin(ang);
        break;
      }
      case ToyFamily::kSpiral: {
        const double u = rng.uniform();
        const double ang = 3.0 * M_PI * std::sqrt(u);
        const double r = 2.75 * std::sqrt(u);
        x = r * std::cos(ang) + toyconst::kSpiralStd * spec.noise * rng.normal();
        y = r * std::sin(ang) + toyconst::kSpiralStd * spec.noise * rng.normal();
        break;
      }
    }
    out[i * 2] = x;
    out[i * 2 + 1] = y;
  }
  return Tensor::from({n, 2}, std::move(out));
}

inline bool toy_has_oracle(ToyFamily f) {
  return f == ToyFamily::kTwoGaussians || f == ToyFamily::kEightGaussiansRing ||
         f == ToyFamily::kCheckerboard;
}

inline bool checkerboard_contains(double x, double y) {
  const double h = toyconst::kBoardHalf;
  if (x < -h || x >= h || y < -h || y >= h) return false;
  const int i = static_cast<int>(std::floor((x + h) / toyconst::kCellSize));
  const int j = static_cast<int>(std::floor((y + h) / toyconst::kCellSize));
  return (i + j) % 2 == 0;
}

/// Exact log-density of the generating distribution; -inf outside the
/// checkerboard support. Families without a closed form are rejected.
inline double toy_true_logdensity(const Toy2DSpec& spec, double x, double y) {
  auto log_normal2 = [](double dx, double dy, double s) {
    return -0.5 * (dx * dx + dy * dy) / (s * s) - std::log(2.0 * M_PI * s * s);
  };
  auto logsumexp = [](const std::vector<double>& v) {
    double m = v[0];
    for (double t : v) m = std::max(m, t);
    double acc = 0.0;
    for (double t : v) acc += std::exp(t - m);
    return m + std::log(acc);
  };
  switch (spec.family) {
    case ToyFamily::kTwoGaussians: {
      const double s = toyconst::kTwoGaussStd * spec.noise;
      std::vector<double> comps = {std::log(0.5) + log_normal2(x - 2.0, y, s),
                                   std::log(0.5) + log_normal2(x + 2.0, y, s)};
      return logsumexp(comps);
    }
    case ToyFamily::kEightGaussiansRing: {
      const double s = toyconst::kRingStd * spec.noise;
      std::vector<double> comps;
      for (std::size_t k = 0; k < 8; ++k) {
        const double ang = 2.0 * M_PI * static_cast<double>(k) / 8.0;
        comps.push_back(std::log(0.125) +
                        log_normal2(x - toyconst::kRingRadius * std::cos(ang),
                                    y - toyconst::kRingRadius * std::sin(ang), s));
      }
      return logsumexp(comps);
    }
    case ToyFamily::kCheckerboard: {
      if (!checkerboard_contains(x, y)) return -std::numeric_limits<double>::infinity();
      // Eight cells of area 4: density 1/32 on the support.
      return -std::log(32.0);
    }
    default:
      throw DataError(std::string("no closed-form density for family ") +
                      to_string(spec.family));
  }
}

/// Mean oracle negative log-likelihood over a sample, in nats.
inline double toy_oracle_nll(const Toy2DSpec& spec, const Tensor& xs) {
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.rows(); ++i) {
    acc -= toy_true_logdensity(spec, xs.at(i, 0), xs.at(i, 1));
  }
  return acc / static_cast<double>(xs.rows());
}

// ---------------------------------------------------------------------------
// Tabular CSV pipeline
// ---------------------------------------------------------------------------

/// Standardized train/val/test splits with the train statistics retained so
/// new points can be mapped both ways.
struct TabularDataset {
  std::string name;
  std::size_t dim = 0;
  Tensor train, val, test;  // standardized
  std::vector<double> mean, stddev;

  Tensor standardize(const Tensor& x) const {
    std::vector<double> out(x.size());
    auto xd = x.data();
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < dim; ++c) {
        out[r * dim + c] = (xd[r * dim + c] - mean[c]) / stddev[c];
      }
    }
    return Tensor::from(x.shape(), std::move(out));
  }

  Tensor unstandardize(const Tensor& x) const {
    std::vector<double> out(x.size());
    auto xd = x.data();
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < dim; ++c) {
        out[r * dim + c] = xd[r * dim + c] * stddev[c] + mean[c];
      }
    }
    return Tensor::from(x.shape(), std::move(out));
  }

  /// Additive NLL correction from standardized to original units.
  double log_std_sum() const {
    double s = 0.0;
    for (double v : stddev) s += std::log(v);
    return s;
  }
};

namespace detail {

inline Tensor rows_subset(const std::vector<std::vector<double>>& rows,
                          const std::vector<std::size_t>& order, std::size_t begin,
                          std::size_t end, std::size_t dim) {
  std::vector<double> out((end - begin) * dim);
  for (std::size_t i = begin; i < end; ++i) {
    const auto& r = rows[order[i]];
    std::copy(r.begin(), r.end(), out.begin() + static_cast<std::ptrdiff_t>((i - begin) * dim));
  }
  return Tensor::from({end - begin, dim}, std::move(out));
}

}  // namespace detail

/// Loads a rectangular numeric CSV (optional single header line), shuffles
/// rows with the seed, splits by the given ratios, and standardizes every
/// split with statistics computed on the train portion only.
inline TabularDataset load_csv(const std::string& path, std::array<double, 3> ratios,
                               std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw DataError("load_csv: cannot open " + path);

  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  std::size_t dim = 0;
  bool maybe_header = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        double v = std::stod(cell, &used);
        while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
        if (used != cell.size()) throw std::invalid_argument(cell);
        row.push_back(v);
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (!numeric) {
      if (maybe_header && rows.empty()) {
        maybe_header = false;  // single header line allowed
        continue;
      }
      throw DataError("load_csv: non-numeric cell at line " + std::to_string(line_no));
    }
    if (dim == 0) dim = row.size();
    if (row.size() != dim) {
      throw DataError("load_csv: ragged row at line " + std::to_string(line_no) + " (got " +
                      std::to_string(row.size()) + " cells, expected " +
                      std::to_string(dim) + ")");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("load_csv: no data rows in " + path);

  const double rsum = ratios[0] + ratios[1] + ratios[2];
  if (!(ratios[0] > 0.0) || rsum <= 0.0) {
    throw ConfigError("load_csv: split ratios must be positive with a train portion");
  }

  Rng rng(seed);
  std::vector<std::size_t> order = rng.permutation(rows.size());
  const std::size_t n = rows.size();
  std::size_t n_train = static_cast<std::size_t>(std::round(ratios[0] / rsum * n));
  std::size_t n_val = static_cast<std::size_t>(std::round(ratios[1] / rsum * n));
  n_train = std::max<std::size_t>(1, std::min(n_train, n));
  n_val = std::min(n_val, n - n_train);

  TabularDataset ds;
  ds.name = path;
  ds.dim = dim;
  Tensor train_raw = detail::rows_subset(rows, order, 0, n_train, dim);
  Tensor val_raw = detail::rows_subset(rows, order, n_train, n_train + n_val, dim);
  Tensor test_raw = detail::rows_subset(rows, order, n_train + n_val, n, dim);

  ds.mean.assign(dim, 0.0);
  ds.stddev.assign(dim, 0.0);
  auto td = train_raw.data();
  for (std::size_t r = 0; r < train_raw.rows(); ++r) {
    for (std::size_t c = 0; c < dim; ++c) ds.mean[c] += td[r * dim + c];
  }
  for (double& m : ds.mean) m /= static_cast<double>(n_train);
  for (std::size_t r = 0; r < train_raw.rows(); ++r) {
    for (std::size_t c = 0; c < dim; ++c) {
      const double d = td[r * dim + c] - ds.mean[c];
      ds.stddev[c] += d * d;
    }
  }
  for (std::size_t c = 0; c < dim; ++c) {
    ds.stddev[c] = std::sqrt(ds.stddev[c] / static_cast<double>(n_train));
    if (!(ds.stddev[c] > 0.0)) {
      throw DataError("load_csv: column " + std::to_string(c) +
                      " is constant on the train split; cannot standardize");
    }
  }

  ds.train = ds.standardize(train_raw);
  ds.val = ds.standardize(val_raw);
  ds.test = ds.standardize(test_raw);
  return ds;
}

// ---------------------------------------------------------------------------
// Minibatching
// ---------------------------------------------------------------------------

/// Epoch-permutation batcher: every index appears exactly once per epoch.
/// Full-batch consumers see the stored order so that repeated epochs are
/// bitwise stable.
class Batcher {
 public:
  Batcher(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : n_(n), batch_(std::min(batch_size, n)), rng_(seed) {
    if (n == 0) throw DataError("Batcher: empty dataset");
    if (batch_size == 0) throw ConfigError("Batcher: batch size must be positive");
    start_epoch();
  }

  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const { return (n_ + batch_ - 1) / batch_; }

  std::vector<std::size_t> next() {
    if (cursor_ >= n_) start_epoch();
    const std::size_t end = std::min(cursor_ + batch_, n_);
    std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    return idx;
  }

  static Tensor gather(const Tensor& data, const std::vector<std::size_t>& idx) {
    const std::size_t d = data.cols();
    std::vector<double> out(idx.size() * d);
    auto dd = data.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(dd.data() + idx[i] * d, d, out.data() + i * d);
    }
    return Tensor::from({idx.size(), d}, std::move(out));
  }

 private:
  void start_epoch() {
    if (batch_ >= n_) {
      order_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    } else {
      order_ = rng_.permutation(n_);
    }
    cursor_ = 0;
    ++epoch_;
  }

  std::size_t n_;
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

}  // namespace cnflow
