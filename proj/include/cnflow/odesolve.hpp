#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "cnflow/errors.hpp"
#include "cnflow/graph.hpp"
#include "cnflow/tensor.hpp"

namespace cnflow {

/// Embedded Runge-Kutta coefficients. The coupling matrix is lower
/// triangular; b holds the 5th-order weights and b_hat the embedded
/// 4th-order weights used for the error estimate.
struct ButcherTableau {
  std::size_t stages = 0;
  std::vector<double> c;
  std::vector<std::vector<double>> a;
  std::vector<double> b;
  std::vector<double> b_hat;
  bool first_same_as_last = false;

  static ButcherTableau dormand_prince();

  void validate(double tol = 1e-14) const {
    if (a.size() != stages || c.size() != stages || b.size() != stages ||
        b_hat.size() != stages) {
      throw ConfigError("ButcherTableau: inconsistent stage counts");
    }
    for (std::size_t i = 0; i < stages; ++i) {
      double row = 0.0;
      for (double v : a[i]) row += v;
      if (std::abs(row - c[i]) > tol) {
        throw ConfigError("ButcherTableau: row " + std::to_string(i) +
                          " of a does not sum to c");
      }
    }
    double sb = 0.0, sbh = 0.0;
    for (double v : b) sb += v;
    for (double v : b_hat) sbh += v;
    if (std::abs(sb - 1.0) > tol || std::abs(sbh - 1.0) > tol) {
      throw ConfigError("ButcherTableau: weights do not sum to one");
    }
  }
};

inline ButcherTableau ButcherTableau::dormand_prince() {
  ButcherTableau t;
  t.stages = 7;
  t.c = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
  t.a = {
      {},
      {1.0 / 5},
      {3.0 / 40, 9.0 / 40},
      {44.0 / 45, -56.0 / 15, 32.0 / 9},
      {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
      {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
      {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84},
  };
  t.b = {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84, 0.0};
  t.b_hat = {5179.0 / 57600, 0.0,           7571.0 / 16695, 393.0 / 640,
             -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};
  t.first_same_as_last = true;
  return t;
}

/// Embedded-pair step-size control. Error per step is kept below
/// atol + rtol * |y| componentwise via an RMS criterion.
struct StepController {
  double atol = 1e-6;
  double rtol = 1e-6;
  double safety = 0.9;
  double min_scale = 0.2;
  double max_scale = 10.0;
  double initial_step = 0.0;  // 0 = automatic, 0.01 * |t1 - t0|
  std::size_t max_steps = 1'000'000;

  void validate() const {
    if (!(atol > 0.0) || !(rtol > 0.0)) {
      throw ConfigError("StepController: tolerances must be positive");
    }
    if (!(min_scale > 0.0 && min_scale < 1.0 && max_scale > 1.0)) {
      throw ConfigError("StepController: step-scale clamps must satisfy 0 < min < 1 < max");
    }
  }
};

struct SolveResult {
  Tensor y;
  long nfe = 0;
  long accepted = 0;
  long rejected = 0;
  double final_step = 0.0;
};

using Dynamics = std::function<Tensor(const Tensor&, double)>;

namespace detail {

inline void check_dynamics_output(const Tensor& k, const Tensor& y0, const char* who) {
  if (!k.same_shape(y0)) {
    throw SolverError(std::string(who) + ": dynamics output shape " + shape_str(k) +
                      " does not match state shape " + shape_str(y0));
  }
}

}  // namespace detail

/// Adaptive Dormand-Prince 5(4) integration from t0 to t1 (either
/// direction). Combination arithmetic is never recorded on a graph; use
/// integrate_fixed_rk4 when the solve itself must be differentiated.
inline SolveResult integrate(const Dynamics& dynamics, const Tensor& y0, double t0,
                             double t1, const StepController& ctrl,
                             const ButcherTableau& tableau = ButcherTableau::dormand_prince()) {
  ctrl.validate();
  if (t0 == t1) {
    throw SolverError("integrate: t0 and t1 coincide");
  }
  if (!y0.all_finite()) {
    throw NumericError("integrate: non-finite initial state");
  }

  NoTrace silent;
  const std::size_t n = y0.size();
  const std::size_t s = tableau.stages;
  const double direction = t1 > t0 ? 1.0 : -1.0;
  const double span = std::abs(t1 - t0);

  std::vector<double> y = y0.to_vector();
  std::vector<std::vector<double>> k(s, std::vector<double>(n));
  std::vector<double> ystage(n), ynew(n);

  SolveResult result;
  auto eval = [&](const std::vector<double>& state, double t, std::vector<double>& out) {
    Tensor st = Tensor::from(y0.shape(), state);
    Tensor d = dynamics(st, t);
    detail::check_dynamics_output(d, y0, "integrate");
    if (!d.all_finite()) {
      throw NumericError("integrate: non-finite dynamics output at t=" + std::to_string(t));
    }
    auto dd = d.data();
    std::copy(dd.begin(), dd.end(), out.begin());
    ++result.nfe;
  };

  double t = t0;
  double h = (ctrl.initial_step > 0.0 ? ctrl.initial_step : 0.01 * span) * direction;
  const double h_floor = 1e-14 * std::max(span, 1.0);

  bool have_k0 = false;
  eval(y, t, k[0]);
  have_k0 = true;

  while (direction * (t1 - t) > 0.0) {
    bool last = false;
    if (std::abs(h) >= std::abs(t1 - t)) {
      h = t1 - t;
      last = true;
    }
    if (std::abs(h) < h_floor) {
      throw StiffnessError(
          "integrate: step size underflow at t=" + std::to_string(t) +
          "; the dynamics appear stiff (weight decay can help keep learned dynamics non-stiff)");
    }
    if (result.accepted >= static_cast<long>(ctrl.max_steps)) {
      throw StiffnessError("integrate: exceeded max accepted step count " +
                           std::to_string(ctrl.max_steps));
    }

    if (!have_k0) {
      eval(y, t, k[0]);
      have_k0 = true;
    }
    for (std::size_t stage = 1; stage < s; ++stage) {
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < stage; ++j) acc += tableau.a[stage][j] * k[j][i];
        ystage[i] = y[i] + h * acc;
      }
      eval(ystage, t + tableau.c[stage] * h, k[stage]);
    }

    double err_sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0, acc_err = 0.0;
      for (std::size_t j = 0; j < s; ++j) {
        acc += tableau.b[j] * k[j][i];
        acc_err += (tableau.b[j] - tableau.b_hat[j]) * k[j][i];
      }
      ynew[i] = y[i] + h * acc;
      const double tol_i =
          ctrl.atol + ctrl.rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
      const double e = h * acc_err / tol_i;
      err_sq += e * e;
    }
    const double err = std::sqrt(err_sq / static_cast<double>(n));

    double grow = err > 0.0 ? ctrl.safety * std::pow(err, -0.2) : ctrl.max_scale;
    grow = std::min(std::max(grow, ctrl.min_scale), ctrl.max_scale);

    if (err <= 1.0) {
      t = last ? t1 : t + h;
      y.swap(ynew);
      ++result.accepted;
      if (tableau.first_same_as_last) {
        k[0].swap(k[s - 1]);
      } else {
        have_k0 = false;
      }
      result.final_step = h;
      h *= grow;
    } else {
      ++result.rejected;
      h *= std::min(grow, 1.0);
      if (tableau.first_same_as_last) {
        // k[0] still belongs to the current y
      } else {
        have_k0 = false;
      }
    }
  }

  result.y = Tensor::from(y0.shape(), std::move(y));
  return result;
}

/// Classical fixed-step RK4. Traces onto the active graph, which is what
/// the unrolled-backprop gradient path relies on.
inline SolveResult integrate_fixed_rk4(const Dynamics& dynamics, const Tensor& y0,
                                       double t0, double t1, std::size_t n_steps) {
  if (n_steps < 1) {
    throw SolverError("integrate_fixed_rk4: n_steps must be at least 1");
  }
  if (!y0.all_finite()) {
    throw NumericError("integrate_fixed_rk4: non-finite initial state");
  }
  const double h = (t1 - t0) / static_cast<double>(n_steps);
  Tensor y = y0;
  SolveResult result;
  for (std::size_t step = 0; step < n_steps; ++step) {
    const double t = t0 + h * static_cast<double>(step);
    Tensor k1 = dynamics(y, t);
    detail::check_dynamics_output(k1, y0, "integrate_fixed_rk4");
    Tensor k2 = dynamics(add(y, scale(k1, h / 2)), t + h / 2);
    Tensor k3 = dynamics(add(y, scale(k2, h / 2)), t + h / 2);
    Tensor k4 = dynamics(add(y, scale(k3, h)), t + h);
    result.nfe += 4;
    Tensor incr = add(add(k1, k4), scale(add(k2, k3), 2.0));
    y = add(y, scale(incr, h / 6));
    ++result.accepted;
  }
  result.final_step = h;
  result.y = y;
  return result;
}

}  // namespace cnflow
