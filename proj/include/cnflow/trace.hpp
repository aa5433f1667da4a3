#pragma once

#include <cstdio>
#include <string>
#include <utility>

#include "cnflow/errors.hpp"
#include "cnflow/graph.hpp"
#include "cnflow/net.hpp"
#include "cnflow/rng.hpp"
#include "cnflow/tensor.hpp"

namespace cnflow {

enum class TraceKind { kExact, kHutchinson, kBottleneck };
enum class NoiseKind { kGaussian, kRademacher };

inline TraceKind trace_kind_from_string(const std::string& s) {
  if (s == "exact") return TraceKind::kExact;
  if (s == "hutchinson") return TraceKind::kHutchinson;
  if (s == "bottleneck") return TraceKind::kBottleneck;
  throw ConfigError("unknown trace kind '" + s + "'");
}

inline NoiseKind noise_kind_from_string(const std::string& s) {
  if (s == "gaussian") return NoiseKind::kGaussian;
  if (s == "rademacher") return NoiseKind::kRademacher;
  throw ConfigError("unknown noise kind '" + s + "'");
}

inline const char* to_string(TraceKind k) {
  switch (k) {
    case TraceKind::kExact: return "exact";
    case TraceKind::kHutchinson: return "hutchinson";
    case TraceKind::kBottleneck: return "bottleneck";
  }
  return "?";
}

inline const char* to_string(NoiseKind k) {
  return k == NoiseKind::kGaussian ? "gaussian" : "rademacher";
}

/// How the Jacobian trace in the log-density dynamics is computed. The
/// noise tensor is drawn once per log-density call and reused by every
/// dynamics evaluation inside that solve.
struct TraceEstimatorSpec {
  TraceKind kind = TraceKind::kExact;
  NoiseKind noise = NoiseKind::kGaussian;
  Tensor epsilon;  // (batch, D) for hutchinson, (batch, H) for bottleneck

  void require_epsilon(std::size_t batch, std::size_t width) const {
    if (kind == TraceKind::kExact) return;
    if (epsilon.rank() != 2 || epsilon.rows() != batch || epsilon.cols() != width) {
      throw ShapeError("trace estimator: epsilon " + shape_str(epsilon) +
                       " does not match required (" + std::to_string(batch) + "," +
                       std::to_string(width) + ")");
    }
  }
};

inline Tensor sample_noise(NoiseKind kind, Rng& rng, std::vector<std::size_t> shape) {
  return kind == NoiseKind::kGaussian ? rng.normal_tensor(std::move(shape))
                                      : rng.rademacher_tensor(std::move(shape));
}

namespace detail {

inline Tensor basis_cotangent(std::size_t batch, std::size_t dim, std::size_t col) {
  std::vector<double> v(batch * dim, 0.0);
  for (std::size_t r = 0; r < batch; ++r) v[r * dim + col] = 1.0;
  return Tensor::from({batch, dim}, std::move(v));
}

inline void warn_wide_bottleneck(std::size_t h, std::size_t d) {
  static bool warned = false;
  if (!warned) {
    std::fprintf(stderr,
                 "warning: bottleneck trace with H=%zu >= D=%zu offers no variance "
                 "advantage over the plain estimator\n",
                 h, d);
    warned = true;
  }
}

}  // namespace detail

/// Evaluates f(z, t) together with the per-example Jacobian trace term.
/// `net` and `z` must live on `g`. With create_graph the returned trace can
/// be differentiated once more, which the adjoint pass needs.
///
/// Exact:      sum_i e_i^T (df/dz) e_i via one VJP per dimension.
/// Hutchinson: eps^T (df/dz) eps, unbiased for any zero-mean unit-covariance eps.
/// Bottleneck: eps^T (dh/dz)(dg/dh) eps with eps in the bottleneck width H,
///             an unbiased estimate of the same trace by the cyclic property.
inline std::pair<Tensor, Tensor> dynamics_with_trace(Graph& g, const DynamicsNet& net,
                                                     const Tensor& z, double t,
                                                     const TraceEstimatorSpec& spec,
                                                     bool create_graph) {
  const std::size_t batch = z.rows();
  const std::size_t dim = z.cols();
  const Tensor time = Tensor::scalar(t);

  if (spec.kind == TraceKind::kBottleneck) {
    if (!net.has_split()) {
      throw ConfigError("bottleneck trace requested on a network without a split point");
    }
    const std::size_t width = net.bottleneck_width();
    if (width >= dim) detail::warn_wide_bottleneck(width, dim);
    spec.require_epsilon(batch, width);
    Tensor hidden = net.forward_prefix(z, time);
    Tensor f = net.forward_suffix(hidden, time);
    Tensor left = g.vjp1(hidden, z, spec.epsilon, create_graph);  // eps^T dh/dz
    Tensor right = g.jvp(f, hidden, spec.epsilon);                // (dg/dh) eps
    return {f, sum_rows(mul(left, right))};
  }

  Tensor f = net.forward(z, time);
  if (spec.kind == TraceKind::kHutchinson) {
    spec.require_epsilon(batch, dim);
    Tensor vj = g.vjp1(f, z, spec.epsilon, create_graph);  // eps^T df/dz
    return {f, sum_rows(mul(vj, spec.epsilon))};
  }

  // Exact: one VJP per dimension, diagonal entries read off columnwise.
  Tensor trace;
  for (std::size_t i = 0; i < dim; ++i) {
    Tensor vj = g.vjp1(f, z, detail::basis_cotangent(batch, dim, i), create_graph);
    Tensor diag_i = sum_rows(slice_cols(vj, i, i + 1));
    trace = trace.empty() ? diag_i : add(trace, diag_i);
  }
  return {f, trace};
}

/// Exact Jacobian trace, batch of (B,) values; standalone entry point.
inline Tensor exact_trace(const DynamicsNet& net, const Tensor& z, double t) {
  Graph g;
  GraphScope scope(g);
  DynamicsNet anet = net.attached(g);
  Tensor zt = g.leaf(z.detached());
  TraceEstimatorSpec spec;
  spec.kind = TraceKind::kExact;
  auto [f, tr] = dynamics_with_trace(g, anet, zt, t, spec, false);
  return tr.detached();
}

/// One-draw Hutchinson estimate with caller-provided noise.
inline Tensor hutchinson_trace(const DynamicsNet& net, const Tensor& z, double t,
                               const Tensor& epsilon) {
  Graph g;
  GraphScope scope(g);
  DynamicsNet anet = net.attached(g);
  Tensor zt = g.leaf(z.detached());
  TraceEstimatorSpec spec;
  spec.kind = TraceKind::kHutchinson;
  spec.epsilon = epsilon;
  auto [f, tr] = dynamics_with_trace(g, anet, zt, t, spec, false);
  return tr.detached();
}

/// One-draw bottleneck estimate, noise in the bottleneck width.
inline Tensor bottleneck_trace(const DynamicsNet& net, const Tensor& z, double t,
                               const Tensor& epsilon_h) {
  Graph g;
  GraphScope scope(g);
  DynamicsNet anet = net.attached(g);
  Tensor zt = g.leaf(z.detached());
  TraceEstimatorSpec spec;
  spec.kind = TraceKind::kBottleneck;
  spec.epsilon = epsilon_h;
  auto [f, tr] = dynamics_with_trace(g, anet, zt, t, spec, false);
  return tr.detached();
}

}  // namespace cnflow
