#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cnflow/errors.hpp"
#include "cnflow/graph.hpp"
#include "cnflow/net.hpp"
#include "cnflow/odesolve.hpp"
#include "cnflow/parallel.hpp"
#include "cnflow/rng.hpp"
#include "cnflow/tensor.hpp"
#include "cnflow/trace.hpp"

namespace cnflow {

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// log N(z; 0, I) per row: (B, D) -> (B,).
inline Tensor base_log_density(const Tensor& z) {
  const double c = -0.5 * static_cast<double>(z.cols()) * kLog2Pi;
  return add_scalar(scale(sum_rows(mul(z, z)), -0.5), c);
}

/// State z(t) paired with the accumulated log-density change of Eq-style
/// augmented dynamics; batch-major.
struct AugmentedState {
  Tensor z;           // (B, D)
  Tensor delta_logp;  // (B,)

  void validate() const {
    if (z.rank() != 2 || delta_logp.rank() != 1 || z.rows() != delta_logp.size()) {
      throw ShapeError("AugmentedState: z " + shape_str(z) + " and delta_logp " +
                       shape_str(delta_logp) + " disagree");
    }
    if (!z.all_finite() || !delta_logp.all_finite()) {
      throw NumericError("AugmentedState: non-finite values");
    }
  }
};

struct Flow {
  DynamicsNet net;
  double t0 = 0.0;
  double t1 = 1.0;
};

/// A stack of continuous flows over a standard Gaussian base. Sampling
/// integrates base noise forward through every flow; density evaluation
/// integrates data backwards while accumulating the trace integral.
struct CNFModel {
  std::vector<Flow> flows;
  StepController controller;

  std::size_t dim() const {
    if (flows.empty()) throw ConfigError("CNFModel: no flows");
    return flows.front().net.dim();
  }

  void validate() const {
    if (flows.empty()) throw ConfigError("CNFModel: no flows");
    const std::size_t d = flows.front().net.dim();
    for (const Flow& f : flows) {
      if (f.net.dim() != d) throw ConfigError("CNFModel: flow dimensions disagree");
      if (!(f.t0 < f.t1)) throw ConfigError("CNFModel: flow interval needs t0 < t1");
    }
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const Flow& f : flows) n += f.net.params().total_size();
    return n;
  }

  /// Flow-major concatenation of every parameter tensor; the order matches
  /// gradient results and checkpoint layout.
  std::vector<double> flatten_params() const {
    std::vector<double> flat;
    flat.reserve(param_count());
    for (const Flow& f : flows) {
      std::vector<double> piece = f.net.params().flatten();
      flat.insert(flat.end(), piece.begin(), piece.end());
    }
    return flat;
  }

  void unflatten_params(std::span<const double> flat) {
    if (flat.size() != param_count()) {
      throw ShapeError("CNFModel: flat parameter vector has wrong length");
    }
    std::size_t off = 0;
    for (Flow& f : flows) {
      const std::size_t n = f.net.params().total_size();
      f.net.params().unflatten(flat.subspan(off, n));
      off += n;
    }
  }
};

struct TraceOptions {
  TraceKind kind = TraceKind::kExact;
  NoiseKind noise = NoiseKind::kGaussian;
  std::uint64_t seed = 0;
  /// When set, this noise tensor is used for every flow instead of fresh
  /// draws; finite-difference checks rely on it to pin the estimate.
  std::optional<Tensor> fixed_epsilon;
};

namespace detail {

inline Tensor pack_aug(const Tensor& z, const Tensor& delta) {
  return concat(reshape(z, {z.rows() * z.cols()}), delta);
}

inline AugmentedState unpack_aug(const Tensor& state, std::size_t batch,
                                 std::size_t dim) {
  AugmentedState s;
  s.z = reshape(slice(state, 0, batch * dim), {batch, dim});
  s.delta_logp = slice(state, batch * dim, batch * dim + batch);
  return s;
}

/// Flat-state augmented dynamics [dz/dt ; d(delta)/dt] = [f ; -trace],
/// computed on the graph `g` (state must live on it).
inline Tensor aug_dynamics_on_graph(Graph& g, const DynamicsNet& net,
                                    const Tensor& state, double t,
                                    const TraceEstimatorSpec& spec, std::size_t batch,
                                    std::size_t dim, bool create_graph) {
  AugmentedState s = unpack_aug(state, batch, dim);
  auto [f, trace] = dynamics_with_trace(g, net, s.z, t, spec, create_graph);
  return pack_aug(f, neg(trace));
}

/// Untraced augmented dynamics for the adaptive solver: each evaluation
/// builds its own scratch graph for the internal vector-Jacobian product.
inline Dynamics make_aug_dynamics(const DynamicsNet& net, const TraceEstimatorSpec& spec,
                                  std::size_t batch, std::size_t dim) {
  return [&net, spec, batch, dim](const Tensor& state, double t) -> Tensor {
    Graph g;
    GraphScope scope(g);
    DynamicsNet anet = net.attached(g);
    Tensor st = g.leaf(state.detached());
    return aug_dynamics_on_graph(g, anet, st, t, spec, batch, dim, false).detached();
  };
}

inline TraceEstimatorSpec make_spec(const CNFModel& model, const Flow& flow,
                                    const TraceOptions& opt, std::size_t batch,
                                    Rng& rng) {
  TraceEstimatorSpec spec;
  spec.kind = opt.kind;
  spec.noise = opt.noise;
  if (opt.kind == TraceKind::kExact) return spec;
  std::size_t width = model.dim();
  if (opt.kind == TraceKind::kBottleneck) width = flow.net.bottleneck_width();
  if (opt.fixed_epsilon) {
    spec.epsilon = *opt.fixed_epsilon;
  } else {
    spec.epsilon = sample_noise(opt.noise, rng, {batch, width});
  }
  return spec;
}

}  // namespace detail

/// Single evaluation of the augmented dynamics at (state, t); the public
/// building block behind log_density.
inline AugmentedState augmented_dynamics(const AugmentedState& state, double t,
                                         const DynamicsNet& net,
                                         const TraceEstimatorSpec& spec) {
  state.validate();
  const std::size_t batch = state.z.rows();
  const std::size_t dim = state.z.cols();
  Graph g;
  GraphScope scope(g);
  DynamicsNet anet = net.attached(g);
  Tensor z = g.leaf(state.z.detached());
  auto [f, trace] = dynamics_with_trace(g, anet, z, t, spec, false);
  return AugmentedState{f.detached(), neg(trace).detached()};
}

struct LogDensityResult {
  Tensor logp;         // (B,)
  Tensor z0;           // (B, D) latent reached at the base end
  Tensor delta_logp;   // (B,) total accumulated change
  long nfe = 0;
  /// latents[k] is the state entering flow k's generative interval;
  /// latents[flows.size()] is the data itself.
  std::vector<Tensor> latents;
  std::vector<TraceEstimatorSpec> specs;  // per flow, as used
};

/// Solves the augmented system backwards from the data (t1 -> t0 per flow,
/// last flow first) and assembles log p(x) = log N(z0) - delta.
inline LogDensityResult log_density(const CNFModel& model, const Tensor& x,
                                    const TraceOptions& opt = {},
                                    const StepController* ctrl_override = nullptr) {
  model.validate();
  if (x.rank() != 2 || x.cols() != model.dim()) {
    throw ShapeError("log_density: input " + shape_str(x) + " does not match model dim " +
                     std::to_string(model.dim()));
  }
  if (!x.all_finite()) throw NumericError("log_density: non-finite input");

  NoTrace silent;
  const std::size_t batch = x.rows();
  const std::size_t dim = model.dim();
  const StepController& ctrl = ctrl_override ? *ctrl_override : model.controller;
  Rng rng(opt.seed);

  LogDensityResult result;
  result.latents.assign(model.flows.size() + 1, Tensor());
  result.specs.assign(model.flows.size(), TraceEstimatorSpec());
  result.latents[model.flows.size()] = x.detached();

  Tensor z = x.detached();
  Tensor delta = Tensor::zeros({batch});
  for (std::size_t k = model.flows.size(); k-- > 0;) {
    const Flow& flow = model.flows[k];
    TraceEstimatorSpec spec = detail::make_spec(model, flow, opt, batch, rng);
    result.specs[k] = spec;
    Dynamics dyn = detail::make_aug_dynamics(flow.net, spec, batch, dim);
    Tensor state = detail::pack_aug(z, Tensor::zeros({batch}));
    SolveResult solve = integrate(dyn, state, flow.t1, flow.t0, ctrl);
    result.nfe += solve.nfe;
    AugmentedState end = detail::unpack_aug(solve.y, batch, dim);
    z = end.z;
    delta = add(delta, end.delta_logp);
    result.latents[k] = z;
  }

  result.z0 = z;
  result.delta_logp = delta;
  result.logp = sub(base_log_density(z), delta);
  return result;
}

/// Draws base Gaussian noise and integrates it forward through the flows.
inline Tensor sample(const CNFModel& model, std::size_t n, std::uint64_t seed) {
  model.validate();
  NoTrace silent;
  const std::size_t dim = model.dim();
  Rng rng(seed);
  Tensor z = rng.normal_tensor({n == 0 ? 0 : n, dim});
  if (n == 0) return Tensor::from({0, dim}, {});
  for (const Flow& flow : model.flows) {
    const DynamicsNet& net = flow.net;
    Dynamics dyn = [&net, n, dim](const Tensor& state, double t) {
      Tensor zz = reshape(state, {n, dim});
      return reshape(net.forward(zz, t), {n * dim});
    };
    SolveResult solve =
        integrate(dyn, reshape(z, {n * dim}), flow.t0, flow.t1, model.controller);
    z = reshape(solve.y, {n, dim});
  }
  return z;
}

struct GradientResult {
  std::vector<Tensor> grads;  // one per parameter tensor, flow-major order
  double loss = 0.0;          // mean negative log-density
  Tensor logp;                // (B,) from the forward pass
  long nfe_forward = 0;
  long nfe_backward = 0;
};

/// Gradient of the mean negative log-density via the adjoint method: the
/// backward pass reconstructs the state by integrating in reverse from the
/// retained terminal latents and carries the state- and parameter-adjoints
/// in the same solve. The log-density channel's adjoint differentiates the
/// recorded trace estimate, which is where the second derivative order goes.
inline GradientResult adjoint_gradients(const CNFModel& model, const Tensor& x,
                                        const TraceOptions& opt = {},
                                        const StepController* ctrl_override = nullptr) {
  LogDensityResult fwd = log_density(model, x, opt, ctrl_override);
  NoTrace silent;
  const std::size_t batch = x.rows();
  const std::size_t dim = model.dim();
  const double inv_b = 1.0 / static_cast<double>(batch);
  const StepController& ctrl = ctrl_override ? *ctrl_override : model.controller;

  GradientResult result;
  result.logp = fwd.logp;
  result.loss = -mean(fwd.logp).value();
  result.nfe_forward = fwd.nfe;

  // dL/dz0 of L = mean(-log N(z0) + delta) is z0 / B rowwise.
  Tensor a_z = scale(fwd.z0, inv_b).detached();
  const Tensor a_delta = Tensor::full({batch}, inv_b);

  for (std::size_t k = 0; k < model.flows.size(); ++k) {
    const Flow& flow = model.flows[k];
    const TraceEstimatorSpec& spec = fwd.specs[k];
    const std::size_t p = flow.net.params().total_size();
    const std::size_t zn = batch * dim;

    Dynamics dyn = [&flow, &spec, &a_delta, batch, dim, zn, p](const Tensor& state,
                                                               double t) -> Tensor {
      Tensor z_plain, az_plain;
      {
        NoTrace silent;
        z_plain = reshape(slice(state, 0, zn), {batch, dim});
        az_plain = reshape(slice(state, zn, 2 * zn), {batch, dim});
      }

      Graph g;
      GraphScope scope(g);
      DynamicsNet anet = flow.net.attached(g);
      Tensor z = g.leaf(z_plain);
      auto [f, trace] = dynamics_with_trace(g, anet, z, t, spec, true);

      // phi = <a_z, f> + <a_delta, -trace>; its gradients give the adjoint rates.
      Tensor phi = add(dot(az_plain, f), dot(a_delta, neg(trace)));

      std::vector<Tensor> wrt;
      wrt.reserve(1 + anet.params().count());
      wrt.push_back(z);
      for (const auto& [name, value] : anet.params().items()) wrt.push_back(value);
      std::vector<Tensor> grads = g.gradient(phi, wrt, false);

      std::vector<double> out;
      out.reserve(2 * zn + p);
      auto append_scaled = [&out](const Tensor& t2, double s) {
        for (double v : t2.data()) out.push_back(s * v);
      };
      append_scaled(f, 1.0);
      append_scaled(grads[0], -1.0);
      for (std::size_t i = 1; i < grads.size(); ++i) append_scaled(grads[i], -1.0);
      return Tensor::from({2 * zn + p}, std::move(out));
    };

    std::vector<double> state0;
    state0.reserve(2 * zn + p);
    for (double v : fwd.latents[k].data()) state0.push_back(v);
    for (double v : a_z.data()) state0.push_back(v);
    state0.resize(2 * zn + p, 0.0);

    SolveResult solve =
        integrate(dyn, Tensor::from({2 * zn + p}, std::move(state0)), flow.t0, flow.t1, ctrl);
    result.nfe_backward += solve.nfe;

    Tensor terminal = solve.y;
    a_z = reshape(slice(terminal, zn, 2 * zn), {batch, dim});

    // Parameter adjoint at the data side of this flow's solve is dL/dtheta_k.
    Tensor a_theta = slice(terminal, 2 * zn, 2 * zn + p);
    std::size_t off = 0;
    for (const auto& [name, value] : flow.net.params().items()) {
      Tensor gslice = slice(a_theta, off, off + value.size());
      result.grads.push_back(reshape(gslice, value.shape()).detached());
      off += value.size();
    }
  }
  return result;
}

/// Batch-sharded adjoint gradients: each shard runs its own solves and
/// tapes on a worker thread; shard results are combined in index order so
/// the output is deterministic for a fixed shard count. Fresh noise gets a
/// per-shard seed; a fixed epsilon is only usable single-shard since its
/// batch shape would no longer match.
inline GradientResult adjoint_gradients_sharded(const CNFModel& model, const Tensor& x,
                                                const TraceOptions& opt,
                                                const StepController* ctrl_override,
                                                std::size_t workers) {
  const std::size_t batch = x.rows();
  auto ranges = shard_ranges(batch, workers);
  if (ranges.size() <= 1 || opt.fixed_epsilon.has_value()) {
    return adjoint_gradients(model, x, opt, ctrl_override);
  }

  const std::size_t dim = x.cols();
  std::vector<GradientResult> parts(ranges.size());
  run_sharded(ranges.size(), [&](std::size_t s) {
    const auto [lo, hi] = ranges[s];
    std::vector<double> rows((hi - lo) * dim);
    std::copy_n(x.data().data() + lo * dim, rows.size(), rows.data());
    Tensor shard = Tensor::from({hi - lo, dim}, std::move(rows));
    TraceOptions shard_opt = opt;
    shard_opt.seed = opt.seed + 7919 * s;
    parts[s] = adjoint_gradients(model, shard, shard_opt, ctrl_override);
  });

  GradientResult combined;
  const double inv_b = 1.0 / static_cast<double>(batch);
  std::vector<double> logp(batch);
  std::vector<std::vector<double>> grads;
  for (std::size_t s = 0; s < parts.size(); ++s) {
    const auto [lo, hi] = ranges[s];
    const double w = static_cast<double>(hi - lo) * inv_b;
    combined.loss += w * parts[s].loss;
    combined.nfe_forward += parts[s].nfe_forward;
    combined.nfe_backward += parts[s].nfe_backward;
    std::copy_n(parts[s].logp.data().data(), hi - lo, logp.data() + lo);
    if (grads.empty()) {
      grads.resize(parts[s].grads.size());
      for (std::size_t g = 0; g < grads.size(); ++g) {
        grads[g].assign(parts[s].grads[g].size(), 0.0);
      }
    }
    for (std::size_t g = 0; g < grads.size(); ++g) {
      auto d = parts[s].grads[g].data();
      for (std::size_t i = 0; i < d.size(); ++i) grads[g][i] += w * d[i];
    }
  }
  combined.logp = Tensor::from({batch}, std::move(logp));
  for (std::size_t g = 0; g < grads.size(); ++g) {
    combined.grads.push_back(
        Tensor::from(parts[0].grads[g].shape(), std::move(grads[g])));
  }
  return combined;
}

/// Reference gradient: differentiate straight through a fixed-step RK4
/// discretization of the same objective. Memory grows with n_steps.
inline GradientResult unrolled_gradients(const CNFModel& model, const Tensor& x,
                                         const TraceOptions& opt, std::size_t n_steps) {
  model.validate();
  const std::size_t batch = x.rows();
  const std::size_t dim = model.dim();
  Rng rng(opt.seed);

  Graph g;
  GraphScope scope(g);

  std::vector<DynamicsNet> nets;
  nets.reserve(model.flows.size());
  for (const Flow& flow : model.flows) nets.push_back(flow.net.attached(g));

  GradientResult result;
  Tensor z = x.detached();
  Tensor delta = Tensor::zeros({batch});
  std::vector<TraceEstimatorSpec> specs(model.flows.size());

  for (std::size_t k = model.flows.size(); k-- > 0;) {
    const Flow& flow = model.flows[k];
    specs[k] = detail::make_spec(model, flow, opt, batch, rng);
    const DynamicsNet& anet = nets[k];
    const TraceEstimatorSpec& spec = specs[k];
    Dynamics dyn = [&g, &anet, &spec, batch, dim](const Tensor& state, double t) {
      return detail::aug_dynamics_on_graph(g, anet, state, t, spec, batch, dim, true);
    };
    Tensor state = detail::pack_aug(z, Tensor::zeros({batch}));
    SolveResult solve = integrate_fixed_rk4(dyn, state, flow.t1, flow.t0, n_steps);
    result.nfe_forward += solve.nfe;
    AugmentedState end = detail::unpack_aug(solve.y, batch, dim);
    z = end.z;
    delta = add(delta, end.delta_logp);
  }

  Tensor logp = sub(base_log_density(z), delta);
  Tensor loss = mean(neg(logp));
  result.loss = loss.value();
  result.logp = logp.detached();

  std::vector<Tensor> wrt;
  for (const DynamicsNet& net : nets) {
    for (const auto& [name, value] : net.params().items()) wrt.push_back(value);
  }
  std::vector<Tensor> grads = g.gradient(loss, wrt, false);
  for (Tensor& t : grads) result.grads.push_back(t.detached());
  return result;
}

}  // namespace cnflow
