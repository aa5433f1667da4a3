#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cnflow/cnf.hpp"
#include "cnflow/data.hpp"
#include "cnflow/errors.hpp"
#include "cnflow/tensor.hpp"

namespace cnflow {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;
  long t = 0;
};

/// Standard bias-corrected Adam update on flat parameter vectors.
inline void adam_step(std::vector<double>& params, std::span<const double> grads,
                      AdamState& state, const AdamConfig& cfg, double lr) {
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step: gradient length does not match parameter length");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double mean_nll = 0.0;
  double std_nll = 0.0;
  double se = 0.0;
  std::size_t n = 0;
  long nfe = 0;

  double bits_per_dim(std::size_t dim) const {
    return mean_nll / (static_cast<double>(dim) * std::log(2.0));
  }
};

/// Mean negative log-density over a dataset. Batches fan out over worker
/// threads with per-call solver and tape instances; the reduction runs in
/// batch order, so results do not depend on scheduling. Exact trace is the
/// reporting convention; the stochastic estimator is available for parity
/// checks against training behaviour.
inline EvalResult evaluate(const CNFModel& model, const Tensor& data, bool exact_trace,
                           double atol, double rtol, std::size_t batch_size = 1024,
                           std::uint64_t noise_seed = 0, std::size_t workers = 0) {
  if (data.rows() == 0) throw DataError("evaluate: empty dataset");
  StepController ctrl = model.controller;
  ctrl.atol = atol;
  ctrl.rtol = rtol;
  if (workers == 0) workers = default_worker_count();

  const std::size_t d = data.cols();
  const std::size_t n_batches = (data.rows() + batch_size - 1) / batch_size;
  struct BatchStats {
    double acc = 0.0, acc_sq = 0.0;
    long nfe = 0;
  };
  std::vector<BatchStats> stats(n_batches);

  auto ranges = shard_ranges(n_batches, workers);
  run_sharded(ranges.size(), [&](std::size_t s) {
    for (std::size_t batch_index = ranges[s].first; batch_index < ranges[s].second;
         ++batch_index) {
      const std::size_t lo = batch_index * batch_size;
      const std::size_t b = std::min(batch_size, data.rows() - lo);
      std::vector<double> rows(b * d);
      std::copy_n(data.data().data() + lo * d, b * d, rows.data());
      Tensor x = Tensor::from({b, d}, std::move(rows));
      TraceOptions opt;
      opt.kind = exact_trace ? TraceKind::kExact : TraceKind::kHutchinson;
      opt.noise = NoiseKind::kGaussian;
      opt.seed = noise_seed + batch_index;
      try {
        LogDensityResult r = log_density(model, x, opt, &ctrl);
        stats[batch_index].nfe = r.nfe;
        for (double lp : r.logp.data()) {
          stats[batch_index].acc += -lp;
          stats[batch_index].acc_sq += lp * lp;
        }
      } catch (const SolverError& e) {
        throw SolverError("evaluate: batch " + std::to_string(batch_index) + ": " + e.what());
      }
    }
  });

  EvalResult res;
  res.n = data.rows();
  double acc = 0.0, acc_sq = 0.0;
  for (const BatchStats& s : stats) {
    acc += s.acc;
    acc_sq += s.acc_sq;
    res.nfe += s.nfe;
  }
  res.mean_nll = acc / static_cast<double>(res.n);
  const double mean_lp = -res.mean_nll;
  res.std_nll = std::sqrt(std::max(0.0, acc_sq / static_cast<double>(res.n) - mean_lp * mean_lp));
  res.se = res.std_nll / std::sqrt(static_cast<double>(res.n));
  return res;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

enum class GradMethod { kAdjoint, kUnrolled };

inline GradMethod grad_method_from_string(const std::string& s) {
  if (s == "adjoint") return GradMethod::kAdjoint;
  if (s == "unrolled") return GradMethod::kUnrolled;
  throw ConfigError("unknown gradient method '" + s + "'");
}

inline const char* to_string(GradMethod m) {
  return m == GradMethod::kAdjoint ? "adjoint" : "unrolled";
}

struct TrainConfig {
  double lr = 1e-3;
  double lr_decay_factor = 1.0;  // applied once when epoch reaches lr_decay_epoch
  long lr_decay_epoch = -1;
  double weight_decay = 0.0;
  long epochs = 10;
  long max_iters = 0;  // 0: bounded by epochs only
  std::size_t batch_size = 128;
  double atol = 1e-5;
  double rtol = 1e-5;
  double eval_atol = 1e-8;
  double eval_rtol = 1e-6;
  TraceKind trace_kind = TraceKind::kHutchinson;
  NoiseKind trace_noise = NoiseKind::kGaussian;
  GradMethod grad_method = GradMethod::kAdjoint;
  std::size_t unrolled_steps = 100;
  long patience = 20;
  bool eval_exact_trace = true;
  /// Stop once validation NLL reaches this level; -inf disables.
  double target_val_nll = -std::numeric_limits<double>::infinity();
  /// Worker threads for batch-sharded gradients and evaluation; 0 = all.
  std::size_t threads = 0;
  std::uint64_t seed = 0;
  AdamConfig adam;

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("TrainConfig: learning rate must be non-negative");
    if (!(atol > 0.0) || !(rtol > 0.0) || !(eval_atol > 0.0) || !(eval_rtol > 0.0)) {
      throw ConfigError("TrainConfig: solver tolerances must be positive");
    }
    if (batch_size == 0) throw ConfigError("TrainConfig: batch size must be positive");
  }
};

struct IterRecord {
  long iter = 0;
  long epoch = 0;
  double loss = 0.0;
  long nfe_forward = 0;
  long nfe_backward = 0;
  double wall_ms = 0.0;
};

struct EpochRecord {
  long epoch = 0;
  double val_nll = 0.0;
  double val_se = 0.0;
  long iters_done = 0;
  double lr = 0.0;
};

/// Append-only training trace; serializes to newline-delimited JSON.
struct TrainLog {
  std::vector<IterRecord> iters;
  std::vector<EpochRecord> epochs;

  void write_ndjson(std::ostream& out) const {
    for (const IterRecord& r : iters) {
      nlohmann::json j{{"type", "iter"},         {"iter", r.iter},
                       {"epoch", r.epoch},       {"loss", r.loss},
                       {"nfe_forward", r.nfe_forward}, {"nfe_backward", r.nfe_backward},
                       {"wall_ms", r.wall_ms}};
      out << j.dump() << "\n";
    }
    for (const EpochRecord& r : epochs) {
      nlohmann::json j{{"type", "epoch"},
                       {"epoch", r.epoch},
                       {"val_nll", r.val_nll},
                       {"val_se", r.val_se},
                       {"iters_done", r.iters_done},
                       {"lr", r.lr}};
      out << j.dump() << "\n";
    }
  }
};

struct TrainResult {
  TrainLog log;
  double best_val_nll = std::numeric_limits<double>::infinity();
  long best_epoch = -1;
  long iters_done = 0;
  std::string stop_reason;
};

/// Maximum-likelihood training: Adam on mean NLL plus L2 weight decay. The
/// model is left holding the best-validation parameters. Divergence and
/// stiffness abort the loop but still return the best checkpoint so far.
inline TrainResult train(CNFModel& model, const Tensor& train_data, const Tensor& val_data,
                         const TrainConfig& cfg) {
  cfg.validate();
  model.validate();
  if (train_data.rows() == 0 || val_data.rows() == 0) {
    throw DataError("train: train and validation sets must be non-empty");
  }

  StepController train_ctrl = model.controller;
  train_ctrl.atol = cfg.atol;
  train_ctrl.rtol = cfg.rtol;

  std::vector<double> params = model.flatten_params();
  std::vector<double> best_params = params;
  AdamState adam;
  TrainResult result;
  result.stop_reason = "completed";

  Batcher batcher(train_data.rows(), cfg.batch_size, cfg.seed + 1);
  Rng noise_seeds(cfg.seed + 2);
  double lr = cfg.lr;
  long iter = 0;
  long epochs_since_best = 0;
  bool stop = false;
  bool aborted = false;

  for (long epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    if (cfg.lr_decay_epoch >= 0 && epoch == cfg.lr_decay_epoch) lr *= cfg.lr_decay_factor;

    for (std::size_t b = 0; b < batcher.batches_per_epoch() && !stop; ++b) {
      Tensor x = Batcher::gather(train_data, batcher.next());
      const auto t0 = std::chrono::steady_clock::now();

      TraceOptions opt;
      opt.kind = cfg.trace_kind;
      opt.noise = cfg.trace_noise;
      opt.seed = noise_seeds.next_u64();

      IterRecord rec;
      rec.iter = iter;
      rec.epoch = epoch;
      try {
        const std::size_t workers =
            cfg.threads == 0 ? default_worker_count() : cfg.threads;
        GradientResult gres =
            cfg.grad_method == GradMethod::kAdjoint
                ? adjoint_gradients_sharded(model, x, opt, &train_ctrl, workers)
                : unrolled_gradients(model, x, opt, cfg.unrolled_steps);
        std::vector<double> grad;
        grad.reserve(params.size());
        for (const Tensor& g : gres.grads) {
          for (double v : g.data()) grad.push_back(v);
        }
        double wd_term = 0.0;
        if (cfg.weight_decay > 0.0) {
          for (std::size_t i = 0; i < params.size(); ++i) {
            grad[i] += cfg.weight_decay * params[i];
            wd_term += params[i] * params[i];
          }
        }
        rec.loss = gres.loss + 0.5 * cfg.weight_decay * wd_term;
        rec.nfe_forward = gres.nfe_forward;
        rec.nfe_backward = gres.nfe_backward;
        if (!std::isfinite(rec.loss)) throw NumericError("train: non-finite loss");

        adam_step(params, grad, adam, cfg.adam, lr);
        model.unflatten_params(params);
      } catch (const StiffnessError& e) {
        result.stop_reason = std::string("stiffness: ") + e.what();
        stop = aborted = true;
        break;
      } catch (const NumericError& e) {
        result.stop_reason = std::string("diverged: ") + e.what();
        stop = aborted = true;
        break;
      }

      rec.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
      result.log.iters.push_back(rec);
      ++iter;
      if (cfg.max_iters > 0 && iter >= cfg.max_iters) stop = true;
    }

    if (aborted) break;  // the current parameters are not evaluable

    EvalResult val = evaluate(model, val_data, cfg.eval_exact_trace, cfg.eval_atol,
                              cfg.eval_rtol, 512, cfg.seed + 7, cfg.threads);
    EpochRecord er;
    er.epoch = epoch;
    er.val_nll = val.mean_nll;
    er.val_se = val.se;
    er.iters_done = iter;
    er.lr = lr;
    result.log.epochs.push_back(er);

    if (val.mean_nll < result.best_val_nll) {
      result.best_val_nll = val.mean_nll;
      result.best_epoch = epoch;
      best_params = params;
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
      if (cfg.patience > 0 && epochs_since_best >= cfg.patience) {
        if (result.stop_reason == "completed") result.stop_reason = "early_stop";
        stop = true;
      }
    }
    if (val.mean_nll <= cfg.target_val_nll) {
      result.stop_reason = "target_reached";
      stop = true;
    }
  }

  result.iters_done = iter;
  model.unflatten_params(best_params);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line, then length-prefixed little-endian
// float64 arrays in declared parameter order.
// ---------------------------------------------------------------------------

inline std::string config_hash(const nlohmann::json& config) {
  const std::size_t h = std::hash<std::string>{}(config.dump());
  char buf[2 * sizeof(std::size_t) + 1];
  std::snprintf(buf, sizeof(buf), "%016zx", h);
  return buf;
}

inline void save_checkpoint(const std::string& path, const CNFModel& model,
                            const nlohmann::json& config, long epoch,
                            const nlohmann::json& metrics) {
  nlohmann::json header;
  header["format"] = "cnflow-checkpoint";
  header["version"] = 1;
  header["epoch"] = epoch;
  header["config"] = config;
  header["config_hash"] = config_hash(config);
  header["metrics"] = metrics;

  nlohmann::json arch;
  const DynamicsNet& net0 = model.flows.front().net;
  arch["dim"] = model.dim();
  arch["hidden"] = net0.hidden_widths();
  arch["activation"] = to_string(net0.activation());
  arch["flows"] = model.flows.size();
  arch["split"] = net0.has_split();
  arch["atol"] = model.controller.atol;
  arch["rtol"] = model.controller.rtol;
  header["model"] = arch;

  nlohmann::json params = nlohmann::json::array();
  for (std::size_t k = 0; k < model.flows.size(); ++k) {
    for (const auto& [name, value] : model.flows[k].net.params().items()) {
      params.push_back({{"name", "flow" + std::to_string(k) + "." + name},
                        {"shape", value.shape()}});
    }
  }
  header["params"] = params;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_checkpoint: cannot open " + path);
  out << header.dump() << "\n";
  for (const Flow& flow : model.flows) {
    for (const auto& [name, value] : flow.net.params().items()) {
      const std::uint64_t count = value.size();
      out.write(reinterpret_cast<const char*>(&count), sizeof(count));
      out.write(reinterpret_cast<const char*>(value.data().data()),
                static_cast<std::streamsize>(count * sizeof(double)));
    }
  }
  if (!out) throw DataError("save_checkpoint: write failed for " + path);
}

struct LoadedCheckpoint {
  CNFModel model;
  nlohmann::json header;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("load_checkpoint: missing header");
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "cnflow-checkpoint") {
    throw DataError("load_checkpoint: not a cnflow checkpoint: " + path);
  }

  const auto& arch = header.at("model");
  const std::size_t dim = arch.at("dim").get<std::size_t>();
  const std::vector<std::size_t> hidden = arch.at("hidden").get<std::vector<std::size_t>>();
  const Activation act = activation_from_string(arch.at("activation").get<std::string>());
  const std::size_t n_flows = arch.at("flows").get<std::size_t>();
  const bool split = arch.value("split", false);

  LoadedCheckpoint loaded;
  for (std::size_t k = 0; k < n_flows; ++k) {
    loaded.model.flows.push_back(
        {DynamicsNet::make(dim, hidden, act, {0.0, true}, 0, split), 0.0, 1.0});
  }
  loaded.model.controller.atol = arch.value("atol", 1e-5);
  loaded.model.controller.rtol = arch.value("rtol", 1e-5);

  std::vector<double> flat;
  flat.reserve(loaded.model.param_count());
  while (flat.size() < loaded.model.param_count()) {
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (!in) throw DataError("load_checkpoint: truncated parameter stream");
    std::vector<double> chunk(count);
    in.read(reinterpret_cast<char*>(chunk.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw DataError("load_checkpoint: truncated parameter payload");
    flat.insert(flat.end(), chunk.begin(), chunk.end());
  }
  loaded.model.unflatten_params(flat);
  loaded.header = std::move(header);
  return loaded;
}

}  // namespace cnflow
