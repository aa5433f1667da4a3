#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cnflow/cnf.hpp"
#include "cnflow/data.hpp"
#include "cnflow/errors.hpp"
#include "cnflow/net.hpp"
#include "cnflow/parallel.hpp"
#include "cnflow/train.hpp"

namespace cnflow {

namespace detail {

template <typename T>
T json_field(const nlohmann::json& j, const std::string& section, const std::string& key,
             T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field '" + section + "." + key + "' has the wrong type");
  }
}

}  // namespace detail

struct DatasetConfig {
  std::string kind = "toy";  // toy | csv
  std::string family = "two_gaussians";
  double noise = 1.0;
  std::size_t n_train = 20000;
  std::size_t n_val = 2000;
  std::size_t n_test = 2000;
  std::string path;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
};

struct ModelConfig {
  std::size_t dim = 2;
  std::vector<std::size_t> hidden = {64, 64, 64};
  std::string activation = "tanh";
  std::size_t flows = 1;
  bool split = false;
  double gain = 1.0;
  bool zero_init_last = true;
};

struct SolverConfig {
  double atol = 1e-5;
  double rtol = 1e-5;
  std::size_t max_steps = 1'000'000;
  double initial_step = 0.0;
};

struct TraceConfig {
  std::string kind = "hutchinson";
  std::string noise = "gaussian";
};

struct TrainSection {
  double lr = 1e-3;
  double lr_decay_factor = 1.0;
  long lr_decay_epoch = -1;
  double weight_decay = 0.0;
  long epochs = 50;
  long max_iters = 0;
  std::size_t batch_size = 128;
  double eval_atol = 1e-8;
  double eval_rtol = 1e-6;
  std::string grad_method = "adjoint";
  std::size_t unrolled_steps = 100;
  long patience = 20;
  bool eval_exact = true;
  std::size_t threads = 0;  // 0: resolved to the host worker count at run time
};

/// Everything a run needs; a persisted copy reproduces the run.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  DatasetConfig dataset;
  ModelConfig model;
  SolverConfig solver;
  TraceConfig trace;
  TrainSection train;

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.seed = detail::json_field<std::uint64_t>(j, "", "seed", c.seed);
    c.out_dir = detail::json_field<std::string>(j, "", "out_dir", c.out_dir);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      c.dataset.kind = detail::json_field<std::string>(d, "dataset", "kind", c.dataset.kind);
      c.dataset.family =
          detail::json_field<std::string>(d, "dataset", "family", c.dataset.family);
      c.dataset.noise = detail::json_field<double>(d, "dataset", "noise", c.dataset.noise);
      c.dataset.n_train =
          detail::json_field<std::size_t>(d, "dataset", "n_train", c.dataset.n_train);
      c.dataset.n_val =
          detail::json_field<std::size_t>(d, "dataset", "n_val", c.dataset.n_val);
      c.dataset.n_test =
          detail::json_field<std::size_t>(d, "dataset", "n_test", c.dataset.n_test);
      c.dataset.path = detail::json_field<std::string>(d, "dataset", "path", c.dataset.path);
      if (d.contains("split_ratios")) {
        auto v = detail::json_field<std::vector<double>>(d, "dataset", "split_ratios", {});
        if (v.size() != 3) {
          throw ConfigError("config field 'dataset.split_ratios' needs three entries");
        }
        c.dataset.split_ratios = {v[0], v[1], v[2]};
      }
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.model.dim = detail::json_field<std::size_t>(m, "model", "dim", c.model.dim);
      c.model.hidden =
          detail::json_field<std::vector<std::size_t>>(m, "model", "hidden", c.model.hidden);
      c.model.activation =
          detail::json_field<std::string>(m, "model", "activation", c.model.activation);
      c.model.flows = detail::json_field<std::size_t>(m, "model", "flows", c.model.flows);
      c.model.split = detail::json_field<bool>(m, "model", "split", c.model.split);
      c.model.gain = detail::json_field<double>(m, "model", "gain", c.model.gain);
      c.model.zero_init_last =
          detail::json_field<bool>(m, "model", "zero_init_last", c.model.zero_init_last);
    }
    if (j.contains("solver")) {
      const auto& s = j.at("solver");
      c.solver.atol = detail::json_field<double>(s, "solver", "atol", c.solver.atol);
      c.solver.rtol = detail::json_field<double>(s, "solver", "rtol", c.solver.rtol);
      c.solver.max_steps =
          detail::json_field<std::size_t>(s, "solver", "max_steps", c.solver.max_steps);
      c.solver.initial_step =
          detail::json_field<double>(s, "solver", "initial_step", c.solver.initial_step);
    }
    if (j.contains("trace")) {
      const auto& t = j.at("trace");
      c.trace.kind = detail::json_field<std::string>(t, "trace", "kind", c.trace.kind);
      c.trace.noise = detail::json_field<std::string>(t, "trace", "noise", c.trace.noise);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.train.lr = detail::json_field<double>(t, "train", "lr", c.train.lr);
      c.train.lr_decay_factor =
          detail::json_field<double>(t, "train", "lr_decay_factor", c.train.lr_decay_factor);
      c.train.lr_decay_epoch =
          detail::json_field<long>(t, "train", "lr_decay_epoch", c.train.lr_decay_epoch);
      c.train.weight_decay =
          detail::json_field<double>(t, "train", "weight_decay", c.train.weight_decay);
      c.train.epochs = detail::json_field<long>(t, "train", "epochs", c.train.epochs);
      c.train.max_iters = detail::json_field<long>(t, "train", "max_iters", c.train.max_iters);
      c.train.batch_size =
          detail::json_field<std::size_t>(t, "train", "batch_size", c.train.batch_size);
      c.train.eval_atol = detail::json_field<double>(t, "train", "eval_atol", c.train.eval_atol);
      c.train.eval_rtol = detail::json_field<double>(t, "train", "eval_rtol", c.train.eval_rtol);
      c.train.grad_method =
          detail::json_field<std::string>(t, "train", "grad_method", c.train.grad_method);
      c.train.unrolled_steps =
          detail::json_field<std::size_t>(t, "train", "unrolled_steps", c.train.unrolled_steps);
      c.train.patience = detail::json_field<long>(t, "train", "patience", c.train.patience);
      c.train.eval_exact = detail::json_field<bool>(t, "train", "eval_exact", c.train.eval_exact);
      c.train.threads = detail::json_field<std::size_t>(t, "train", "threads", c.train.threads);
    }
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["dataset"] = {{"kind", dataset.kind},       {"family", dataset.family},
                    {"noise", dataset.noise},     {"n_train", dataset.n_train},
                    {"n_val", dataset.n_val},     {"n_test", dataset.n_test},
                    {"path", dataset.path},
                    {"split_ratios", std::vector<double>{dataset.split_ratios[0],
                                                         dataset.split_ratios[1],
                                                         dataset.split_ratios[2]}}};
    j["model"] = {{"dim", model.dim},
                  {"hidden", model.hidden},
                  {"activation", model.activation},
                  {"flows", model.flows},
                  {"split", model.split},
                  {"gain", model.gain},
                  {"zero_init_last", model.zero_init_last}};
    j["solver"] = {{"atol", solver.atol},
                   {"rtol", solver.rtol},
                   {"max_steps", solver.max_steps},
                   {"initial_step", solver.initial_step}};
    j["trace"] = {{"kind", trace.kind}, {"noise", trace.noise}};
    j["train"] = {{"lr", train.lr},
                  {"lr_decay_factor", train.lr_decay_factor},
                  {"lr_decay_epoch", train.lr_decay_epoch},
                  {"weight_decay", train.weight_decay},
                  {"epochs", train.epochs},
                  {"max_iters", train.max_iters},
                  {"batch_size", train.batch_size},
                  {"eval_atol", train.eval_atol},
                  {"eval_rtol", train.eval_rtol},
                  {"grad_method", train.grad_method},
                  {"unrolled_steps", train.unrolled_steps},
                  {"patience", train.patience},
                  {"eval_exact", train.eval_exact},
                  {"threads", train.threads}};
    return j;
  }

  void validate() const {
    if (dataset.kind != "toy" && dataset.kind != "csv") {
      throw ConfigError("config field 'dataset.kind' must be 'toy' or 'csv'");
    }
    if (dataset.kind == "csv" && dataset.path.empty()) {
      throw ConfigError("config field 'dataset.path' is required when dataset.kind is 'csv'");
    }
    if (dataset.kind == "toy") {
      toy_family_from_string(dataset.family);  // throws on unknown families
    }
    if (model.dim == 0) throw ConfigError("config field 'model.dim' must be positive");
    if (model.flows == 0) throw ConfigError("config field 'model.flows' must be positive");
    activation_from_string(model.activation);
    trace_kind_from_string(trace.kind);
    noise_kind_from_string(trace.noise);
    grad_method_from_string(train.grad_method);
    if (!(solver.atol > 0.0) || !(solver.rtol > 0.0)) {
      throw ConfigError("config fields 'solver.atol' and 'solver.rtol' must be positive");
    }
    if (!(train.lr >= 0.0)) {
      throw ConfigError("config field 'train.lr' must be non-negative");
    }
  }
};

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file " + path + " is not valid JSON");
  return RunConfig::from_json(j);
}

inline CNFModel build_model(const RunConfig& cfg) {
  CNFModel model;
  const Activation act = activation_from_string(cfg.model.activation);
  for (std::size_t k = 0; k < cfg.model.flows; ++k) {
    model.flows.push_back(
        {DynamicsNet::make(cfg.model.dim, cfg.model.hidden, act,
                           {cfg.model.gain, cfg.model.zero_init_last},
                           cfg.seed + 101 * (k + 1), cfg.model.split),
         0.0, 1.0});
  }
  model.controller.atol = cfg.solver.atol;
  model.controller.rtol = cfg.solver.rtol;
  model.controller.max_steps = cfg.solver.max_steps;
  model.controller.initial_step = cfg.solver.initial_step;
  model.validate();
  return model;
}

inline TrainConfig build_train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.lr = cfg.train.lr;
  t.lr_decay_factor = cfg.train.lr_decay_factor;
  t.lr_decay_epoch = cfg.train.lr_decay_epoch;
  t.weight_decay = cfg.train.weight_decay;
  t.epochs = cfg.train.epochs;
  t.max_iters = cfg.train.max_iters;
  t.batch_size = cfg.train.batch_size;
  t.atol = cfg.solver.atol;
  t.rtol = cfg.solver.rtol;
  t.eval_atol = cfg.train.eval_atol;
  t.eval_rtol = cfg.train.eval_rtol;
  t.trace_kind = trace_kind_from_string(cfg.trace.kind);
  t.trace_noise = noise_kind_from_string(cfg.trace.noise);
  t.grad_method = grad_method_from_string(cfg.train.grad_method);
  t.unrolled_steps = cfg.train.unrolled_steps;
  t.patience = cfg.train.patience;
  t.eval_exact_trace = cfg.train.eval_exact;
  t.threads = cfg.train.threads;
  t.seed = cfg.seed;
  return t;
}

/// Materialized training data plus whatever oracle the source provides.
struct DatasetBundle {
  Tensor train, val, test;
  std::optional<Toy2DSpec> toy;
  std::optional<TabularDataset> tabular;
};

inline DatasetBundle build_dataset(const RunConfig& cfg) {
  DatasetBundle b;
  if (cfg.dataset.kind == "toy") {
    Toy2DSpec spec;
    spec.family = toy_family_from_string(cfg.dataset.family);
    spec.noise = cfg.dataset.noise;
    spec.seed = cfg.seed + 1000;
    b.train = generate_toy(spec, cfg.dataset.n_train);
    Toy2DSpec val_spec = spec;
    val_spec.seed = cfg.seed + 2000;
    b.val = generate_toy(val_spec, cfg.dataset.n_val);
    Toy2DSpec test_spec = spec;
    test_spec.seed = cfg.seed + 3000;
    b.test = generate_toy(test_spec, cfg.dataset.n_test);
    b.toy = spec;
  } else {
    TabularDataset ds = load_csv(cfg.dataset.path, cfg.dataset.split_ratios, cfg.seed + 4000);
    b.train = ds.train;
    b.val = ds.val;
    b.test = ds.test;
    b.tabular = std::move(ds);
  }
  return b;
}

}  // namespace cnflow
