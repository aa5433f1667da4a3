// Command-line front end: train, eval, sample, density-grid, gradcheck,
// trace-bench. Exit codes: 0 success, 1 runtime/solver failure, 2 bad
// configuration.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cnflow/cnflow.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cnflow;

namespace {

struct Overrides {
  CLI::App* cmd = nullptr;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string dataset_kind, dataset_family, dataset_path;
  std::size_t n_train = 0, n_val = 0;
  std::size_t model_dim = 0;
  std::vector<std::size_t> hidden;
  std::string activation;
  std::size_t flows = 0;
  double gain = -1.0;
  bool split = false;
  double atol = 0.0, rtol = 0.0;
  std::string trace_kind, trace_noise;
  double lr = -1.0, weight_decay = -1.0;
  long epochs = -1, max_iters = -1, patience = -1, lr_decay_epoch = -2;
  double lr_decay_factor = -1.0;
  std::size_t batch_size = 0;
  std::string grad_method;
  double eval_atol = 0.0, eval_rtol = 0.0;

  void attach(CLI::App* app) {
    cmd = app;
    app->add_option("--config", config_path, "JSON run configuration");
    app->add_option("--seed", seed, "master RNG seed");
    app->add_option("--out", out_dir, "output directory");
    app->add_option("--dataset.kind", dataset_kind, "toy | csv");
    app->add_option("--dataset.family", dataset_family, "toy family name");
    app->add_option("--dataset.path", dataset_path, "CSV file for dataset.kind=csv");
    app->add_option("--dataset.n_train", n_train);
    app->add_option("--dataset.n_val", n_val);
    app->add_option("--model.dim", model_dim);
    app->add_option("--model.hidden", hidden)->delimiter(',');
    app->add_option("--model.activation", activation, "tanh | softplus");
    app->add_option("--model.flows", flows);
    app->add_option("--model.gain", gain);
    app->add_flag("--model.split", split, "expose the bottleneck split");
    app->add_option("--solver.atol", atol);
    app->add_option("--solver.rtol", rtol);
    app->add_option("--trace.kind", trace_kind, "exact | hutchinson | bottleneck");
    app->add_option("--trace.noise", trace_noise, "gaussian | rademacher");
    app->add_option("--train.lr", lr);
    app->add_option("--train.weight_decay", weight_decay);
    app->add_option("--train.epochs", epochs);
    app->add_option("--train.max_iters", max_iters);
    app->add_option("--train.batch_size", batch_size);
    app->add_option("--train.patience", patience);
    app->add_option("--train.grad_method", grad_method, "adjoint | unrolled");
    app->add_option("--train.lr_decay_factor", lr_decay_factor);
    app->add_option("--train.lr_decay_epoch", lr_decay_epoch);
    app->add_option("--train.eval_atol", eval_atol);
    app->add_option("--train.eval_rtol", eval_rtol);
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    auto given = [this](const std::string& name) { return cmd->count(name) > 0; };
    if (given("--seed")) cfg.seed = seed;
    if (given("--out")) cfg.out_dir = out_dir;
    if (given("--dataset.kind")) cfg.dataset.kind = dataset_kind;
    if (given("--dataset.family")) cfg.dataset.family = dataset_family;
    if (given("--dataset.path")) cfg.dataset.path = dataset_path;
    if (given("--dataset.n_train")) cfg.dataset.n_train = n_train;
    if (given("--dataset.n_val")) cfg.dataset.n_val = n_val;
    if (given("--model.dim")) cfg.model.dim = model_dim;
    if (given("--model.hidden")) cfg.model.hidden = hidden;
    if (given("--model.activation")) cfg.model.activation = activation;
    if (given("--model.flows")) cfg.model.flows = flows;
    if (given("--model.gain")) cfg.model.gain = gain;
    if (given("--model.split")) cfg.model.split = split;
    if (given("--solver.atol")) cfg.solver.atol = atol;
    if (given("--solver.rtol")) cfg.solver.rtol = rtol;
    if (given("--trace.kind")) cfg.trace.kind = trace_kind;
    if (given("--trace.noise")) cfg.trace.noise = trace_noise;
    if (given("--train.lr")) cfg.train.lr = lr;
    if (given("--train.weight_decay")) cfg.train.weight_decay = weight_decay;
    if (given("--train.epochs")) cfg.train.epochs = epochs;
    if (given("--train.max_iters")) cfg.train.max_iters = max_iters;
    if (given("--train.batch_size")) cfg.train.batch_size = batch_size;
    if (given("--train.patience")) cfg.train.patience = patience;
    if (given("--train.grad_method")) cfg.train.grad_method = grad_method;
    if (given("--train.lr_decay_factor")) cfg.train.lr_decay_factor = lr_decay_factor;
    if (given("--train.lr_decay_epoch")) cfg.train.lr_decay_epoch = lr_decay_epoch;
    if (given("--train.eval_atol")) cfg.train.eval_atol = eval_atol;
    if (given("--train.eval_rtol")) cfg.train.eval_rtol = eval_rtol;
    cfg.validate();
    return cfg;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

int cmd_train(const Overrides& ov) {
  RunConfig cfg = ov.resolve();
  fs::create_directories(cfg.out_dir);

  DatasetBundle data = build_dataset(cfg);
  if (data.train.cols() != cfg.model.dim) {
    throw ConfigError("config field 'model.dim' (" + std::to_string(cfg.model.dim) +
                      ") does not match the dataset dimension (" +
                      std::to_string(data.train.cols()) + ")");
  }
  CNFModel model = build_model(cfg);
  // Pin the worker count so the persisted config replays identically.
  if (cfg.train.threads == 0) cfg.train.threads = default_worker_count();
  TrainConfig tcfg = build_train_config(cfg);

  write_text(fs::path(cfg.out_dir) / "config.json", cfg.to_json().dump(2) + "\n");
  if (data.tabular) {
    json stats{{"source", data.tabular->name},
               {"dim", data.tabular->dim},
               {"mean", data.tabular->mean},
               {"stddev", data.tabular->stddev},
               {"n_train", data.tabular->train.rows()},
               {"n_val", data.tabular->val.rows()},
               {"n_test", data.tabular->test.rows()}};
    write_text(fs::path(cfg.out_dir) / "dataset_stats.json", stats.dump(2) + "\n");
  }

  TrainResult res = train(model, data.train, data.val, tcfg);

  {
    std::ofstream log(fs::path(cfg.out_dir) / "trainlog.ndjson");
    res.log.write_ndjson(log);
  }
  json metrics{{"best_val_nll", res.best_val_nll},
               {"best_epoch", res.best_epoch},
               {"iters", res.iters_done},
               {"stop_reason", res.stop_reason}};
  save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.ffj").string(), model,
                  cfg.to_json(), res.best_epoch, metrics);

  std::printf("trained %ld iterations (%s)\n", res.iters_done, res.stop_reason.c_str());
  std::printf("best validation NLL %.6f nats at epoch %ld\n", res.best_val_nll,
              res.best_epoch);
  std::printf("artifacts: %s/{checkpoint.ffj, trainlog.ndjson, config.json}\n",
              cfg.out_dir.c_str());
  const bool failed = res.stop_reason.rfind("diverged", 0) == 0 ||
                      res.stop_reason.rfind("stiffness", 0) == 0;
  if (failed) {
    std::fprintf(stderr, "training aborted: %s\n", res.stop_reason.c_str());
    return 1;
  }
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const Overrides& ov, bool exact_trace,
             double tol_atol, double tol_rtol, const std::string& split,
             const std::string& out_json) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
  RunConfig cfg = ov.resolve();

  DatasetBundle data = build_dataset(cfg);
  const Tensor& chosen = split == "train" ? data.train : (split == "val" ? data.val : data.test);
  if (chosen.cols() != loaded.model.dim()) {
    throw ConfigError("checkpoint dimension " + std::to_string(loaded.model.dim()) +
                      " does not match dataset dimension " + std::to_string(chosen.cols()));
  }

  EvalResult res = evaluate(loaded.model, chosen, exact_trace, tol_atol, tol_rtol, 4096,
                            cfg.seed + 77);
  const std::size_t d = loaded.model.dim();
  std::printf("%s NLL: %.6f +- %.6f nats (n=%zu, %.6f bits/dim, nfe=%ld)\n", split.c_str(),
              res.mean_nll, res.se, res.n, res.bits_per_dim(d), res.nfe);

  json j{{"split", split},
         {"mean_nll", res.mean_nll},
         {"std_nll", res.std_nll},
         {"se", res.se},
         {"n", res.n},
         {"bits_per_dim", res.bits_per_dim(d)},
         {"nfe", res.nfe},
         {"exact_trace", exact_trace}};
  if (data.tabular) j["log_std_correction"] = data.tabular->log_std_sum();
  write_text(out_json, j.dump(2) + "\n");
  return 0;
}

int cmd_sample(const std::string& ckpt_path, std::size_t n, std::uint64_t seed,
               const std::string& out_csv) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
  Tensor s = sample(loaded.model, n, seed);
  std::ofstream out(out_csv);
  if (!out) throw DataError("cannot write " + out_csv);
  const std::size_t d = loaded.model.dim();
  for (std::size_t c = 0; c < d; ++c) out << (c ? ",x" : "x") << c;
  out << "\n";
  out.precision(17);
  for (std::size_t r = 0; r < s.rows(); ++r) {
    for (std::size_t c = 0; c < d; ++c) out << (c ? "," : "") << s.at(r, c);
    out << "\n";
  }
  std::printf("wrote %zu samples to %s\n", s.rows(), out_csv.c_str());
  return 0;
}

int cmd_density_grid(const std::string& ckpt_path, double box_lo, double box_hi,
                     std::size_t resolution, double tolerance, const std::string& out_csv) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
  if (loaded.model.dim() != 2) {
    throw ConfigError("density-grid needs a 2-D model, checkpoint has dim " +
                      std::to_string(loaded.model.dim()));
  }
  if (resolution < 1) throw ConfigError("resolution must be at least 1");
  if (!(box_hi > box_lo)) throw ConfigError("box upper bound must exceed the lower bound");

  StepController ctrl = loaded.model.controller;
  ctrl.atol = ctrl.rtol = tolerance;

  const double h = (box_hi - box_lo) / static_cast<double>(resolution);
  std::ofstream out(out_csv);
  if (!out) throw DataError("cannot write " + out_csv);
  out << "x,y,log_density\n";
  out.precision(12);

  // One solve per grid row, rows fanned out over workers; the CSV and the
  // mass reduction preserve row order.
  TraceOptions opt;
  opt.kind = TraceKind::kExact;
  std::vector<std::vector<double>> logp_rows(resolution);
  auto ranges = shard_ranges(resolution, default_worker_count());
  run_sharded(ranges.size(), [&](std::size_t s) {
    for (std::size_t i = ranges[s].first; i < ranges[s].second; ++i) {
      const double x = box_lo + (static_cast<double>(i) + 0.5) * h;
      std::vector<double> row(resolution * 2);
      for (std::size_t j = 0; j < resolution; ++j) {
        row[j * 2] = x;
        row[j * 2 + 1] = box_lo + (static_cast<double>(j) + 0.5) * h;
      }
      LogDensityResult r =
          log_density(loaded.model, Tensor::from({resolution, 2}, std::move(row)), opt, &ctrl);
      logp_rows[i] = r.logp.to_vector();
    }
  });

  double mass = 0.0;
  for (std::size_t i = 0; i < resolution; ++i) {
    const double x = box_lo + (static_cast<double>(i) + 0.5) * h;
    for (std::size_t j = 0; j < resolution; ++j) {
      const double y = box_lo + (static_cast<double>(j) + 0.5) * h;
      out << x << "," << y << "," << logp_rows[i][j] << "\n";
      mass += std::exp(logp_rows[i][j]);
    }
  }
  mass *= h * h;
  out << "# riemann_mass," << mass << "\n";
  std::printf("riemann mass over [%g,%g]^2 at %zu^2, tol %g: %.6f\n", box_lo, box_hi,
              resolution, tolerance, mass);
  return 0;
}

int cmd_gradcheck(std::size_t dim, std::vector<std::size_t> hidden, std::uint64_t seed,
                  bool corrupt) {
  if (dim > 4) throw ConfigError("gradcheck is for small models (dim <= 4)");
  if (hidden.empty()) hidden = {8};

  CNFModel model;
  model.flows.push_back({DynamicsNet::make(dim, hidden, Activation::kTanh, {0.6, false},
                                           seed + 1),
                         0.0, 1.0});
  model.controller.atol = model.controller.rtol = 1e-8;
  Rng rng(seed + 2);
  Tensor x = rng.normal_tensor({4, dim});

  TraceOptions opt;
  opt.kind = TraceKind::kExact;
  GradientResult adj = adjoint_gradients(model, x, opt);
  std::vector<double> adj_flat;
  for (const Tensor& g : adj.grads) {
    for (double v : g.data()) adj_flat.push_back(corrupt ? -v : v);
  }

  std::vector<double> theta = model.flatten_params();
  auto loss_of = [&](std::vector<double> p) {
    CNFModel m = model;
    m.unflatten_params(p);
    return -mean(log_density(m, x, opt).logp).value();
  };
  std::vector<double> fd(theta.size());
  const double step = 1e-5;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    std::vector<double> p = theta;
    p[i] = theta[i] + step;
    const double up = loss_of(p);
    p[i] = theta[i] - step;
    fd[i] = (up - loss_of(p)) / (2 * step);
  }

  GradientResult unr = unrolled_gradients(model, x, opt, 1000);
  std::vector<double> unr_flat;
  for (const Tensor& g : unr.grads) {
    for (double v : g.data()) unr_flat.push_back(v);
  }

  auto rel_l2 = [](const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      num += (a[i] - b[i]) * (a[i] - b[i]);
      den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
  };
  const double err_fd = rel_l2(adj_flat, fd);
  const double err_unrolled = rel_l2(adj_flat, unr_flat);
  std::printf("adjoint vs finite differences: %.3e\n", err_fd);
  std::printf("adjoint vs unrolled RK4(1000): %.3e\n", err_unrolled);
  const bool ok = err_fd <= 1e-3 && err_unrolled <= 1e-3;
  std::printf("%s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

int cmd_trace_bench(std::size_t dim, std::vector<std::size_t> hidden, std::size_t draws,
                    std::uint64_t seed, const std::string& out_json) {
  if (hidden.empty()) hidden = {dim * 2, 2, dim * 2};
  auto net = DynamicsNet::make(dim, hidden, Activation::kTanh, {1.0, false}, seed, true);
  Rng rng(seed + 9);
  Tensor z_row = rng.normal_tensor({1, dim});
  const double t = 0.5;
  const double exact = exact_trace(net, z_row, t).at(0);

  struct Row {
    std::string name;
    double mean, variance;
  };
  std::vector<Row> rows;
  auto run = [&](const std::string& name, TraceKind kind, NoiseKind noise) {
    const std::size_t width = kind == TraceKind::kBottleneck ? net.bottleneck_width() : dim;
    Rng noise_rng(seed + std::hash<std::string>{}(name));
    double acc = 0.0, acc_sq = 0.0;
    const std::size_t chunk = 2000;
    std::size_t done = 0;
    while (done < draws) {
      const std::size_t b = std::min(chunk, draws - done);
      std::vector<double> zrep(b * dim);
      for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t c = 0; c < dim; ++c) zrep[r * dim + c] = z_row.at(0, c);
      }
      Tensor z = Tensor::from({b, dim}, std::move(zrep));
      Tensor eps = sample_noise(noise, noise_rng, {b, width});
      Tensor tr = kind == TraceKind::kBottleneck ? bottleneck_trace(net, z, t, eps)
                                                 : hutchinson_trace(net, z, t, eps);
      for (double v : tr.data()) {
        acc += v;
        acc_sq += v * v;
      }
      done += b;
    }
    const double mean = acc / static_cast<double>(draws);
    rows.push_back({name, mean, acc_sq / static_cast<double>(draws) - mean * mean});
  };
  run("hutchinson/gaussian", TraceKind::kHutchinson, NoiseKind::kGaussian);
  run("hutchinson/rademacher", TraceKind::kHutchinson, NoiseKind::kRademacher);
  run("bottleneck/gaussian", TraceKind::kBottleneck, NoiseKind::kGaussian);
  run("bottleneck/rademacher", TraceKind::kBottleneck, NoiseKind::kRademacher);

  std::printf("exact trace: %.10f (dim %zu, bottleneck width %zu, %zu draws)\n", exact, dim,
              net.bottleneck_width(), draws);
  std::printf("%-24s %14s %14s\n", "estimator", "mean", "variance");
  json out;
  out["exact"] = exact;
  out["dim"] = dim;
  out["draws"] = draws;
  for (const Row& r : rows) {
    std::printf("%-24s %14.8f %14.8f\n", r.name.c_str(), r.mean, r.variance);
    out["estimators"][r.name] = {{"mean", r.mean}, {"variance", r.variance}};
  }
  if (!out_json.empty()) write_text(out_json, out.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continuous normalizing flow density estimation"};
  app.require_subcommand(1);

  Overrides train_ov;
  CLI::App* sub_train = app.add_subcommand("train", "fit a model by maximum likelihood");
  train_ov.attach(sub_train);

  Overrides eval_ov;
  CLI::App* sub_eval = app.add_subcommand("eval", "mean NLL of a checkpoint on a dataset");
  std::string eval_ckpt, eval_split = "test", eval_out = "eval.json";
  bool eval_exact = true;
  double eval_atol = 1e-8, eval_rtol = 1e-6;
  sub_eval->add_option("--checkpoint", eval_ckpt)->required();
  sub_eval->add_option("--split", eval_split, "train | val | test");
  sub_eval->add_flag("--exact-trace,!--no-exact-trace", eval_exact,
                     "use the exact trace (reporting convention)");
  sub_eval->add_option("--atol", eval_atol);
  sub_eval->add_option("--rtol", eval_rtol);
  sub_eval->add_option("--out-json", eval_out);
  eval_ov.attach(sub_eval);

  CLI::App* sub_sample = app.add_subcommand("sample", "draw samples from a checkpoint");
  std::string sample_ckpt, sample_out = "samples.csv";
  std::size_t sample_n = 1000;
  std::uint64_t sample_seed = 0;
  sub_sample->add_option("--checkpoint", sample_ckpt)->required();
  sub_sample->add_option("--n", sample_n);
  sub_sample->add_option("--seed", sample_seed);
  sub_sample->add_option("--out", sample_out);

  CLI::App* sub_grid = app.add_subcommand("density-grid", "log-density over a 2-D grid");
  std::string grid_ckpt, grid_out = "grid.csv";
  double grid_lo = -4.0, grid_hi = 4.0, grid_tol = 1e-5;
  std::size_t grid_res = 500;
  sub_grid->add_option("--checkpoint", grid_ckpt)->required();
  sub_grid->add_option("--box-min", grid_lo);
  sub_grid->add_option("--box-max", grid_hi);
  sub_grid->add_option("--resolution", grid_res);
  sub_grid->add_option("--tolerance", grid_tol, "atol and rtol for the solves");
  sub_grid->add_option("--out", grid_out);

  CLI::App* sub_gc = app.add_subcommand("gradcheck", "adjoint gradient self-test");
  std::size_t gc_dim = 2;
  std::vector<std::size_t> gc_hidden;
  std::uint64_t gc_seed = 0;
  bool gc_corrupt = false;
  sub_gc->add_option("--dim", gc_dim);
  sub_gc->add_option("--hidden", gc_hidden)->delimiter(',');
  sub_gc->add_option("--seed", gc_seed);
  sub_gc->add_flag("--corrupt", gc_corrupt)->group("");  // test hook, hidden

  CLI::App* sub_tb = app.add_subcommand("trace-bench", "trace estimator statistics");
  std::size_t tb_dim = 10, tb_draws = 100000;
  std::vector<std::size_t> tb_hidden;
  std::uint64_t tb_seed = 0;
  std::string tb_out;
  sub_tb->add_option("--dim", tb_dim);
  sub_tb->add_option("--hidden", tb_hidden)->delimiter(',');
  sub_tb->add_option("--draws", tb_draws);
  sub_tb->add_option("--seed", tb_seed);
  sub_tb->add_option("--out-json", tb_out);

  try {
    app.parse(argc, argv);
    if (sub_train->parsed()) return cmd_train(train_ov);
    if (sub_eval->parsed()) {
      return cmd_eval(eval_ckpt, eval_ov, eval_exact, eval_atol, eval_rtol, eval_split,
                      eval_out);
    }
    if (sub_sample->parsed()) return cmd_sample(sample_ckpt, sample_n, sample_seed, sample_out);
    if (sub_grid->parsed()) {
      return cmd_density_grid(grid_ckpt, grid_lo, grid_hi, grid_res, grid_tol, grid_out);
    }
    if (sub_gc->parsed()) return cmd_gradcheck(gc_dim, gc_hidden, gc_seed, gc_corrupt);
    if (sub_tb->parsed()) return cmd_trace_bench(tb_dim, tb_hidden, tb_draws, tb_seed, tb_out);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const FlowError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
