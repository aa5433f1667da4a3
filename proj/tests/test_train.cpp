#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "cnflow/data.hpp"
#include "cnflow/train.hpp"
#include "test_util.hpp"

using namespace cnflow;

namespace {

CNFModel toy_model(std::size_t dim, std::vector<std::size_t> hidden, std::uint64_t seed,
                   double gain = 1.0) {
  CNFModel model;
  model.flows.push_back(
      {DynamicsNet::make(dim, std::move(hidden), Activation::kTanh, {gain, true}, seed),
       0.0, 1.0});
  model.controller.atol = model.controller.rtol = 1e-5;
  return model;
}

double median_loss(const std::vector<IterRecord>& iters, std::size_t lo, std::size_t hi) {
  std::vector<double> v;
  for (std::size_t i = lo; i < hi && i < iters.size(); ++i) v.push_back(iters[i].loss);
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

TEST_CASE("adam first step moves against the gradient sign") {
  std::vector<double> p = {1.0, -2.0, 0.5};
  std::vector<double> g = {0.3, -0.7, 0.0001};
  AdamState st;
  AdamConfig cfg;
  adam_step(p, g, st, cfg, 0.1);
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.3 / (0.3 + 1e-8)).epsilon(1e-9));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.1 * 0.7 / (0.7 + 1e-8)).epsilon(1e-9));
  CHECK(p[2] < 0.5);  // tiny gradient still moves roughly -lr * sign(g)
}

TEST_CASE("adam leaves parameters untouched for zero gradients") {
  std::vector<double> p = {0.25, -1.5};
  std::vector<double> p0 = p;
  std::vector<double> g = {0.0, 0.0};
  AdamState st;
  AdamConfig cfg;
  for (int i = 0; i < 3; ++i) adam_step(p, g, st, cfg, 0.05);
  CHECK(p[0] == p0[0]);
  CHECK(p[1] == p0[1]);
}

TEST_CASE("adam matches a hand-computed two-step trace on a scalar") {
  // lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, grads 0.5 then -0.25.
  std::vector<double> p = {1.0};
  AdamState st;
  AdamConfig cfg;

  adam_step(p, std::vector<double>{0.5}, st, cfg, 0.1);
  double m = 0.1 * 0.5, v = 0.001 * 0.25;
  double mh = m / (1 - 0.9), vh = v / (1 - 0.999);
  double want = 1.0 - 0.1 * mh / (std::sqrt(vh) + 1e-8);
  CHECK(p[0] == doctest::Approx(want).epsilon(1e-15));

  adam_step(p, std::vector<double>{-0.25}, st, cfg, 0.1);
  m = 0.9 * m + 0.1 * -0.25;
  v = 0.999 * v + 0.001 * 0.0625;
  mh = m / (1 - 0.81);
  vh = v / (1 - 0.999 * 0.999);
  want -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
  CHECK(p[0] == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("identity-init model scores standard normal data at the Gaussian entropy") {
  CNFModel model = toy_model(4, {16}, 3, 0.8);  // zero final layer: identity flow
  Rng rng(10);
  Tensor data = rng.normal_tensor({10'000, 4});
  EvalResult res = evaluate(model, data, true, 1e-6, 1e-6);

  // Identity flow must reproduce the base measure on the sample exactly.
  Tensor base = base_log_density(data);
  double sample_nll = 0.0;
  for (double lp : base.data()) sample_nll -= lp;
  sample_nll /= 1e4;
  CHECK(std::abs(res.mean_nll - sample_nll) < 1e-9);

  // And the sample mean sits near the analytic Gaussian entropy.
  const double want = 4.0 * 1.4189385332046727;
  CHECK(std::abs(res.mean_nll - want) <= 2.0 * res.se);
}

TEST_CASE("evaluate rejects an empty dataset") {
  CNFModel model = toy_model(2, {8}, 1);
  CHECK_THROWS_AS(evaluate(model, Tensor::from({0, 2}, {}), true, 1e-6, 1e-6), DataError);
}

TEST_CASE("exact and stochastic evaluation agree within noise") {
  CNFModel model = toy_model(2, {10, 10}, 7, 0.5);
  // Give the model non-trivial dynamics.
  Rng wiggle(8);
  std::vector<double> params = model.flatten_params();
  for (double& p : params) p += 0.2 * wiggle.normal();
  model.unflatten_params(params);

  Rng rng(9);
  Tensor data = rng.normal_tensor({256, 2});
  EvalResult exact = evaluate(model, data, true, 1e-6, 1e-6);
  double acc = 0.0;
  const int reps = 40;
  for (int k = 0; k < reps; ++k) {
    EvalResult noisy = evaluate(model, data, false, 1e-6, 1e-6, 1024, 1000 + k);
    acc += noisy.mean_nll;
  }
  acc /= reps;
  // Generous envelope: the stochastic means concentrate around the exact one.
  CHECK(std::abs(acc - exact.mean_nll) < 0.05);
}

TEST_CASE("zero learning rate leaves parameters and loss frozen") {
  CNFModel model = toy_model(2, {8}, 21, 0.6);
  const std::vector<double> before = model.flatten_params();

  Toy2DSpec spec;
  spec.family = ToyFamily::kTwoGaussians;
  spec.seed = 2;
  Tensor data = generate_toy(spec, 64);

  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 3;
  cfg.batch_size = 64;  // full batch keeps the iteration order fixed
  cfg.trace_kind = TraceKind::kExact;
  cfg.patience = 0;
  cfg.seed = 5;
  TrainResult res = train(model, data, data, cfg);

  const std::vector<double> after = model.flatten_params();
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
  for (const IterRecord& r : res.log.iters) CHECK(r.loss == res.log.iters[0].loss);
}

TEST_CASE("training is deterministic: same seed, same first ten losses") {
  Toy2DSpec spec;
  spec.family = ToyFamily::kTwoGaussians;
  spec.seed = 31;
  Tensor data = generate_toy(spec, 256);

  TrainConfig cfg;
  cfg.lr = 5e-3;
  cfg.epochs = 5;
  cfg.max_iters = 10;
  cfg.batch_size = 32;
  cfg.atol = cfg.rtol = 1e-4;
  cfg.seed = 77;

  CNFModel m1 = toy_model(2, {12, 12}, 4, 0.4);
  CNFModel m2 = toy_model(2, {12, 12}, 4, 0.4);
  TrainResult r1 = train(m1, data, data, cfg);
  TrainResult r2 = train(m2, data, data, cfg);
  REQUIRE(r1.log.iters.size() == 10);
  REQUIRE(r2.log.iters.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(r1.log.iters[i].loss == r2.log.iters[i].loss);
  }
}

TEST_CASE("loss decreases over the first two hundred iterations on two_gaussians") {
  Toy2DSpec spec;
  spec.family = ToyFamily::kTwoGaussians;
  spec.seed = 41;
  Tensor data = generate_toy(spec, 2048);
  Tensor val = generate_toy({ToyFamily::kTwoGaussians, 1.0, 42}, 256);

  CNFModel model = toy_model(2, {16, 16}, 6, 0.5);
  TrainConfig cfg;
  cfg.lr = 5e-3;
  cfg.epochs = 100;
  cfg.max_iters = 200;
  cfg.batch_size = 64;
  cfg.atol = cfg.rtol = 1e-4;
  cfg.patience = 0;
  cfg.seed = 13;
  TrainResult res = train(model, data, val, cfg);
  REQUIRE(res.log.iters.size() == 200);
  CHECK(median_loss(res.log.iters, 100, 200) < median_loss(res.log.iters, 0, 100));
}

TEST_CASE("divergent training aborts and keeps the last good parameters") {
  // Squares of these values overflow inside the base log-density, which is
  // how a run on absurd unstandardized data actually blows up.
  Toy2DSpec spec;
  spec.family = ToyFamily::kTwoGaussians;
  spec.seed = 51;
  Tensor wild = scale(generate_toy(spec, 128), 1e160);

  CNFModel model = toy_model(2, {8}, 9, 0.5);
  const std::vector<double> initial = model.flatten_params();

  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 64;
  cfg.atol = cfg.rtol = 1e-3;
  cfg.seed = 1;
  TrainResult res = train(model, wild, wild, cfg);
  CHECK(res.stop_reason.find("diverged") != std::string::npos);
  // No epoch finished, so the best checkpoint is the starting point.
  const std::vector<double> after = model.flatten_params();
  for (std::size_t i = 0; i < initial.size(); ++i) CHECK(after[i] == initial[i]);
}

TEST_CASE("stiff training aborts with the weight-decay diagnostic") {
  Toy2DSpec spec;
  spec.family = ToyFamily::kTwoGaussians;
  spec.seed = 51;
  Tensor data = generate_toy(spec, 128);

  CNFModel model = toy_model(2, {8}, 9, 0.5);
  const std::vector<double> initial = model.flatten_params();

  TrainConfig cfg;
  cfg.lr = 1e150;  // one update saturates every activation
  cfg.epochs = 5;
  cfg.batch_size = 64;
  cfg.atol = cfg.rtol = 1e-3;
  cfg.seed = 1;
  TrainResult res = train(model, data, data, cfg);
  CHECK(res.stop_reason.find("stiffness") != std::string::npos);
  CHECK(res.stop_reason.find("weight decay") != std::string::npos);
  const std::vector<double> after = model.flatten_params();
  for (std::size_t i = 0; i < initial.size(); ++i) CHECK(after[i] == initial[i]);
}

TEST_CASE("checkpoints round-trip parameters and evaluation bitwise") {
  CNFModel model = toy_model(2, {10, 10}, 71, 0.7);
  Rng wiggle(72);
  std::vector<double> params = model.flatten_params();
  for (double& p : params) p += 0.1 * wiggle.normal();
  model.unflatten_params(params);

  Rng rng(73);
  Tensor data = rng.normal_tensor({128, 2});
  EvalResult before = evaluate(model, data, true, 1e-6, 1e-6);

  nlohmann::json config{{"note", "round-trip"}};
  nlohmann::json metrics{{"val_nll", before.mean_nll}};
  const std::string path = "/tmp/cnflow_test_ckpt.ffj";
  save_checkpoint(path, model, config, 3, metrics);

  LoadedCheckpoint loaded = load_checkpoint(path);
  CHECK(loaded.header.at("epoch") == 3);
  CHECK(loaded.header.at("config_hash") == config_hash(config));
  const std::vector<double> a = model.flatten_params();
  const std::vector<double> b = loaded.model.flatten_params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  EvalResult after = evaluate(loaded.model, data, true, 1e-6, 1e-6);
  CHECK(after.mean_nll == before.mean_nll);
  std::remove(path.c_str());
}

TEST_CASE("a small weight decay reduces the final solver cost on checkerboard") {
  auto run = [](double wd) {
    Toy2DSpec spec;
    spec.family = ToyFamily::kCheckerboard;
    spec.seed = 341;
    Tensor train_data = generate_toy(spec, 4096);
    Tensor val_data = generate_toy({ToyFamily::kCheckerboard, 1.0, 342}, 256);
    CNFModel model;
    model.flows.push_back(
        {DynamicsNet::make(2, {24, 24}, Activation::kTanh, {1.0, true}, 10), 0.0, 1.0});
    model.controller.atol = model.controller.rtol = 1e-4;
    TrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.epochs = 1'000'000;
    cfg.max_iters = 400;
    cfg.batch_size = 128;
    cfg.weight_decay = wd;
    cfg.atol = cfg.rtol = 1e-4;
    cfg.trace_kind = TraceKind::kHutchinson;
    cfg.trace_noise = NoiseKind::kRademacher;
    cfg.eval_atol = cfg.eval_rtol = 1e-4;
    cfg.patience = 0;
    cfg.seed = 10;
    cfg.threads = 1;  // shard layout is part of the compared trajectory
    TrainResult res = train(model, train_data, val_data, cfg);
    const auto& iters = res.log.iters;
    double acc = 0.0;
    for (std::size_t i = iters.size() - 40; i < iters.size(); ++i) {
      acc += static_cast<double>(iters[i].nfe_forward);
    }
    return acc / 40.0;
  };
  // Trend at one fixed seed: decay keeps the learned dynamics milder.
  CHECK(run(1e-4) <= run(0.0));
}

TEST_CASE("train log serializes to ndjson") {
  TrainLog log;
  log.iters.push_back({0, 0, 1.5, 20, 40, 3.5});
  log.epochs.push_back({0, 1.4, 0.01, 1, 1e-3});
  std::ostringstream out;
  log.write_ndjson(out);
  std::istringstream in(out.str());
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.contains("type"));
    ++lines;
  }
  CHECK(lines == 2);
}
