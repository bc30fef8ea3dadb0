// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include "helpers.hpp"
#include "matml/allreduce.hpp"
#include "matml/checkpoint.hpp"
#include "matml/trainer.hpp"

using namespace matml;
using namespace matml::testing;

namespace {

EGNNConfig tiny_config() {
  EGNNConfig c;
  c.embed_dim = 4;
  c.message_dim = 4;
  c.num_layers = 1;
  c.node_mlp_dims = {6};
  c.edge_mlp_dims = {6};
  c.pos_mlp_dims = {6};
  c.node_proj_depth = 1;
  c.node_proj_hidden = 8;
  c.out_depth = 1;
  c.out_hidden = 8;
  return c;
}

TrainerConfig base_config() {
  TrainerConfig c;
  c.max_epochs = 3;
  c.batch_size = 4;
  c.learning_rate = 0.01;
  c.gamma = 0.9;
  c.seed = 7;
  return c;
}

double param_distance(const ParamMap& a, const ParamMap& b) {
  double m = 0;
  for (const auto& [name, t] : a) m = std::max(m, max_abs_diff(t, b.at(name)));
  return m;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("adam first step moves by about lr in the gradient direction") {
  ParamMap params;
  params.emplace("w", Tensor::vec({1.0, -2.0}));
  ParamMap grads;
  grads.emplace("w", Tensor::vec({0.5, -0.25}));
  Adam adam(params);
  adam.step(params, grads, 0.1);
  // first Adam step is -lr * g / (|g| + eps)
  CHECK(params.at("w").data[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
  CHECK(params.at("w").data[1] == doctest::Approx(-2.0 + 0.1).epsilon(1e-6));
  CHECK(adam.steps() == 1);
}

TEST_CASE("early stopping follows the spec example and a reference scan") {
  EarlyStopping es(1);
  CHECK_FALSE(es.update(3.0));
  CHECK_FALSE(es.update(2.0));
  CHECK_FALSE(es.update(2.5));
  CHECK(es.update(2.6));  // stop after the 4th epoch

  EarlyStopping down(0);
  for (int i = 0; i < 50; ++i) CHECK_FALSE(down.update(100.0 - i));

  // random histories vs a reference scan
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t patience = rng.index(4);
    std::vector<double> history;
    for (int i = 0; i < 12; ++i) history.push_back(rng.uniform(0, 10));

    EarlyStopping sut(patience);
    std::optional<std::size_t> got;
    for (std::size_t i = 0; i < history.size() && !got; ++i)
      if (sut.update(history[i])) got = i;

    std::optional<std::size_t> want;
    double best = 1e300;
    std::size_t bad = 0;
    for (std::size_t i = 0; i < history.size() && !want; ++i) {
      if (history[i] < best) {
        best = history[i];
        bad = 0;
      } else if (++bad >= patience + 1) {
        want = i;
      }
    }
    CHECK(got == want);
  }
}

TEST_CASE("allreduce_mean examples and errors") {
  ParamMap a, b;
  a.emplace("g", Tensor::vec({1, 2}));
  b.emplace("g", Tensor::vec({3, 4}));
  std::vector<ParamMap> two = {a, b};
  ParamMap mean = allreduce_mean(std::span<const ParamMap>(two));
  CHECK(mean.at("g").data == std::vector<double>{2, 3});

  std::vector<ParamMap> one = {a};
  CHECK(allreduce_mean(std::span<const ParamMap>(one)).at("g").data == a.at("g").data);

  ParamMap wrong_shape;
  wrong_shape.emplace("g", Tensor::vec({1, 2, 3}));
  std::vector<ParamMap> bad = {a, wrong_shape};
  CHECK_THROWS_WITH_AS((void)allreduce_mean(std::span<const ParamMap>(bad)),
                       doctest::Contains("shape"), Error);

  ParamMap wrong_key;
  wrong_key.emplace("h", Tensor::vec({1, 2}));
  std::vector<ParamMap> bad2 = {a, wrong_key};
  CHECK_THROWS_AS((void)allreduce_mean(std::span<const ParamMap>(bad2)), Error);
}

TEST_CASE("ring allreduce across loopback sockets") {
  auto run_ring = [](const std::vector<std::vector<double>>& payloads) {
    const std::size_t world = payloads.size();
    auto listeners = open_ring_listeners(world);
    std::vector<std::vector<double>> results(world);
    std::vector<std::thread> threads;
    for (std::size_t r = 0; r < world; ++r) {
      threads.emplace_back([&, r]() {
        RingPeer peer(r, world, listeners);
        results[r] = ring_allreduce_mean(peer, payloads[r]);
      });
    }
    for (auto& t : threads) t.join();
    for (const auto& l : listeners) close(l.fd);
    return results;
  };

  SUBCASE("smallest ring is the pairwise mean") {
    auto res = run_ring({{1, 2, 3, 4, 5}, {3, 4, 5, 6, 7}});
    for (std::size_t r = 0; r < 2; ++r)
      CHECK(res[r] == std::vector<double>{2, 3, 4, 5, 6});
  }

  SUBCASE("all-ones is a fixed point of the mean") {
    auto res = run_ring({std::vector<double>(6, 1.0), std::vector<double>(6, 1.0),
                         std::vector<double>(6, 1.0)});
    for (const auto& r : res)
      for (double v : r) CHECK(v == 1.0);
  }

  SUBCASE("four random payloads match the arithmetic mean oracle") {
    Rng rng(13);
    std::vector<std::vector<double>> payloads(4, std::vector<double>(1001));
    std::vector<double> want(1001, 0.0);
    for (auto& p : payloads)
      for (double& v : p) v = rng.uniform(-5, 5);
    for (std::size_t i = 0; i < want.size(); ++i) {
      for (const auto& p : payloads) want[i] += p[i];
      want[i] /= 4.0;
    }
    auto res = run_ring(payloads);
    for (const auto& r : res) {
      REQUIRE(r.size() == want.size());
      for (std::size_t i = 0; i < r.size(); ++i) CHECK(std::fabs(r[i] - want[i]) < 1e-12);
    }
    // every rank holds bit-identical results
    CHECK(res[0] == res[1]);
    CHECK(res[0] == res[2]);
    CHECK(res[0] == res[3]);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  TempDir dir("test_trainer_ckpt");
  EGNN model(tiny_config(), 3);
  Adam adam(model.parameters());

  Checkpoint ckpt;
  ckpt.architecture = model.architecture();
  ckpt.model_config_json = model.config_json();
  ckpt.trainer_config_json = trainer_config_to_json(base_config());
  ckpt.task = "s2ef";
  ckpt.epoch = 4;
  ckpt.global_step = 123;
  ckpt.lr = 0.003;
  ckpt.rng_state = "1 2 3";
  ckpt.normalizer = {-1.5, 2.25};
  ckpt.adam_step = 9;
  ckpt.params = model.parameters();
  ckpt.adam_m = adam.first_moment();
  ckpt.adam_v = adam.second_moment();

  const std::string path = (dir.path / "a.ckpt").string();
  save_checkpoint(ckpt, path);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.task == "s2ef");
  CHECK(back.epoch == 4);
  CHECK(back.global_step == 123);
  CHECK(back.rng_state == "1 2 3");
  CHECK(back.normalizer.mean == -1.5);
  CHECK(back.normalizer.std == 2.25);
  CHECK(back.adam_step == 9);
  REQUIRE(back.params.size() == ckpt.params.size());
  for (const auto& [name, t] : ckpt.params) CHECK(back.params.at(name).data == t.data);

  // loading into a model with different dimensions errors naming the tensor
  EGNNConfig other = tiny_config();
  other.embed_dim = 8;
  EGNN wrong(other, 1);
  CHECK_THROWS_WITH_AS(wrong.set_parameters(back.params), doctest::Contains("embedding"), Error);

  // truncated files are rejected
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 16));
  }
  CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("truncated"), Error);
}

TEST_CASE("zero epochs returns immediately with untouched parameters") {
  EGNN model(tiny_config(), 5);
  ParamMap before = model.parameters();
  auto data = generate_synthetic(6, 4, 6, 6);
  TrainerConfig cfg = base_config();
  cfg.max_epochs = 0;
  TaskRun run = fit(model, std::span<const AtomicStructure>(data), {}, TaskKind::is2re, cfg);
  CHECK(run.epochs_completed == 0);
  CHECK(run.history.empty());
  CHECK(param_distance(before, model.parameters()) == 0.0);
}

TEST_CASE("training reduces the train MAE and decays the learning rate exactly") {
  EGNN model(tiny_config(), 7);
  auto data = generate_synthetic(10, 4, 6, 8);
  TrainerConfig cfg = base_config();
  cfg.max_epochs = 30;
  cfg.batch_size = 5;
  TaskRun run = fit(model, std::span<const AtomicStructure>(data), {}, TaskKind::is2re, cfg);
  REQUIRE(run.history.size() == 30);
  CHECK(run.history.back().train_energy_mae_ev < run.history.front().train_energy_mae_ev);
  for (std::size_t e = 0; e < run.history.size(); ++e)
    CHECK(run.history[e].lr == cfg.learning_rate * std::pow(cfg.gamma, static_cast<double>(e)));
}

TEST_CASE("gradient accumulation matches one combined batch") {
  auto data = generate_synthetic(8, 4, 6, 9);

  EGNN a(tiny_config(), 10);
  TrainerConfig ca = base_config();
  ca.max_epochs = 1;
  ca.batch_size = 4;
  ca.accumulate_grad_batches = 2;
  fit(a, std::span<const AtomicStructure>(data), {}, TaskKind::is2re, ca);

  EGNN b(tiny_config(), 10);
  TrainerConfig cb = base_config();
  cb.max_epochs = 1;
  cb.batch_size = 8;
  cb.accumulate_grad_batches = 1;
  fit(b, std::span<const AtomicStructure>(data), {}, TaskKind::is2re, cb);

  CHECK(param_distance(a.parameters(), b.parameters()) < 1e-8);
}

TEST_CASE("threaded ddp reproduces single-worker updates") {
  auto data = generate_synthetic(8, 4, 6, 11);
  for (TaskKind task : {TaskKind::is2re, TaskKind::s2ef}) {
    EGNN single(tiny_config(), 12);
    TrainerConfig cs = base_config();
    cs.max_epochs = 2;
    cs.batch_size = 8;
    fit(single, std::span<const AtomicStructure>(data), {}, task, cs);

    for (std::size_t devices : {2ul, 4ul}) {
      EGNN ddp(tiny_config(), 12);
      TrainerConfig cd = cs;
      cd.strategy = Strategy::threaded_ddp;
      cd.devices = devices;
      fit(ddp, std::span<const AtomicStructure>(data), {}, task, cd);
      CHECK(param_distance(single.parameters(), ddp.parameters()) < 1e-8);
    }
  }
}

TEST_CASE("process ddp over the ring reproduces single-worker updates") {
  auto data = generate_synthetic(8, 4, 6, 13);
  EGNN single(tiny_config(), 14);
  TrainerConfig cs = base_config();
  cs.max_epochs = 2;
  cs.batch_size = 8;
  fit(single, std::span<const AtomicStructure>(data), {}, TaskKind::is2re, cs);

  EGNN ddp(tiny_config(), 14);
  TrainerConfig cd = cs;
  cd.strategy = Strategy::process_ddp;
  cd.devices = 2;
  fit(ddp, std::span<const AtomicStructure>(data), {}, TaskKind::is2re, cd);
  CHECK(param_distance(single.parameters(), ddp.parameters()) < 1e-8);
}

TEST_CASE("callbacks fire in causal order and the csv has one row per epoch") {
  TempDir dir("test_trainer_cb");
  EGNN model(tiny_config(), 15);
  auto train = generate_synthetic(6, 4, 5, 16);
  auto val = generate_synthetic(3, 4, 5, 17);

  std::vector<std::string> events;
  Callback recorder = [&](CallbackEvent e, const RunState&) {
    events.push_back(callback_event_name(e));
  };

  TrainerConfig cfg = base_config();
  cfg.max_epochs = 2;
  cfg.batch_size = 3;
  cfg.log_path = (dir.path / "metrics.csv").string();
  TaskRun run = fit(model, std::span<const AtomicStructure>(train),
                    std::span<const AtomicStructure>(val), TaskKind::is2re, cfg, {recorder});

  std::vector<std::string> want = {
      "on_fit_start",
      "on_train_batch_end", "on_train_batch_end", "on_train_epoch_end", "on_validation_epoch_end",
      "on_train_batch_end", "on_train_batch_end", "on_train_epoch_end", "on_validation_epoch_end",
      "on_fit_end"};
  CHECK(events == want);

  std::ifstream log(cfg.log_path);
  std::string line;
  std::size_t lines = 0;
  std::getline(log, line);
  CHECK(line == "epoch,step,split,energy_mae_ev,force_mae_ev_per_ang,lr,epoch_time_s");
  while (std::getline(log, line)) ++lines;
  CHECK(lines == run.epochs_completed);
  CHECK(run.history.size() == 2);
  CHECK(run.history[0].val_energy_mae_ev.has_value());
}

TEST_CASE("resume from checkpoint reproduces the uninterrupted run") {
  TempDir dir_a("test_trainer_resume_a");
  TempDir dir_b("test_trainer_resume_b");
  auto data = generate_synthetic(10, 4, 6, 18);
  auto val = generate_synthetic(4, 4, 6, 19);

  EGNN full(tiny_config(), 20);
  TrainerConfig cfg = base_config();
  cfg.max_epochs = 10;
  cfg.batch_size = 5;
  cfg.checkpoint_dir = (dir_a.path).string();
  fit(full, std::span<const AtomicStructure>(data), std::span<const AtomicStructure>(val),
      TaskKind::is2re, cfg);

  EGNN half(tiny_config(), 20);
  TrainerConfig cfg_half = cfg;
  cfg_half.max_epochs = 5;
  cfg_half.checkpoint_dir = (dir_b.path).string();
  TaskRun first = fit(half, std::span<const AtomicStructure>(data),
                      std::span<const AtomicStructure>(val), TaskKind::is2re, cfg_half);

  TrainerConfig cfg_rest = cfg;
  cfg_rest.checkpoint_dir = (dir_b.path).string();
  TaskRun second = fit(half, std::span<const AtomicStructure>(data),
                       std::span<const AtomicStructure>(val), TaskKind::is2re, cfg_rest,
                       {}, first.checkpoint_path);
  CHECK(second.epochs_completed == 10);
  CHECK(param_distance(full.parameters(), half.parameters()) < 1e-10);
}

TEST_CASE("non-finite loss aborts naming the step") {
  EGNN model(tiny_config(), 21);
  auto data = generate_synthetic(6, 4, 5, 22);
  TrainerConfig cfg = base_config();
  cfg.learning_rate = 1e300;
  cfg.batch_size = 2;
  cfg.max_epochs = 2;
  CHECK_THROWS_WITH_AS(
      (void)fit(model, std::span<const AtomicStructure>(data), {}, TaskKind::is2re, cfg),
      doctest::Contains("non-finite loss at step"), Error);
}

TEST_CASE("trainer config json round trip rejects unknown keys") {
  TrainerConfig c = base_config();
  c.strategy = Strategy::threaded_ddp;
  c.devices = 4;
  c.early_stop = EarlyStopConfig{"val_energy_mae_ev", 2};
  TrainerConfig back = trainer_config_from_json(trainer_config_to_json(c));
  CHECK(back.max_epochs == c.max_epochs);
  CHECK(back.devices == 4);
  CHECK(back.strategy == Strategy::threaded_ddp);
  REQUIRE(back.early_stop.has_value());
  CHECK(back.early_stop->patience == 2);

  CHECK_THROWS_WITH_AS((void)trainer_config_from_json("{\"lr\": 0.1}"),
                       doctest::Contains("valid keys"), Error);
  CHECK_THROWS_AS((void)trainer_config_from_json("{\"devices\": 0}"), Error);
}
