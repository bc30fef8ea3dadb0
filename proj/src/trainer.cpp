// SPDX-License-Identifier: Apache-2.0
#include "matml/trainer.hpp"

#include <malloc.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "matml/allreduce.hpp"
#include "matml/checkpoint.hpp"
#include "matml/common.hpp"
#include "matml/rng.hpp"

namespace matml {

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::single: return "single";
    case Strategy::threaded_ddp: return "threaded-ddp";
    case Strategy::process_ddp: return "process-ddp";
  }
  return "?";
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "single") return Strategy::single;
  if (name == "threaded-ddp") return Strategy::threaded_ddp;
  if (name == "process-ddp") return Strategy::process_ddp;
  fail("unknown strategy '" + name + "' (expected single, threaded-ddp or process-ddp)");
}

const char* callback_event_name(CallbackEvent e) {
  switch (e) {
    case CallbackEvent::on_fit_start: return "on_fit_start";
    case CallbackEvent::on_train_batch_end: return "on_train_batch_end";
    case CallbackEvent::on_train_epoch_end: return "on_train_epoch_end";
    case CallbackEvent::on_validation_epoch_end: return "on_validation_epoch_end";
    case CallbackEvent::on_fit_end: return "on_fit_end";
  }
  return "?";
}

void TrainerConfig::validate() const {
  if (devices < 1) fail("trainer config: devices must be >= 1");
  if (batch_size < 1) fail("trainer config: batch_size must be >= 1");
  if (accumulate_grad_batches < 1) fail("trainer config: accumulate_grad_batches must be >= 1");
  if (!(gamma > 0.0) || gamma > 1.0) fail("trainer config: gamma must be in (0, 1]");
  if (!(learning_rate > 0.0)) fail("trainer config: learning_rate must be positive");
  if (!(graph.cutoff > 0.0)) fail("trainer config: cutoff must be positive");
}

std::string trainer_config_to_json(const TrainerConfig& c) {
  nlohmann::ordered_json j;
  j["max_epochs"] = c.max_epochs;
  j["batch_size"] = c.batch_size;
  j["devices"] = c.devices;
  j["strategy"] = strategy_name(c.strategy);
  j["accumulate_grad_batches"] = c.accumulate_grad_batches;
  j["learning_rate"] = c.learning_rate;
  j["gamma"] = c.gamma;
  j["seed"] = c.seed;
  j["checkpoint_dir"] = c.checkpoint_dir;
  j["log_path"] = c.log_path;
  if (c.early_stop) {
    j["early_stop"] = {{"monitor", c.early_stop->monitor}, {"patience", c.early_stop->patience}};
  } else {
    j["early_stop"] = nullptr;
  }
  j["cutoff"] = c.graph.cutoff;
  j["max_neighbors"] = c.graph.max_neighbors;
  return j.dump();
}

TrainerConfig trainer_config_from_json(const std::string& json_text) {
  static const std::vector<std::string> valid = {
      "max_epochs", "batch_size",     "devices",  "strategy", "accumulate_grad_batches",
      "learning_rate", "gamma",       "seed",     "checkpoint_dir", "log_path",
      "early_stop", "cutoff", "max_neighbors"};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("trainer config: ") + e.what());
  }
  for (const auto& [key, unused] : j.items()) {
    if (std::find(valid.begin(), valid.end(), key) == valid.end()) {
      std::string keys;
      for (const auto& v : valid) keys += (keys.empty() ? "" : ", ") + v;
      fail("trainer config: unknown key '" + key + "'; valid keys: " + keys);
    }
  }
  TrainerConfig c;
  if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<std::size_t>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("devices")) c.devices = j["devices"].get<std::size_t>();
  if (j.contains("strategy")) c.strategy = strategy_from_name(j["strategy"].get<std::string>());
  if (j.contains("accumulate_grad_batches"))
    c.accumulate_grad_batches = j["accumulate_grad_batches"].get<std::size_t>();
  if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("gamma")) c.gamma = j["gamma"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("checkpoint_dir")) c.checkpoint_dir = j["checkpoint_dir"].get<std::string>();
  if (j.contains("log_path")) c.log_path = j["log_path"].get<std::string>();
  if (j.contains("early_stop") && !j["early_stop"].is_null()) {
    EarlyStopConfig es;
    if (j["early_stop"].contains("monitor")) es.monitor = j["early_stop"]["monitor"].get<std::string>();
    if (j["early_stop"].contains("patience")) es.patience = j["early_stop"]["patience"].get<std::size_t>();
    c.early_stop = es;
  }
  if (j.contains("cutoff")) c.graph.cutoff = j["cutoff"].get<double>();
  if (j.contains("max_neighbors")) c.graph.max_neighbors = j["max_neighbors"].get<std::size_t>();
  c.validate();
  return c;
}

bool EarlyStopping::update(double value) {
  if (value < best_) {
    best_ = value;
    bad_streak_ = 0;
    return false;
  }
  ++bad_streak_;
  return bad_streak_ >= patience_ + 1;
}

Adam::Adam(const ParamMap& params, AdamConfig config) : config_(config) {
  for (const auto& [name, t] : params) {
    m_.emplace(name, Tensor::zeros(t.shape));
    v_.emplace(name, Tensor::zeros(t.shape));
  }
}

void Adam::step(ParamMap& params, const ParamMap& grads, double lr) {
  ++t_;
  const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) fail("adam: missing gradient for '" + name + "'");
    const Tensor& g = git->second;
    Tensor& m = m_.at(name);
    Tensor& v = v_.at(name);
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      m.data[i] = config_.beta1 * m.data[i] + (1.0 - config_.beta1) * g.data[i];
      v.data[i] = config_.beta2 * v.data[i] + (1.0 - config_.beta2) * g.data[i] * g.data[i];
      const double m_hat = m.data[i] / bias1;
      const double v_hat = v.data[i] / bias2;
      p.data[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

void Adam::restore(ParamMap m, ParamMap v, std::int64_t t) {
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Prepared {
  std::vector<FeatureGraph> graphs;
  std::vector<double> energy_norm;
  std::vector<Tensor> forces_norm;  // per record, (N_i, 3); s2ef only
  std::vector<std::size_t> atoms;
};

Prepared prepare(std::span<const AtomicStructure> records, TaskKind task, const Normalizer& norm,
                 const GraphBuildOptions& opts) {
  Prepared out;
  out.graphs.reserve(records.size());
  for (const AtomicStructure& s : records) {
    if (!s.energy) fail("fit: record '" + s.id + "' has no energy label");
    if (task == TaskKind::s2ef && !s.forces)
      fail("fit: record '" + s.id + "' has no force labels");
    out.graphs.push_back(radius_graph(s, opts.cutoff, opts.max_neighbors));
    out.energy_norm.push_back(normalize_energy(norm, *s.energy));
    out.atoms.push_back(s.size());
    if (task == TaskKind::s2ef) {
      Tensor f = Tensor::zeros({s.size(), 3});
      for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t c = 0; c < 3; ++c) f.data[i * 3 + c] = (*s.forces)[i][c] / norm.std;
      out.forces_norm.push_back(std::move(f));
    }
  }
  return out;
}

ParamMap zeros_like(const ParamMap& reference) {
  ParamMap out;
  for (const auto& [name, t] : reference) out.emplace(name, Tensor::zeros(t.shape));
  return out;
}

struct ShardOutcome {
  ParamMap grads;
  double loss_sum = 0.0;
};

// Gradient of this shard's contribution to the batch loss. The loss uses the
// global batch denominators, so summing shard gradients over workers yields
// exactly the full-batch mean-loss gradient, whatever the shard sizes.
ShardOutcome shard_gradient(const EnergyModel& model, const ParamMap& master,
                            const Prepared& data, std::span<const std::size_t> shard,
                            TaskKind task, double denom_energy, double denom_force) {
  if (shard.empty()) return {zeros_like(master), 0.0};

  Tape tape;
  ParamMap live;
  for (const auto& [name, t] : master) live.emplace(name, tape.leaf(t));

  std::vector<FeatureGraph> graphs;
  graphs.reserve(shard.size());
  std::size_t total_atoms = 0;
  for (std::size_t i : shard) {
    graphs.push_back(data.graphs[i]);
    total_atoms += data.atoms[i];
  }
  FeatureGraph batch = batch_graphs(std::span<const FeatureGraph>(graphs));

  Tensor target_e = Tensor::zeros({shard.size()});
  for (std::size_t k = 0; k < shard.size(); ++k) target_e.data[k] = data.energy_norm[shard[k]];

  Tensor loss;
  if (task == TaskKind::s2ef) {
    Tensor pos = tape.leaf(feature(batch, FeatureDomain::node, "pos"));
    batch = set_feature(std::move(batch), FeatureDomain::node, "pos", pos);
    Tensor energies = model.forward(batch, live);
    Tensor forces = negate(grad(sum(energies), {pos}, true)[0]);

    Tensor target_f = Tensor::zeros({total_atoms, 3});
    std::size_t row = 0;
    for (std::size_t i : shard) {
      const Tensor& f = data.forces_norm[i];
      std::copy(f.data.begin(), f.data.end(), target_f.data.begin() + static_cast<std::ptrdiff_t>(row * 3));
      row += data.atoms[i];
    }
    loss = add(scale(sum(abs(subtract(energies, target_e))), 1.0 / denom_energy),
               scale(sum(abs(subtract(forces, target_f))), 1.0 / denom_force));
  } else {
    Tensor energies = model.forward(batch, live);
    loss = scale(sum(abs(subtract(energies, target_e))), 1.0 / denom_energy);
  }

  std::vector<Tensor> wrt;
  std::vector<std::string> names;
  wrt.reserve(live.size());
  for (const auto& [name, t] : live) {
    names.push_back(name);
    wrt.push_back(t);
  }
  auto gs = grad(loss, std::span<const Tensor>(wrt));
  ShardOutcome out;
  out.loss_sum = loss.item();
  for (std::size_t k = 0; k < names.size(); ++k) out.grads.emplace(names[k], std::move(gs[k]));
  return out;
}

// contiguous shard for worker w; remainder goes to the last worker
std::pair<std::size_t, std::size_t> shard_range(std::size_t batch, std::size_t world,
                                                std::size_t rank) {
  const std::size_t per = batch / world;
  const std::size_t lo = rank * per;
  const std::size_t hi = rank + 1 == world ? batch : lo + per;
  return {lo, hi};
}

void scale_params(ParamMap& grads, double factor) {
  for (auto& [name, t] : grads)
    for (double& v : t.data) v *= factor;
}

void accumulate_params(ParamMap& acc, const ParamMap& grads) {
  for (auto& [name, t] : acc) {
    const Tensor& g = grads.at(name);
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += g.data[i];
  }
}

class CsvLogger {
 public:
  CsvLogger() = default;
  void open(const std::string& path, bool append) {
    if (path.empty()) return;
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) fail("fit: cannot open log '" + path + "'");
    if (!append) out_ << "epoch,step,split,energy_mae_ev,force_mae_ev_per_ang,lr,epoch_time_s\n";
    out_.flush();
  }
  void row(std::size_t epoch, std::size_t step, const std::string& split, double e_mae,
           std::optional<double> f_mae, double lr, double time_s) {
    if (!out_.is_open()) return;
    char buf[256];
    std::string force;
    if (f_mae) {
      std::snprintf(buf, sizeof buf, "%.17g", *f_mae);
      force = buf;
    }
    std::snprintf(buf, sizeof buf, "%zu,%zu,%s,", epoch, step, split.c_str());
    out_ << buf;
    std::snprintf(buf, sizeof buf, "%.17g,%s,%.17g,%.6f\n", e_mae, force.c_str(), lr, time_s);
    out_ << buf;
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// Kills forked workers if the coordinator dies with them still running.
struct ChildGuard {
  std::vector<pid_t> pids;
  bool armed = true;
  ~ChildGuard() {
    if (!armed) return;
    for (pid_t p : pids) ::kill(p, SIGKILL);
    for (pid_t p : pids) ::waitpid(p, nullptr, 0);
  }
};

std::string serialize_rng(const Rng& rng) {
  std::ostringstream os;
  os << const_cast<Rng&>(rng).engine();
  return os.str();
}

void restore_rng(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng.engine();
  if (is.fail()) fail("fit: cannot restore RNG state from checkpoint");
}

}  // namespace

TaskRun fit(EnergyModel& model, std::span<const AtomicStructure> train,
            std::span<const AtomicStructure> val, TaskKind task, const TrainerConfig& config,
            const std::vector<Callback>& callbacks, const std::string& resume_from) {
  config.validate();
  if (train.empty()) fail("fit: empty training split");

  // Activation tensors exceed the glibc mmap threshold; without this the
  // workers spend their time in mmap/munmap page faults that serialize
  // across cores.
  static const bool malloc_tuned = [] {
    ::mallopt(M_MMAP_MAX, 0);
    ::mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)malloc_tuned;

  const std::size_t world = config.strategy == Strategy::single ? 1 : config.devices;

  Normalizer norm;
  ParamMap master;
  Rng shuffle_rng(config.seed);
  std::size_t start_epoch = 0;
  std::size_t global_step = 0;
  std::optional<Checkpoint> resume;
  if (!resume_from.empty()) {
    resume = load_checkpoint(resume_from);
    if (resume->task != task_name(task))
      fail("fit: checkpoint task '" + resume->task + "' does not match '" + task_name(task) + "'");
    model.set_parameters(resume->params);
    master = resume->params;
    norm = resume->normalizer;
    start_epoch = resume->epoch;
    global_step = resume->global_step;
    restore_rng(shuffle_rng, resume->rng_state);
  } else {
    norm = fit_normalizer(train);
    master = model.parameters();
  }

  Adam adam(master);
  if (resume) adam.restore(resume->adam_m, resume->adam_v, resume->adam_step);

  RunState state;
  state.epoch = start_epoch;
  state.step = global_step;
  state.lr = config.learning_rate * std::pow(config.gamma, static_cast<double>(start_epoch));
  auto fire = [&](CallbackEvent e) {
    for (const Callback& cb : callbacks)
      if (cb) cb(e, state);
  };

  TaskRun run;
  run.normalizer = norm;
  run.log_path = config.log_path;
  run.epochs_completed = start_epoch;

  fire(CallbackEvent::on_fit_start);
  if (start_epoch >= config.max_epochs) {
    CsvLogger logger;
    logger.open(config.log_path, /*append=*/resume.has_value());
    fire(CallbackEvent::on_fit_end);
    return run;
  }

  Prepared data = prepare(train, task, norm, config.graph);

  // ---- process-ddp setup: fork the non-coordinator ranks ----
  std::size_t my_rank = 0;
  std::unique_ptr<RingPeer> peer;
  ChildGuard guard;
  std::vector<RingListener> listeners;
  const bool use_processes = config.strategy == Strategy::process_ddp && world > 1;
  if (use_processes) {
    std::cout.flush();
    std::cerr.flush();
    listeners = open_ring_listeners(world);
    for (std::size_t r = 1; r < world; ++r) {
      const pid_t pid = ::fork();
      if (pid < 0) fail("fit: fork failed");
      if (pid == 0) {
        my_rank = r;
        guard.pids.clear();
        guard.armed = false;
        break;
      }
      guard.pids.push_back(pid);
    }
    peer = std::make_unique<RingPeer>(my_rank, world, listeners);
    for (const RingListener& l : listeners) ::close(l.fd);
  }
  const bool coordinator = my_rank == 0;

  // Workers run the identical update sequence from identical state, so
  // parameters stay in lockstep without ever shipping them around.
  auto run_training = [&]() -> TaskRun {
    CsvLogger logger;
    if (coordinator) logger.open(config.log_path, /*append=*/resume.has_value());

    std::optional<EarlyStopping> stopper;
    if (config.early_stop) stopper.emplace(config.early_stop->patience);

    std::vector<std::size_t> order(train.size());

    for (std::size_t epoch = start_epoch; epoch < config.max_epochs; ++epoch) {
      const double lr = config.learning_rate * std::pow(config.gamma, static_cast<double>(epoch));
      state.lr = lr;
      const auto epoch_start = Clock::now();

      // the epoch order is a pure function of the RNG state, so a resumed
      // run shuffles identically to the uninterrupted one
      std::iota(order.begin(), order.end(), 0);
      shuffle_rng.shuffle(order);

      ParamMap window = zeros_like(master);
      std::size_t window_count = 0;
      double loss_total = 0.0;
      std::size_t batches = 0;

      auto apply_window = [&]() {
        if (window_count == 0) return;
        scale_params(window, 1.0 / static_cast<double>(window_count));
        adam.step(master, window, lr);
        window = zeros_like(master);
        window_count = 0;
      };

      for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
        const std::size_t end = std::min(order.size(), begin + config.batch_size);
        std::span<const std::size_t> batch(order.data() + begin, end - begin);
        double denom_energy = static_cast<double>(batch.size());
        double denom_force = 0.0;
        for (std::size_t i : batch) denom_force += 3.0 * static_cast<double>(data.atoms[i]);

        ParamMap merged;
        double loss = 0.0;
        if (world == 1) {
          ShardOutcome mine =
              shard_gradient(model, master, data, batch, task, denom_energy, denom_force);
          merged = std::move(mine.grads);
          loss = mine.loss_sum;
        } else if (config.strategy == Strategy::threaded_ddp) {
          std::vector<ShardOutcome> outs(world);
          std::vector<std::exception_ptr> errors(world);
          std::vector<std::thread> threads;
          for (std::size_t w = 1; w < world; ++w) {
            threads.emplace_back([&, w]() {
              try {
                auto [lo, hi] = shard_range(batch.size(), world, w);
                outs[w] = shard_gradient(model, master, data, batch.subspan(lo, hi - lo), task,
                                         denom_energy, denom_force);
              } catch (...) {
                errors[w] = std::current_exception();
              }
            });
          }
          auto [lo, hi] = shard_range(batch.size(), world, 0);
          try {
            outs[0] = shard_gradient(model, master, data, batch.subspan(lo, hi - lo), task,
                                     denom_energy, denom_force);
          } catch (...) {
            errors[0] = std::current_exception();
          }
          for (std::thread& t : threads) t.join();
          for (std::size_t w = 0; w < world; ++w) {
            if (!errors[w]) continue;
            try {
              std::rethrow_exception(errors[w]);
            } catch (const std::exception& e) {
              fail("fit: ddp worker " + std::to_string(w) + " crashed: " + e.what());
            }
          }
          std::vector<ParamMap> grad_maps;
          grad_maps.reserve(world);
          for (ShardOutcome& o : outs) {
            grad_maps.push_back(std::move(o.grads));
            loss += o.loss_sum;
          }
          merged = allreduce_mean(std::span<const ParamMap>(grad_maps));
          scale_params(merged, static_cast<double>(world));
        } else {
          // process-ddp: reduce gradients and the shard loss in one ring pass
          auto [lo, hi] = shard_range(batch.size(), world, my_rank);
          ShardOutcome mine = shard_gradient(model, master, data, batch.subspan(lo, hi - lo),
                                             task, denom_energy, denom_force);
          std::vector<double> flat = flatten_params(mine.grads);
          flat.push_back(mine.loss_sum);
          std::vector<double> reduced = ring_allreduce_mean(*peer, flat);
          for (double& v : reduced) v *= static_cast<double>(world);
          loss = reduced.back();
          reduced.pop_back();
          merged = unflatten_params(mine.grads, reduced);
        }

        if (!std::isfinite(loss))
          fail("fit: non-finite loss at step " + std::to_string(global_step + 1));
        loss_total += loss;
        ++batches;
        accumulate_params(window, merged);
        ++window_count;
        ++global_step;
        state.step = global_step;
        if (window_count == config.accumulate_grad_batches) apply_window();
        if (coordinator) fire(CallbackEvent::on_train_batch_end);
      }
      apply_window();

      const double epoch_time = seconds_since(epoch_start);
      run.epochs_completed = epoch + 1;
      state.epoch = epoch + 1;

      bool keep_going = epoch + 1 < config.max_epochs;
      if (coordinator) {
        model.set_parameters(master);

        EpochMetrics em;
        em.epoch = epoch + 1;
        em.step = global_step;
        em.lr = lr;
        em.epoch_time_s = epoch_time;
        em.train_loss = batches ? loss_total / static_cast<double>(batches) : 0.0;

        MetricsRecord train_metrics = evaluate(model, train, task, norm, config.graph,
                                               config.batch_size);
        em.train_energy_mae_ev = train_metrics.energy_mae_ev;
        em.train_force_mae_ev = train_metrics.force_mae_ev_per_ang;
        state.metrics["train_loss"] = em.train_loss;
        state.metrics["train_energy_mae_ev"] = em.train_energy_mae_ev;
        if (em.train_force_mae_ev) state.metrics["train_force_mae_ev"] = *em.train_force_mae_ev;
        fire(CallbackEvent::on_train_epoch_end);

        std::string log_split = "train";
        MetricsRecord logged = train_metrics;
        if (!val.empty()) {
          MetricsRecord val_metrics = evaluate(model, val, task, norm, config.graph,
                                               config.batch_size);
          em.val_energy_mae_ev = val_metrics.energy_mae_ev;
          em.val_force_mae_ev = val_metrics.force_mae_ev_per_ang;
          state.metrics["val_energy_mae_ev"] = val_metrics.energy_mae_ev;
          if (val_metrics.force_mae_ev_per_ang)
            state.metrics["val_force_mae_ev"] = *val_metrics.force_mae_ev_per_ang;
          fire(CallbackEvent::on_validation_epoch_end);
          log_split = "val";
          logged = val_metrics;
        }

        logger.row(em.epoch, em.step, log_split, logged.energy_mae_ev,
                   logged.force_mae_ev_per_ang, lr, epoch_time);
        run.history.push_back(em);

        if (!config.checkpoint_dir.empty()) {
          fs::create_directories(config.checkpoint_dir);
          Checkpoint ckpt;
          ckpt.architecture = model.architecture();
          ckpt.model_config_json = model.config_json();
          ckpt.trainer_config_json = trainer_config_to_json(config);
          ckpt.task = task_name(task);
          ckpt.epoch = epoch + 1;
          ckpt.global_step = global_step;
          ckpt.lr = lr;
          ckpt.rng_state = serialize_rng(shuffle_rng);
          ckpt.normalizer = norm;
          ckpt.adam_step = adam.steps();
          ckpt.params = master;
          ckpt.adam_m = adam.first_moment();
          ckpt.adam_v = adam.second_moment();
          run.checkpoint_path = (fs::path(config.checkpoint_dir) / "last.ckpt").string();
          save_checkpoint(ckpt, run.checkpoint_path);
        }

        if (stopper) {
          auto it = state.metrics.find(config.early_stop->monitor);
          if (it == state.metrics.end()) {
            std::string keys;
            for (const auto& [k, v] : state.metrics) keys += (keys.empty() ? "" : ", ") + k;
            fail("fit: early-stop monitor '" + config.early_stop->monitor +
                 "' not found; available: " + keys);
          }
          if (stopper->update(it->second)) {
            run.stopped_early = true;
            keep_going = false;
          }
        }
      }

      // propagate the coordinator's continue/stop decision around the ring
      if (use_processes && world > 1) {
        double flag = keep_going ? 1.0 : 0.0;
        for (std::size_t s = 0; s + 1 < world; ++s) {
          const auto seq = static_cast<std::uint32_t>(0xf0000000u + s);
          std::vector<double> got = peer->exchange(seq, std::span<const double>(&flag, 1));
          if (my_rank == s + 1) flag = got[0];
        }
        keep_going = flag > 0.5;
      }
      if (!keep_going) break;
    }
    return run;
  };

  if (!coordinator) {
    // forked worker: train in lockstep, then leave without running exit
    // handlers that belong to the coordinator
    int code = 0;
    try {
      run_training();
    } catch (const std::exception& e) {
      std::fprintf(stderr, "matml ddp worker %zu: %s\n", my_rank, e.what());
      code = 1;
    }
    std::fflush(nullptr);
    ::_exit(code);
  }

  TaskRun result = run_training();  // on throw, the guard reaps the children

  if (use_processes) {
    for (pid_t pid : guard.pids) {
      int status = 0;
      ::waitpid(pid, &status, 0);
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
        fail("fit: ddp worker exited abnormally (status " + std::to_string(status) + ")");
    }
    guard.armed = false;
  }

  model.set_parameters(master);
  fire(CallbackEvent::on_fit_end);
  return result;
}

}  // namespace matml
