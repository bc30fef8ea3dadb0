// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <chrono>
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

#include "matml/checkpoint.hpp"
#include "matml/common.hpp"
#include "matml/models.hpp"
#include "matml/structures.hpp"
#include "matml/tasks.hpp"
#include "matml/trainer.hpp"

namespace fs = std::filesystem;
using namespace matml;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitInvalid = 2;

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- devset ----------------------------------------------------------------

struct DevsetArgs {
  std::string input;
  std::size_t synthetic = 0;
  std::size_t atoms_min = 6;
  std::size_t atoms_max = 14;
  std::size_t n = 100;
  std::uint64_t seed = 42;
  std::string output;
};

int cmd_devset(const DevsetArgs& args) {
  std::vector<AtomicStructure> base;
  if (!args.input.empty()) {
    base = load_dataset(args.input);
  } else if (args.synthetic > 0) {
    base = generate_synthetic(args.synthetic, args.atoms_min, args.atoms_max, args.seed);
  } else {
    fail("devset: provide --input or --synthetic");
  }
  auto [devset, manifest] = make_devset(base, args.n, args.seed);
  save_dataset(args.output, devset);
  manifest.path = args.output;
  const std::string manifest_path = args.output + ".manifest.json";
  write_manifest(manifest, manifest_path);
  std::cerr << "wrote " << devset.size() << " records to " << args.output << " (manifest "
            << manifest_path << ")\n";
  return kExitOk;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string task = "is2re";
  std::string data;
  std::string val_data;
  std::string output_dir = "run";
  std::string model_config_path;
  std::uint64_t model_seed = 0;
  std::string resume;
  // flag overrides; optional so config-file values win when a flag is absent
  std::optional<std::size_t> epochs, batch_size, devices, accumulate, max_neighbors;
  std::optional<std::string> strategy;
  std::optional<double> lr, gamma, cutoff;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& args) {
  TrainerConfig config;
  if (!args.config_path.empty()) config = trainer_config_from_json(read_file(args.config_path));
  if (args.epochs) config.max_epochs = *args.epochs;
  if (args.batch_size) config.batch_size = *args.batch_size;
  if (args.devices) config.devices = *args.devices;
  if (args.accumulate) config.accumulate_grad_batches = *args.accumulate;
  if (args.strategy) config.strategy = strategy_from_name(*args.strategy);
  if (args.lr) config.learning_rate = *args.lr;
  if (args.gamma) config.gamma = *args.gamma;
  if (args.seed) config.seed = *args.seed;
  if (args.cutoff) config.graph.cutoff = *args.cutoff;
  if (args.max_neighbors) config.graph.max_neighbors = *args.max_neighbors;

  const TaskKind task = task_from_name(args.task);
  auto train_split = load_dataset(args.data);
  std::vector<AtomicStructure> val_split;
  if (!args.val_data.empty()) val_split = load_dataset(args.val_data);

  fs::create_directories(args.output_dir);
  config.log_path = (fs::path(args.output_dir) / "metrics.csv").string();
  config.checkpoint_dir = (fs::path(args.output_dir) / "checkpoints").string();

  EGNNConfig model_config;
  if (!args.model_config_path.empty())
    model_config = egnn_config_from_json(read_file(args.model_config_path));
  EGNN model(model_config, args.model_seed);

  {
    nlohmann::ordered_json resolved;
    resolved["task"] = args.task;
    resolved["data"] = args.data;
    resolved["val_data"] = args.val_data.empty() ? nlohmann::json() : nlohmann::json(args.val_data);
    resolved["model"] = {{"architecture", model.architecture()},
                         {"seed", args.model_seed},
                         {"config", nlohmann::json::parse(model.config_json())}};
    resolved["trainer"] = nlohmann::json::parse(trainer_config_to_json(config));
    resolved["resume"] = args.resume.empty() ? nlohmann::json() : nlohmann::json(args.resume);
    std::ofstream out(fs::path(args.output_dir) / "resolved-config.json");
    out << resolved.dump(2) << "\n";
  }

  Callback progress = [&](CallbackEvent e, const RunState& s) {
    if (e != CallbackEvent::on_train_epoch_end) return;
    std::cerr << "epoch " << s.epoch << "/" << config.max_epochs
              << " train_mae=" << s.metrics.at("train_energy_mae_ev");
    auto f = s.metrics.find("train_force_mae_ev");
    if (f != s.metrics.end()) std::cerr << " force_mae=" << f->second;
    std::cerr << " lr=" << s.lr << "\n";
  };

  TaskRun run = fit(model, train_split, val_split, task, config, {progress}, args.resume);
  std::cerr << "finished " << run.epochs_completed << " epochs; metrics at " << config.log_path
            << "\n";
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string task;  // optional override
  std::size_t batch_size = 8;
};

int cmd_eval(const EvalArgs& args) {
  Checkpoint ckpt = load_checkpoint(args.checkpoint);
  const TaskKind task = task_from_name(args.task.empty() ? ckpt.task : args.task);
  if (!args.task.empty() && args.task != ckpt.task)
    fail("eval: checkpoint was trained for task '" + ckpt.task + "', not '" + args.task + "'");
  auto model = model_from_checkpoint(ckpt);
  auto split = load_dataset(args.data);

  nlohmann::json tj = nlohmann::json::parse(ckpt.trainer_config_json);
  GraphBuildOptions graph;
  if (tj.contains("cutoff")) graph.cutoff = tj["cutoff"].get<double>();
  if (tj.contains("max_neighbors")) graph.max_neighbors = tj["max_neighbors"].get<std::size_t>();

  const auto start = std::chrono::steady_clock::now();
  MetricsRecord rec = evaluate(*model, split, task, ckpt.normalizer, graph, args.batch_size);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  std::string force;
  if (rec.force_mae_ev_per_ang) force = fmt17(*rec.force_mae_ev_per_ang);
  std::printf("%zu,%zu,eval,%s,%s,%s,%.6f\n", ckpt.epoch, ckpt.global_step,
              fmt17(rec.energy_mae_ev).c_str(), force.c_str(), fmt17(ckpt.lr).c_str(), elapsed);
  return kExitOk;
}

// ---- inspect ---------------------------------------------------------------

int cmd_inspect(const std::string& data_path) {
  auto records = load_dataset(data_path);
  if (records.empty()) fail("inspect: '" + data_path + "' holds no records");
  std::size_t atoms_min = records[0].size(), atoms_max = 0, with_energy = 0, with_forces = 0;
  double e_sum = 0.0;
  for (const auto& s : records) {
    atoms_min = std::min(atoms_min, s.size());
    atoms_max = std::max(atoms_max, s.size());
    if (s.energy) {
      ++with_energy;
      e_sum += *s.energy;
    }
    if (s.forces) ++with_forces;
  }
  const double e_mean = with_energy ? e_sum / static_cast<double>(with_energy) : 0.0;
  double e_var = 0.0;
  for (const auto& s : records)
    if (s.energy) e_var += (*s.energy - e_mean) * (*s.energy - e_mean);
  const double e_std = with_energy ? std::sqrt(e_var / static_cast<double>(with_energy)) : 0.0;

  std::printf("records,atoms_min,atoms_max,with_energy,with_forces,energy_mean,energy_std\n");
  std::printf("%zu,%zu,%zu,%zu,%zu,%s,%s\n", records.size(), atoms_min, atoms_max, with_energy,
              with_forces, fmt17(e_mean).c_str(), fmt17(e_std).c_str());
  return kExitOk;
}

// ---- bench-scaling ---------------------------------------------------------

struct BenchArgs {
  std::vector<std::size_t> devices_list = {1, 2, 4};
  std::size_t epochs = 2;
  std::size_t records = 48;
  std::size_t atoms = 40;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  std::string output;
};

int cmd_bench_scaling(const BenchArgs& args) {
  if (args.devices_list.empty()) fail("bench-scaling: empty devices list");
  for (std::size_t d : args.devices_list)
    if (d == 0) fail("bench-scaling: device counts must be positive");

  auto workload = generate_synthetic(args.records, args.atoms, args.atoms, args.seed);
  std::cerr << "workload: " << args.records << " structures of " << args.atoms << " atoms, "
            << args.epochs << " epochs per device count\n";

  auto median_epoch_time = [&](std::size_t devices) {
    EGNN model(EGNNConfig{}, args.seed);
    TrainerConfig config;
    config.max_epochs = args.epochs;
    config.batch_size = args.batch_size;
    config.devices = devices;
    config.strategy = devices == 1 ? Strategy::single : Strategy::threaded_ddp;
    config.seed = args.seed;
    TaskRun run = fit(model, workload, {}, TaskKind::is2re, config);
    std::vector<double> times;
    for (const auto& em : run.history) times.push_back(em.epoch_time_s);
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
  };

  std::string csv = "devices,epoch_time_s,speedup\n";
  double t1 = 0.0;
  for (std::size_t i = 0; i < args.devices_list.size(); ++i) {
    const std::size_t d = args.devices_list[i];
    const double t = median_epoch_time(d);
    if (i == 0) t1 = t;
    const double speedup = t1 / t;
    char line[128];
    std::snprintf(line, sizeof line, "%zu,%.6f,%.4f\n", d, t, speedup);
    csv += line;
    std::cerr << "devices=" << d << " epoch_time=" << t << "s speedup=" << speedup << "\n";
  }
  std::fputs(csv.c_str(), stdout);
  if (!args.output.empty()) {
    std::ofstream out(args.output);
    out << csv;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale materials ML pipeline: datasets, E(n)-GNN training, evaluation"};
  app.require_subcommand(1);

  DevsetArgs devset;
  auto* cmd_dev = app.add_subcommand("devset", "create a miniature devset from a dataset");
  cmd_dev->add_option("--input", devset.input, "source dataset (JSON-Lines)");
  cmd_dev->add_option("--synthetic", devset.synthetic,
                      "generate a synthetic base dataset of this size instead of --input");
  cmd_dev->add_option("--atoms-min", devset.atoms_min, "synthetic: smallest structure");
  cmd_dev->add_option("--atoms-max", devset.atoms_max, "synthetic: largest structure");
  cmd_dev->add_option("--n", devset.n, "records to select")->required();
  cmd_dev->add_option("--seed", devset.seed, "selection seed");
  cmd_dev->add_option("--output", devset.output, "devset output path")->required();

  TrainArgs train;
  auto* cmd_tr = app.add_subcommand("train", "train a model");
  cmd_tr->add_option("--config", train.config_path, "trainer config JSON");
  cmd_tr->add_option("--task", train.task, "is2re or s2ef");
  cmd_tr->add_option("--data", train.data, "training split (JSON-Lines)")->required();
  cmd_tr->add_option("--val-data", train.val_data, "validation split");
  cmd_tr->add_option("--output-dir", train.output_dir, "run directory");
  cmd_tr->add_option("--model-config", train.model_config_path, "EGNN config JSON");
  cmd_tr->add_option("--model-seed", train.model_seed, "parameter init seed");
  cmd_tr->add_option("--resume", train.resume, "checkpoint to resume from");
  cmd_tr->add_option("--epochs", train.epochs, "override max_epochs");
  cmd_tr->add_option("--batch-size", train.batch_size, "override batch_size");
  cmd_tr->add_option("--devices", train.devices, "override worker count");
  cmd_tr->add_option("--strategy", train.strategy, "single | threaded-ddp | process-ddp");
  cmd_tr->add_option("--accumulate", train.accumulate, "override accumulate_grad_batches");
  cmd_tr->add_option("--lr", train.lr, "override learning rate");
  cmd_tr->add_option("--gamma", train.gamma, "override LR decay");
  cmd_tr->add_option("--seed", train.seed, "override trainer seed");
  cmd_tr->add_option("--cutoff", train.cutoff, "radius graph cutoff (A)");
  cmd_tr->add_option("--max-neighbors", train.max_neighbors, "radius graph neighbor cap");

  EvalArgs eval_args;
  auto* cmd_ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  cmd_ev->add_option("--checkpoint", eval_args.checkpoint, "checkpoint path")->required();
  cmd_ev->add_option("--data", eval_args.data, "dataset (JSON-Lines)")->required();
  cmd_ev->add_option("--task", eval_args.task, "task override");
  cmd_ev->add_option("--batch-size", eval_args.batch_size, "evaluation batch size");

  std::string inspect_path;
  auto* cmd_in = app.add_subcommand("inspect", "summarize a dataset");
  cmd_in->add_option("--data", inspect_path, "dataset (JSON-Lines)")->required();

  BenchArgs bench;
  auto* cmd_be = app.add_subcommand("bench-scaling", "epoch-time scaling over worker counts");
  cmd_be->add_option("--devices-list", bench.devices_list, "worker counts to benchmark");
  cmd_be->add_option("--epochs", bench.epochs, "epochs per device count");
  cmd_be->add_option("--records", bench.records, "synthetic workload size");
  cmd_be->add_option("--atoms", bench.atoms, "atoms per synthetic structure");
  cmd_be->add_option("--batch-size", bench.batch_size, "workload batch size");
  cmd_be->add_option("--seed", bench.seed, "workload seed");
  cmd_be->add_option("--output", bench.output, "also write the CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (cmd_dev->parsed()) return cmd_devset(devset);
    if (cmd_tr->parsed()) return cmd_train(train);
    if (cmd_ev->parsed()) return cmd_eval(eval_args);
    if (cmd_in->parsed()) return cmd_inspect(inspect_path);
    if (cmd_be->parsed()) return cmd_bench_scaling(bench);
  } catch (const Error& e) {
    std::cerr << "matml: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "matml: internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
