// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "matml/models.hpp"
#include "matml/structures.hpp"
#include "matml/tasks.hpp"

namespace matml {

enum class Strategy { single, threaded_ddp, process_ddp };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct EarlyStopConfig {
  std::string monitor = "val_energy_mae_ev";
  std::size_t patience = 3;
};

struct TrainerConfig {
  std::size_t max_epochs = 5;
  std::size_t batch_size = 8;
  std::size_t devices = 1;
  Strategy strategy = Strategy::single;
  std::size_t accumulate_grad_batches = 1;
  double learning_rate = 0.003626;
  double gamma = 0.6878;  // per-epoch LR decay factor
  std::uint64_t seed = 0;
  std::string checkpoint_dir;  // empty: no checkpoints
  std::string log_path;        // empty: no CSV log
  std::optional<EarlyStopConfig> early_stop;
  GraphBuildOptions graph;

  void validate() const;
};

std::string trainer_config_to_json(const TrainerConfig& config);
// Rejects unknown keys, listing the valid ones.
TrainerConfig trainer_config_from_json(const std::string& json_text);

enum class CallbackEvent {
  on_fit_start,
  on_train_batch_end,
  on_train_epoch_end,
  on_validation_epoch_end,
  on_fit_end,
};

const char* callback_event_name(CallbackEvent e);

// Read-only run state passed to callbacks. Metric keys: "train_loss",
// "train_energy_mae_ev", "train_force_mae_ev", "val_energy_mae_ev",
// "val_force_mae_ev" (the latter two only when a validation split exists).
struct RunState {
  std::size_t epoch = 0;  // completed epochs
  std::size_t step = 0;   // micro-batch steps since the start of the run
  double lr = 0.0;
  std::map<std::string, double> metrics;
};

using Callback = std::function<void(CallbackEvent, const RunState&)>;

// Stops when the monitored value fails to strictly improve for patience+1
// consecutive epochs.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  bool update(double value);
  double best() const { return best_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_streak_ = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(const ParamMap& params, AdamConfig config = {});

  void step(ParamMap& params, const ParamMap& grads, double lr);

  const ParamMap& first_moment() const { return m_; }
  const ParamMap& second_moment() const { return v_; }
  std::int64_t steps() const { return t_; }
  void restore(ParamMap m, ParamMap v, std::int64_t t);

 private:
  AdamConfig config_;
  ParamMap m_;
  ParamMap v_;
  std::int64_t t_ = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based count of completed epochs
  std::size_t step = 0;
  double train_loss = 0.0;  // mean normalized step loss
  double train_energy_mae_ev = 0.0;
  std::optional<double> train_force_mae_ev;
  std::optional<double> val_energy_mae_ev;
  std::optional<double> val_force_mae_ev;
  double lr = 0.0;
  double epoch_time_s = 0.0;  // training phase only
};

struct TaskRun {
  std::vector<EpochMetrics> history;
  std::size_t epochs_completed = 0;
  bool stopped_early = false;
  std::string log_path;
  std::string checkpoint_path;
  Normalizer normalizer;
};

// Runs the training loop: per step forward -> loss -> backward, gradients
// averaged over the accumulation window, Adam update; per epoch LR decay by
// gamma, a validation pass, callbacks, one CSV row, checkpoint. Deterministic
// per seed for the single strategy. `resume_from` continues from a
// checkpoint written by a previous fit with a compatible config.
TaskRun fit(EnergyModel& model, std::span<const AtomicStructure> train,
            std::span<const AtomicStructure> val, TaskKind task, const TrainerConfig& config,
            const std::vector<Callback>& callbacks = {}, const std::string& resume_from = {});

}  // namespace matml
