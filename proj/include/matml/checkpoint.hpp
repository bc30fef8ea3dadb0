// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "matml/models.hpp"
#include "matml/tasks.hpp"

namespace matml {

// Single-file training snapshot: a length-prefixed JSON header (configs,
// tensor names/shapes, epoch, RNG state) followed by the raw float64
// payloads in header order. Round-trips bit-exactly.
struct Checkpoint {
  std::string architecture;        // "egnn"
  std::string model_config_json;
  std::string trainer_config_json;
  std::string task;                // "is2re" | "s2ef"
  std::size_t epoch = 0;           // epochs completed
  std::size_t global_step = 0;
  double lr = 0.0;                 // learning rate in effect after `epoch`
  std::string rng_state;           // trainer shuffle RNG, serialized
  Normalizer normalizer;
  std::int64_t adam_step = 0;
  ParamMap params;
  ParamMap adam_m;
  ParamMap adam_v;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Rebuilds the model recorded in the checkpoint and installs its parameters.
std::unique_ptr<EnergyModel> model_from_checkpoint(const Checkpoint& ckpt,
                                                   std::uint64_t init_seed = 0);

}  // namespace matml
