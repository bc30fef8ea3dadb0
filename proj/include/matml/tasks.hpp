// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "matml/graph.hpp"
#include "matml/models.hpp"
#include "matml/structures.hpp"
#include "matml/tensor.hpp"

namespace matml {

enum class TaskKind { is2re, s2ef };

std::string task_name(TaskKind task);
TaskKind task_from_name(const std::string& name);

// Energy target scaling fit on the training split only. Forces share the
// same std (no mean shift) so F = -dE/dx survives normalization.
struct Normalizer {
  double mean = 0.0;
  double std = 1.0;
};

Normalizer fit_normalizer(std::span<const AtomicStructure> train);

inline double normalize_energy(const Normalizer& n, double ev) { return (ev - n.mean) / n.std; }
inline double denormalize_energy(const Normalizer& n, double z) { return z * n.std + n.mean; }

struct GraphBuildOptions {
  double cutoff = 6.0;
  std::size_t max_neighbors = 50;
};

// Batched graph plus raw (eV, eV/A) labels for one step.
struct TaskBatch {
  FeatureGraph graph;
  Tensor target_energies;  // (G)
  Tensor target_forces;    // (N_total, 3); empty for IS2RE
  bool has_forces = false;
};

TaskBatch make_task_batch(std::span<const AtomicStructure> records, TaskKind task,
                          const GraphBuildOptions& opts);

// MAE (L1) energy loss, differentiable.
Tensor is2re_loss(const Tensor& pred, const Tensor& target);

// Joint L1 loss: mean |dE| plus per-component mean |dF|.
Tensor s2ef_loss(const Tensor& pred_e, const Tensor& target_e, const Tensor& pred_f,
                 const Tensor& target_f);

// Forces as the negative gradient of the summed energies with respect to the
// batch's "pos" feature, which must be tape-recorded. With `training` the
// gradient is built with create_graph so the force error back-propagates to
// the parameters.
struct EnergyForces {
  Tensor energies;  // (G)
  Tensor forces;    // (N_total, 3)
};
EnergyForces predict_energy_forces(const EnergyModel& model, const FeatureGraph& batch,
                                   const ParamMap& params, bool training);
Tensor predict_forces(const EnergyModel& model, const FeatureGraph& batch, const ParamMap& params,
                      bool training);

struct MetricsRecord {
  double energy_mae_ev = 0.0;
  std::optional<double> force_mae_ev_per_ang;
  std::size_t record_count = 0;
};

// De-normalized MAE metrics over a split; no parameter updates.
MetricsRecord evaluate(const EnergyModel& model, std::span<const AtomicStructure> split,
                       TaskKind task, const Normalizer& normalizer,
                       const GraphBuildOptions& opts = {}, std::size_t batch_size = 8);

}  // namespace matml
