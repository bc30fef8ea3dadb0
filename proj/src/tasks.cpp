// SPDX-License-Identifier: Apache-2.0
#include "matml/tasks.hpp"

#include <cmath>

#include "matml/common.hpp"

namespace matml {

std::string task_name(TaskKind task) { return task == TaskKind::is2re ? "is2re" : "s2ef"; }

TaskKind task_from_name(const std::string& name) {
  if (name == "is2re") return TaskKind::is2re;
  if (name == "s2ef") return TaskKind::s2ef;
  fail("unknown task '" + name + "' (expected is2re or s2ef)");
}

Normalizer fit_normalizer(std::span<const AtomicStructure> train) {
  if (train.empty()) fail("fit_normalizer: empty training split");
  double sum = 0.0;
  std::size_t n = 0;
  for (const AtomicStructure& s : train) {
    if (!s.energy) fail("fit_normalizer: record '" + s.id + "' has no energy label");
    sum += *s.energy;
    ++n;
  }
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (const AtomicStructure& s : train) var += (*s.energy - mean) * (*s.energy - mean);
  var /= static_cast<double>(n);
  Normalizer norm;
  norm.mean = mean;
  norm.std = std::sqrt(var);
  if (norm.std < 1e-12) norm.std = 1.0;  // constant targets
  return norm;
}

TaskBatch make_task_batch(std::span<const AtomicStructure> records, TaskKind task,
                          const GraphBuildOptions& opts) {
  if (records.empty()) fail("make_task_batch: empty record list");
  std::vector<FeatureGraph> graphs;
  graphs.reserve(records.size());
  std::size_t total_atoms = 0;
  for (const AtomicStructure& s : records) {
    if (!s.energy) fail("make_task_batch: record '" + s.id + "' has no energy label");
    if (task == TaskKind::s2ef && !s.forces)
      fail("make_task_batch: record '" + s.id + "' has no force labels");
    graphs.push_back(radius_graph(s, opts.cutoff, opts.max_neighbors));
    total_atoms += s.size();
  }
  TaskBatch batch;
  batch.graph = batch_graphs(std::span<const FeatureGraph>(graphs));
  batch.target_energies = Tensor::zeros({records.size()});
  for (std::size_t i = 0; i < records.size(); ++i)
    batch.target_energies.data[i] = *records[i].energy;
  if (task == TaskKind::s2ef) {
    batch.has_forces = true;
    batch.target_forces = Tensor::zeros({total_atoms, 3});
    std::size_t row = 0;
    for (const AtomicStructure& s : records)
      for (const Vec3& f : *s.forces) {
        for (std::size_t c = 0; c < 3; ++c) batch.target_forces.data[row * 3 + c] = f[c];
        ++row;
      }
  }
  return batch;
}

Tensor is2re_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape != target.shape)
    fail("is2re_loss: prediction shape " + shape_str(pred.shape) + " vs target " +
         shape_str(target.shape));
  if (pred.numel() == 0) fail("is2re_loss: empty prediction");
  return mean(abs(subtract(pred, target)));
}

Tensor s2ef_loss(const Tensor& pred_e, const Tensor& target_e, const Tensor& pred_f,
                 const Tensor& target_f) {
  if (pred_f.shape != target_f.shape)
    fail("s2ef_loss: force shape " + shape_str(pred_f.shape) + " vs target " +
         shape_str(target_f.shape));
  return add(is2re_loss(pred_e, target_e), mean(abs(subtract(pred_f, target_f))));
}

EnergyForces predict_energy_forces(const EnergyModel& model, const FeatureGraph& batch,
                                   const ParamMap& params, bool training) {
  const Tensor& pos = feature(batch, FeatureDomain::node, "pos");
  if (!pos.on_tape()) fail("predict_forces: batch positions are not tape-recorded");
  EnergyForces out;
  out.energies = model.forward(batch, params);
  auto g = grad(sum(out.energies), {pos}, training);
  out.forces = negate(g[0]);
  return out;
}

Tensor predict_forces(const EnergyModel& model, const FeatureGraph& batch, const ParamMap& params,
                      bool training) {
  return predict_energy_forces(model, batch, params, training).forces;
}

MetricsRecord evaluate(const EnergyModel& model, std::span<const AtomicStructure> split,
                       TaskKind task, const Normalizer& normalizer,
                       const GraphBuildOptions& opts, std::size_t batch_size) {
  if (split.empty()) fail("evaluate: empty split");
  if (batch_size == 0) fail("evaluate: batch size must be positive");

  double energy_abs_sum = 0.0;
  double force_abs_sum = 0.0;
  std::size_t force_components = 0;

  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t stop = std::min(split.size(), start + batch_size);
    TaskBatch tb = make_task_batch(split.subspan(start, stop - start), task, opts);

    if (task == TaskKind::is2re) {
      Tensor pred = model.forward(tb.graph, model.parameters());
      for (std::size_t i = 0; i < pred.numel(); ++i)
        energy_abs_sum +=
            std::fabs(denormalize_energy(normalizer, pred.data[i]) - tb.target_energies.data[i]);
    } else {
      Tape tape;
      FeatureGraph g = set_feature(
          tb.graph, FeatureDomain::node, "pos",
          tape.leaf(feature(tb.graph, FeatureDomain::node, "pos")));
      EnergyForces ef = predict_energy_forces(model, g, model.parameters(), false);
      for (std::size_t i = 0; i < ef.energies.numel(); ++i)
        energy_abs_sum += std::fabs(denormalize_energy(normalizer, ef.energies.data[i]) -
                                    tb.target_energies.data[i]);
      for (std::size_t i = 0; i < ef.forces.numel(); ++i) {
        force_abs_sum += std::fabs(ef.forces.data[i] * normalizer.std - tb.target_forces.data[i]);
        ++force_components;
      }
    }
  }

  MetricsRecord rec;
  rec.record_count = split.size();
  rec.energy_mae_ev = energy_abs_sum / static_cast<double>(split.size());
  if (task == TaskKind::s2ef)
    rec.force_mae_ev_per_ang = force_abs_sum / static_cast<double>(force_components);
  return rec;
}

}  // namespace matml
