// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "matml/graph.hpp"
#include "matml/tensor.hpp"

namespace matml {

using ParamMap = std::map<std::string, Tensor>;

std::size_t parameter_count(const ParamMap& params);

// A model that takes a batched graph and predicts one energy per graph.
// Forward is a pure function of (params, batch): the trainer re-binds
// parameters onto a fresh tape every step and differentiates through both
// the parameters and the "pos" node feature.
class EnergyModel {
 public:
  virtual ~EnergyModel() = default;

  virtual Tensor forward(const FeatureGraph& batch, const ParamMap& params) const = 0;
  virtual const ParamMap& parameters() const = 0;
  virtual void set_parameters(ParamMap params) = 0;
  virtual std::string architecture() const = 0;
  virtual std::string config_json() const = 0;
};

// E(n)-GNN hyperparameters. Defaults follow the reference configuration:
// 32-wide embeddings and messages, three layers, node MLP [48,48], edge MLP
// [16,16], position MLP [64,64], ReLU activations, sum readout, projection
// depth 2 at width 128, output head depth 3 at width 64.
struct EGNNConfig {
  std::size_t embed_dim = 32;
  std::size_t message_dim = 32;
  std::size_t num_layers = 3;
  std::vector<std::size_t> node_mlp_dims = {48, 48};
  std::vector<std::size_t> edge_mlp_dims = {16, 16};
  std::vector<std::size_t> pos_mlp_dims = {64, 64};
  std::size_t node_proj_depth = 2;
  std::size_t node_proj_hidden = 128;
  std::size_t out_depth = 3;
  std::size_t out_hidden = 64;
  bool update_positions = true;

  void validate() const;
};

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, plus the
// (kZMax, embed_dim) atomic-number embedding table. Deterministic per seed.
ParamMap egnn_init_params(const EGNNConfig& config, std::uint64_t seed);

// One message-passing layer. Per edge (j -> i):
//   m_ij = EdgeMLP(h_i || h_j || |x_i - x_j|^2)
//   x_i' = x_i + mean_j (x_i - x_j) * PosMLP(m_ij)
//   h_i' = NodeMLP(h_i || sum_j m_ij)
// Nodes without incoming edges keep their position and aggregate a zero
// message.
struct EGNNLayerResult {
  Tensor h;
  Tensor x;
};
EGNNLayerResult egnn_layer(const Tensor& h, const Tensor& x,
                           const std::vector<std::int64_t>& src,
                           const std::vector<std::int64_t>& dst, const ParamMap& params,
                           std::size_t layer_index, const EGNNConfig& config);

// Full forward: embed atomic numbers, num_layers message-passing layers,
// node projection, per-graph sum readout, output head; returns (num_graphs).
Tensor egnn_forward(const FeatureGraph& batch, const ParamMap& params, const EGNNConfig& config);

class EGNN : public EnergyModel {
 public:
  EGNN(EGNNConfig config, std::uint64_t seed);

  Tensor forward(const FeatureGraph& batch, const ParamMap& params) const override;
  const ParamMap& parameters() const override { return params_; }
  void set_parameters(ParamMap params) override;
  std::string architecture() const override { return "egnn"; }
  std::string config_json() const override;

  const EGNNConfig& config() const { return config_; }

 private:
  EGNNConfig config_;
  ParamMap params_;
};

EGNNConfig egnn_config_from_json(const std::string& json_text);
std::unique_ptr<EnergyModel> make_model(const std::string& architecture,
                                        const std::string& config_json_text, std::uint64_t seed);

}  // namespace matml
