// SPDX-License-Identifier: Apache-2.0
#include "matml/models.hpp"

#include <cmath>

#include <json.hpp>

#include "matml/common.hpp"
#include "matml/rng.hpp"
#include "matml/structures.hpp"

namespace matml {

namespace {

using DimPair = std::pair<std::size_t, std::size_t>;

std::vector<DimPair> mlp_dims(std::size_t in, const std::vector<std::size_t>& hidden,
                              std::size_t out) {
  std::vector<DimPair> dims;
  std::size_t cur = in;
  for (std::size_t h : hidden) {
    dims.emplace_back(cur, h);
    cur = h;
  }
  dims.emplace_back(cur, out);
  return dims;
}

// depth linear layers, all at `hidden` width.
std::vector<DimPair> block_dims(std::size_t in, std::size_t hidden, std::size_t depth,
                                std::size_t out) {
  std::vector<DimPair> dims;
  std::size_t cur = in;
  for (std::size_t i = 0; i + 1 < depth; ++i) {
    dims.emplace_back(cur, hidden);
    cur = hidden;
  }
  dims.emplace_back(cur, out);
  return dims;
}

// Named weight shapes in a fixed order; init and forward both derive from
// this so they cannot drift apart.
struct MlpSpec {
  std::string prefix;
  std::vector<DimPair> dims;
  bool final_activation;
};

std::vector<MlpSpec> egnn_mlps(const EGNNConfig& c) {
  std::vector<MlpSpec> specs;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string base = "layer" + std::to_string(l) + ".";
    specs.push_back({base + "edge_mlp",
                     mlp_dims(2 * c.embed_dim + 1, c.edge_mlp_dims, c.message_dim), true});
    specs.push_back({base + "node_mlp",
                     mlp_dims(c.embed_dim + c.message_dim, c.node_mlp_dims, c.embed_dim), false});
    specs.push_back({base + "pos_mlp", mlp_dims(c.message_dim, c.pos_mlp_dims, 1), false});
  }
  specs.push_back({"proj", block_dims(c.embed_dim, c.node_proj_hidden, c.node_proj_depth,
                                      c.node_proj_hidden), false});
  specs.push_back({"out", block_dims(c.node_proj_hidden, c.out_hidden, c.out_depth, 1), false});
  return specs;
}

Tensor uniform_tensor(Rng& rng, std::vector<std::size_t> shape, double bound) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

Tensor linear(const Tensor& x, const ParamMap& params, const std::string& name) {
  auto wit = params.find(name + ".weight");
  auto bit = params.find(name + ".bias");
  if (wit == params.end() || bit == params.end()) fail("egnn: missing parameter '" + name + "'");
  return add(matmul(x, wit->second), bit->second);
}

Tensor run_mlp(Tensor x, const ParamMap& params, const MlpSpec& spec) {
  for (std::size_t i = 0; i < spec.dims.size(); ++i) {
    x = linear(x, params, spec.prefix + "." + std::to_string(i));
    const bool last = i + 1 == spec.dims.size();
    if (!last || spec.final_activation) x = relu(x);
  }
  return x;
}

const MlpSpec& find_spec(const std::vector<MlpSpec>& specs, const std::string& prefix) {
  for (const MlpSpec& s : specs)
    if (s.prefix == prefix) return s;
  fail("egnn: no mlp named '" + prefix + "'");
}

std::vector<std::int64_t> atomic_number_rows(const Tensor& z) {
  std::vector<std::int64_t> rows(z.numel());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double v = z.data[i];
    const auto idx = static_cast<std::int64_t>(v) - 1;
    if (idx < 0 || idx >= kZMax)
      fail("egnn: atomic number " + std::to_string(v) + " outside [1," + std::to_string(kZMax) +
           "]");
    rows[i] = idx;
  }
  return rows;
}

}  // namespace

std::size_t parameter_count(const ParamMap& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

void EGNNConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) fail(std::string("egnn config: ") + what + " must be positive");
  };
  positive(embed_dim, "embed_dim");
  positive(message_dim, "message_dim");
  positive(num_layers, "num_layers");
  positive(node_proj_depth, "node_proj_depth");
  positive(node_proj_hidden, "node_proj_hidden");
  positive(out_depth, "out_depth");
  positive(out_hidden, "out_hidden");
  for (std::size_t d : node_mlp_dims) positive(d, "node_mlp_dims entry");
  for (std::size_t d : edge_mlp_dims) positive(d, "edge_mlp_dims entry");
  for (std::size_t d : pos_mlp_dims) positive(d, "pos_mlp_dims entry");
}

ParamMap egnn_init_params(const EGNNConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ParamMap params;

  const double embed_bound = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
  params.emplace("embedding",
                 uniform_tensor(rng, {static_cast<std::size_t>(kZMax), config.embed_dim},
                                embed_bound));

  for (const MlpSpec& spec : egnn_mlps(config)) {
    for (std::size_t i = 0; i < spec.dims.size(); ++i) {
      const auto [fan_in, fan_out] = spec.dims[i];
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      const std::string name = spec.prefix + "." + std::to_string(i);
      params.emplace(name + ".weight", uniform_tensor(rng, {fan_in, fan_out}, bound));
      params.emplace(name + ".bias", Tensor::zeros({fan_out}));
    }
  }
  return params;
}

EGNNLayerResult egnn_layer(const Tensor& h, const Tensor& x,
                           const std::vector<std::int64_t>& src,
                           const std::vector<std::int64_t>& dst, const ParamMap& params,
                           std::size_t layer_index, const EGNNConfig& config) {
  const std::size_t n = h.shape.at(0);
  const auto specs = egnn_mlps(config);
  const std::string base = "layer" + std::to_string(layer_index) + ".";

  if (src.empty()) {
    // no messages anywhere: aggregate zeros, keep positions
    Tensor zero_msg = Tensor::zeros({n, config.message_dim});
    Tensor h_new = run_mlp(concat({h, zero_msg}, 1), params, find_spec(specs, base + "node_mlp"));
    return {h_new, x};
  }

  Tensor h_dst = gather_rows(h, dst);
  Tensor h_src = gather_rows(h, src);
  Tensor x_dst = gather_rows(x, dst);
  Tensor x_src = gather_rows(x, src);
  Tensor diff = subtract(x_dst, x_src);                       // x_i - x_j, (E,3)
  Tensor dist2 = sum_axis(square(diff), 1);                   // (E,1)

  Tensor m = run_mlp(concat({h_dst, h_src, dist2}, 1), params,
                     find_spec(specs, base + "edge_mlp"));    // (E,msg)

  Tensor agg_m = scatter_add_rows(m, dst, static_cast<std::int64_t>(n));
  Tensor h_new = run_mlp(concat({h, agg_m}, 1), params, find_spec(specs, base + "node_mlp"));

  Tensor x_new = x;
  if (config.update_positions) {
    Tensor s = run_mlp(m, params, find_spec(specs, base + "pos_mlp"));  // (E,1)
    Tensor weighted = multiply(diff, s);                                // (E,3)
    Tensor agg_x = scatter_add_rows(weighted, dst, static_cast<std::int64_t>(n));
    Tensor counts = Tensor::zeros({n, 1});
    for (std::int64_t d : dst) counts.data[static_cast<std::size_t>(d)] += 1.0;
    // clamp to >= 1 so nodes without incoming edges divide by 1 and stay put
    for (double& c : counts.data) c = std::max(1.0, c);
    Tensor mean_update = divide(agg_x, counts);
    x_new = add(x, mean_update);
  }
  return {h_new, x_new};
}

Tensor egnn_forward(const FeatureGraph& batch, const ParamMap& params, const EGNNConfig& config) {
  if (!has_feature(batch, FeatureDomain::node, "atomic_numbers") ||
      !has_feature(batch, FeatureDomain::node, "pos"))
    fail("egnn: batch must carry 'atomic_numbers' and 'pos' node features");

  const Tensor& z = feature(batch, FeatureDomain::node, "atomic_numbers");
  const Tensor& pos = feature(batch, FeatureDomain::node, "pos");
  auto eit = params.find("embedding");
  if (eit == params.end()) fail("egnn: missing parameter 'embedding'");

  Tensor h = gather_rows(eit->second, atomic_number_rows(z));
  Tensor x = pos;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    EGNNLayerResult r = egnn_layer(h, x, batch.src, batch.dst, params, l, config);
    h = std::move(r.h);
    x = std::move(r.x);
  }

  const auto specs = egnn_mlps(config);
  Tensor projected = run_mlp(h, params, find_spec(specs, "proj"));
  Tensor pooled = scatter_add_rows(projected, batch.graph_ids,
                                   static_cast<std::int64_t>(batch.num_graphs));
  Tensor energies = run_mlp(pooled, params, find_spec(specs, "out"));  // (G,1)
  return reshape(energies, {batch.num_graphs});
}

EGNN::EGNN(EGNNConfig config, std::uint64_t seed) : config_(std::move(config)) {
  params_ = egnn_init_params(config_, seed);
}

Tensor EGNN::forward(const FeatureGraph& batch, const ParamMap& params) const {
  return egnn_forward(batch, params, config_);
}

void EGNN::set_parameters(ParamMap params) {
  for (const auto& [name, t] : params_) {
    auto it = params.find(name);
    if (it == params.end()) fail("egnn: set_parameters is missing '" + name + "'");
    if (it->second.shape != t.shape)
      fail("egnn: parameter '" + name + "' has shape " + shape_str(it->second.shape) +
           ", expected " + shape_str(t.shape));
  }
  if (params.size() != params_.size()) fail("egnn: set_parameters has extra entries");
  params_ = std::move(params);
}

std::string EGNN::config_json() const {
  nlohmann::ordered_json j;
  j["embed_dim"] = config_.embed_dim;
  j["message_dim"] = config_.message_dim;
  j["num_layers"] = config_.num_layers;
  j["node_mlp_dims"] = config_.node_mlp_dims;
  j["edge_mlp_dims"] = config_.edge_mlp_dims;
  j["pos_mlp_dims"] = config_.pos_mlp_dims;
  j["node_proj_depth"] = config_.node_proj_depth;
  j["node_proj_hidden"] = config_.node_proj_hidden;
  j["out_depth"] = config_.out_depth;
  j["out_hidden"] = config_.out_hidden;
  j["update_positions"] = config_.update_positions;
  return j.dump();
}

EGNNConfig egnn_config_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  EGNNConfig c;
  auto get = [&](const char* key, auto& into) {
    if (j.contains(key)) into = j.at(key).get<std::decay_t<decltype(into)>>();
  };
  get("embed_dim", c.embed_dim);
  get("message_dim", c.message_dim);
  get("num_layers", c.num_layers);
  get("node_mlp_dims", c.node_mlp_dims);
  get("edge_mlp_dims", c.edge_mlp_dims);
  get("pos_mlp_dims", c.pos_mlp_dims);
  get("node_proj_depth", c.node_proj_depth);
  get("node_proj_hidden", c.node_proj_hidden);
  get("out_depth", c.out_depth);
  get("out_hidden", c.out_hidden);
  get("update_positions", c.update_positions);
  c.validate();
  return c;
}

std::unique_ptr<EnergyModel> make_model(const std::string& architecture,
                                        const std::string& config_json_text, std::uint64_t seed) {
  if (architecture == "egnn")
    return std::make_unique<EGNN>(egnn_config_from_json(config_json_text), seed);
  fail("make_model: unknown architecture '" + architecture + "'");
}

}  // namespace matml
