// SPDX-License-Identifier: Apache-2.0
#include "matml/graph.hpp"

#include <algorithm>
#include <cmath>

#include "matml/common.hpp"

namespace matml {

namespace {

std::size_t leading_dim(const FeatureGraph& g, FeatureDomain domain) {
  return domain == FeatureDomain::node ? g.num_nodes : g.num_edges();
}

const char* domain_name(FeatureDomain domain) {
  return domain == FeatureDomain::node ? "node" : "edge";
}

}  // namespace

FeatureGraph make_graph(std::size_t num_nodes, std::vector<std::int64_t> src,
                        std::vector<std::int64_t> dst) {
  if (src.size() != dst.size())
    fail("make_graph: src has " + std::to_string(src.size()) + " entries, dst has " +
         std::to_string(dst.size()));
  FeatureGraph g;
  g.num_nodes = num_nodes;
  g.src = std::move(src);
  g.dst = std::move(dst);
  for (std::size_t e = 0; e < g.src.size(); ++e) {
    if (g.src[e] < 0 || g.src[e] >= static_cast<std::int64_t>(num_nodes) || g.dst[e] < 0 ||
        g.dst[e] >= static_cast<std::int64_t>(num_nodes))
      fail("make_graph: edge " + std::to_string(e) + " endpoint out of [0," +
           std::to_string(num_nodes) + ")");
  }
  g.graph_ids.assign(num_nodes, 0);
  g.num_graphs = 1;
  return g;
}

FeatureGraph set_feature(FeatureGraph g, FeatureDomain domain, const std::string& name,
                         Tensor value) {
  const std::size_t expect = leading_dim(g, domain);
  const std::size_t got = value.rank() == 0 ? 0 : value.shape[0];
  if (value.rank() == 0 || got != expect)
    fail("set_feature: " + std::string(domain_name(domain)) + " feature '" + name +
         "' must have leading dimension " + std::to_string(expect) + ", got shape " +
         shape_str(value.shape));
  auto& store = domain == FeatureDomain::node ? g.ndata : g.edata;
  store.insert_or_assign(name, std::move(value));
  return g;
}

const Tensor& feature(const FeatureGraph& g, FeatureDomain domain, const std::string& name) {
  const auto& store = domain == FeatureDomain::node ? g.ndata : g.edata;
  auto it = store.find(name);
  if (it == store.end())
    fail("feature: no " + std::string(domain_name(domain)) + " feature named '" + name + "'");
  return it->second;
}

bool has_feature(const FeatureGraph& g, FeatureDomain domain, const std::string& name) {
  const auto& store = domain == FeatureDomain::node ? g.ndata : g.edata;
  return store.count(name) > 0;
}

void check_consistent(const FeatureGraph& g) {
  for (std::size_t e = 0; e < g.num_edges(); ++e)
    if (g.src[e] < 0 || g.src[e] >= static_cast<std::int64_t>(g.num_nodes) || g.dst[e] < 0 ||
        g.dst[e] >= static_cast<std::int64_t>(g.num_nodes))
      fail("graph: edge endpoint out of range");
  for (const auto& [name, t] : g.ndata)
    if (t.rank() == 0 || t.shape[0] != g.num_nodes)
      fail("graph: node feature '" + name + "' has shape " + shape_str(t.shape) + " for " +
           std::to_string(g.num_nodes) + " nodes");
  for (const auto& [name, t] : g.edata)
    if (t.rank() == 0 || t.shape[0] != g.num_edges())
      fail("graph: edge feature '" + name + "' has shape " + shape_str(t.shape) + " for " +
           std::to_string(g.num_edges()) + " edges");
  if (g.graph_ids.size() != g.num_nodes) fail("graph: graph_ids size mismatch");
  std::int64_t prev = 0;
  for (std::int64_t id : g.graph_ids) {
    if (id < prev || id >= static_cast<std::int64_t>(g.num_graphs))
      fail("graph: graph_ids must be non-decreasing within [0,num_graphs)");
    prev = id;
  }
}

FeatureGraph radius_graph(const AtomicStructure& s, double cutoff, std::size_t max_neighbors) {
  if (!(cutoff > 0.0)) fail("radius_graph: cutoff must be positive");
  const std::size_t n = s.size();
  std::vector<std::int64_t> src, dst;
  std::vector<double> dist;

  std::vector<std::pair<double, std::size_t>> candidates;
  for (std::size_t i = 0; i < n; ++i) {
    candidates.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = s.positions[i][0] - s.positions[j][0];
      const double dy = s.positions[i][1] - s.positions[j][1];
      const double dz = s.positions[i][2] - s.positions[j][2];
      const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
      if (d > 0.0 && d <= cutoff) candidates.emplace_back(d, j);
    }
    if (candidates.size() > max_neighbors) {
      std::sort(candidates.begin(), candidates.end());  // by distance, ties to lower index
      candidates.resize(max_neighbors);
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    for (const auto& [d, j] : candidates) {
      src.push_back(static_cast<std::int64_t>(j));
      dst.push_back(static_cast<std::int64_t>(i));
      dist.push_back(d);
    }
  }

  FeatureGraph g = make_graph(n, std::move(src), std::move(dst));
  Tensor z = Tensor::zeros({n});
  Tensor tags = Tensor::zeros({n});
  Tensor pos = Tensor::zeros({n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    z.data[i] = static_cast<double>(s.atomic_numbers[i]);
    tags.data[i] = static_cast<double>(s.tags[i]);
    for (std::size_t c = 0; c < 3; ++c) pos.data[i * 3 + c] = s.positions[i][c];
  }
  g = set_feature(std::move(g), FeatureDomain::node, "atomic_numbers", std::move(z));
  g = set_feature(std::move(g), FeatureDomain::node, "tags", std::move(tags));
  g = set_feature(std::move(g), FeatureDomain::node, "pos", std::move(pos));
  const std::size_t num_edges = dist.size();
  g = set_feature(std::move(g), FeatureDomain::edge, "distance",
                  Tensor({num_edges, 1}, std::move(dist)));
  return g;
}

FeatureGraph batch_graphs(std::span<const FeatureGraph> graphs) {
  if (graphs.empty()) fail("batch_graphs: empty list");

  auto same_schema = [](const std::map<std::string, Tensor>& a,
                        const std::map<std::string, Tensor>& b, const char* where) {
    if (a.size() != b.size()) fail(std::string("batch_graphs: ") + where + " feature sets differ");
    for (auto ita = a.begin(), itb = b.begin(); ita != a.end(); ++ita, ++itb) {
      if (ita->first != itb->first)
        fail(std::string("batch_graphs: ") + where + " feature names differ: '" + ita->first +
             "' vs '" + itb->first + "'");
      const auto& sa = ita->second.shape;
      const auto& sb = itb->second.shape;
      if (sa.size() != sb.size() ||
          !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
        fail(std::string("batch_graphs: ") + where + " feature '" + ita->first +
             "' trailing shapes differ: " + shape_str(sa) + " vs " + shape_str(sb));
    }
  };
  for (std::size_t k = 1; k < graphs.size(); ++k) {
    same_schema(graphs[0].ndata, graphs[k].ndata, "node");
    same_schema(graphs[0].edata, graphs[k].edata, "edge");
  }

  FeatureGraph out;
  std::int64_t node_offset = 0;
  std::int64_t graph_offset = 0;
  for (const FeatureGraph& g : graphs) {
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
      out.src.push_back(g.src[e] + node_offset);
      out.dst.push_back(g.dst[e] + node_offset);
    }
    for (std::int64_t id : g.graph_ids) out.graph_ids.push_back(id + graph_offset);
    node_offset += static_cast<std::int64_t>(g.num_nodes);
    graph_offset += static_cast<std::int64_t>(g.num_graphs);
  }
  out.num_nodes = static_cast<std::size_t>(node_offset);
  out.num_graphs = static_cast<std::size_t>(graph_offset);

  auto concat_store = [&](FeatureDomain domain) {
    const auto& first = domain == FeatureDomain::node ? graphs[0].ndata : graphs[0].edata;
    auto& store = domain == FeatureDomain::node ? out.ndata : out.edata;
    for (const auto& [name, unused] : first) {
      std::vector<Tensor> parts;
      parts.reserve(graphs.size());
      for (const FeatureGraph& g : graphs)
        parts.push_back(domain == FeatureDomain::node ? g.ndata.at(name) : g.edata.at(name));
      store.insert_or_assign(name, concat(std::span<const Tensor>(parts), 0));
    }
  };
  concat_store(FeatureDomain::node);
  concat_store(FeatureDomain::edge);
  check_consistent(out);
  return out;
}

FeatureGraph batch_graphs(std::initializer_list<FeatureGraph> graphs) {
  std::vector<FeatureGraph> v(graphs);
  return batch_graphs(std::span<const FeatureGraph>(v));
}

Tensor readout_sum(const FeatureGraph& g, const std::string& name) {
  const Tensor& t = feature(g, FeatureDomain::node, name);
  return scatter_add_rows(t, g.graph_ids, static_cast<std::int64_t>(g.num_graphs));
}

}  // namespace matml
