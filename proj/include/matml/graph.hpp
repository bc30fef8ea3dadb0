// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "matml/structures.hpp"
#include "matml/tensor.hpp"

namespace matml {

// Directed graph with dictionary-keyed node/edge feature stores. Every node
// feature keeps leading dimension num_nodes and every edge feature keeps
// leading dimension num_edges; no state reachable through this API violates
// that. Treat instances as immutable: set_feature returns the updated graph.
struct FeatureGraph {
  std::size_t num_nodes = 0;
  std::vector<std::int64_t> src;  // edge j -> i stores src=j
  std::vector<std::int64_t> dst;  //                  dst=i
  std::map<std::string, Tensor> ndata;
  std::map<std::string, Tensor> edata;
  std::vector<std::int64_t> graph_ids;  // per-node membership, non-decreasing
  std::size_t num_graphs = 1;

  std::size_t num_edges() const { return src.size(); }
};

enum class FeatureDomain { node, edge };

// Builds an empty-featured graph; validates edge endpoints.
FeatureGraph make_graph(std::size_t num_nodes, std::vector<std::int64_t> src,
                        std::vector<std::int64_t> dst);

// Stores/overwrites a feature after checking the leading dimension.
FeatureGraph set_feature(FeatureGraph g, FeatureDomain domain, const std::string& name,
                         Tensor value);

const Tensor& feature(const FeatureGraph& g, FeatureDomain domain, const std::string& name);
bool has_feature(const FeatureGraph& g, FeatureDomain domain, const std::string& name);

// Verifies every structural invariant; throws on the first violation.
void check_consistent(const FeatureGraph& g);

// Directed radius graph: edge (j -> i) iff 0 < dist(i,j) <= cutoff, keeping
// at most max_neighbors nearest j per i (ties to the lower index). Seeds
// ndata with "atomic_numbers" (N), "pos" (N,3) and "tags" (N); edata with
// "distance" (E,1). Positions are used as given; no periodic images.
FeatureGraph radius_graph(const AtomicStructure& s, double cutoff,
                          std::size_t max_neighbors = SIZE_MAX);

// Disjoint union; node indices offset cumulatively, features concatenated,
// graph_ids reassigned. All graphs must share feature names and trailing
// shapes.
FeatureGraph batch_graphs(std::span<const FeatureGraph> graphs);
FeatureGraph batch_graphs(std::initializer_list<FeatureGraph> graphs);

// Per-graph sum of a node feature: row g sums rows with graph_ids == g.
// Differentiable through the stored tensor.
Tensor readout_sum(const FeatureGraph& g, const std::string& name);

}  // namespace matml
