// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "matml/structures.hpp"
#include "matml/tensor.hpp"

namespace matml {

// Atom-centered point cloud for one structure: centers are the adsorbate and
// surface atoms, neighbors add a seeded sample of bulk substrate atoms.
struct PointCloudSample {
  std::vector<std::size_t> center_indices;
  std::vector<std::size_t> neighbor_indices;
  Tensor positions_centers;    // (M, 3)
  Tensor positions_neighbors;  // (K, 3)
  Tensor pair_features;        // (M, K, 2*kZMax) one-hot pairs
  std::string source_id;
  std::optional<double> energy;

  std::size_t num_centers() const { return center_indices.size(); }
  std::size_t num_neighbors() const { return neighbor_indices.size(); }
};

// Zero-padded batch with a validity mask; masked-out feature entries are
// exactly zero.
struct PointCloudBatch {
  Tensor features;   // (B, M_max, K_max, 2*kZMax)
  Tensor positions;  // (B, M_max + K_max, 3), centers first
  Tensor mask;       // (B, M_max, K_max) of 0/1
  std::optional<Tensor> energies;  // (B), present when every sample has one
  std::vector<std::string> source_ids;
  std::size_t batch = 0, m_max = 0, k_max = 0;
};

// Symmetric one-hot pair embedding: ones at (center_Z - 1) and at
// (kZMax + neighbor_Z - 1) of a 2*kZMax vector.
Tensor pair_features(int center_z, int neighbor_z);

// Centers = tag-1 and tag-2 atoms; neighbors = centers plus
// min(num_substrate, #tag-0) bulk atoms sampled uniformly without
// replacement. Pure in (structure, num_substrate, seed).
PointCloudSample sample_point_cloud(const AtomicStructure& s, std::size_t num_substrate,
                                    std::uint64_t seed);

PointCloudBatch batch_point_clouds(std::span<const PointCloudSample> samples);

}  // namespace matml
