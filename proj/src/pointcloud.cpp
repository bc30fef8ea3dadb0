// SPDX-License-Identifier: Apache-2.0
#include "matml/pointcloud.hpp"

#include <algorithm>

#include "matml/common.hpp"
#include "matml/rng.hpp"

namespace matml {

Tensor pair_features(int center_z, int neighbor_z) {
  if (center_z < 1 || center_z > kZMax || neighbor_z < 1 || neighbor_z > kZMax)
    fail("pair_features: atomic numbers " + std::to_string(center_z) + "," +
         std::to_string(neighbor_z) + " outside [1," + std::to_string(kZMax) + "]");
  Tensor out = Tensor::zeros({2 * static_cast<std::size_t>(kZMax)});
  out.data[static_cast<std::size_t>(center_z - 1)] = 1.0;
  out.data[static_cast<std::size_t>(kZMax + neighbor_z - 1)] = 1.0;
  return out;
}

PointCloudSample sample_point_cloud(const AtomicStructure& s, std::size_t num_substrate,
                                    std::uint64_t seed) {
  validate_structure(s);
  PointCloudSample out;
  out.source_id = s.id;
  out.energy = s.energy;

  std::vector<std::size_t> bulk;
  bool has_adsorbate = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.tags[i] == kTagAdsorbate) has_adsorbate = true;
    if (s.tags[i] == kTagAdsorbate || s.tags[i] == kTagSurface)
      out.center_indices.push_back(i);
    else
      bulk.push_back(i);
  }
  if (!has_adsorbate)
    fail("sample_point_cloud: structure '" + s.id + "' has no adsorbate (tag 2) atoms");

  out.neighbor_indices = out.center_indices;
  const std::size_t take = std::min(num_substrate, bulk.size());
  Rng rng(seed);
  for (std::size_t pick : rng.sample_without_replacement(bulk.size(), take))
    out.neighbor_indices.push_back(bulk[pick]);

  const std::size_t m = out.center_indices.size();
  const std::size_t k = out.neighbor_indices.size();
  out.positions_centers = Tensor::zeros({m, 3});
  out.positions_neighbors = Tensor::zeros({k, 3});
  for (std::size_t c = 0; c < m; ++c)
    for (std::size_t d = 0; d < 3; ++d)
      out.positions_centers.data[c * 3 + d] = s.positions[out.center_indices[c]][d];
  for (std::size_t n = 0; n < k; ++n)
    for (std::size_t d = 0; d < 3; ++d)
      out.positions_neighbors.data[n * 3 + d] = s.positions[out.neighbor_indices[n]][d];

  const std::size_t width = 2 * static_cast<std::size_t>(kZMax);
  out.pair_features = Tensor::zeros({m, k, width});
  for (std::size_t c = 0; c < m; ++c) {
    const int zc = s.atomic_numbers[out.center_indices[c]];
    for (std::size_t n = 0; n < k; ++n) {
      const int zn = s.atomic_numbers[out.neighbor_indices[n]];
      double* row = out.pair_features.data.data() + (c * k + n) * width;
      row[zc - 1] = 1.0;
      row[kZMax + zn - 1] = 1.0;
    }
  }
  return out;
}

PointCloudBatch batch_point_clouds(std::span<const PointCloudSample> samples) {
  if (samples.empty()) fail("batch_point_clouds: empty list");
  PointCloudBatch out;
  out.batch = samples.size();
  for (const PointCloudSample& s : samples) {
    out.m_max = std::max(out.m_max, s.num_centers());
    out.k_max = std::max(out.k_max, s.num_neighbors());
    out.source_ids.push_back(s.source_id);
  }
  const std::size_t width = 2 * static_cast<std::size_t>(kZMax);
  out.features = Tensor::zeros({out.batch, out.m_max, out.k_max, width});
  out.positions = Tensor::zeros({out.batch, out.m_max + out.k_max, 3});
  out.mask = Tensor::zeros({out.batch, out.m_max, out.k_max});

  bool all_energies = true;
  for (const PointCloudSample& s : samples) all_energies &= s.energy.has_value();
  if (all_energies) out.energies = Tensor::zeros({out.batch});

  for (std::size_t b = 0; b < out.batch; ++b) {
    const PointCloudSample& s = samples[b];
    const std::size_t m = s.num_centers(), k = s.num_neighbors();
    for (std::size_t c = 0; c < m; ++c) {
      const double* src = s.pair_features.data.data() + c * k * width;
      double* dst = out.features.data.data() + ((b * out.m_max + c) * out.k_max) * width;
      std::copy(src, src + k * width, dst);
      for (std::size_t n = 0; n < k; ++n)
        out.mask.data[(b * out.m_max + c) * out.k_max + n] = 1.0;
    }
    for (std::size_t c = 0; c < m; ++c)
      for (std::size_t d = 0; d < 3; ++d)
        out.positions.data[(b * (out.m_max + out.k_max) + c) * 3 + d] =
            s.positions_centers.data[c * 3 + d];
    for (std::size_t n = 0; n < k; ++n)
      for (std::size_t d = 0; d < 3; ++d)
        out.positions.data[(b * (out.m_max + out.k_max) + out.m_max + n) * 3 + d] =
            s.positions_neighbors.data[n * 3 + d];
    if (out.energies) out.energies->data[b] = *s.energy;
  }
  return out;
}

}  // namespace matml
