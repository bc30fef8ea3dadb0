// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace matml {

// Highest supported atomic number. Pair features are 2*kZMax wide.
inline constexpr int kZMax = 100;

// Atom role tags: 0 = subsurface bulk, 1 = surface, 2 = adsorbate.
inline constexpr int kTagBulk = 0;
inline constexpr int kTagSurface = 1;
inline constexpr int kTagAdsorbate = 2;

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;

// One catalyst+adsorbate record. Positions in angstrom, energy in eV,
// forces in eV/angstrom.
struct AtomicStructure {
  std::string id;
  std::vector<int> atomic_numbers;
  std::vector<Vec3> positions;
  std::vector<int> tags;
  std::optional<double> energy;
  std::optional<std::vector<Vec3>> forces;
  std::optional<Mat3> cell;

  std::size_t size() const { return atomic_numbers.size(); }
};

// Enforces the record invariants; throws naming the record id and the
// offending field.
void validate_structure(const AtomicStructure& s);

struct DatasetManifest {
  std::string path;
  std::size_t record_count = 0;
  std::string split_name;
  std::uint64_t seed = 0;
  std::string checksum;  // fnv1a64 of the serialized JSONL bytes, hex
};

// JSON-Lines serialization. One record per "\n"-terminated line.
std::string to_jsonl(const std::vector<AtomicStructure>& records);
std::vector<AtomicStructure> load_dataset(const std::string& path);
void save_dataset(const std::string& path, const std::vector<AtomicStructure>& records);

void write_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest read_manifest(const std::string& path);
std::string file_checksum_hex(const std::string& path);

// n distinct records chosen by a seeded shuffle; pure in (dataset, n, seed).
std::pair<std::vector<AtomicStructure>, DatasetManifest> make_devset(
    const std::vector<AtomicStructure>& dataset, std::size_t n, std::uint64_t seed);

// Disjoint seeded partition; sizes floor-rounded, remainder to the first split.
std::vector<std::vector<AtomicStructure>> split_dataset(
    const std::vector<AtomicStructure>& dataset, const std::vector<double>& fractions,
    std::uint64_t seed);

// Desk-scale stand-in data: random structures in a 10 A box whose energy
// labels come from a smooth pair potential and whose force labels are its
// exact analytic negative gradient.
std::vector<AtomicStructure> generate_synthetic(std::size_t n, std::size_t atoms_min,
                                                std::size_t atoms_max, std::uint64_t seed);

// The generating potential, exposed so tests can finite-difference it.
double synthetic_potential_energy(const std::vector<Vec3>& positions);
std::vector<Vec3> synthetic_potential_forces(const std::vector<Vec3>& positions);

// Pair separation at which the synthetic pair term has zero derivative.
double synthetic_potential_minimum();

}  // namespace matml
