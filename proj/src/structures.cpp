// SPDX-License-Identifier: Apache-2.0
#include "matml/structures.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "matml/common.hpp"
#include "matml/rng.hpp"

namespace matml {

namespace {

constexpr double kMinSeparation = 1e-6;  // angstrom

// Pair potential: Lennard-Jones well (minimum at kSigma, depth kEpsilon)
// multiplied by a quintic switch that takes it smoothly to zero at kCutoff.
// C2 continuity keeps finite differences of the energy honest at the cutoff.
constexpr double kEpsilon = 0.35;   // eV
constexpr double kSigma = 2.2;      // angstrom
constexpr double kSwitchOn = 4.5;   // angstrom
constexpr double kCutoff = 6.0;     // angstrom
constexpr double kBoxSize = 10.0;   // angstrom
constexpr double kGenMinSep = 2.0;  // generator-enforced spacing

double switch_fn(double r) {
  if (r <= kSwitchOn) return 1.0;
  if (r >= kCutoff) return 0.0;
  const double t = (r - kSwitchOn) / (kCutoff - kSwitchOn);
  return 1.0 - t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
}

double switch_fn_deriv(double r) {
  if (r <= kSwitchOn || r >= kCutoff) return 0.0;
  const double t = (r - kSwitchOn) / (kCutoff - kSwitchOn);
  return -30.0 * t * t * (1.0 - t) * (1.0 - t) / (kCutoff - kSwitchOn);
}

double lj_term(double r) {
  const double s6 = std::pow(kSigma / r, 6);
  return kEpsilon * (s6 * s6 - 2.0 * s6);
}

double lj_term_deriv(double r) {
  const double s6 = std::pow(kSigma / r, 6);
  return kEpsilon * 12.0 * (s6 - s6 * s6) / r;
}

double pair_energy(double r) { return lj_term(r) * switch_fn(r); }

double pair_energy_deriv(double r) {
  return lj_term_deriv(r) * switch_fn(r) + lj_term(r) * switch_fn_deriv(r);
}

nlohmann::ordered_json structure_to_json(const AtomicStructure& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["atomic_numbers"] = s.atomic_numbers;
  auto vecs = [](const std::vector<Vec3>& v) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const Vec3& p : v) arr.push_back({p[0], p[1], p[2]});
    return arr;
  };
  j["positions"] = vecs(s.positions);
  j["tags"] = s.tags;
  if (s.energy)
    j["energy"] = *s.energy;
  else
    j["energy"] = nullptr;
  if (s.forces)
    j["forces"] = vecs(*s.forces);
  else
    j["forces"] = nullptr;
  if (s.cell) {
    nlohmann::ordered_json c = nlohmann::ordered_json::array();
    for (const Vec3& row : *s.cell) c.push_back({row[0], row[1], row[2]});
    j["cell"] = c;
  } else {
    j["cell"] = nullptr;
  }
  return j;
}

std::vector<Vec3> vec3_list_from_json(const nlohmann::json& j, const std::string& field) {
  std::vector<Vec3> out;
  if (!j.is_array()) fail("field '" + field + "' must be an array of 3-vectors");
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != 3) fail("field '" + field + "' must hold 3-vectors");
    out.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>()});
  }
  return out;
}

AtomicStructure structure_from_json(const nlohmann::json& j) {
  AtomicStructure s;
  s.id = j.at("id").get<std::string>();
  s.atomic_numbers = j.at("atomic_numbers").get<std::vector<int>>();
  s.positions = vec3_list_from_json(j.at("positions"), "positions");
  s.tags = j.at("tags").get<std::vector<int>>();
  if (j.contains("energy") && !j.at("energy").is_null()) s.energy = j.at("energy").get<double>();
  if (j.contains("forces") && !j.at("forces").is_null())
    s.forces = vec3_list_from_json(j.at("forces"), "forces");
  if (j.contains("cell") && !j.at("cell").is_null()) {
    auto rows = vec3_list_from_json(j.at("cell"), "cell");
    if (rows.size() != 3) fail("field 'cell' must be 3x3");
    s.cell = Mat3{rows[0], rows[1], rows[2]};
  }
  return s;
}

}  // namespace

void validate_structure(const AtomicStructure& s) {
  auto bad = [&](const std::string& field, const std::string& why) {
    fail("structure '" + s.id + "': field '" + field + "' " + why);
  };
  const std::size_t n = s.atomic_numbers.size();
  if (n == 0) bad("atomic_numbers", "is empty");
  if (s.tags.size() != n)
    bad("tags", "has " + std::to_string(s.tags.size()) + " entries for " + std::to_string(n) +
                    " atoms");
  if (s.positions.size() != n)
    bad("positions", "has " + std::to_string(s.positions.size()) + " rows for " +
                         std::to_string(n) + " atoms");
  if (s.forces && s.forces->size() != n)
    bad("forces", "has " + std::to_string(s.forces->size()) + " rows for " + std::to_string(n) +
                      " atoms");
  for (int z : s.atomic_numbers)
    if (z < 1 || z > kZMax)
      bad("atomic_numbers", "contains " + std::to_string(z) + " outside [1," +
                                std::to_string(kZMax) + "]");
  for (int t : s.tags)
    if (t < 0 || t > 2) bad("tags", "contains " + std::to_string(t) + " outside {0,1,2}");
  for (const Vec3& p : s.positions)
    for (double c : p)
      if (!std::isfinite(c)) bad("positions", "contains a non-finite coordinate");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = s.positions[i][0] - s.positions[j][0];
      const double dy = s.positions[i][1] - s.positions[j][1];
      const double dz = s.positions[i][2] - s.positions[j][2];
      if (dx * dx + dy * dy + dz * dz < kMinSeparation * kMinSeparation)
        bad("positions", "atoms " + std::to_string(i) + " and " + std::to_string(j) +
                             " are closer than " + std::to_string(kMinSeparation) + " A");
    }
}

std::string to_jsonl(const std::vector<AtomicStructure>& records) {
  std::string out;
  for (const AtomicStructure& s : records) {
    out += structure_to_json(s).dump();
    out += '\n';
  }
  return out;
}

std::vector<AtomicStructure> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("load_dataset: cannot open '" + path + "'");
  std::vector<AtomicStructure> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail("load_dataset: " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    AtomicStructure s;
    try {
      s = structure_from_json(j);
    } catch (const std::exception& e) {
      fail("load_dataset: " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    validate_structure(s);
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset(const std::string& path, const std::vector<AtomicStructure>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("save_dataset: cannot open '" + path + "' for writing");
  out << to_jsonl(records);
  if (!out) fail("save_dataset: write to '" + path + "' failed");
}

namespace {
std::string checksum_hex(const std::string& bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
  return buf;
}
}  // namespace

std::string file_checksum_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("checksum: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return checksum_hex(ss.str());
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::ordered_json j;
  j["path"] = m.path;
  j["record_count"] = m.record_count;
  j["split_name"] = m.split_name;
  j["seed"] = m.seed;
  j["checksum"] = m.checksum;
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("write_manifest: cannot open '" + path + "'");
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("read_manifest: cannot open '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in);
  DatasetManifest m;
  m.path = j.at("path").get<std::string>();
  m.record_count = j.at("record_count").get<std::size_t>();
  m.split_name = j.at("split_name").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.checksum = j.at("checksum").get<std::string>();
  if (m.record_count == 0) fail("read_manifest: record count must be positive");
  return m;
}

std::pair<std::vector<AtomicStructure>, DatasetManifest> make_devset(
    const std::vector<AtomicStructure>& dataset, std::size_t n, std::uint64_t seed) {
  if (n == 0) fail("make_devset: n must be positive");
  if (n > dataset.size())
    fail("make_devset: requested " + std::to_string(n) + " records from a dataset of " +
         std::to_string(dataset.size()));
  Rng rng(seed);
  auto picks = rng.sample_without_replacement(dataset.size(), n);
  std::vector<AtomicStructure> out;
  out.reserve(n);
  for (std::size_t i : picks) out.push_back(dataset[i]);
  DatasetManifest m;
  m.record_count = n;
  m.split_name = "devset";
  m.seed = seed;
  m.checksum = checksum_hex(to_jsonl(out));
  return {std::move(out), std::move(m)};
}

std::vector<std::vector<AtomicStructure>> split_dataset(
    const std::vector<AtomicStructure>& dataset, const std::vector<double>& fractions,
    std::uint64_t seed) {
  if (fractions.empty()) fail("split_dataset: no fractions given");
  double total = 0.0;
  for (double f : fractions) {
    if (f <= 0.0) fail("split_dataset: fractions must be positive");
    total += f;
  }
  if (std::fabs(total - 1.0) > 1e-9)
    fail("split_dataset: fractions sum to " + std::to_string(total) + ", expected 1");

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<std::size_t> sizes(fractions.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    sizes[i] = static_cast<std::size_t>(std::floor(fractions[i] * static_cast<double>(dataset.size())));
    assigned += sizes[i];
  }
  sizes[0] += dataset.size() - assigned;  // remainder to the first split

  std::vector<std::vector<AtomicStructure>> splits(fractions.size());
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    splits[i].reserve(sizes[i]);
    for (std::size_t k = 0; k < sizes[i]; ++k) splits[i].push_back(dataset[order[cursor++]]);
  }
  return splits;
}

double synthetic_potential_energy(const std::vector<Vec3>& positions) {
  double e = 0.0;
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      const double dx = positions[i][0] - positions[j][0];
      const double dy = positions[i][1] - positions[j][1];
      const double dz = positions[i][2] - positions[j][2];
      const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
      if (r < kCutoff) e += pair_energy(r);
    }
  return e;
}

std::vector<Vec3> synthetic_potential_forces(const std::vector<Vec3>& positions) {
  std::vector<Vec3> f(positions.size(), Vec3{0, 0, 0});
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      const double dx = positions[i][0] - positions[j][0];
      const double dy = positions[i][1] - positions[j][1];
      const double dz = positions[i][2] - positions[j][2];
      const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
      if (r >= kCutoff) continue;
      const double du = pair_energy_deriv(r);
      const double gx = du * dx / r, gy = du * dy / r, gz = du * dz / r;
      f[i][0] -= gx;
      f[i][1] -= gy;
      f[i][2] -= gz;
      f[j][0] += gx;
      f[j][1] += gy;
      f[j][2] += gz;
    }
  return f;
}

double synthetic_potential_minimum() { return kSigma; }

std::vector<AtomicStructure> generate_synthetic(std::size_t n, std::size_t atoms_min,
                                                std::size_t atoms_max, std::uint64_t seed) {
  if (atoms_min < 2 || atoms_min > atoms_max)
    fail("generate_synthetic: need 2 <= atoms_min <= atoms_max");
  Rng rng(seed);
  std::vector<AtomicStructure> out;
  out.reserve(n);
  for (std::size_t rec = 0; rec < n; ++rec) {
    const std::size_t atoms = atoms_min + rng.index(atoms_max - atoms_min + 1);
    AtomicStructure s;
    {
      std::ostringstream id;
      id << "syn-" << seed << "-";
      id.width(5);
      id.fill('0');
      id << rec;
      s.id = id.str();
    }
    for (std::size_t a = 0; a < atoms; ++a) {
      s.atomic_numbers.push_back(1 + static_cast<int>(rng.index(20)));
      Vec3 p;
      int attempts = 0;
      for (;;) {
        p = {rng.uniform(0.0, kBoxSize), rng.uniform(0.0, kBoxSize), rng.uniform(0.0, kBoxSize)};
        bool ok = true;
        for (const Vec3& q : s.positions) {
          const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
          if (dx * dx + dy * dy + dz * dz < kGenMinSep * kGenMinSep) {
            ok = false;
            break;
          }
        }
        if (ok) break;
        if (++attempts > 10000)
          fail("generate_synthetic: cannot place " + std::to_string(atoms) +
               " atoms with spacing " + std::to_string(kGenMinSep) + " A in a " +
               std::to_string(kBoxSize) + " A box");
      }
      s.positions.push_back(p);
    }

    // Tags by height: top 20% adsorbate, next 30% surface, rest bulk.
    std::vector<std::size_t> by_height(atoms);
    std::iota(by_height.begin(), by_height.end(), 0);
    std::sort(by_height.begin(), by_height.end(), [&](std::size_t a, std::size_t b) {
      return s.positions[a][2] > s.positions[b][2];
    });
    const std::size_t n_ads = std::max<std::size_t>(1, atoms / 5);
    const std::size_t n_surf = std::min(atoms - n_ads, std::max<std::size_t>(1, atoms * 3 / 10));
    s.tags.assign(atoms, kTagBulk);
    for (std::size_t k = 0; k < n_ads; ++k) s.tags[by_height[k]] = kTagAdsorbate;
    for (std::size_t k = n_ads; k < n_ads + n_surf; ++k) s.tags[by_height[k]] = kTagSurface;

    s.energy = synthetic_potential_energy(s.positions);
    s.forces = synthetic_potential_forces(s.positions);
    validate_structure(s);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace matml
