#pragma once

// Particle state (structure of arrays), sparse uniform-grid neighbor search
// and the 2^d cell coloring used by the parallel Gauss-Seidel sweeps.

#include <xpbi/linalg.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace xpbi {

struct ParticleSet {
  std::vector<Vec3> x;
  std::vector<Vec3> v;
  std::vector<Mat3> F;
  std::vector<double> rest_volume;
  std::vector<double> mass;
  std::vector<double> inv_mass;  // 0 for kinematic particles
  std::vector<double> lambda;
  std::vector<int> material;
  std::vector<double> hardening;  // plastic volume state (NACC alpha / snow log Jp)

  std::size_t size() const { return x.size(); }
  bool empty() const { return x.empty(); }

  void resize(std::size_t n) {
    x.resize(n, Vec3::Zero());
    v.resize(n, Vec3::Zero());
    F.resize(n, Mat3::Identity());
    rest_volume.resize(n, 0.0);
    mass.resize(n, 0.0);
    inv_mass.resize(n, 0.0);
    lambda.resize(n, 0.0);
    material.resize(n, 0);
    hardening.resize(n, 0.0);
  }

  void push_back(const Vec3& pos, const Vec3& vel, double volume, double density, int material_id,
                 double hardening_state, bool kinematic) {
    x.push_back(pos);
    v.push_back(vel);
    F.push_back(Mat3::Identity());
    rest_volume.push_back(volume);
    mass.push_back(density * volume);
    inv_mass.push_back(kinematic ? 0.0 : 1.0 / (density * volume));
    lambda.push_back(0.0);
    material.push_back(material_id);
    hardening.push_back(hardening_state);
  }

  bool consistent() const {
    const std::size_t n = x.size();
    return v.size() == n && F.size() == n && rest_volume.size() == n && mass.size() == n &&
           inv_mass.size() == n && lambda.size() == n && material.size() == n &&
           hardening.size() == n;
  }

  Vec3 momentum() const {
    Vec3 p = Vec3::Zero();
    for (std::size_t i = 0; i < size(); ++i) p += mass[i] * v[i];
    return p;
  }
};

using CellIndex = std::array<int, 3>;

/// Color of a grid cell: sum_i (cell_i mod 2) * 2^i over the first d axes.
inline int cell_color(const CellIndex& cell, int dimension) {
  int color = 0;
  for (int i = 0; i < dimension; ++i) {
    const int parity = ((cell[static_cast<std::size_t>(i)] % 2) + 2) % 2;
    color |= parity << i;
  }
  return color;
}

inline CellIndex cell_of(const Vec3& x, double cell_size) {
  return {static_cast<int>(std::floor(x.x() / cell_size)),
          static_cast<int>(std::floor(x.y() / cell_size)),
          static_cast<int>(std::floor(x.z() / cell_size))};
}

inline std::uint64_t cell_key(const CellIndex& c) {
  constexpr std::int64_t kBias = 1 << 20;
  constexpr std::uint64_t kMask = (1u << 21) - 1u;
  const auto enc = [&](int v) {
    return static_cast<std::uint64_t>(static_cast<std::int64_t>(v) + kBias) & kMask;
  };
  return (enc(c[0]) << 42) | (enc(c[1]) << 21) | enc(c[2]);
}

struct GridCell {
  CellIndex index{};
  int color = 0;
  std::uint32_t begin = 0;  // range into NeighborTable::cell_particles
  std::uint32_t end = 0;
};

/// Sparse uniform grid with h_cell = k plus CSR neighbor lists
/// N_p = { b != p : |xp - xb| <= k }, sorted by particle index.
struct NeighborTable {
  double cell_size = 0.0;
  int dimension = 3;
  std::vector<GridCell> cells;              // ordered by (color, key)
  std::vector<std::uint32_t> cell_particles;  // particle ids bucketed by cell
  std::vector<std::uint32_t> color_begin;   // cells of color c: [color_begin[c], color_begin[c+1])
  std::vector<std::uint32_t> offsets;       // size n + 1
  std::vector<std::uint32_t> neighbors;     // flattened lists
  std::vector<std::uint32_t> mirror;        // slot of p inside N_b for slot (p -> b)
  std::vector<std::uint32_t> particle_cell;

  std::size_t particle_count() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  int color_count() const { return 1 << dimension; }

  std::span<const std::uint32_t> of(std::size_t p) const {
    return {neighbors.data() + offsets[p], offsets[p + 1] - offsets[p]};
  }
  std::span<const std::uint32_t> particles_in(const GridCell& cell) const {
    return {cell_particles.data() + cell.begin, cell.end - cell.begin};
  }
  std::span<const GridCell> cells_of_color(int color) const {
    const auto c = static_cast<std::size_t>(color);
    return {cells.data() + color_begin[c], color_begin[c + 1] - color_begin[c]};
  }
};

inline NeighborTable build_neighbor_table(std::span<const Vec3> positions, double support,
                                          int dimension = 3) {
  if (!(support > 0.0)) throw std::invalid_argument("neighbor support radius must be positive");
  NeighborTable table;
  table.cell_size = support;
  table.dimension = dimension;
  const std::size_t n = positions.size();

  std::vector<std::uint64_t> keys(n);
  std::vector<CellIndex> cidx(n);
  for (std::size_t i = 0; i < n; ++i) {
    cidx[i] = cell_of(positions[i], support);
    if (dimension == 2) cidx[i][2] = 0;
    keys[i] = cell_key(cidx[i]);
  }

  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return keys[a] < keys[b]; });

  // Group into cells (key order), then reorder cells by color.
  std::vector<GridCell> by_key;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && keys[order[j]] == keys[order[i]]) ++j;
    GridCell cell;
    cell.index = cidx[order[i]];
    cell.color = cell_color(cell.index, dimension);
    cell.begin = static_cast<std::uint32_t>(i);
    cell.end = static_cast<std::uint32_t>(j);
    by_key.push_back(cell);
    i = j;
  }
  table.cell_particles = order;
  std::stable_sort(by_key.begin(), by_key.end(),
                   [](const GridCell& a, const GridCell& b) { return a.color < b.color; });
  table.cells = std::move(by_key);
  table.color_begin.assign(static_cast<std::size_t>(table.color_count()) + 1, 0);
  for (const auto& cell : table.cells) ++table.color_begin[static_cast<std::size_t>(cell.color) + 1];
  for (std::size_t c = 1; c < table.color_begin.size(); ++c)
    table.color_begin[c] += table.color_begin[c - 1];

  std::unordered_map<std::uint64_t, std::uint32_t> lookup;
  lookup.reserve(table.cells.size() * 2);
  table.particle_cell.assign(n, 0);
  for (std::uint32_t c = 0; c < table.cells.size(); ++c) {
    lookup.emplace(cell_key(table.cells[c].index), c);
    for (auto p : table.particles_in(table.cells[c])) table.particle_cell[p] = c;
  }

  const double k2 = support * support;
  const int zr = dimension == 3 ? 1 : 0;
  table.offsets.assign(n + 1, 0);
  std::vector<std::uint32_t> scratch;
  table.neighbors.reserve(n * 40);
  for (std::size_t p = 0; p < n; ++p) {
    scratch.clear();
    const CellIndex& c = cidx[p];
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -zr; dz <= zr; ++dz) {
          const auto it = lookup.find(cell_key({c[0] + dx, c[1] + dy, c[2] + dz}));
          if (it == lookup.end()) continue;
          for (auto b : table.particles_in(table.cells[it->second])) {
            if (b == p) continue;
            if ((positions[p] - positions[b]).squaredNorm() <= k2) scratch.push_back(b);
          }
        }
    std::sort(scratch.begin(), scratch.end());
    table.neighbors.insert(table.neighbors.end(), scratch.begin(), scratch.end());
    table.offsets[p + 1] = static_cast<std::uint32_t>(table.neighbors.size());
  }

  // Mirror slots: for slot s = (p -> b), the slot of p inside N_b.
  table.mirror.assign(table.neighbors.size(), 0);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::uint32_t s = table.offsets[p]; s < table.offsets[p + 1]; ++s) {
      const std::uint32_t b = table.neighbors[s];
      const auto nb = table.of(b);
      const auto it = std::lower_bound(nb.begin(), nb.end(), static_cast<std::uint32_t>(p));
      table.mirror[s] = table.offsets[b] + static_cast<std::uint32_t>(it - nb.begin());
    }
  }
  return table;
}

}  // namespace xpbi
