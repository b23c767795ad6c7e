#pragma once

// Seeding geometry: box / sphere / cylinder primitives and their unions,
// Bridson-style Poisson-disk sampling and regular lattice sampling.

#include <xpbi/linalg.hpp>

#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace xpbi {

struct Shape {
  enum class Kind { Box, Sphere, Cylinder, Union };

  Kind kind = Kind::Box;
  Vec3 lo = Vec3::Zero();      // box
  Vec3 hi = Vec3::Zero();      // box
  Vec3 center = Vec3::Zero();  // sphere center / cylinder base center
  double radius = 0.0;
  double height = 0.0;
  int axis = 1;  // cylinder axis
  std::vector<Shape> children;

  bool operator==(const Shape&) const = default;

  static Shape box(const Vec3& lo, const Vec3& hi) {
    Shape s;
    s.kind = Kind::Box;
    s.lo = lo;
    s.hi = hi;
    return s;
  }
  static Shape sphere(const Vec3& c, double r) {
    Shape s;
    s.kind = Kind::Sphere;
    s.center = c;
    s.radius = r;
    return s;
  }
  static Shape cylinder(const Vec3& base, double r, double h, int axis) {
    Shape s;
    s.kind = Kind::Cylinder;
    s.center = base;
    s.radius = r;
    s.height = h;
    s.axis = axis;
    return s;
  }
  static Shape make_union(std::vector<Shape> parts) {
    Shape s;
    s.kind = Kind::Union;
    s.children = std::move(parts);
    return s;
  }

  bool contains(const Vec3& p) const {
    switch (kind) {
      case Kind::Box:
        return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
      case Kind::Sphere:
        return (p - center).squaredNorm() <= radius * radius;
      case Kind::Cylinder: {
        const double h = p(axis) - center(axis);
        if (h < 0.0 || h > height) return false;
        Vec3 d = p - center;
        d(axis) = 0.0;
        return d.squaredNorm() <= radius * radius;
      }
      case Kind::Union:
        for (const auto& c : children)
          if (c.contains(p)) return true;
        return false;
    }
    return false;
  }

  Eigen::AlignedBox3d bounds() const {
    switch (kind) {
      case Kind::Box:
        return {lo, hi};
      case Kind::Sphere:
        return {center - Vec3::Constant(radius), center + Vec3::Constant(radius)};
      case Kind::Cylinder: {
        Vec3 a = center - Vec3::Constant(radius);
        Vec3 b = center + Vec3::Constant(radius);
        a(axis) = center(axis);
        b(axis) = center(axis) + height;
        return {a, b};
      }
      case Kind::Union: {
        Eigen::AlignedBox3d box;
        for (const auto& c : children) box.extend(c.bounds());
        return box;
      }
    }
    return {};
  }

  /// Measure in `dimension` (area of the z = 0 slice for d = 2).
  double measure(int dimension = 3) const {
    if (dimension == 2) return measure_by_quadrature(2);
    switch (kind) {
      case Kind::Box:
        return std::max(0.0, (hi - lo).prod());
      case Kind::Sphere:
        return 4.0 / 3.0 * std::numbers::pi * radius * radius * radius;
      case Kind::Cylinder:
        return std::numbers::pi * radius * radius * height;
      case Kind::Union:
        if (children.size() == 1) return children.front().measure(3);
        return measure_by_quadrature(3);
    }
    return 0.0;
  }

 private:
  double measure_by_quadrature(int dimension) const {
    const auto box = bounds();
    if (box.isEmpty()) return 0.0;
    const Vec3 ext = box.sizes();
    constexpr int kRes = 160;
    const int nz = dimension == 3 ? kRes : 1;
    std::size_t inside = 0;
    for (int i = 0; i < kRes; ++i)
      for (int j = 0; j < kRes; ++j)
        for (int l = 0; l < nz; ++l) {
          Vec3 p = box.min() + Vec3((i + 0.5) / kRes * ext.x(), (j + 0.5) / kRes * ext.y(),
                                    (l + 0.5) / kRes * ext.z());
          if (dimension == 2) p.z() = 0.0;  // planar scenes live in z = 0
          if (contains(p)) ++inside;
        }
    const double cell = dimension == 3 ? ext.prod() / (double(kRes) * kRes * kRes)
                                       : ext.x() * ext.y() / (double(kRes) * kRes);
    return cell * static_cast<double>(inside);
  }
};

namespace detail {

class SampleGrid {
 public:
  SampleGrid(const Eigen::AlignedBox3d& box, double cell, int dimension)
      : origin_(box.min()), cell_(cell), dimension_(dimension) {}

  std::array<int, 3> cell_of(const Vec3& p) const {
    return {static_cast<int>(std::floor((p.x() - origin_.x()) / cell_)),
            static_cast<int>(std::floor((p.y() - origin_.y()) / cell_)),
            dimension_ == 3 ? static_cast<int>(std::floor((p.z() - origin_.z()) / cell_)) : 0};
  }
  static std::uint64_t key(const std::array<int, 3>& c) {
    return (static_cast<std::uint64_t>(c[0] + (1 << 20)) << 42) |
           (static_cast<std::uint64_t>(c[1] + (1 << 20)) << 21) |
           static_cast<std::uint64_t>(c[2] + (1 << 20));
  }
  void insert(const Vec3& p, std::size_t id) { cells_[key(cell_of(p))].push_back(id); }

  // True when no stored point lies closer than `dist` to p.
  bool clear(const Vec3& p, double dist, const std::vector<Vec3>& pts) const {
    const auto c = cell_of(p);
    const int reach = static_cast<int>(std::ceil(dist / cell_));
    const int zr = dimension_ == 3 ? reach : 0;
    for (int dx = -reach; dx <= reach; ++dx)
      for (int dy = -reach; dy <= reach; ++dy)
        for (int dz = -zr; dz <= zr; ++dz) {
          const auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
          if (it == cells_.end()) continue;
          for (auto id : it->second)
            if ((pts[id] - p).squaredNorm() < dist * dist) return false;
        }
    return true;
  }

 private:
  Vec3 origin_;
  double cell_;
  int dimension_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

}  // namespace detail

/// Poisson-disk samples inside `domain` with pairwise distance >= spacing.
/// Bridson dart throwing from an active list, restarted from every uncovered
/// probe point of a spacing/2 lattice so disconnected parts are filled too.
inline std::vector<Vec3> poisson_disk_sample(const Shape& domain, double spacing,
                                             std::uint64_t seed, int dimension = 3,
                                             int attempts = 30) {
  if (!(spacing > 0.0)) throw std::invalid_argument("poisson_disk_sample: spacing must be positive");
  std::vector<Vec3> pts;
  const auto box = domain.bounds();
  if (box.isEmpty() || domain.measure(dimension) <= 0.0) return pts;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  detail::SampleGrid grid(box, spacing / std::sqrt(static_cast<double>(dimension)), dimension);

  const auto random_annulus = [&](const Vec3& c) {
    Vec3 dir;
    if (dimension == 3) {
      const double z = 2.0 * uni(rng) - 1.0;
      const double phi = 2.0 * std::numbers::pi * uni(rng);
      const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
      dir = Vec3(s * std::cos(phi), s * std::sin(phi), z);
      // Uniform in volume between spacing and 2 * spacing.
      const double u = uni(rng);
      const double rad = spacing * std::cbrt(1.0 + 7.0 * u);
      return Vec3(c + rad * dir);
    }
    const double phi = 2.0 * std::numbers::pi * uni(rng);
    const double u = uni(rng);
    const double rad = spacing * std::sqrt(1.0 + 3.0 * u);
    return Vec3(c + rad * Vec3(std::cos(phi), std::sin(phi), 0.0));
  };

  const auto grow_from = [&](const Vec3& seed_point) {
    std::vector<std::size_t> active{pts.size()};
    grid.insert(seed_point, pts.size());
    pts.push_back(seed_point);
    while (!active.empty()) {
      const auto pick = static_cast<std::size_t>(uni(rng) * static_cast<double>(active.size()));
      const std::size_t idx = std::min(pick, active.size() - 1);
      const Vec3 center = pts[active[idx]];
      bool placed = false;
      for (int a = 0; a < attempts; ++a) {
        const Vec3 cand = random_annulus(center);
        if (!domain.contains(cand) || !grid.clear(cand, spacing, pts)) continue;
        grid.insert(cand, pts.size());
        active.push_back(pts.size());
        pts.push_back(cand);
        placed = true;
        break;
      }
      if (!placed) {
        active[idx] = active.back();
        active.pop_back();
      }
    }
  };

  // Probe lattice: every probe inside the domain must end up within
  // `spacing` of a sample; uncovered probes seed a new Bridson front.
  const double probe = 0.5 * spacing;
  const Vec3 ext = box.sizes();
  const int nx = std::max(1, static_cast<int>(std::ceil(ext.x() / probe)));
  const int ny = std::max(1, static_cast<int>(std::ceil(ext.y() / probe)));
  const int nz = dimension == 3 ? std::max(1, static_cast<int>(std::ceil(ext.z() / probe))) : 1;
  for (int i = 0; i <= nx; ++i)
    for (int j = 0; j <= ny; ++j)
      for (int l = 0; l <= (dimension == 3 ? nz : 0); ++l) {
        Vec3 p = box.min() + Vec3(std::min(i * probe, ext.x()), std::min(j * probe, ext.y()),
                                  dimension == 3 ? std::min(l * probe, ext.z()) : 0.0);
        if (dimension == 2) p.z() = 0.0;
        if (!domain.contains(p) || !grid.clear(p, spacing, pts)) continue;
        grow_from(p);
      }
  return pts;
}

/// Regular lattice with the given spacing, cell-centered inside the bounds.
inline std::vector<Vec3> lattice_sample(const Shape& domain, double spacing, int dimension = 3) {
  std::vector<Vec3> pts;
  const auto box = domain.bounds();
  if (box.isEmpty()) return pts;
  const Vec3 ext = box.sizes();
  const int nx = static_cast<int>(std::floor(ext.x() / spacing + 1e-9));
  const int ny = static_cast<int>(std::floor(ext.y() / spacing + 1e-9));
  const int nz = dimension == 3 ? static_cast<int>(std::floor(ext.z() / spacing + 1e-9)) : 1;
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j)
      for (int l = 0; l < nz; ++l) {
        const Vec3 p = box.min() + spacing * Vec3(i + 0.5, j + 0.5, dimension == 3 ? l + 0.5 : 0.0) -
                       (dimension == 3 ? Vec3::Zero() : Vec3(0.0, 0.0, box.min().z()));
        if (domain.contains(p)) pts.push_back(p);
      }
  return pts;
}

}  // namespace xpbi
