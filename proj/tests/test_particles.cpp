#include <xpbi/oracles.hpp>
#include <xpbi/particles.hpp>
#include <xpbi/sampling.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace xpbi;

namespace {

std::vector<Vec3> random_cloud(std::uint64_t seed, std::size_t n, double extent, int dimension = 3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-extent, extent);
  std::vector<Vec3> x(n);
  for (auto& p : x) p = Vec3(u(rng), u(rng), dimension == 3 ? u(rng) : 0.0);
  return x;
}

double min_pair_distance(const std::vector<Vec3>& pts) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) m = std::min(m, (pts[i] - pts[j]).norm());
  return m;
}

}  // namespace

TEST(ParticleSet, PushBackKeepsArraysConsistent) {
  ParticleSet s;
  s.push_back(Vec3(1, 2, 3), Vec3(0, 1, 0), 0.5, 1000.0, 2, 0.1, false);
  s.push_back(Vec3::Zero(), Vec3::Zero(), 0.5, 1000.0, 0, 0.0, true);
  EXPECT_TRUE(s.consistent());
  EXPECT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s.mass[0], 500.0);
  EXPECT_DOUBLE_EQ(s.inv_mass[0], 1.0 / 500.0);
  EXPECT_EQ(s.inv_mass[1], 0.0);
  EXPECT_EQ(s.F[0], Mat3::Identity());
  EXPECT_EQ(s.material[0], 2);
  EXPECT_LE((s.momentum() - Vec3(0, 500, 0)).norm(), 1e-12);
  s.resize(5);
  EXPECT_TRUE(s.consistent());
}

TEST(CellColor, Formula) {
  EXPECT_EQ(cell_color({0, 0, 0}, 3), 0);
  EXPECT_EQ(cell_color({1, 0, 0}, 3), 1);
  EXPECT_EQ(cell_color({0, 1, 0}, 3), 2);
  EXPECT_EQ(cell_color({1, 1, 1}, 3), 7);
  EXPECT_EQ(cell_color({0, 0, 0}, 3), cell_color({2, 0, 0}, 3));
  EXPECT_EQ(cell_color({-1, 0, 0}, 3), 1);
  EXPECT_EQ(cell_color({1, 1, 1}, 2), 3);
}

TEST(CellColor, AdjacentCellsDiffer) {
  for (int dim : {2, 3}) {
    const int zr = dim == 3 ? 3 : 0;
    for (int x = 0; x < 4; ++x)
      for (int y = 0; y < 4; ++y)
        for (int z = 0; z <= zr; ++z)
          for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dz = (dim == 3 ? -1 : 0); dz <= (dim == 3 ? 1 : 0); ++dz) {
                if (dx == 0 && dy == 0 && dz == 0) continue;
                EXPECT_NE(cell_color({x, y, z}, dim), cell_color({x + dx, y + dy, z + dz}, dim));
              }
  }
}

TEST(NeighborTable, InclusiveBoundary) {
  const std::vector<Vec3> x{Vec3(0, 0, 0), Vec3(0.5, 0, 0)};
  const NeighborTable t = build_neighbor_table(x, 0.5);
  ASSERT_EQ(t.of(0).size(), 1u);
  ASSERT_EQ(t.of(1).size(), 1u);
  EXPECT_EQ(t.of(0)[0], 1u);
  EXPECT_EQ(t.of(1)[0], 0u);
  const auto ref = brute_force_neighbors(x, 0.5);
  EXPECT_EQ(ref[0].size(), 1u);
}

TEST(NeighborTable, SingleAndEmpty) {
  const std::vector<Vec3> one{Vec3(1, 1, 1)};
  EXPECT_TRUE(build_neighbor_table(one, 0.1).of(0).empty());
  const NeighborTable e = build_neighbor_table(std::vector<Vec3>{}, 0.1);
  EXPECT_EQ(e.particle_count(), 0u);
  EXPECT_TRUE(brute_force_neighbors(std::vector<Vec3>{}, 0.1).empty());
  EXPECT_THROW(build_neighbor_table(one, 0.0), std::invalid_argument);
}

TEST(NeighborTable, MatchesBruteForceAndIsSymmetric) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = random_cloud(seed, 1000, 1.0);
    const double k = 0.17;
    const NeighborTable t = build_neighbor_table(x, k);
    const auto ref = brute_force_neighbors(x, k);
    for (std::size_t p = 0; p < x.size(); ++p) {
      const auto nb = t.of(p);
      ASSERT_TRUE(std::equal(nb.begin(), nb.end(), ref[p].begin(), ref[p].end())) << "particle " << p;
      for (std::size_t s = 0; s < nb.size(); ++s) {
        // Mirror slot points back at p.
        EXPECT_EQ(t.neighbors[t.mirror[t.offsets[p] + s]], p);
      }
    }
  }
}

TEST(NeighborTable, NeighborsLieInAdjacentCells) {
  const auto x = random_cloud(21, 800, 1.0);
  const double k = 0.2;
  const NeighborTable t = build_neighbor_table(x, k);
  for (std::size_t p = 0; p < x.size(); ++p) {
    const auto cp = t.cells[t.particle_cell[p]].index;
    for (auto b : t.of(p)) {
      const auto cb = t.cells[t.particle_cell[b]].index;
      for (int i = 0; i < 3; ++i) EXPECT_LE(std::abs(cp[i] - cb[i]), 1);
    }
  }
}

TEST(NeighborTable, SameColorCellsAreSeparated) {
  for (int dim : {2, 3}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto x = random_cloud(100 + seed, 1500, 1.0, dim);
      const double k = 0.13;
      const NeighborTable t = build_neighbor_table(x, k, dim);
      EXPECT_EQ(t.color_count(), 1 << dim);
      for (std::size_t a = 0; a < x.size(); ++a)
        for (std::size_t b = a + 1; b < x.size(); ++b) {
          const auto ca = t.particle_cell[a], cb = t.particle_cell[b];
          if (ca == cb || t.cells[ca].color != t.cells[cb].color) continue;
          EXPECT_GT((x[a] - x[b]).norm(), k);
        }
    }
  }
}

TEST(NeighborTable, CellsGroupedByColor) {
  const auto x = random_cloud(3, 500, 1.0);
  const NeighborTable t = build_neighbor_table(x, 0.25);
  std::size_t total = 0;
  for (int c = 0; c < t.color_count(); ++c)
    for (const auto& cell : t.cells_of_color(c)) {
      EXPECT_EQ(cell.color, c);
      total += t.particles_in(cell).size();
    }
  EXPECT_EQ(total, x.size());
}

TEST(PoissonDisk, DeterministicForFixedSeed) {
  const Shape box = Shape::box(Vec3::Zero(), Vec3::Ones());
  const auto a = poisson_disk_sample(box, 0.05, 42);
  const auto b = poisson_disk_sample(box, 0.05, 42);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  const auto c = poisson_disk_sample(box, 0.05, 43);
  EXPECT_FALSE(a.size() == c.size() && std::equal(a.begin(), a.end(), c.begin()));
}

TEST(PoissonDisk, MinimumSpacingHolds) {
  const Shape box = Shape::box(Vec3::Zero(), Vec3::Ones());
  const auto pts = poisson_disk_sample(box, 0.08, 1);
  ASSERT_GT(pts.size(), 100u);
  EXPECT_GE(min_pair_distance(pts), 0.08);
  for (const auto& p : pts) EXPECT_TRUE(box.contains(p));
}

TEST(PoissonDisk, InteriorProbesAreCovered) {
  const double s = 0.06;
  const Shape shapes[] = {Shape::box(Vec3::Zero(), Vec3::Ones()), Shape::sphere(Vec3::Zero(), 0.5),
                          Shape::cylinder(Vec3::Zero(), 0.4, 0.8, 2),
                          Shape::make_union({Shape::box(Vec3::Zero(), Vec3(0.4, 0.4, 0.4)),
                                             Shape::sphere(Vec3(1.2, 0, 0), 0.3)})};
  std::mt19937_64 rng(9);
  for (const auto& shape : shapes) {
    const auto pts = poisson_disk_sample(shape, s, 5);
    const auto bb = shape.bounds();
    std::uniform_real_distribution<double> ux(bb.min().x(), bb.max().x()), uy(bb.min().y(), bb.max().y()),
        uz(bb.min().z(), bb.max().z());
    for (int i = 0; i < 500; ++i) {
      const Vec3 probe(ux(rng), uy(rng), uz(rng));
      if (!shape.contains(probe)) continue;
      double best = std::numeric_limits<double>::infinity();
      for (const auto& p : pts) best = std::min(best, (p - probe).norm());
      EXPECT_LE(best, 2.0 * s);
    }
  }
}

TEST(PoissonDisk, TwoDimensionalSamplesStayInPlane) {
  const Shape box = Shape::box(Vec3::Zero(), Vec3(1, 1, 0));
  const auto pts = poisson_disk_sample(box, 0.05, 3, 2);
  ASSERT_GT(pts.size(), 100u);
  for (const auto& p : pts) EXPECT_EQ(p.z(), 0.0);
  EXPECT_GE(min_pair_distance(pts), 0.05);
}

TEST(PoissonDisk, DegenerateDomainIsEmpty) {
  EXPECT_TRUE(poisson_disk_sample(Shape::box(Vec3::Zero(), Vec3(1, 1, 0)), 0.1, 1, 3).empty());
  EXPECT_TRUE(poisson_disk_sample(Shape::sphere(Vec3::Zero(), 0.0), 0.1, 1).empty());
  EXPECT_THROW(poisson_disk_sample(Shape::box(Vec3::Zero(), Vec3::Ones()), 0.0, 1), std::invalid_argument);
}

TEST(Shapes, Measure) {
  EXPECT_DOUBLE_EQ(Shape::box(Vec3::Zero(), Vec3(1, 2, 3)).measure(3), 6.0);
  EXPECT_NEAR(Shape::sphere(Vec3::Zero(), 0.7).measure(3), 4.0 / 3.0 * std::numbers::pi * 0.343, 1e-12);
  // Disjoint union: sum of parts, up to quadrature error.
  const Shape u = Shape::make_union({Shape::box(Vec3::Zero(), Vec3::Ones()), Shape::sphere(Vec3(3, 0.5, 0.5), 0.5)});
  EXPECT_NEAR(u.measure(3), 1.0 + std::numbers::pi / 6.0, 0.02);
  EXPECT_NEAR(Shape::sphere(Vec3::Zero(), 1.0).measure(2), std::numbers::pi, 1e-3);
  EXPECT_NEAR(Shape::box(Vec3::Zero(), Vec3(2, 0.5, 0)).measure(2), 1.0, 1e-12);
}

TEST(Lattice, SpacingAndContainment) {
  const Shape box = Shape::box(Vec3::Zero(), Vec3(1, 1, 1));
  const auto pts = lattice_sample(box, 0.1);
  EXPECT_EQ(pts.size(), 1000u);
  EXPECT_NEAR(min_pair_distance(pts), 0.1, 1e-12);
}
