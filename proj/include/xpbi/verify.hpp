#pragma once

// The `verify` suite: every oracle plus short invariant runs of the bundled
// scenes. Shared by the CLI and the acceptance tests.

#include <xpbi/oracles.hpp>
#include <xpbi/scene_io.hpp>

#include <algorithm>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace xpbi {

#ifdef XPBI_SCENE_DIR
inline constexpr const char* kBundledSceneDir = XPBI_SCENE_DIR;
#else
inline constexpr const char* kBundledSceneDir = "scenes";
#endif

struct VerifyOptions {
  int threads = 1;
  std::filesystem::path scene_dir = kBundledSceneDir;
  int scene_steps = 5;
  int return_map_trials = 10000;
};

struct VerifyCheck {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

struct VerifyResult {
  std::vector<VerifyCheck> checks;
  std::uint64_t digest = 0;  // combined state hash of the scene runs

  bool pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const VerifyCheck& c) { return c.pass; });
  }
};

inline std::vector<std::filesystem::path> bundled_scenes(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".json") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline VerifyCheck neighbor_oracle_check(int clouds = 10, std::size_t n = 1000, std::uint64_t seed = 5) {
  VerifyCheck c{"neighbors.brute_force", true, 0.0, 0.0, ""};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::size_t mismatches = 0;
  for (int t = 0; t < clouds; ++t) {
    std::vector<Vec3> x(n);
    for (auto& p : x) p = Vec3(u(rng), u(rng), u(rng));
    const double k = 0.15;
    const NeighborTable table = build_neighbor_table(x, k);
    const auto ref = brute_force_neighbors(x, k);
    for (std::size_t p = 0; p < n; ++p) {
      const auto nb = table.of(p);
      if (!std::equal(nb.begin(), nb.end(), ref[p].begin(), ref[p].end())) ++mismatches;
    }
    // Same-colored distinct cells never hold particles within k.
    for (std::size_t p = 0; p < n; ++p)
      for (auto b : table.of(p)) {
        const auto cp = table.particle_cell[p];
        const auto cb = table.particle_cell[b];
        if (cp != cb && table.cells[cp].color == table.cells[cb].color) ++mismatches;
      }
  }
  c.value = static_cast<double>(mismatches);
  c.pass = mismatches == 0;
  c.detail = std::to_string(clouds) + " clouds of " + std::to_string(n);
  return c;
}

inline VerifyCheck from_report(const OracleReport& r) {
  return {r.name, r.pass, r.max_error, r.tolerance, std::to_string(r.samples) + " samples" +
                                                        (r.note.empty() ? "" : "; " + r.note)};
}

/// Short run of one scene: bitwise repeatability, finite state, det F > 0,
/// stored F on or inside the yield surface, scene round trip.
inline std::vector<VerifyCheck> scene_checks(const std::filesystem::path& path, int steps, int threads,
                                             std::uint64_t* hash_out) {
  std::vector<VerifyCheck> out;
  const std::string tag = "scene." + path.stem().string();
  SceneSpec spec;
  try {
    spec = parse_scene(path);
  } catch (const std::exception& e) {
    out.push_back({tag + ".parse", false, 0.0, 0.0, e.what()});
    return out;
  }
  out.push_back({tag + ".round_trip", parse_scene_text(serialize_scene(spec)) == spec, 0.0, 0.0, ""});
  spec.solver.residual_mode = ResidualMode::Off;

  const auto run = [&](std::uint64_t& hash, ParticleSet& final_state) -> std::string {
    try {
      Simulation sim(spec, threads);
      for (int s = 0; s < steps; ++s) sim.step();
      hash = state_hash(sim.state());
      final_state = sim.state();
    } catch (const SimulationError& e) {
      return std::string(e.what()) + " (" + e.snapshot() + ")";
    }
    return {};
  };
  std::uint64_t h1 = 0, h2 = 0;
  ParticleSet s1, s2;
  const std::string err1 = run(h1, s1);
  const std::string err2 = err1.empty() ? run(h2, s2) : err1;
  out.push_back({tag + ".finite", err1.empty() && err2.empty(), 0.0, 0.0, err1});
  if (!err1.empty()) return out;
  char hex[32];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h1));
  out.push_back({tag + ".repeatable", h1 == h2, 0.0, 0.0, std::string("hash ") + hex});
  if (hash_out) *hash_out = h1;

  double min_det = std::numeric_limits<double>::infinity();
  double max_yield = 0.0;
  const auto materials = spec.material_table();
  for (std::size_t p = 0; p < s1.size(); ++p) {
    min_det = std::min(min_det, s1.F[p].determinant());
    const MaterialModel& m = materials[static_cast<std::size_t>(s1.material[p])];
    if (has_plasticity(m) && is_rate_independent(m))
      max_yield = std::max(max_yield, yield_value(m, s1.F[p], s1.hardening[p]));
  }
  out.push_back({tag + ".det_F_positive", min_det > 0.0, min_det, 0.0, ""});
  out.push_back({tag + ".yield_feasible", max_yield <= oracle_tolerance::kFeasibility, max_yield,
                 oracle_tolerance::kFeasibility, ""});
  return out;
}

inline VerifyResult run_verify(const VerifyOptions& opt) {
  VerifyResult res;
  res.checks.push_back(from_report(fd_gradient_check()));
  const auto lin3 = linear_field_consistency(400, 20, 11, 3);
  res.checks.push_back(from_report(lin3.corrected));
  res.checks.push_back({"linear_field_consistency.boundary", lin3.boundary_max_error <= lin3.corrected.tolerance,
                        lin3.boundary_max_error, lin3.corrected.tolerance, ""});
  auto lin2 = linear_field_consistency(300, 20, 13, 2);
  lin2.corrected.name += ".2d";
  res.checks.push_back(from_report(lin2.corrected));
  res.checks.push_back(neighbor_oracle_check());
  for (const auto& r : return_map_properties(opt.return_map_trials).reports) res.checks.push_back(from_report(r));

  std::uint64_t digest = 1469598103934665603ull;
  for (const auto& path : bundled_scenes(opt.scene_dir)) {
    std::uint64_t h = 0;
    for (auto& c : scene_checks(path, opt.scene_steps, opt.threads, &h)) res.checks.push_back(std::move(c));
    digest = (digest ^ h) * 1099511628211ull;
  }
  res.digest = digest;
  return res;
}

}  // namespace xpbi
