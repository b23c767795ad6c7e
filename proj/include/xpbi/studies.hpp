#pragma once

// Scene-level measurements: residual traces for the convergence study,
// adaptive-iteration timestep sweeps, free-surface slope of a settled pile.

#include <xpbi/scene_io.hpp>
#include <xpbi/solver.hpp>

#include <chrono>
#include <cmath>
#include <map>
#include <numbers>
#include <vector>

namespace xpbi {

struct ResidualTrace {
  std::vector<double> absolute;  // ||h||_2 before iteration 1, after each iteration
  std::vector<double> relative;  // absolute / absolute[0]

  /// Non-increasing until the first value below `target`, never above it
  /// afterwards, and below it by iteration `within`.
  bool monotone_to(double target, std::size_t within) const {
    if (relative.empty() || relative.front() == 0.0) return false;
    bool reached = false;
    for (std::size_t i = 1; i < relative.size(); ++i) {
      if (reached) {
        if (relative[i] >= target) return false;
        continue;
      }
      if (relative[i] > relative[i - 1]) return false;
      if (relative[i] < target) {
        if (i > within) return false;
        reached = true;
      }
    }
    return reached;
  }
};

/// Advances the scene `warmup_steps` with its own settings, then measures one
/// step with `iterations` iterations of `backend`, recording the residual
/// after every iteration. The measured step starts from the same state for
/// every backend.
inline ResidualTrace convergence_trace(const SceneSpec& scene, int warmup_steps, Backend backend,
                                       int iterations, int threads = 1) {
  SceneSpec spec = scene;
  spec.solver.residual_mode = ResidualMode::Off;
  spec.solver.residual_tolerance.reset();
  Simulation sim(spec, threads);
  for (int i = 0; i < warmup_steps; ++i) sim.step();
  auto& cfg = sim.solver().config();
  cfg.backend = backend;
  cfg.iterations = iterations;
  cfg.residual_mode = ResidualMode::EveryIteration;
  const StepDiagnostics d = sim.step();
  ResidualTrace t;
  t.absolute = d.residual;
  for (double r : d.residual) t.relative.push_back(d.residual.front() > 0.0 ? r / d.residual.front() : 0.0);
  return t;
}

struct TimestepStudyRow {
  double dt = 0.0;
  std::size_t steps = 0;
  std::size_t total_iterations = 0;
  std::size_t unconverged_steps = 0;
  double runtime_s = 0.0;
};

/// Simulates `duration` seconds at each dt with adaptive iterations
/// (||h||_2 <= tolerance, capped at max_iterations).
inline std::vector<TimestepStudyRow> timestep_study(const SceneSpec& scene, const std::vector<double>& dts,
                                                    double duration, double tolerance, int max_iterations,
                                                    int threads = 1) {
  std::vector<TimestepStudyRow> rows;
  for (double dt : dts) {
    SceneSpec spec = scene;
    spec.solver.dt = dt;
    spec.solver.residual_tolerance = tolerance;
    spec.solver.max_iterations = max_iterations;
    Simulation sim(spec, threads);
    TimestepStudyRow row;
    row.dt = dt;
    const auto start = std::chrono::steady_clock::now();
    const auto steps = static_cast<std::size_t>(std::llround(duration / dt));
    for (std::size_t s = 0; s < steps; ++s) {
      const StepDiagnostics d = sim.step();
      row.total_iterations += static_cast<std::size_t>(d.iterations);
      if (!d.residual.empty() && d.residual.back() > tolerance) ++row.unconverged_steps;
    }
    row.steps = steps;
    row.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows.push_back(row);
  }
  return rows;
}

struct SlopeFit {
  double angle_deg = 0.0;  // mean over the fitted flanks
  int flanks = 0;
  double left_deg = 0.0;
  double right_deg = 0.0;
  double height = 0.0;
};

/// Free-surface slope of a pile resting on y = floor: the highest particle in
/// each x bin forms the surface; each flank (x < center, x > center) is
/// fitted by least squares over the bins whose surface height lies between
/// lo_frac and hi_frac of the pile height.
inline SlopeFit pile_slope(std::span<const Vec3> x, double bin, double center = 0.0, double floor = 0.0,
                           double lo_frac = 0.15, double hi_frac = 0.85) {
  SlopeFit fit;
  std::map<long, double> top;
  for (const auto& p : x) {
    fit.height = std::max(fit.height, p.y() - floor);
    const long b = static_cast<long>(std::floor((p.x() - center) / bin));
    const auto it = top.find(b);
    if (it == top.end() || p.y() > it->second) top[b] = p.y();
  }
  double sum = 0.0;
  for (int side : {-1, 1}) {
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    int n = 0;
    for (const auto& [b, y] : top) {
      const double xc = (static_cast<double>(b) + 0.5) * bin;
      const double h = y - floor;
      if (xc * side <= 0.0 || h < lo_frac * fit.height || h > hi_frac * fit.height) continue;
      sx += xc;
      sy += h;
      sxx += xc * xc;
      sxy += xc * h;
      ++n;
    }
    if (n < 3) continue;
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double deg = std::atan(std::abs(slope)) * 180.0 / std::numbers::pi;
    (side < 0 ? fit.left_deg : fit.right_deg) = deg;
    sum += deg;
    ++fit.flanks;
  }
  fit.angle_deg = fit.flanks > 0 ? sum / fit.flanks : 0.0;
  return fit;
}

}  // namespace xpbi
