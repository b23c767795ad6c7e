#pragma once

// Reference checks for the solver numerics. The finite-difference and
// consistency oracles carry their own kernel, moment matrix and energy
// (closed-form constants, full inverses, plain singular values) so that they
// share nothing with the code under test except Eigen.

#include <xpbi/constitutive.hpp>
#include <xpbi/particles.hpp>
#include <xpbi/scene_io.hpp>
#include <xpbi/solver.hpp>

#include <Eigen/SVD>

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace xpbi {

struct OracleReport {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::size_t samples = 0;
  std::string note;

  void finish() { pass = max_error <= tolerance; }
};

namespace oracle_tolerance {
inline constexpr double kGradientFd = 1e-4;
inline constexpr double kLinearConsistency = 1e-9;
inline constexpr double kIdempotence = 1e-10;
inline constexpr double kFeasibility = 1e-8;
inline constexpr double kEquivariance = 1e-8;
inline constexpr double kVolume = 1e-8;
inline constexpr double kHerschelBulkleyLimit = 1e-6;
}  // namespace oracle_tolerance

namespace reference {

/// Wendland C2 with the textbook constants 21/(2 pi h^3) and 7/(pi h^2).
inline double wendland(double dist, double h, int dimension) {
  const double q = dist / h;
  if (q >= 1.0) return 0.0;
  const double sigma = dimension == 3 ? 21.0 / (2.0 * std::numbers::pi * h * h * h)
                                      : 7.0 / (std::numbers::pi * h * h);
  const double a = 1.0 - q;
  return sigma * a * a * a * a * (1.0 + 4.0 * q);
}

/// d/dx_p W(|x_p - x_b|).
inline Vec3 wendland_grad(const Vec3& xp, const Vec3& xb, double h, int dimension) {
  const Vec3 d = xp - xb;
  const double r = d.norm();
  if (r == 0.0 || r >= h) return Vec3::Zero();
  const double q = r / h;
  const double sigma = dimension == 3 ? 21.0 / (2.0 * std::numbers::pi * h * h * h)
                                      : 7.0 / (std::numbers::pi * h * h);
  const double dWdq = sigma * (-20.0 * q * std::pow(1.0 - q, 3));
  return (dWdq / (h * r)) * d;
}

inline double hencky_energy(double mu, double lambda, const Mat3& F) {
  Eigen::JacobiSVD<Mat3> svd(F);
  const Vec3 s = svd.singularValues();
  const Vec3 e = s.array().log();
  return mu * e.squaredNorm() + 0.5 * lambda * e.sum() * e.sum();
}

struct Cloud {
  std::vector<Vec3> x;
  std::vector<double> volume;
  std::vector<Mat3> F_n;
  double h = 1.0;
  int dimension = 3;
};

/// Velocity gradient at particle p with an explicitly inverted moment matrix.
inline Mat3 grad_v(const Cloud& c, std::size_t p, const std::vector<Vec3>& v, bool corrected = true) {
  Mat3 moment = Mat3::Zero();
  for (std::size_t b = 0; b < c.x.size(); ++b) {
    if (b == p || (c.x[b] - c.x[p]).norm() > c.h) continue;
    moment += c.volume[b] * wendland_grad(c.x[p], c.x[b], c.h, c.dimension) * (c.x[b] - c.x[p]).transpose();
  }
  Mat3 L = Mat3::Identity();
  if (corrected) {
    if (c.dimension == 3) {
      L = moment.inverse();
    } else {
      L = Mat3::Zero();
      L.topLeftCorner<2, 2>() = moment.topLeftCorner<2, 2>().inverse();
    }
  }
  Mat3 G = Mat3::Zero();
  for (std::size_t b = 0; b < c.x.size(); ++b) {
    if (b == p || (c.x[b] - c.x[p]).norm() > c.h) continue;
    G += c.volume[b] * (v[b] - v[p]) * (L * wendland_grad(c.x[p], c.x[b], c.h, c.dimension)).transpose();
  }
  return G;
}

inline double constraint(const Cloud& c, std::size_t p, const std::vector<Vec3>& v, double dt, double mu,
                         double lambda) {
  const Mat3 F = (Mat3::Identity() + dt * grad_v(c, p, v)) * c.F_n[p];
  return std::sqrt(2.0 * hencky_energy(mu, lambda, F));
}

}  // namespace reference

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

/// Random F = R1 diag(s) R2 with log-uniform stretches in [exp(-a), exp(a)].
/// `det_out` receives the product of the drawn stretches, which is exact
/// where F.determinant() loses digits for badly conditioned F.
inline Mat3 random_deformation(std::mt19937_64& rng, double log_range, double* det_out = nullptr) {
  std::uniform_real_distribution<double> u(-log_range, log_range);
  const Vec3 s(std::exp(u(rng)), std::exp(u(rng)), std::exp(u(rng)));
  if (det_out) *det_out = s.prod();
  return random_rotation(rng) * s.asDiagonal() * random_rotation(rng);
}

/// Random particles inside a ball of radius 0.45 h, so that every pair is
/// within the kernel support.
inline std::vector<Vec3> random_ball_cloud(std::mt19937_64& rng, std::size_t n, double h, int dimension) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> pts;
  while (pts.size() < n) {
    Vec3 p(u(rng), u(rng), dimension == 3 ? u(rng) : 0.0);
    if (p.norm() > 1.0) continue;
    bool ok = true;
    for (const auto& q : pts) ok = ok && (q - 0.45 * h * p).norm() > 0.05 * h;
    if (ok) pts.push_back(0.45 * h * p);
  }
  return pts;
}

/// Analytic position gradients of C_p (from the solver) against central
/// differences of an independently evaluated C_p under velocity
/// perturbations: dC/dv_b = dt * dC/dx_b. Error per trial is
/// max_b |g_fd - g| / max_b |g|.
inline OracleReport fd_gradient_check(std::size_t cloud_size = 10, int trials = 100, double h_fd = 1e-6,
                                      std::uint64_t seed = 7, double dt = 1e-3) {
  OracleReport report{"fd_gradient_check", 0.0, oracle_tolerance::kGradientFd, false, 0, ""};
  if (cloud_size < 5) throw std::invalid_argument("fd_gradient_check: cloud size must be >= 5");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = 0.5;
  const KernelSpec kernel = KernelSpec::make(r, 3);
  for (int t = 0; t < trials; ++t) {
    ParticleSet state;
    const auto pts = random_ball_cloud(rng, cloud_size, kernel.support, 3);
    for (const auto& p : pts) {
      state.push_back(p, Vec3::Zero(), 0.05 + 0.1 * u(rng), 1.0 + u(rng), 0, 0.0, false);
      state.F.back() = random_deformation(rng, 0.15);
    }
    MaterialModel m;
    m.elastic = ElasticParams::from_young_poisson(1.0 + 9.0 * u(rng), 0.4 * u(rng));
    std::normal_distribution<double> nv(0.0, 1.0);
    for (auto& v : state.v) v = Vec3(nv(rng), nv(rng), nv(rng));

    const StepContext ctx = prepare_step(state, kernel, dt);
    const std::size_t p = static_cast<std::size_t>(u(rng) * static_cast<double>(cloud_size)) % cloud_size;
    const ConstraintEvaluation ev = evaluate_inelastic_constraint(p, state.v, state, ctx, m, false);
    const auto grads = constraint_gradients(p, ctx, ev.dCdF);

    reference::Cloud cloud;
    cloud.x = state.x;
    cloud.F_n = state.F;
    cloud.h = kernel.support;
    for (std::size_t b = 0; b < state.size(); ++b) cloud.volume.push_back(state.rest_volume[b] * state.F[b].determinant());

    double err = 0.0;
    double scale = 0.0;
    for (const auto& g : grads) {
      std::vector<Vec3> vp = state.v;
      std::vector<Vec3> vm = state.v;
      Vec3 fd;
      for (int k = 0; k < 3; ++k) {
        vp[g.particle](k) += h_fd;
        vm[g.particle](k) -= h_fd;
        const double cp = reference::constraint(cloud, p, vp, dt, m.elastic.mu, m.elastic.lambda);
        const double cm = reference::constraint(cloud, p, vm, dt, m.elastic.mu, m.elastic.lambda);
        fd(k) = (cp - cm) / (2.0 * h_fd) / dt;
        vp[g.particle](k) = state.v[g.particle](k);
        vm[g.particle](k) = state.v[g.particle](k);
      }
      err = std::max(err, (fd - g.gradient).norm());
      scale = std::max(scale, g.gradient.norm());
    }
    report.max_error = std::max(report.max_error, scale > 0.0 ? err / scale : err);
    ++report.samples;
  }
  report.finish();
  return report;
}

struct LinearConsistencyReport {
  OracleReport corrected;
  double uncorrected_max_error = 0.0;
  double boundary_max_error = 0.0;
};

/// Affine velocity fields v = A x + b on irregular clouds: the solver's
/// corrected gradient must reproduce A. Each trial also checks a corner
/// particle whose neighborhood is one-sided.
inline LinearConsistencyReport linear_field_consistency(std::size_t cloud_size = 400, int trials = 20,
                                                        std::uint64_t seed = 11, int dimension = 3) {
  LinearConsistencyReport out;
  out.corrected = {"linear_field_consistency", 0.0, oracle_tolerance::kLinearConsistency, false, 0, ""};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = 0.05;
  const KernelSpec kernel = KernelSpec::make(r, dimension);
  const double side = dimension == 3 ? std::cbrt(static_cast<double>(cloud_size)) * r
                                     : std::sqrt(static_cast<double>(cloud_size)) * r;
  for (int t = 0; t < trials; ++t) {
    ParticleSet state;
    for (std::size_t i = 0; i < cloud_size; ++i) {
      const Vec3 x(side * u(rng), side * u(rng), dimension == 3 ? side * u(rng) : 0.0);
      state.push_back(x, Vec3::Zero(), std::pow(r, dimension) * (0.5 + u(rng)), 1.0, 0, 0.0, false);
    }
    // Corner particle: all of its neighbors lie in the positive octant.
    state.x[0] = Vec3::Zero();

    Mat3 A = Mat3::Zero();
    std::normal_distribution<double> n(0.0, 1.0);
    for (int i = 0; i < dimension; ++i)
      for (int j = 0; j < dimension; ++j) A(i, j) = n(rng);
    const Vec3 b(n(rng), n(rng), dimension == 3 ? n(rng) : 0.0);
    for (std::size_t i = 0; i < cloud_size; ++i) state.v[i] = A * state.x[i] + b;

    const StepContext ctx = prepare_step(state, kernel, 1e-3);
    reference::Cloud cloud;
    cloud.x = state.x;
    cloud.volume = state.rest_volume;
    cloud.F_n = state.F;
    cloud.h = kernel.support;
    cloud.dimension = dimension;
    for (std::size_t p = 0; p < cloud_size; ++p) {
      if (ctx.table.of(p).size() < static_cast<std::size_t>(dimension) + 2) continue;
      const double e = (velocity_gradient(p, state, ctx) - A).cwiseAbs().maxCoeff();
      out.corrected.max_error = std::max(out.corrected.max_error, e);
      if (p == 0) out.boundary_max_error = std::max(out.boundary_max_error, e);
      const double eu = (reference::grad_v(cloud, p, state.v, false) - A).cwiseAbs().maxCoeff();
      out.uncorrected_max_error = std::max(out.uncorrected_max_error, eu);
      ++out.corrected.samples;
    }
  }
  out.corrected.finish();
  out.corrected.note = "uncorrected max error " + std::to_string(out.uncorrected_max_error);
  return out;
}

/// O(n^2) neighbor lists within k (inclusive), sorted, self excluded.
inline std::vector<std::vector<std::uint32_t>> brute_force_neighbors(std::span<const Vec3> x, double k) {
  std::vector<std::vector<std::uint32_t>> out(x.size());
  for (std::size_t p = 0; p < x.size(); ++p)
    for (std::size_t b = 0; b < x.size(); ++b)
      if (b != p && (x[p] - x[b]).squaredNorm() <= k * k) out[p].push_back(static_cast<std::uint32_t>(b));
  return out;
}

// ---------------------------------------------------------------------------
// Return-map property suite

struct ReturnMapModelCase {
  std::string name;
  MaterialModel model;
};

inline std::vector<ReturnMapModelCase> return_map_property_models() {
  const ElasticParams e = ElasticParams::from_young_poisson(1e5, 0.3);
  return {
      {"von_mises", {1000.0, e, VonMises{2e3}}},
      {"drucker_prager", {1000.0, e, DruckerPrager{30.0, 0.0}}},
      {"drucker_prager_cohesive", {1000.0, e, DruckerPrager{35.0, 0.01}}},
      {"nacc", {1000.0, e, CamClay{-0.02, 0.5, 1.0, 2.36}}},
      {"snow", {400.0, e, SnowClamp{0.025, 0.0075, 10.0}}},
  };
}

/// Trial deformation with mostly moderate stretches and a share of extreme
/// ones (singular values in [1e-3, 1e3]).
inline Mat3 return_map_trial(std::mt19937_64& rng, double* det_out = nullptr) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return random_deformation(rng, u(rng) < 0.8 ? 0.3 : std::log(1e3), det_out);
}

struct ReturnMapSuite {
  std::vector<OracleReport> reports;
  bool pass() const {
    for (const auto& r : reports)
      if (!r.pass) return false;
    return true;
  }
};

inline ReturnMapSuite return_map_properties(int trials = 10000, std::uint64_t seed = 3) {
  ReturnMapSuite suite;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const auto& c : return_map_property_models()) {
    OracleReport idem{c.name + ".idempotence", 0.0, oracle_tolerance::kIdempotence, false, 0, ""};
    OracleReport feas{c.name + ".feasibility", 0.0, oracle_tolerance::kFeasibility, false, 0, ""};
    OracleReport equi{c.name + ".rotation_equivariance", 0.0, oracle_tolerance::kEquivariance, false, 0, ""};
    OracleReport vol{c.name + ".volume", 0.0, oracle_tolerance::kVolume, false, 0, ""};
    const bool is_vm = std::holds_alternative<VonMises>(c.model.plastic);
    const double h0 = initial_hardening(c.model);
    for (int t = 0; t < trials; ++t) {
      double det_F = 1.0;
      const Mat3 F = return_map_trial(rng, &det_F);
      const Mat3 Z = return_map(c.model, F, 1e-3, h0);
      const Mat3 ZZ = return_map(c.model, Z, 1e-3, h0);
      const double zn = std::max(1.0, Z.norm());
      idem.max_error = std::max(idem.max_error, (ZZ - Z).norm() / zn);
      feas.max_error = std::max(feas.max_error, std::max(0.0, yield_value(c.model, Z, h0)));
      const Mat3 R = random_rotation(rng);
      const Mat3 ZR = return_map(c.model, R * F, 1e-3, h0);
      equi.max_error = std::max(equi.max_error, (ZR - R * Z).norm() / zn);
      if (is_vm) vol.max_error = std::max(vol.max_error, std::abs(Z.determinant() - det_F) / det_F);
      ++idem.samples;
      ++feas.samples;
      ++equi.samples;
      if (is_vm) ++vol.samples;
    }
    for (auto* r : {&idem, &feas, &equi}) {
      r->finish();
      suite.reports.push_back(*r);
    }
    if (is_vm) {
      vol.finish();
      suite.reports.push_back(vol);
    }
  }

  // Herschel-Bulkley rate limits: no flow in zero time, von Mises in the
  // infinite-time limit.
  const ElasticParams e = ElasticParams::from_young_poisson(1e5, 0.3);
  const MaterialModel hb{1000.0, e, HerschelBulkley{2e3, 0.7, 1e4}};
  const MaterialModel vm{1000.0, e, VonMises{2e3}};
  OracleReport small{"herschel_bulkley.dt_to_zero", 0.0, oracle_tolerance::kHerschelBulkleyLimit, false, 0, ""};
  OracleReport large{"herschel_bulkley.dt_to_infinity", 0.0, oracle_tolerance::kHerschelBulkleyLimit, false, 0, ""};
  for (int t = 0; t < 1000; ++t) {
    const Mat3 F = random_deformation(rng, 0.3);
    const double fn = F.norm();
    small.max_error = std::max(small.max_error, (return_map(hb, F, 1e-8) - F).norm() / fn);
    large.max_error = std::max(large.max_error, (return_map(hb, F, 1e8) - return_map(vm, F, 1.0)).norm() / fn);
    ++small.samples;
    ++large.samples;
  }
  small.finish();
  large.finish();
  suite.reports.push_back(small);
  suite.reports.push_back(large);
  return suite;
}

// ---------------------------------------------------------------------------
// Semi-implicit comparator and trajectory metrics

struct TrajectorySample {
  double time = 0.0;
  std::vector<Vec3> positions;
  double stored_energy = 0.0;  // sum V0 Psi(F^{n+1})
  double solver_energy = 0.0;  // sum V0 Psi of the F the constraints acted on
};

struct Trajectory {
  std::vector<TrajectorySample> samples;
  double peak_solver_energy() const {
    double e = 0.0;
    for (const auto& s : samples) e = std::max(e, s.solver_energy);
    return e;
  }
  double peak_stored_energy() const {
    double e = 0.0;
    for (const auto& s : samples) e = std::max(e, s.stored_energy);
    return e;
  }
};

/// Runs a scene for `duration` seconds with dt, sampling every `sample_every`
/// seconds (at matched simulated times). `implicit` = false gives the
/// semi-implicit comparator: the same pipeline with the return map applied
/// only when the state is finalized.
inline Trajectory run_trajectory(const SceneSpec& scene, double dt, double duration, double sample_every,
                                 bool implicit, int threads = 1) {
  SceneSpec spec = scene;
  spec.solver.dt = dt;
  spec.solver.implicit_plasticity = implicit;
  spec.solver.residual_mode = ResidualMode::Off;
  Simulation sim(spec, threads);
  Trajectory traj;
  const auto steps_total = static_cast<std::uint64_t>(std::llround(duration / dt));
  const auto sample_stride = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(sample_every / dt)));
  const auto materials = spec.material_table();
  for (std::uint64_t s = 1; s <= steps_total; ++s) {
    sim.step();
    TrajectorySample sample;
    sample.time = sim.time();
    sample.solver_energy = solver_elastic_energy(sim.state(), sim.solver().context(), materials);
    sample.stored_energy = stored_elastic_energy(sim.state(), materials);
    if (s % sample_stride == 0) sample.positions = sim.state().x;
    traj.samples.push_back(std::move(sample));
  }
  return traj;
}

inline Trajectory semi_implicit_comparator(const SceneSpec& scene, double dt, double duration,
                                           double sample_every, int threads = 1) {
  return run_trajectory(scene, dt, duration, sample_every, false, threads);
}

/// RMS of per-particle position differences over all sampled times present
/// in both trajectories, normalized by the diagonal `scale`.
inline double trajectory_rms(const Trajectory& a, const Trajectory& b, double scale) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& sa : a.samples) {
    if (sa.positions.empty()) continue;
    for (const auto& sb : b.samples) {
      if (sb.positions.empty() || std::abs(sa.time - sb.time) > 1e-9 * std::max(1.0, sa.time)) continue;
      const std::size_t n = std::min(sa.positions.size(), sb.positions.size());
      for (std::size_t i = 0; i < n; ++i) sum += (sa.positions[i] - sb.positions[i]).squaredNorm();
      count += n;
    }
  }
  return count == 0 ? 0.0 : std::sqrt(sum / static_cast<double>(count)) / scale;
}

inline double position_rms(std::span<const Vec3> a, std::span<const Vec3> b) {
  double sum = 0.0;
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) sum += (a[i] - b[i]).squaredNorm();
  return n == 0 ? 0.0 : std::sqrt(sum / static_cast<double>(n));
}

}  // namespace xpbi
