#pragma once

// Velocity-parameterized XPBD time stepper with smoothing-kernel velocity
// gradients, updated-Lagrangian deformation gradients and the plastic return
// map evaluated inside the constraint iterations.
//
// One step:
//   neighbor search and L_p at x^n; v <- v^n + dt M^-1 f_ext; lambda <- 0
//   repeat `iterations` times:
//     colored sweep over the per-particle inelastic constraints
//       (grad v -> F trial -> Z(F) -> C, dC/dF -> dlambda, dv)
//     colored sweep over auxiliary constraints (distance, colliders, hooks)
//   XSPH smoothing; F^{n+1} = Z((I + dt grad v^{n+1}) F^n); x^{n+1} = x^n + dt v^{n+1}

#include <xpbi/colliders.hpp>
#include <xpbi/constitutive.hpp>
#include <xpbi/kernels.hpp>
#include <xpbi/particles.hpp>

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xpbi {

enum class Backend { ColoredGaussSeidel, Jacobi };
enum class ResidualMode { Off, Final, EveryIteration };

struct SolverConfig {
  double dt = 1e-4;
  int iterations = 10;
  Backend backend = Backend::ColoredGaussSeidel;
  double xsph_c = 0.01;
  double gap_factor = 0.25;
  Vec3 gravity{0.0, -9.81, 0.0};
  bool implicit_plasticity = true;  // false: return map only at the end of the step
  bool position_correction = true;
  ResidualMode residual_mode = ResidualMode::Final;
  std::optional<double> residual_tolerance;  // adaptive iterations: stop at ||h||_2 <= tol
  int max_iterations = 500;
  int threads = 1;
  bool check_fixed_point = false;

  bool operator==(const SolverConfig&) const = default;

  void validate() const {
    if (!(dt > 0.0)) throw std::invalid_argument("solver.dt must be positive");
    if (iterations < 1) throw std::invalid_argument("solver.iterations must be >= 1");
    if (!(xsph_c >= 0.0)) throw std::invalid_argument("solver.xsph_c must be >= 0");
    if (!(gap_factor >= 0.0 && gap_factor < 1.0))
      throw std::invalid_argument("solver.gap_factor must lie in [0, 1)");
    if (!gravity.allFinite()) throw std::invalid_argument("solver.gravity must be finite");
    if (threads < 1) throw std::invalid_argument("solver.threads must be >= 1");
    if (residual_tolerance && !(*residual_tolerance > 0.0))
      throw std::invalid_argument("solver.residual_tolerance must be positive");
  }
};

struct PhaseTimes {
  double neighbors_us = 0.0;
  double correction_us = 0.0;
  double inelastic_us = 0.0;
  double other_us = 0.0;
  double xsph_us = 0.0;
  double finalize_us = 0.0;
};

struct StepDiagnostics {
  std::vector<int> residual_iteration;  // iteration index of each residual sample (0 = before)
  std::vector<double> residual;          // ||C(v) + alpha~ lambda||_2
  int iterations = 0;
  std::size_t inelastic_updates = 0;
  std::size_t distance_corrections = 0;
  std::size_t boundary_contacts = 0;
  std::size_t coincident_fallbacks = 0;
  PhaseTimes times;

  /// Last residual relative to the pre-iteration residual (0 when both are 0).
  double relative_residual() const {
    if (residual.size() < 2) return 0.0;
    if (residual.front() == 0.0) return residual.back() == 0.0 ? 0.0 : 1.0;
    return residual.back() / residual.front();
  }
};

class SimulationError : public std::runtime_error {
 public:
  SimulationError(const std::string& what, std::size_t particle, std::string snapshot)
      : std::runtime_error(what), particle_(particle), snapshot_(std::move(snapshot)) {}
  std::size_t particle() const { return particle_; }
  const std::string& snapshot() const { return snapshot_; }

 private:
  std::size_t particle_;
  std::string snapshot_;
};

/// Data frozen at x^n for the whole step.
struct StepContext {
  KernelSpec kernel;
  double dt = 0.0;
  double time = 0.0;
  NeighborTable table;
  std::vector<Vec3> x_n;
  std::vector<Mat3> F_n;
  std::vector<double> volume_n;
  std::vector<Mat3> correction;       // L_p
  std::vector<Vec3> grad_weight;      // per neighbor slot: V_b L_p gradW_b(x_p)
  std::vector<Vec3> grad_weight_sum;  // per particle: sum of its slots
  std::vector<double> kernel_weight;  // per neighbor slot: V_b W_b(x_p)
  std::vector<Mat3> F_iter;           // F used by the latest evaluation of C_p
};

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
#pragma omp parallel for num_threads(threads) schedule(dynamic, 16)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) fn(static_cast<std::size_t>(i));
}

inline void scatter_add(Vec3& target, const Vec3& delta, bool atomic) {
  if (!atomic) {
    target += delta;
    return;
  }
  for (int k = 0; k < 3; ++k) {
    double& slot = target[k];
#pragma omp atomic
    slot += delta[k];
  }
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double lap_us() {
    const auto now = std::chrono::steady_clock::now();
    const double us = std::chrono::duration<double, std::micro>(now - start_).count();
    start_ = now;
    return us;
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

/// Neighbor search, current volumes, L_p and the per-slot kernel weights.
inline StepContext prepare_step(const ParticleSet& state, const KernelSpec& kernel, double dt,
                                double time = 0.0, int threads = 1) {
  StepContext ctx;
  ctx.kernel = kernel;
  ctx.dt = dt;
  ctx.time = time;
  ctx.table = build_neighbor_table(state.x, kernel.support, kernel.dimension);
  const std::size_t n = state.size();
  ctx.x_n = state.x;
  ctx.F_n = state.F;
  ctx.F_iter = state.F;
  ctx.volume_n.resize(n);
  for (std::size_t i = 0; i < n; ++i) ctx.volume_n[i] = state.rest_volume[i] * state.F[i].determinant();
  ctx.correction.assign(n, Mat3::Zero());
  ctx.grad_weight.assign(ctx.table.neighbors.size(), Vec3::Zero());
  ctx.kernel_weight.assign(ctx.table.neighbors.size(), 0.0);
  ctx.grad_weight_sum.assign(n, Vec3::Zero());

  detail::parallel_for(n, threads, [&](std::size_t p) {
    const auto nb = ctx.table.of(p);
    const std::uint32_t off = ctx.table.offsets[p];
    const Vec3& xp = ctx.x_n[p];
    Mat3 moment = Mat3::Zero();
    for (std::size_t s = 0; s < nb.size(); ++s) {
      const std::uint32_t b = nb[s];
      const Vec3 g = kernel_gradient(kernel, xp, ctx.x_n[b]);
      moment += ctx.volume_n[b] * g * (ctx.x_n[b] - xp).transpose();
      ctx.grad_weight[off + s] = g;  // scaled below
      ctx.kernel_weight[off + s] = ctx.volume_n[b] * kernel_value(kernel, (ctx.x_n[b] - xp).norm());
    }
    const Mat3 L = nb.empty() ? Mat3::Zero() : pseudo_inverse(moment);
    ctx.correction[p] = L;
    Vec3 sum = Vec3::Zero();
    for (std::size_t s = 0; s < nb.size(); ++s) {
      Vec3& w = ctx.grad_weight[off + s];
      w = ctx.volume_n[nb[s]] * (L * w);
      sum += w;
    }
    ctx.grad_weight_sum[p] = sum;
  });
  return ctx;
}

/// sum_b V_b (v_b - v_p) (L_p gradW_b(x_p^n))^T.
inline Mat3 velocity_gradient(std::size_t p, std::span<const Vec3> v, const StepContext& ctx) {
  const auto nb = ctx.table.of(p);
  const std::uint32_t off = ctx.table.offsets[p];
  Mat3 G = -v[p] * ctx.grad_weight_sum[p].transpose();
  for (std::size_t s = 0; s < nb.size(); ++s) G.noalias() += v[nb[s]] * ctx.grad_weight[off + s].transpose();
  return G;
}

inline Mat3 velocity_gradient(std::size_t p, const ParticleSet& state, const StepContext& ctx) {
  return velocity_gradient(p, std::span<const Vec3>(state.v), ctx);
}

inline Mat3 trial_deformation(const Mat3& F_n, const Mat3& grad_v, double dt) {
  return (Mat3::Identity() + dt * grad_v) * F_n;
}

struct GradientEntry {
  std::uint32_t particle = 0;
  Vec3 gradient = Vec3::Zero();
};

/// Position gradients of C_p: V_b (dC/dF F_n^T) L_p gradW_b for every
/// neighbor b, followed by the self term -sum_b (last entry).
inline std::vector<GradientEntry> constraint_gradients(std::size_t p, const StepContext& ctx,
                                                       const Mat3& dCdF) {
  std::vector<GradientEntry> out;
  const auto nb = ctx.table.of(p);
  const std::uint32_t off = ctx.table.offsets[p];
  const Mat3 A = dCdF * ctx.F_n[p].transpose();
  Vec3 sum = Vec3::Zero();
  out.reserve(nb.size() + 1);
  for (std::size_t s = 0; s < nb.size(); ++s) {
    const Vec3 g = A * ctx.grad_weight[off + s];
    sum += g;
    out.push_back({nb[s], g});
  }
  out.push_back({static_cast<std::uint32_t>(p), -sum});
  return out;
}

struct ConstraintEvaluation {
  double C = 0.0;
  double alpha_tilde = 0.0;
  Mat3 F = Mat3::Identity();  // post-return-map F
  Mat3 dCdF = Mat3::Zero();
  double hardening = 0.0;     // hardening the return map would produce
  bool yielded = false;
};

/// C_p(v) through grad v -> trial F -> (optionally) Z(F).
inline ConstraintEvaluation evaluate_inelastic_constraint(std::size_t p, std::span<const Vec3> v,
                                                          const ParticleSet& state,
                                                          const StepContext& ctx,
                                                          const MaterialModel& material,
                                                          bool apply_return_map) {
  ConstraintEvaluation ev;
  const Mat3 F_trial = trial_deformation(ctx.F_n[p], velocity_gradient(p, v, ctx), ctx.dt);
  SvdTriple s = svd3(F_trial);
  ev.hardening = state.hardening[p];
  if (apply_return_map && has_plasticity(material)) {
    const ProjectionResult r = project(material, s, ctx.dt, state.hardening[p]);
    if (r.yielded) {
      s = r.svd;
      ev.yielded = true;
      ev.hardening = r.hardening;
    }
  }
  ev.F = ev.yielded ? s.reconstruct() : F_trial;
  const ElasticParams elastic = effective_elastic(material, state.hardening[p]);
  ev.dCdF = constraint_gradient(elastic, s, &ev.C);
  ev.alpha_tilde = 1.0 / (state.rest_volume[p] * ctx.dt * ctx.dt);
  return ev;
}

/// One XPBD update of the inelastic constraint of particle p. Returns the
/// multiplier increment (0 when C_p = 0 and the update is skipped).
inline double solve_inelastic_constraint(std::size_t p, ParticleSet& state, StepContext& ctx,
                                         const MaterialModel& material, bool apply_return_map,
                                         bool atomic = false) {
  const ConstraintEvaluation ev =
      evaluate_inelastic_constraint(p, state.v, state, ctx, material, apply_return_map);
  ctx.F_iter[p] = ev.F;
  if (ev.C == 0.0) return 0.0;

  const auto nb = ctx.table.of(p);
  const std::uint32_t off = ctx.table.offsets[p];
  const Mat3 A = ev.dCdF * ctx.F_n[p].transpose();
  Vec3 sum = Vec3::Zero();
  double denom = ev.alpha_tilde;
  for (std::size_t s = 0; s < nb.size(); ++s) {
    const Vec3 g = A * ctx.grad_weight[off + s];
    sum += g;
    denom += state.inv_mass[nb[s]] * g.squaredNorm();
  }
  denom += state.inv_mass[p] * sum.squaredNorm();

  const double dlambda = (-ev.C - ev.alpha_tilde * state.lambda[p]) / denom;
  state.lambda[p] += dlambda;
  const double scale = dlambda / ctx.dt;
  for (std::size_t s = 0; s < nb.size(); ++s) {
    const std::uint32_t b = nb[s];
    if (state.inv_mass[b] == 0.0) continue;
    detail::scatter_add(state.v[b], (state.inv_mass[b] * scale) * (A * ctx.grad_weight[off + s]), atomic);
  }
  if (state.inv_mass[p] != 0.0) detail::scatter_add(state.v[p], (-state.inv_mass[p] * scale) * sum, atomic);
  return dlambda;
}

struct DistanceOutcome {
  bool active = false;
  bool coincident = false;
};

/// Hard inequality |x_a - x_b| - r + eps >= 0 on candidate positions
/// x^n + dt v, projected along the pair axis with inverse-mass weights.
inline DistanceOutcome solve_distance_constraint(std::size_t pa, std::size_t pb, double r,
                                                 double eps, ParticleSet& state,
                                                 const StepContext& ctx, bool atomic = false) {
  const double wa = state.inv_mass[pa];
  const double wb = state.inv_mass[pb];
  if (wa + wb == 0.0) return {};
  const Vec3 xa = ctx.x_n[pa] + ctx.dt * state.v[pa];
  const Vec3 xb = ctx.x_n[pb] + ctx.dt * state.v[pb];
  const Vec3 d = xa - xb;
  const double dist = d.norm();
  const double C = dist - r + eps;
  if (C >= 0.0) return {};
  DistanceOutcome out{true, dist == 0.0};
  const Vec3 n = out.coincident ? Vec3(Vec3::UnitX()) : Vec3(d / dist);
  const double dlambda = -C / (wa + wb);
  const Vec3 dv = (dlambda / ctx.dt) * n;
  if (wa != 0.0) detail::scatter_add(state.v[pa], wa * dv, atomic);
  if (wb != 0.0) detail::scatter_add(state.v[pb], -wb * dv, atomic);
  return out;
}

/// Collider projection of the candidate position x^n + dt v onto the
/// surface with Coulomb friction on the relative tangential velocity.
inline bool solve_boundary(std::size_t p, const Collider& collider, ParticleSet& state,
                           const StepContext& ctx) {
  if (state.inv_mass[p] == 0.0) return false;
  const double t_next = ctx.time + ctx.dt;
  const Vec3 candidate = ctx.x_n[p] + ctx.dt * state.v[p];
  const double phi = collider.signed_distance(candidate, t_next);
  if (phi >= 0.0) return false;
  const Vec3 n = collider.normal_at(candidate, t_next);
  const double dvn = -phi / ctx.dt;
  Vec3 v = state.v[p] + dvn * n;
  const Vec3 rel = v - collider.velocity;
  const Vec3 vt = rel - rel.dot(n) * n;
  const double vt_norm = vt.norm();
  if (vt_norm > 0.0) {
    const double keep = std::isinf(collider.friction)
                            ? 0.0
                            : std::max(0.0, 1.0 - collider.friction * dvn / vt_norm);
    v -= (1.0 - keep) * vt;
  }
  state.v[p] = v;
  return true;
}

/// v_p += c sum_b V_b (v_b - v_p) W_b(x_p^n), reading the pre-smoothing field.
inline void xsph_smooth(ParticleSet& state, const StepContext& ctx, double c, int threads = 1) {
  if (c == 0.0) return;
  const std::vector<Vec3> before = state.v;
  detail::parallel_for(state.size(), threads, [&](std::size_t p) {
    if (state.inv_mass[p] == 0.0) return;
    const auto nb = ctx.table.of(p);
    const std::uint32_t off = ctx.table.offsets[p];
    Vec3 acc = Vec3::Zero();
    // Rest volumes keep the pairwise exchange symmetric in mass when
    // densities match, so smoothing does not create momentum.
    for (std::size_t s = 0; s < nb.size(); ++s) {
      const std::uint32_t b = nb[s];
      acc += ctx.kernel_weight[off + s] * (state.rest_volume[b] / ctx.volume_n[b]) * (before[b] - before[p]);
    }
    state.v[p] = before[p] + c * acc;
  });
}

/// F^{n+1} = Z((I + dt grad v^{n+1}) F^n) with hardening advanced, and
/// x^{n+1} = x^n + dt v^{n+1}.
inline void finalize_state(ParticleSet& state, const StepContext& ctx,
                           std::span<const MaterialModel> materials, int threads = 1) {
  std::vector<Mat3> F_new(state.size());
  detail::parallel_for(state.size(), threads, [&](std::size_t p) {
    const MaterialModel& m = materials[static_cast<std::size_t>(state.material[p])];
    const Mat3 F_trial = trial_deformation(ctx.F_n[p], velocity_gradient(p, state, ctx), ctx.dt);
    if (!has_plasticity(m)) {
      F_new[p] = F_trial;
      return;
    }
    const ProjectionResult r = project(m, svd3(F_trial), ctx.dt, state.hardening[p]);
    if (r.yielded) {
      F_new[p] = r.F();
      state.hardening[p] = r.hardening;
    } else {
      F_new[p] = F_trial;
    }
  });
  for (std::size_t p = 0; p < state.size(); ++p) {
    state.F[p] = F_new[p];
    state.x[p] = ctx.x_n[p] + ctx.dt * state.v[p];
  }
}

/// ||C(v) + alpha~ lambda||_2 over the inelastic constraints at the current
/// velocities.
inline double residual_norm(const ParticleSet& state, const StepContext& ctx,
                            std::span<const MaterialModel> materials, bool apply_return_map,
                            int threads = 1) {
  std::vector<double> h(state.size());
  detail::parallel_for(state.size(), threads, [&](std::size_t p) {
    const MaterialModel& m = materials[static_cast<std::size_t>(state.material[p])];
    const ConstraintEvaluation ev =
        evaluate_inelastic_constraint(p, state.v, state, ctx, m, apply_return_map);
    h[p] = ev.C + ev.alpha_tilde * state.lambda[p];
  });
  double sum = 0.0;
  for (double hp : h) sum += hp * hp;
  return std::sqrt(sum);
}

/// Elastic energy sum V0 Psi(F) of the stored deformation gradients.
inline double stored_elastic_energy(const ParticleSet& state, std::span<const MaterialModel> materials) {
  double e = 0.0;
  for (std::size_t p = 0; p < state.size(); ++p) {
    const MaterialModel& m = materials[static_cast<std::size_t>(state.material[p])];
    e += state.rest_volume[p] * energy_density(effective_elastic(m, state.hardening[p]), state.F[p]);
  }
  return e;
}

/// Elastic energy of the deformation gradients the constraint solve acted on
/// in the last iteration (projected for the implicit loop, trial otherwise).
inline double solver_elastic_energy(const ParticleSet& state, const StepContext& ctx,
                                    std::span<const MaterialModel> materials) {
  double e = 0.0;
  for (std::size_t p = 0; p < state.size(); ++p) {
    const MaterialModel& m = materials[static_cast<std::size_t>(state.material[p])];
    e += state.rest_volume[p] * energy_density(effective_elastic(m, state.hardening[p]), ctx.F_iter[p]);
  }
  return e;
}

inline std::string particle_snapshot(const ParticleSet& s, std::size_t p) {
  std::ostringstream os;
  os.precision(17);
  os << "particle " << p << ": x=(" << s.x[p].transpose() << ") v=(" << s.v[p].transpose()
     << ") F=[" << Eigen::Map<const Eigen::Matrix<double, 1, 9>>(s.F[p].data()) << "] lambda="
     << s.lambda[p] << " material=" << s.material[p];
  return os.str();
}

class Solver {
 public:
  using ForceCallback = std::function<Vec3(std::size_t, const ParticleSet&, double)>;
  using ConstraintHook = std::function<void(ParticleSet&, const StepContext&)>;

  Solver(KernelSpec kernel, std::vector<MaterialModel> materials, std::vector<Collider> colliders,
         SolverConfig config)
      : kernel_(kernel),
        materials_(std::move(materials)),
        colliders_(std::move(colliders)),
        config_(config) {
    config_.validate();
  }

  const SolverConfig& config() const { return config_; }
  SolverConfig& config() { return config_; }
  const KernelSpec& kernel() const { return kernel_; }
  std::span<const MaterialModel> materials() const { return materials_; }
  const std::vector<Collider>& colliders() const { return colliders_; }
  const StepContext& context() const { return ctx_; }

  ForceCallback external_force;
  std::vector<ConstraintHook> extra_constraints;

  StepDiagnostics step(ParticleSet& state, double time) {
    config_.validate();
    StepDiagnostics diag;
    detail::Stopwatch watch;
    const double dt = config_.dt;
    const int threads = config_.threads;
    const bool implicit = config_.implicit_plasticity;
    const bool atomic = threads > 1;

    ctx_ = prepare_step(state, kernel_, dt, time, threads);
    diag.times.neighbors_us = watch.lap_us();

    // Predictor.
    for (std::size_t p = 0; p < state.size(); ++p) {
      if (state.inv_mass[p] == 0.0) continue;
      Vec3 dv = dt * config_.gravity;
      if (external_force) dv += dt * state.inv_mass[p] * external_force(p, state, time);
      state.v[p] += dv;
    }
    pin_plane(state);
    std::fill(state.lambda.begin(), state.lambda.end(), 0.0);
    diag.times.correction_us = watch.lap_us();

    const bool track_every =
        config_.residual_mode == ResidualMode::EveryIteration || config_.residual_tolerance.has_value();
    if (config_.residual_mode != ResidualMode::Off || config_.residual_tolerance) {
      diag.residual_iteration.push_back(0);
      diag.residual.push_back(residual_norm(state, ctx_, materials_, implicit, threads));
    }

    const int max_iter = config_.residual_tolerance ? config_.max_iterations : config_.iterations;
    for (int it = 1; it <= max_iter; ++it) {
      detail::Stopwatch inner;
      if (config_.backend == Backend::ColoredGaussSeidel)
        inelastic_sweep_gauss_seidel(state, diag, implicit, threads, atomic);
      else
        inelastic_sweep_jacobi(state, diag, implicit, threads);
      if (config_.check_fixed_point) assert_fixed_point(state);
      diag.times.inelastic_us += inner.lap_us();
      other_constraints(state, diag, threads, atomic);
      diag.times.other_us += inner.lap_us();
      diag.iterations = it;

      const bool last = it == max_iter;
      if (track_every || (last && config_.residual_mode == ResidualMode::Final)) {
        diag.residual_iteration.push_back(it);
        diag.residual.push_back(residual_norm(state, ctx_, materials_, implicit, threads));
        if (config_.residual_tolerance && diag.residual.back() <= *config_.residual_tolerance) break;
      }
    }
    watch.lap_us();

    xsph_smooth(state, ctx_, config_.xsph_c, threads);
    pin_plane(state);
    diag.times.xsph_us = watch.lap_us();

    finalize_state(state, ctx_, materials_, threads);
    diag.times.finalize_us = watch.lap_us();

    check_finite(state);
    return diag;
  }

 private:
  void pin_plane(ParticleSet& state) const {
    if (kernel_.dimension != 2) return;
    for (auto& v : state.v) v.z() = 0.0;
  }

  void inelastic_sweep_gauss_seidel(ParticleSet& state, StepDiagnostics& diag, bool implicit,
                                    int threads, bool atomic) {
    std::size_t updates = 0;
    for (int color = 0; color < ctx_.table.color_count(); ++color) {
      const auto cells = ctx_.table.cells_of_color(color);
      if (threads <= 1) {
        for (const auto& cell : cells)
          for (auto p : ctx_.table.particles_in(cell))
            updates += solve_one(p, state, implicit, false) ? 1 : 0;
      } else {
        std::size_t local = 0;
#pragma omp parallel for num_threads(threads) schedule(dynamic, 4) reduction(+ : local)
        for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(cells.size()); ++c)
          for (auto p : ctx_.table.particles_in(cells[static_cast<std::size_t>(c)]))
            local += solve_one(p, state, implicit, atomic) ? 1 : 0;
        updates += local;
      }
      pin_plane(state);
    }
    diag.inelastic_updates += updates;
  }

  bool solve_one(std::size_t p, ParticleSet& state, bool implicit, bool atomic) {
    const MaterialModel& m = materials_[static_cast<std::size_t>(state.material[p])];
    return solve_inelastic_constraint(p, state, ctx_, m, implicit, atomic) != 0.0;
  }

  // All multipliers and velocity increments from the iteration-start state,
  // applied in one batch through the mirror slots (thread-count independent).
  void inelastic_sweep_jacobi(ParticleSet& state, StepDiagnostics& diag, bool implicit, int threads) {
    const std::size_t n = state.size();
    slot_grad_.assign(ctx_.table.neighbors.size(), Vec3::Zero());
    self_grad_.assign(n, Vec3::Zero());
    dlambda_.assign(n, 0.0);
    detail::parallel_for(n, threads, [&](std::size_t p) {
      const MaterialModel& m = materials_[static_cast<std::size_t>(state.material[p])];
      const ConstraintEvaluation ev = evaluate_inelastic_constraint(p, state.v, state, ctx_, m, implicit);
      ctx_.F_iter[p] = ev.F;
      if (ev.C == 0.0) return;
      const auto nb = ctx_.table.of(p);
      const std::uint32_t off = ctx_.table.offsets[p];
      const Mat3 A = ev.dCdF * ctx_.F_n[p].transpose();
      Vec3 sum = Vec3::Zero();
      double denom = ev.alpha_tilde;
      for (std::size_t s = 0; s < nb.size(); ++s) {
        const Vec3 g = A * ctx_.grad_weight[off + s];
        slot_grad_[off + s] = g;
        sum += g;
        denom += state.inv_mass[nb[s]] * g.squaredNorm();
      }
      self_grad_[p] = -sum;
      denom += state.inv_mass[p] * sum.squaredNorm();
      dlambda_[p] = (-ev.C - ev.alpha_tilde * state.lambda[p]) / denom;
    });
    std::size_t updates = 0;
    for (std::size_t p = 0; p < n; ++p) {
      state.lambda[p] += dlambda_[p];
      updates += dlambda_[p] != 0.0 ? 1 : 0;
    }
    const double inv_dt = 1.0 / ctx_.dt;
    detail::parallel_for(n, threads, [&](std::size_t b) {
      if (state.inv_mass[b] == 0.0) return;
      Vec3 dv = self_grad_[b] * dlambda_[b];
      const auto nb = ctx_.table.of(b);
      const std::uint32_t off = ctx_.table.offsets[b];
      for (std::size_t s = 0; s < nb.size(); ++s) dv += slot_grad_[ctx_.table.mirror[off + s]] * dlambda_[nb[s]];
      state.v[b] += (state.inv_mass[b] * inv_dt) * dv;
    });
    pin_plane(state);
    diag.inelastic_updates += updates;
  }

  void other_constraints(ParticleSet& state, StepDiagnostics& diag, int threads, bool atomic) {
    const double r = kernel_.radius;
    const double eps = config_.gap_factor * r;
    if (config_.position_correction) {
      if (config_.backend == Backend::ColoredGaussSeidel) {
        std::size_t active = 0, coincident = 0;
        const auto pairs_of = [&](std::size_t p, bool use_atomic, std::size_t& a, std::size_t& c) {
          for (auto b : ctx_.table.of(p)) {
            if (b <= p) continue;
            const DistanceOutcome o = solve_distance_constraint(p, b, r, eps, state, ctx_, use_atomic);
            a += o.active ? 1 : 0;
            c += o.coincident ? 1 : 0;
          }
        };
        for (int color = 0; color < ctx_.table.color_count(); ++color) {
          const auto cells = ctx_.table.cells_of_color(color);
          if (threads <= 1) {
            for (const auto& cell : cells)
              for (auto p : ctx_.table.particles_in(cell)) pairs_of(p, false, active, coincident);
          } else {
            std::size_t a = 0, c = 0;
#pragma omp parallel for num_threads(threads) schedule(dynamic, 4) reduction(+ : a, c)
            for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(cells.size()); ++ci)
              for (auto p : ctx_.table.particles_in(cells[static_cast<std::size_t>(ci)])) pairs_of(p, atomic, a, c);
            active += a;
            coincident += c;
          }
        }
        diag.distance_corrections += active;
        diag.coincident_fallbacks += coincident;
      } else {
        distance_jacobi(state, diag, r, eps, threads);
      }
      pin_plane(state);
    }

    if (!colliders_.empty()) {
      std::vector<unsigned char> hit(state.size(), 0);
      detail::parallel_for(state.size(), threads, [&](std::size_t p) {
        for (const auto& c : colliders_)
          if (solve_boundary(p, c, state, ctx_)) hit[p] = 1;
      });
      for (auto h : hit) diag.boundary_contacts += h;
      pin_plane(state);
    }

    for (auto& hook : extra_constraints) hook(state, ctx_);
  }

  void distance_jacobi(ParticleSet& state, StepDiagnostics& diag, double r, double eps, int threads) {
    const std::size_t n = state.size();
    std::vector<Vec3> dv(n, Vec3::Zero());
    std::vector<unsigned> active(n, 0), coincident(n, 0);
    detail::parallel_for(n, threads, [&](std::size_t p) {
      const double wa = state.inv_mass[p];
      if (wa == 0.0) return;
      const Vec3 xa = ctx_.x_n[p] + ctx_.dt * state.v[p];
      for (auto b : ctx_.table.of(p)) {
        const double wb = state.inv_mass[b];
        const Vec3 d = xa - (ctx_.x_n[b] + ctx_.dt * state.v[b]);
        const double dist = d.norm();
        const double C = dist - r + eps;
        if (C >= 0.0) continue;
        Vec3 nrm = Vec3::UnitX();
        if (dist > 0.0) {
          nrm = d / dist;
        } else {
          // Coincident pair: opposite fallback directions for the two members.
          if (b < p) nrm = -nrm;
          ++coincident[p];
        }
        dv[p] += (wa * -C / ((wa + wb) * ctx_.dt)) * nrm;
        ++active[p];
      }
    });
    for (std::size_t p = 0; p < n; ++p) {
      state.v[p] += dv[p];
      diag.distance_corrections += active[p];
      diag.coincident_fallbacks += coincident[p];
    }
  }

  void assert_fixed_point(const ParticleSet& state) const {
    if (!config_.implicit_plasticity) return;
    for (std::size_t p = 0; p < state.size(); ++p) {
      const MaterialModel& m = materials_[static_cast<std::size_t>(state.material[p])];
      if (!has_plasticity(m) || !is_rate_independent(m)) continue;
      const double y = yield_value(m, ctx_.F_iter[p], state.hardening[p]);
      if (y > 1e-6)
        throw SimulationError("fixed-point check: constraint used an unprojected F", p,
                              particle_snapshot(state, p));
    }
  }

  void check_finite(const ParticleSet& state) const {
    for (std::size_t p = 0; p < state.size(); ++p) {
      if (!state.x[p].allFinite() || !state.v[p].allFinite() || !state.F[p].allFinite() ||
          !std::isfinite(state.lambda[p])) {
        throw SimulationError("non-finite particle state", p, particle_snapshot(state, p));
      }
    }
  }

  KernelSpec kernel_;
  std::vector<MaterialModel> materials_;
  std::vector<Collider> colliders_;
  SolverConfig config_;
  StepContext ctx_;
  std::vector<Vec3> slot_grad_;
  std::vector<Vec3> self_grad_;
  std::vector<double> dlambda_;
};

}  // namespace xpbi
