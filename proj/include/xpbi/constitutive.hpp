#pragma once

// StVK elasticity with Hencky strain, its compliant-constraint forms, and the
// plastic return maps (von Mises, Drucker-Prager, non-associated Cam-Clay,
// Herschel-Bulkley, snow clamping). All return maps work on the logarithm of
// the principal stretches of the trial deformation gradient and rebuild
// F = U exp(eps) V^T.

#include <xpbi/linalg.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <variant>

namespace xpbi {

struct ElasticParams {
  double youngs_modulus = 0.0;
  double poisson_ratio = 0.0;
  double mu = 0.0;
  double lambda = 0.0;

  static ElasticParams from_young_poisson(double E, double nu) {
    if (!(E > 0.0)) throw std::invalid_argument("Young's modulus must be positive");
    if (!(nu > -1.0 && nu < 0.5))
      throw std::invalid_argument("Poisson ratio must lie in (-1, 0.5)");
    return {E, nu, E / (2.0 * (1.0 + nu)), E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))};
  }

  double bulk_modulus() const { return lambda + 2.0 / 3.0 * mu; }

  ElasticParams scaled(double s) const { return {youngs_modulus * s, poisson_ratio, mu * s, lambda * s}; }

  bool operator==(const ElasticParams&) const = default;
};

struct NoPlasticity {
  bool operator==(const NoPlasticity&) const = default;
};

struct VonMises {
  double yield_stress = 0.0;

  bool operator==(const VonMises&) const = default;
};

struct DruckerPrager {
  double friction_angle_deg = 30.0;
  double cohesion = 0.0;  // log-strain shift of the cone apex

  bool operator==(const DruckerPrager&) const = default;
};

/// Non-associated Cam-Clay with hardening state alpha (log of plastic J).
struct CamClay {
  double alpha0 = 0.0;
  double beta = 0.0;
  double xi = 0.0;
  double M = 1.0;

  bool operator==(const CamClay&) const = default;
};

struct HerschelBulkley {
  double yield_stress = 0.0;
  double exponent = 1.0;  // h
  double viscosity = 1.0;  // eta

  bool operator==(const HerschelBulkley&) const = default;
};

/// Principal-stretch clamping with exponential hardening of the Lame
/// parameters by the plastic volume ratio.
struct SnowClamp {
  double critical_compression = 0.025;
  double critical_stretch = 0.0075;
  double hardening = 10.0;

  bool operator==(const SnowClamp&) const = default;
};

using PlasticModel =
    std::variant<NoPlasticity, VonMises, DruckerPrager, CamClay, HerschelBulkley, SnowClamp>;

struct MaterialModel {
  double density = 1000.0;
  ElasticParams elastic;
  PlasticModel plastic = NoPlasticity{};

  bool operator==(const MaterialModel&) const = default;
};

inline bool has_plasticity(const MaterialModel& m) {
  return !std::holds_alternative<NoPlasticity>(m.plastic);
}

inline bool is_rate_independent(const MaterialModel& m) {
  return !std::holds_alternative<HerschelBulkley>(m.plastic);
}

inline std::string plastic_model_name(const PlasticModel& p) {
  switch (p.index()) {
    case 0: return "none";
    case 1: return "von_mises";
    case 2: return "drucker_prager";
    case 3: return "nacc";
    case 4: return "herschel_bulkley";
    case 5: return "snow";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Elastic energy and constraint forms

inline double energy_density_principal(const ElasticParams& e, const Vec3& sigma) {
  const Vec3 eps = log_clamped(sigma);
  const double tr = eps.sum();
  return e.mu * eps.squaredNorm() + 0.5 * e.lambda * tr * tr;
}

inline double energy_density(const ElasticParams& e, const Mat3& F) {
  return energy_density_principal(e, svd3(F).sigma);
}

/// dPsi/dsigma_i; zero for components held at the log floor.
inline Vec3 energy_principal_stress(const ElasticParams& e, const Vec3& sigma) {
  const Vec3 eps = log_clamped(sigma);
  const double tr = eps.sum();
  Vec3 d;
  for (int i = 0; i < 3; ++i)
    d(i) = sigma(i) > kDefaultLogFloor ? (2.0 * e.mu * eps(i) + e.lambda * tr) / sigma(i) : 0.0;
  return d;
}

/// First Piola-Kirchhoff stress dPsi/dF.
inline Mat3 energy_gradient(const ElasticParams& e, const Mat3& F) {
  const SvdTriple s = svd3(F);
  return s.reconstruct(energy_principal_stress(e, s.sigma));
}

struct ConstraintValue {
  double C = 0.0;
  double alpha = 0.0;
};

/// Single-constraint form: C = sqrt(2 Psi), alpha = 1 / V0.
inline ConstraintValue constraint_value(const ElasticParams& e, const Mat3& F, double V0) {
  if (!(V0 > 0.0)) throw std::invalid_argument("rest volume must be positive");
  return {std::sqrt(2.0 * energy_density(e, F)), 1.0 / V0};
}

struct ConstraintPair {
  ConstraintValue deviatoric;  // mu term
  ConstraintValue volumetric;  // lambda term
};

/// Two-constraint form splitting the mu and lambda terms of the energy.
inline ConstraintPair constraint_pair(const ElasticParams& e, const Mat3& F, double V0) {
  if (!(V0 > 0.0)) throw std::invalid_argument("rest volume must be positive");
  const Vec3 eps = log_clamped(svd3(F).sigma);
  return {{std::sqrt(eps.squaredNorm()), 1.0 / (2.0 * e.mu * V0)},
          {eps.sum(), 1.0 / (e.lambda * V0)}};
}

inline constexpr double kConstraintGuardFactor = 1e-12;

/// dC/dF for C = sqrt(2 Psi), given the SVD of F. Zero below the guard
/// 2 Psi < 1e-12 mu, where C is not differentiable.
inline Mat3 constraint_gradient(const ElasticParams& e, const SvdTriple& s, double* C_out = nullptr) {
  const double two_psi = 2.0 * energy_density_principal(e, s.sigma);
  const double C = std::sqrt(two_psi);
  if (C_out) *C_out = C;
  if (two_psi < kConstraintGuardFactor * e.mu) return Mat3::Zero();
  return s.reconstruct(energy_principal_stress(e, s.sigma) / C);
}

inline Mat3 dC_dF(const ElasticParams& e, const Mat3& F) { return constraint_gradient(e, svd3(F)); }

// ---------------------------------------------------------------------------
// Plasticity

inline double initial_hardening(const MaterialModel& m) {
  if (const auto* cc = std::get_if<CamClay>(&m.plastic)) return cc->alpha0;
  return 0.0;
}

/// Elastic parameters after hardening (only the snow model scales them).
inline ElasticParams effective_elastic(const MaterialModel& m, double hardening) {
  if (const auto* snow = std::get_if<SnowClamp>(&m.plastic)) {
    const double jp = std::exp(hardening);
    return m.elastic.scaled(std::exp(snow->hardening * (1.0 - jp)));
  }
  return m.elastic;
}

namespace detail {

inline double dp_alpha(double friction_angle_deg) {
  const double s = std::sin(friction_angle_deg * std::numbers::pi / 180.0);
  return std::sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s);
}

inline double cam_clay_p0(const CamClay& cc, double K, double alpha) {
  return K * (1e-5 + std::sinh(cc.xi * std::max(-alpha, 0.0)));
}

struct PrincipalProjection {
  Vec3 eps;         // projected Hencky strain
  bool yielded = false;
  double hardening = 0.0;
};

inline PrincipalProjection project_von_mises(const ElasticParams& e, double yield_stress,
                                             const Vec3& eps) {
  const double tr = eps.sum();
  const Vec3 dev = eps - Vec3::Constant(tr / 3.0);
  const double dev_norm = dev.norm();
  const double limit = std::sqrt(2.0 / 3.0) * yield_stress / (2.0 * e.mu);
  if (dev_norm <= limit) return {eps, false, 0.0};
  return {Vec3(Vec3::Constant(tr / 3.0) + dev * (limit / dev_norm)), true, 0.0};
}

inline PrincipalProjection project_drucker_prager(const ElasticParams& e, const DruckerPrager& dp,
                                                  const Vec3& eps_in) {
  const Vec3 shift = Vec3::Constant(dp.cohesion);
  const Vec3 eps = eps_in - shift;
  const double tr = eps.sum();
  if (tr > 0.0) return {shift, true, 0.0};  // apex
  const Vec3 dev = eps - Vec3::Constant(tr / 3.0);
  const double dev_norm = dev.norm();
  const double gamma =
      dev_norm + (3.0 * e.lambda + 2.0 * e.mu) / (2.0 * e.mu) * tr * dp_alpha(dp.friction_angle_deg);
  if (gamma <= 0.0) return {eps_in, false, 0.0};
  return {Vec3(eps - gamma / dev_norm * dev + shift), true, 0.0};
}

inline PrincipalProjection project_cam_clay(const ElasticParams& e, const CamClay& cc,
                                            const Vec3& eps, double alpha) {
  const double K = e.bulk_modulus();
  const double p0 = cam_clay_p0(cc, K, alpha);
  const double beta = cc.beta;
  const double M2 = cc.M * cc.M;
  const double tr = eps.sum();
  const double p = -K * tr;
  const Vec3 dev = eps - Vec3::Constant(tr / 3.0);
  const Vec3 s = 2.0 * e.mu * dev;

  // Tips of the yield ellipse.
  if (p > p0 || p < -beta * p0) {
    const double p_new = p > p0 ? p0 : -beta * p0;
    const double tr_new = -p_new / K;
    return {Vec3::Constant(tr_new / 3.0), true, alpha + (tr - tr_new)};
  }

  const double s_coeff = 1.5 * (1.0 + 2.0 * beta);
  const double y_p = M2 * (p + beta * p0) * (p - p0);
  const double s2 = s.squaredNorm();
  const double y = s_coeff * s2 + y_p;
  if (y <= 0.0) return {eps, false, alpha};

  // Pressure is kept; the deviatoric stress is scaled onto the ellipse.
  const double s_norm_new = std::sqrt(std::max(-y_p / s_coeff, 0.0));
  const Vec3 dev_new = dev * (s_norm_new / std::sqrt(s2));
  double alpha_new = alpha;

  // Hardening: intersect the ray from the ellipse center to the trial point.
  const double p_c = 0.5 * (1.0 - beta) * p0;
  const double q_trial = std::sqrt(1.5) * std::sqrt(s2);
  Eigen::Vector2d dir(p_c - p, -q_trial);
  if (dir.norm() > 0.0) {
    dir.normalize();
    const double A = M2 * dir(0) * dir(0) + (1.0 + 2.0 * beta) * dir(1) * dir(1);
    const double B = M2 * dir(0) * (2.0 * p_c - p0 + beta * p0);
    const double C = M2 * (p_c + beta * p0) * (p_c - p0);
    const double disc = std::max(B * B - 4.0 * A * C, 0.0);
    const double l1 = (-B + std::sqrt(disc)) / (2.0 * A);
    const double l2 = (-B - std::sqrt(disc)) / (2.0 * A);
    const double p1 = p_c + l1 * dir(0);
    const double p2 = p_c + l2 * dir(0);
    const double p_x = (p - p_c) * (p1 - p_c) > 0.0 ? p1 : p2;
    alpha_new = alpha + (p_x - p) / K;
  }
  return {Vec3(Vec3::Constant(tr / 3.0) + dev_new), true, alpha_new};
}

inline constexpr double kHerschelBulkleyTolerance = 1e-10;

inline PrincipalProjection project_herschel_bulkley(const ElasticParams& e,
                                                    const HerschelBulkley& hb, const Vec3& eps,
                                                    double dt) {
  const double tr = eps.sum();
  const Vec3 dev = eps - Vec3::Constant(tr / 3.0);
  const double s_trial = 2.0 * e.mu * dev.norm();
  const double k = std::sqrt(2.0 / 3.0) * hb.yield_stress;
  if (s_trial <= k) return {eps, false, 0.0};

  // Implicit flow: s - s_trial + 2 mu dt ((s - k) / eta)^(1/h) = 0 on [k, s_trial].
  const double inv_h = 1.0 / hb.exponent;
  const auto g = [&](double s) {
    return s - s_trial + 2.0 * e.mu * dt * std::pow((s - k) / hb.viscosity, inv_h);
  };
  double lo = k;
  double hi = s_trial;
  const double tol = kHerschelBulkleyTolerance * std::max(s_trial, 1e-300);
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (g(mid) > 0.0)
      hi = mid;
    else
      lo = mid;
  }
  const double s_new = 0.5 * (lo + hi);
  return {Vec3(Vec3::Constant(tr / 3.0) + dev * (s_new / s_trial)), true, 0.0};
}

}  // namespace detail

struct ProjectionResult {
  SvdTriple svd;            // SVD of the projected F (U, V shared with the trial)
  double hardening = 0.0;   // advanced hardening state
  bool yielded = false;

  Mat3 F() const { return svd.reconstruct(); }
};

/// Plastic return map on an already decomposed trial F. `dt` is only used by
/// the rate-dependent Herschel-Bulkley flow.
inline ProjectionResult project(const MaterialModel& model, const SvdTriple& trial, double dt,
                                double hardening) {
  ProjectionResult out{trial, hardening, false};
  if (std::holds_alternative<NoPlasticity>(model.plastic)) return out;

  if (const auto* snow = std::get_if<SnowClamp>(&model.plastic)) {
    const double lo = 1.0 - snow->critical_compression;
    const double hi = 1.0 + snow->critical_stretch;
    Vec3 clamped = trial.sigma;
    for (int i = 0; i < 3; ++i) clamped(i) = std::clamp(clamped(i), lo, hi);
    if (clamped == trial.sigma) return out;
    out.svd.sigma = clamped;
    out.yielded = true;
    out.hardening = hardening + log_clamped(trial.sigma).sum() - log_clamped(clamped).sum();
    return out;
  }

  const ElasticParams& e = model.elastic;
  const Vec3 eps = log_clamped(trial.sigma);
  detail::PrincipalProjection proj;
  if (const auto* vm = std::get_if<VonMises>(&model.plastic)) {
    proj = detail::project_von_mises(e, vm->yield_stress, eps);
  } else if (const auto* dp = std::get_if<DruckerPrager>(&model.plastic)) {
    proj = detail::project_drucker_prager(e, *dp, eps);
  } else if (const auto* cc = std::get_if<CamClay>(&model.plastic)) {
    proj = detail::project_cam_clay(e, *cc, eps, hardening);
  } else if (const auto* hb = std::get_if<HerschelBulkley>(&model.plastic)) {
    proj = detail::project_herschel_bulkley(e, *hb, eps, dt);
  }
  if (!proj.yielded) return out;
  out.yielded = true;
  out.svd.sigma = proj.eps.array().exp();
  if (std::holds_alternative<CamClay>(model.plastic)) out.hardening = proj.hardening;
  return out;
}

/// Return map Z(F). Returns F_trial unchanged when it is inside the yield
/// surface.
inline Mat3 return_map(const MaterialModel& model, const Mat3& F_trial, double dt,
                       double hardening) {
  if (!has_plasticity(model)) return F_trial;
  const ProjectionResult r = project(model, svd3(F_trial), dt, hardening);
  return r.yielded ? r.F() : F_trial;
}

inline Mat3 return_map(const MaterialModel& model, const Mat3& F_trial, double dt) {
  return return_map(model, F_trial, dt, initial_hardening(model));
}

/// Normalized yield function: <= 0 inside or on the yield surface.
/// Herschel-Bulkley reports its static (von Mises) yield function.
inline double yield_value(const MaterialModel& model, const Mat3& F, double hardening) {
  const SvdTriple s = svd3(F);
  const ElasticParams& e = model.elastic;
  const Vec3 eps = log_clamped(s.sigma);
  const double tr = eps.sum();
  const Vec3 dev = eps - Vec3::Constant(tr / 3.0);
  const auto von_mises_value = [&](double yield_stress) {
    const double scale = yield_stress > 0.0 ? yield_stress : e.mu;
    return (2.0 * e.mu * dev.norm() - std::sqrt(2.0 / 3.0) * yield_stress) / scale;
  };
  return std::visit(
      [&](const auto& p) -> double {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, NoPlasticity>) {
          throw std::invalid_argument("yield_value: material has no yield surface");
        } else if constexpr (std::is_same_v<T, VonMises>) {
          return von_mises_value(p.yield_stress);
        } else if constexpr (std::is_same_v<T, HerschelBulkley>) {
          return von_mises_value(p.yield_stress);
        } else if constexpr (std::is_same_v<T, DruckerPrager>) {
          const Vec3 shifted = eps - Vec3::Constant(p.cohesion);
          const double trs = shifted.sum();
          const Vec3 devs = shifted - Vec3::Constant(trs / 3.0);
          const double tau_dev = 2.0 * e.mu * devs.norm();
          const double tau_tr = (3.0 * e.lambda + 2.0 * e.mu) * trs;
          return (tau_dev + detail::dp_alpha(p.friction_angle_deg) * tau_tr) / (2.0 * e.mu);
        } else if constexpr (std::is_same_v<T, CamClay>) {
          const double K = e.bulk_modulus();
          const double p0 = detail::cam_clay_p0(p, K, hardening);
          const double pr = -K * tr;
          const double s2 = (2.0 * e.mu * dev).squaredNorm();
          const double M2 = p.M * p.M;
          const double y = 1.5 * (1.0 + 2.0 * p.beta) * s2 + M2 * (pr + p.beta * p0) * (pr - p0);
          const double outside_tips = std::max(pr - p0, -p.beta * p0 - pr);
          if (outside_tips > 0.0) return std::max(y / (M2 * p0 * p0), outside_tips / p0);
          return y / (M2 * p0 * p0);
        } else {  // SnowClamp
          const double lo = 1.0 - p.critical_compression;
          const double hi = 1.0 + p.critical_stretch;
          double v = -std::numeric_limits<double>::infinity();
          for (int i = 0; i < 3; ++i) v = std::max({v, s.sigma(i) - hi, lo - s.sigma(i)});
          return v / std::min(p.critical_compression, p.critical_stretch);
        }
      },
      model.plastic);
}

inline double yield_value(const MaterialModel& model, const Mat3& F) {
  return yield_value(model, F, initial_hardening(model));
}

}  // namespace xpbi
