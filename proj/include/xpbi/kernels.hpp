#pragma once

// Wendland C2 smoothing kernel and the kernel-gradient correction matrix.

#include <xpbi/linalg.hpp>

#include <array>
#include <numbers>
#include <span>
#include <stdexcept>

namespace xpbi {

namespace detail {

// (1 - q)^4 (1 + 4q) expanded in powers of q.
inline constexpr std::array<double, 6> kWendlandC2Poly{1.0, 0.0, -10.0, 20.0, -15.0, 4.0};

// Integral of q^(d-1) * poly(q) over [0, 1] times the unit-sphere area.
inline double wendland_unit_integral(int dimension) {
  double radial = 0.0;
  for (std::size_t j = 0; j < kWendlandC2Poly.size(); ++j) {
    radial += kWendlandC2Poly[j] / static_cast<double>(j + static_cast<std::size_t>(dimension));
  }
  const double area = dimension == 3 ? 4.0 * std::numbers::pi : 2.0 * std::numbers::pi;
  return area * radial;
}

}  // namespace detail

struct KernelSpec {
  double radius = 0.0;   // particle radius r
  double support = 0.0;  // k = 2r
  int dimension = 3;
  double normalization = 0.0;

  static KernelSpec make(double particle_radius, int dimension) {
    if (!(particle_radius > 0.0)) throw std::invalid_argument("kernel radius must be positive");
    if (dimension != 2 && dimension != 3) throw std::invalid_argument("kernel dimension must be 2 or 3");
    KernelSpec spec;
    spec.radius = particle_radius;
    spec.support = 2.0 * particle_radius;
    spec.dimension = dimension;
    spec.normalization =
        1.0 / (std::pow(spec.support, dimension) * detail::wendland_unit_integral(dimension));
    return spec;
  }
};

inline double kernel_value(const KernelSpec& spec, double dist) {
  const double q = dist / spec.support;
  if (q >= 1.0) return 0.0;
  const double t = 1.0 - q;
  const double t2 = t * t;
  return spec.normalization * t2 * t2 * (1.0 + 4.0 * q);
}

/// Gradient of W(|xb - xp|) with respect to xp.
inline Vec3 kernel_gradient(const KernelSpec& spec, const Vec3& xp, const Vec3& xb) {
  const Vec3 r = xp - xb;
  const double dist = r.norm();
  const double q = dist / spec.support;
  if (q >= 1.0 || dist == 0.0) return Vec3::Zero();
  const double t = 1.0 - q;
  return (-20.0 * spec.normalization / (spec.support * spec.support) * t * t * t) * r;
}

struct NeighborSample {
  Vec3 position;
  double volume = 0.0;
};

/// Moment matrix sum_b Vb gradW_b(xp) (xb - xp)^T.
inline Mat3 moment_matrix(const KernelSpec& spec, const Vec3& xp,
                          std::span<const NeighborSample> neighbors) {
  Mat3 m = Mat3::Zero();
  for (const auto& nb : neighbors) {
    m += nb.volume * kernel_gradient(spec, xp, nb.position) * (nb.position - xp).transpose();
  }
  return m;
}

/// Kernel-gradient correction L_p: pseudo-inverse of the moment matrix.
/// Empty neighborhoods give the zero matrix.
inline Mat3 correction_matrix(const KernelSpec& spec, const Vec3& xp,
                              std::span<const NeighborSample> neighbors,
                              double cutoff = kDefaultPinvCutoff) {
  return pseudo_inverse(moment_matrix(spec, xp, neighbors), cutoff);
}

}  // namespace xpbi
