#pragma once

// Small dense 3-vector / 3x3-matrix helpers used for deformation-gradient
// processing. Storage types are Eigen fixed-size objects; the functions here
// add the conventions the solver relies on (sign-fixed SVD, truncated
// pseudo-inverse, floored logarithm).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace xpbi {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Singular value decomposition M = U * diag(sigma) * V^T with U and V proper
/// rotations. Singular values are sorted descending; a reflection is carried
/// by the sign of sigma(2).
struct SvdTriple {
  Mat3 U = Mat3::Identity();
  Vec3 sigma = Vec3::Ones();
  Mat3 V = Mat3::Identity();

  Mat3 reconstruct() const { return U * sigma.asDiagonal() * V.transpose(); }
  Mat3 reconstruct(const Vec3& s) const { return U * s.asDiagonal() * V.transpose(); }
};

inline bool all_finite(const Vec3& v) { return v.allFinite(); }
inline bool all_finite(const Mat3& m) { return m.allFinite(); }

inline SvdTriple svd3(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  SvdTriple out{svd.matrixU(), svd.singularValues(), svd.matrixV()};
  // Rotation-variant convention: push any reflection into the smallest
  // singular value so both factors are proper rotations.
  if (out.U.determinant() < 0.0) {
    out.U.col(2) *= -1.0;
    out.sigma(2) *= -1.0;
  }
  if (out.V.determinant() < 0.0) {
    out.V.col(2) *= -1.0;
    out.sigma(2) *= -1.0;
  }
  return out;
}

inline constexpr double kDefaultPinvCutoff = 1e-6;
inline constexpr double kDefaultLogFloor = 1e-6;

/// Moore-Penrose style inverse through the SVD. Singular values whose
/// magnitude is below `cutoff * sigma_max` are treated as zero.
inline Mat3 pseudo_inverse(const Mat3& m, double cutoff = kDefaultPinvCutoff) {
  const SvdTriple s = svd3(m);
  const double sigma_max = s.sigma.cwiseAbs().maxCoeff();
  if (!(sigma_max > 0.0)) return Mat3::Zero();
  Vec3 inv = Vec3::Zero();
  for (int i = 0; i < 3; ++i) {
    if (std::abs(s.sigma(i)) >= cutoff * sigma_max) inv(i) = 1.0 / s.sigma(i);
  }
  return s.V * inv.asDiagonal() * s.U.transpose();
}

/// Componentwise log(max(sigma_i, floor)).
inline Vec3 log_clamped(const Vec3& sigma, double floor = kDefaultLogFloor) {
  return Vec3(std::log(std::max(sigma(0), floor)), std::log(std::max(sigma(1), floor)),
              std::log(std::max(sigma(2), floor)));
}

inline Mat3 outer(const Vec3& a, const Vec3& b) { return a * b.transpose(); }

inline Mat3 skew(const Vec3& w) {
  Mat3 s;
  s << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return s;
}

inline Mat3 axis_angle(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

/// Rotation from XYZ Euler angles in degrees (applied x, then y, then z).
inline Mat3 rotation_from_euler_deg(const Vec3& deg) {
  constexpr double kDeg = 3.14159265358979323846 / 180.0;
  return (Eigen::AngleAxisd(deg.z() * kDeg, Vec3::UnitZ()) *
          Eigen::AngleAxisd(deg.y() * kDeg, Vec3::UnitY()) *
          Eigen::AngleAxisd(deg.x() * kDeg, Vec3::UnitX()))
      .toRotationMatrix();
}

}  // namespace xpbi
