#pragma once

// Analytic signed-distance colliders. Positive distance is the free side;
// `inverted` colliders keep particles inside the primitive instead.

#include <xpbi/linalg.hpp>

#include <algorithm>
#include <limits>
#include <string>

namespace xpbi {

struct Collider {
  enum class Kind { HalfSpace, Sphere, Box, Cylinder };

  Kind kind = Kind::HalfSpace;
  Vec3 origin = Vec3::Zero();  // plane point / sphere center / box center / cylinder base
  Vec3 normal = Vec3::UnitY();  // half-space normal
  double radius = 0.0;
  double height = 0.0;
  int axis = 1;
  Vec3 half_extents = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();  // box orientation (local -> world)
  bool inverted = false;
  double friction = 0.0;  // Coulomb coefficient; infinity = sticky
  Vec3 velocity = Vec3::Zero();  // rigid translation

  bool operator==(const Collider&) const = default;

  static Collider half_space(const Vec3& point, const Vec3& n, double friction) {
    Collider c;
    c.kind = Kind::HalfSpace;
    c.origin = point;
    c.normal = n.normalized();
    c.friction = friction;
    return c;
  }

  Vec3 origin_at(double t) const { return origin + t * velocity; }

  double signed_distance(const Vec3& x, double t = 0.0) const {
    const double d = raw_distance(x - origin_at(t));
    return inverted ? -d : d;
  }

  /// Unit outward normal of the free side at x.
  Vec3 normal_at(const Vec3& x, double t = 0.0) const {
    if (kind == Kind::HalfSpace) return inverted ? Vec3(-normal) : normal;
    const Vec3 local = x - origin_at(t);
    if (kind == Kind::Sphere && local.norm() > 0.0) {
      return inverted ? Vec3(-local.normalized()) : Vec3(local.normalized());
    }
    const double h = 1e-7 * std::max({1.0, radius, half_extents.maxCoeff(), height});
    Vec3 g;
    for (int i = 0; i < 3; ++i) {
      Vec3 e = Vec3::Zero();
      e(i) = h;
      g(i) = raw_distance(local + e) - raw_distance(local - e);
    }
    if (inverted) g = -g;
    const double n = g.norm();
    return n > 0.0 ? Vec3(g / n) : Vec3(Vec3::UnitY());
  }

 private:
  double raw_distance(const Vec3& p) const {
    switch (kind) {
      case Kind::HalfSpace:
        return normal.dot(p);
      case Kind::Sphere:
        return p.norm() - radius;
      case Kind::Box: {
        const Vec3 q = (rotation.transpose() * p).cwiseAbs() - half_extents;
        return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
      }
      case Kind::Cylinder: {
        Vec3 radial = p;
        radial(axis) = 0.0;
        const double along = p(axis) - 0.5 * height;
        const double dr = radial.norm() - radius;
        const double dh = std::abs(along) - 0.5 * height;
        return std::min(std::max(dr, dh), 0.0) +
               Eigen::Vector2d(std::max(dr, 0.0), std::max(dh, 0.0)).norm();
      }
    }
    return std::numeric_limits<double>::infinity();
  }
};

}  // namespace xpbi
