#pragma once

// Scene files (JSON, version 1), particle seeding from scene bodies, frame
// files (binary little-endian or CSV) and particle-distribution metrics.

#include <xpbi/colliders.hpp>
#include <xpbi/constitutive.hpp>
#include <xpbi/kernels.hpp>
#include <xpbi/particles.hpp>
#include <xpbi/sampling.hpp>
#include <xpbi/solver.hpp>

#include <json.hpp>

#include <bit>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xpbi {

class SceneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MaterialEntry {
  std::string name;
  MaterialModel model;

  bool operator==(const MaterialEntry&) const = default;
};

enum class Sampling { Poisson, Lattice };

struct BodySpec {
  Shape shape;
  std::string material;
  Vec3 velocity = Vec3::Zero();
  Sampling sampling = Sampling::Poisson;
  std::optional<double> spacing;  // defaults to the particle radius
  bool fixed = false;             // kinematic particles (infinite mass)

  bool operator==(const BodySpec&) const = default;
};

struct SceneSpec {
  int version = 1;
  std::string name;
  int dimension = 3;
  double particle_radius = 0.01;
  std::uint64_t seed = 1;
  double duration = 1.0;
  double frame_rate = 24.0;
  SolverConfig solver;
  std::vector<MaterialEntry> materials;
  std::vector<BodySpec> bodies;
  std::vector<Collider> colliders;

  bool operator==(const SceneSpec&) const = default;

  int material_index(const std::string& material) const {
    for (std::size_t i = 0; i < materials.size(); ++i)
      if (materials[i].name == material) return static_cast<int>(i);
    return -1;
  }
  std::vector<MaterialModel> material_table() const {
    std::vector<MaterialModel> out;
    for (const auto& m : materials) out.push_back(m.model);
    return out;
  }
  int steps_per_frame() const {
    return std::max(1, static_cast<int>(std::ceil(1.0 / (frame_rate * solver.dt) - 1e-9)));
  }
  int frame_count() const {
    return std::max(1, static_cast<int>(std::ceil(duration * frame_rate - 1e-9)));
  }
};

namespace detail {

using json = nlohmann::json;

class JsonReader {
 public:
  JsonReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  const std::string& path() const { return path_; }
  bool has(const char* key) const { return j_.is_object() && j_.contains(key); }
  JsonReader child(const char* key) const {
    if (!has(key)) fail(key, "missing required field");
    return {j_.at(key), path_ + "." + key};
  }
  JsonReader at(std::size_t i) const { return {j_.at(i), path_ + "[" + std::to_string(i) + "]"}; }
  std::size_t size() const { return j_.size(); }
  const json& raw() const { return j_; }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw SceneError(path_ + (key.empty() ? "" : "." + key) + ": " + msg);
  }
  [[noreturn]] void fail_here(const std::string& msg) const { throw SceneError(path_ + ": " + msg); }

  void require_object() const {
    if (!j_.is_object()) fail_here("expected an object");
  }
  void require_array() const {
    if (!j_.is_array()) fail_here("expected an array");
  }

  double number(const char* key) const {
    const json& v = child(key).raw();
    if (v.is_string()) {
      const std::string s = v.get<std::string>();
      if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
    }
    if (!v.is_number()) fail(key, "expected a number");
    return v.get<double>();
  }
  double number(const char* key, double fallback) const { return has(key) ? number(key) : fallback; }

  std::int64_t integer(const char* key) const {
    const json& v = child(key).raw();
    if (!v.is_number_integer() && !v.is_number_unsigned()) fail(key, "expected an integer");
    return v.get<std::int64_t>();
  }
  std::int64_t integer(const char* key, std::int64_t fallback) const { return has(key) ? integer(key) : fallback; }

  bool boolean(const char* key, bool fallback) const {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    return v.get<bool>();
  }

  std::string string(const char* key) const {
    const json& v = child(key).raw();
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }
  std::string string(const char* key, const std::string& fallback) const { return has(key) ? string(key) : fallback; }

  Vec3 vec3(const char* key) const {
    const JsonReader c = child(key);
    if (!c.raw().is_array() || (c.size() != 3 && c.size() != 2)) c.fail_here("expected an array of 2 or 3 numbers");
    Vec3 out = Vec3::Zero();
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (!c.raw()[i].is_number()) c.at(i).fail_here("expected a number");
      out(static_cast<int>(i)) = c.raw()[i].get<double>();
    }
    return out;
  }
  Vec3 vec3(const char* key, const Vec3& fallback) const { return has(key) ? vec3(key) : fallback; }

 private:
  const json& j_;
  std::string path_;
};

inline json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline json number_json(double v) {
  if (std::isinf(v)) return v > 0 ? json("inf") : json("-inf");
  return json(v);
}

template <class Map>
[[noreturn]] inline void unknown_tag(const JsonReader& r, const char* key, const std::string& tag,
                                     const Map& alternatives) {
  std::string list;
  for (const auto& [name, _] : alternatives) list += (list.empty() ? "" : ", ") + name;
  r.fail(key, "unknown tag \"" + tag + "\" (valid: " + list + ")");
}

inline int parse_axis(const JsonReader& r, const char* key, int fallback) {
  if (!r.has(key)) return fallback;
  const json& v = r.raw().at(key);
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "x") return 0;
    if (s == "y") return 1;
    if (s == "z") return 2;
  } else if (v.is_number_integer()) {
    const int a = v.get<int>();
    if (a >= 0 && a <= 2) return a;
  }
  r.fail(key, "axis must be x, y, z or 0..2");
}

inline ElasticParams parse_elastic(const JsonReader& r, double E, double nu, const char* key) {
  try {
    return ElasticParams::from_young_poisson(E, nu);
  } catch (const std::invalid_argument& e) {
    r.fail(key, std::string("out of range: ") + e.what());
  }
}

inline void check_positive(const JsonReader& r, const char* key, double v) {
  if (!(v > 0.0)) r.fail(key, "out of range: must be positive");
}

inline PlasticModel parse_plastic_named(const JsonReader& r) {
  r.require_object();
  const std::string type = r.string("type");
  if (type == "none") return NoPlasticity{};
  if (type == "von_mises") {
    VonMises vm{r.number("yield_stress")};
    check_positive(r, "yield_stress", vm.yield_stress);
    return vm;
  }
  if (type == "drucker_prager") {
    DruckerPrager dp{r.number("friction_angle"), r.number("cohesion", 0.0)};
    if (!(dp.friction_angle_deg >= 0.0 && dp.friction_angle_deg < 90.0))
      r.fail("friction_angle", "out of range: must lie in [0, 90) degrees");
    if (!(dp.cohesion >= 0.0)) r.fail("cohesion", "out of range: must be >= 0");
    return dp;
  }
  if (type == "nacc") {
    CamClay cc{r.number("alpha0"), r.number("beta"), r.number("xi"), r.number("M")};
    if (!(cc.beta >= 0.0)) r.fail("beta", "out of range: must be >= 0");
    if (!(cc.xi >= 0.0)) r.fail("xi", "out of range: must be >= 0");
    check_positive(r, "M", cc.M);
    return cc;
  }
  if (type == "herschel_bulkley") {
    HerschelBulkley hb{r.number("yield_stress"), r.number("exponent"), r.number("viscosity")};
    if (!(hb.yield_stress >= 0.0)) r.fail("yield_stress", "out of range: must be >= 0");
    check_positive(r, "exponent", hb.exponent);
    check_positive(r, "viscosity", hb.viscosity);
    return hb;
  }
  if (type == "snow") {
    SnowClamp sc{r.number("critical_compression"), r.number("critical_stretch"), r.number("hardening")};
    check_positive(r, "critical_compression", sc.critical_compression);
    check_positive(r, "critical_stretch", sc.critical_stretch);
    if (!(sc.critical_compression < 1.0)) r.fail("critical_compression", "out of range: must be < 1");
    return sc;
  }
  static const std::map<std::string, int> kTags{{"none", 0},  {"von_mises", 0}, {"drucker_prager", 0},
                                                {"nacc", 0},  {"herschel_bulkley", 0}, {"snow", 0}};
  unknown_tag(r, "type", type, kTags);
}

/// Flat parameter tuples: (rho, E, nu, model parameters...).
inline MaterialModel parse_material_tuple(const JsonReader& r) {
  static const std::map<std::string, std::size_t> kArity{{"elastic", 3}, {"VM", 4},  {"DP", 5},
                                                         {"NACC", 7},    {"HB", 6},  {"snow", 6}};
  const std::string tag = r.string("model");
  const auto it = kArity.find(tag);
  if (it == kArity.end()) unknown_tag(r, "model", tag, kArity);
  const JsonReader params = r.child("parameters");
  params.require_array();
  if (params.size() != it->second)
    params.fail_here("model " + tag + " expects " + std::to_string(it->second) + " parameters, got " +
                     std::to_string(params.size()));
  std::vector<double> v;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.raw()[i].is_number()) params.at(i).fail_here("expected a number");
    v.push_back(params.raw()[i].get<double>());
  }
  MaterialModel m;
  m.density = v[0];
  if (!(m.density > 0.0)) params.at(0).fail_here("out of range: density must be positive");
  m.elastic = parse_elastic(params, v[1], v[2], "[1..2]");
  if (tag == "VM") {
    m.plastic = VonMises{v[3]};
  } else if (tag == "DP") {
    m.plastic = DruckerPrager{v[3], v[4]};
  } else if (tag == "NACC") {
    m.plastic = CamClay{v[3], v[4], v[5], v[6]};
  } else if (tag == "HB") {
    m.plastic = HerschelBulkley{v[3], v[4], v[5]};
  } else if (tag == "snow") {
    m.plastic = SnowClamp{v[3], v[4], v[5]};
    if (!(v[3] > 0.0 && v[4] > 0.0)) params.fail_here("out of range: snow thresholds must be positive");
  }
  return m;
}

inline MaterialEntry parse_material(const JsonReader& r) {
  r.require_object();
  MaterialEntry entry;
  entry.name = r.string("name");
  if (r.has("model")) {
    entry.model = parse_material_tuple(r);
    return entry;
  }
  entry.model.density = r.number("density");
  if (!(entry.model.density > 0.0)) r.fail("density", "out of range: must be positive");
  const double E = r.number("youngs_modulus");
  const double nu = r.number("poisson_ratio");
  if (!(E > 0.0)) r.fail("youngs_modulus", "out of range: must be positive");
  entry.model.elastic = parse_elastic(r, E, nu, "poisson_ratio");
  if (r.has("plasticity")) entry.model.plastic = parse_plastic_named(r.child("plasticity"));
  return entry;
}

inline json plastic_to_json(const PlasticModel& p) {
  json j;
  j["type"] = plastic_model_name(p);
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, VonMises>) {
          j["yield_stress"] = m.yield_stress;
        } else if constexpr (std::is_same_v<T, DruckerPrager>) {
          j["friction_angle"] = m.friction_angle_deg;
          j["cohesion"] = m.cohesion;
        } else if constexpr (std::is_same_v<T, CamClay>) {
          j["alpha0"] = m.alpha0;
          j["beta"] = m.beta;
          j["xi"] = m.xi;
          j["M"] = m.M;
        } else if constexpr (std::is_same_v<T, HerschelBulkley>) {
          j["yield_stress"] = m.yield_stress;
          j["exponent"] = m.exponent;
          j["viscosity"] = m.viscosity;
        } else if constexpr (std::is_same_v<T, SnowClamp>) {
          j["critical_compression"] = m.critical_compression;
          j["critical_stretch"] = m.critical_stretch;
          j["hardening"] = m.hardening;
        }
      },
      p);
  return j;
}

inline Shape parse_shape(const JsonReader& r) {
  r.require_object();
  const std::string type = r.string("type");
  if (type == "box") return Shape::box(r.vec3("min"), r.vec3("max"));
  if (type == "sphere") {
    const double radius = r.number("radius");
    check_positive(r, "radius", radius);
    return Shape::sphere(r.vec3("center"), radius);
  }
  if (type == "cylinder") {
    const double radius = r.number("radius");
    const double height = r.number("height");
    check_positive(r, "radius", radius);
    check_positive(r, "height", height);
    return Shape::cylinder(r.vec3("base"), radius, height, parse_axis(r, "axis", 1));
  }
  if (type == "union") {
    const JsonReader parts = r.child("children");
    parts.require_array();
    std::vector<Shape> children;
    for (std::size_t i = 0; i < parts.size(); ++i) children.push_back(parse_shape(parts.at(i)));
    return Shape::make_union(std::move(children));
  }
  static const std::map<std::string, int> kTags{{"box", 0}, {"sphere", 0}, {"cylinder", 0}, {"union", 0}};
  unknown_tag(r, "type", type, kTags);
}

inline json shape_to_json(const Shape& s) {
  json j;
  switch (s.kind) {
    case Shape::Kind::Box:
      j = {{"type", "box"}, {"min", to_json(s.lo)}, {"max", to_json(s.hi)}};
      break;
    case Shape::Kind::Sphere:
      j = {{"type", "sphere"}, {"center", to_json(s.center)}, {"radius", s.radius}};
      break;
    case Shape::Kind::Cylinder:
      j = {{"type", "cylinder"}, {"base", to_json(s.center)}, {"radius", s.radius},
           {"height", s.height}, {"axis", s.axis}};
      break;
    case Shape::Kind::Union: {
      json children = json::array();
      for (const auto& c : s.children) children.push_back(shape_to_json(c));
      j = {{"type", "union"}, {"children", children}};
      break;
    }
  }
  return j;
}

inline Collider parse_collider(const JsonReader& r) {
  r.require_object();
  const std::string type = r.string("type");
  Collider c;
  if (type == "half_space") {
    c.kind = Collider::Kind::HalfSpace;
    c.origin = r.vec3("point");
    const Vec3 n = r.vec3("normal");
    if (!(n.norm() > 0.0)) r.fail("normal", "out of range: normal must be nonzero");
    c.normal = n.normalized();
  } else if (type == "sphere") {
    c.kind = Collider::Kind::Sphere;
    c.origin = r.vec3("center");
    c.radius = r.number("radius");
    check_positive(r, "radius", c.radius);
  } else if (type == "box") {
    c.kind = Collider::Kind::Box;
    c.origin = r.vec3("center");
    c.half_extents = r.vec3("half_extents");
    if (!(c.half_extents.minCoeff() > 0.0)) r.fail("half_extents", "out of range: must be positive");
    if (r.has("rotation")) {
      const JsonReader rot = r.child("rotation");
      rot.require_array();
      if (rot.size() != 9) rot.fail_here("expected 9 numbers (row-major rotation)");
      for (std::size_t i = 0; i < 9; ++i) c.rotation(static_cast<int>(i / 3), static_cast<int>(i % 3)) = rot.raw()[i].get<double>();
    }
  } else if (type == "cylinder") {
    c.kind = Collider::Kind::Cylinder;
    c.origin = r.vec3("base");
    c.radius = r.number("radius");
    c.height = r.number("height");
    c.axis = parse_axis(r, "axis", 1);
    check_positive(r, "radius", c.radius);
    check_positive(r, "height", c.height);
  } else {
    static const std::map<std::string, int> kTags{{"half_space", 0}, {"sphere", 0}, {"box", 0}, {"cylinder", 0}};
    unknown_tag(r, "type", type, kTags);
  }
  c.inverted = r.boolean("inverted", false);
  c.friction = r.number("friction", 0.0);
  if (!(c.friction >= 0.0)) r.fail("friction", "out of range: must be >= 0");
  c.velocity = r.vec3("velocity", Vec3::Zero());
  return c;
}

inline json collider_to_json(const Collider& c) {
  json j;
  switch (c.kind) {
    case Collider::Kind::HalfSpace:
      j = {{"type", "half_space"}, {"point", to_json(c.origin)}, {"normal", to_json(c.normal)}};
      break;
    case Collider::Kind::Sphere:
      j = {{"type", "sphere"}, {"center", to_json(c.origin)}, {"radius", c.radius}};
      break;
    case Collider::Kind::Box: {
      json rot = json::array();
      for (int i = 0; i < 9; ++i) rot.push_back(c.rotation(i / 3, i % 3));
      j = {{"type", "box"}, {"center", to_json(c.origin)}, {"half_extents", to_json(c.half_extents)},
           {"rotation", rot}};
      break;
    }
    case Collider::Kind::Cylinder:
      j = {{"type", "cylinder"}, {"base", to_json(c.origin)}, {"radius", c.radius},
           {"height", c.height}, {"axis", c.axis}};
      break;
  }
  j["inverted"] = c.inverted;
  j["friction"] = number_json(c.friction);
  j["velocity"] = to_json(c.velocity);
  return j;
}

inline SolverConfig parse_solver(const JsonReader& r) {
  r.require_object();
  SolverConfig c;
  c.dt = r.number("dt");
  c.iterations = static_cast<int>(r.integer("iterations"));
  const std::string backend = r.string("backend", "gs");
  if (backend == "gs")
    c.backend = Backend::ColoredGaussSeidel;
  else if (backend == "jacobi")
    c.backend = Backend::Jacobi;
  else
    unknown_tag(r, "backend", backend, std::map<std::string, int>{{"gs", 0}, {"jacobi", 0}});
  c.xsph_c = r.number("xsph_c", 0.01);
  c.gap_factor = r.number("gap_factor", 0.25);
  c.gravity = r.vec3("gravity", Vec3(0.0, -9.81, 0.0));
  c.implicit_plasticity = r.boolean("implicit_plasticity", true);
  c.position_correction = r.boolean("position_correction", true);
  const std::string mode = r.string("residual", "final");
  if (mode == "off")
    c.residual_mode = ResidualMode::Off;
  else if (mode == "final")
    c.residual_mode = ResidualMode::Final;
  else if (mode == "every")
    c.residual_mode = ResidualMode::EveryIteration;
  else
    unknown_tag(r, "residual", mode, std::map<std::string, int>{{"off", 0}, {"final", 0}, {"every", 0}});
  if (r.has("residual_tolerance")) c.residual_tolerance = r.number("residual_tolerance");
  c.max_iterations = static_cast<int>(r.integer("max_iterations", 500));
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    r.fail_here(std::string("out of range: ") + e.what());
  }
  return c;
}

inline json solver_to_json(const SolverConfig& c) {
  json j = {{"dt", c.dt},
            {"iterations", c.iterations},
            {"backend", c.backend == Backend::Jacobi ? "jacobi" : "gs"},
            {"xsph_c", c.xsph_c},
            {"gap_factor", c.gap_factor},
            {"gravity", to_json(c.gravity)},
            {"implicit_plasticity", c.implicit_plasticity},
            {"position_correction", c.position_correction},
            {"residual", c.residual_mode == ResidualMode::Off     ? "off"
                         : c.residual_mode == ResidualMode::Final ? "final"
                                                                  : "every"},
            {"max_iterations", c.max_iterations}};
  if (c.residual_tolerance) j["residual_tolerance"] = *c.residual_tolerance;
  return j;
}

}  // namespace detail

inline SceneSpec parse_scene_json(const nlohmann::json& root, const std::string& origin = "scene") {
  using detail::JsonReader;
  const JsonReader r(root, origin);
  r.require_object();
  SceneSpec spec;
  spec.version = static_cast<int>(r.integer("version"));
  if (spec.version != 1) r.fail("version", "unsupported scene version " + std::to_string(spec.version));
  spec.name = r.string("name", "");
  spec.dimension = static_cast<int>(r.integer("dimension", 3));
  if (spec.dimension != 2 && spec.dimension != 3) r.fail("dimension", "out of range: must be 2 or 3");
  spec.particle_radius = r.number("particle_radius");
  detail::check_positive(r, "particle_radius", spec.particle_radius);
  spec.seed = static_cast<std::uint64_t>(r.integer("seed", 1));
  spec.duration = r.number("duration");
  detail::check_positive(r, "duration", spec.duration);
  spec.frame_rate = r.number("frame_rate", 24.0);
  detail::check_positive(r, "frame_rate", spec.frame_rate);
  spec.solver = detail::parse_solver(r.child("solver"));

  const JsonReader mats = r.child("materials");
  mats.require_array();
  for (std::size_t i = 0; i < mats.size(); ++i) {
    MaterialEntry m = detail::parse_material(mats.at(i));
    if (spec.material_index(m.name) >= 0) mats.at(i).fail("name", "duplicate material \"" + m.name + "\"");
    spec.materials.push_back(std::move(m));
  }

  const JsonReader bodies = r.child("bodies");
  bodies.require_array();
  if (bodies.size() == 0) bodies.fail_here("at least one body is required");
  for (std::size_t i = 0; i < bodies.size(); ++i) {
    const JsonReader b = bodies.at(i);
    b.require_object();
    BodySpec body;
    body.shape = detail::parse_shape(b.child("shape"));
    body.material = b.string("material");
    if (spec.material_index(body.material) < 0) b.fail("material", "unknown material \"" + body.material + "\"");
    body.velocity = b.vec3("velocity", Vec3::Zero());
    const std::string sampling = b.string("sampling", "poisson");
    if (sampling == "poisson")
      body.sampling = Sampling::Poisson;
    else if (sampling == "lattice")
      body.sampling = Sampling::Lattice;
    else
      detail::unknown_tag(b, "sampling", sampling, std::map<std::string, int>{{"poisson", 0}, {"lattice", 0}});
    if (b.has("spacing")) {
      body.spacing = b.number("spacing");
      detail::check_positive(b, "spacing", *body.spacing);
    }
    body.fixed = b.boolean("fixed", false);
    spec.bodies.push_back(std::move(body));
  }

  if (r.has("colliders")) {
    const JsonReader cols = r.child("colliders");
    cols.require_array();
    for (std::size_t i = 0; i < cols.size(); ++i) spec.colliders.push_back(detail::parse_collider(cols.at(i)));
  }
  return spec;
}

inline SceneSpec parse_scene_text(const std::string& text, const std::string& origin = "scene") {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SceneError(origin + ": invalid JSON: " + e.what());
  }
  return parse_scene_json(root, origin);
}

inline SceneSpec parse_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SceneError(path.string() + ": cannot open scene file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scene_text(ss.str(), path.string());
}

inline nlohmann::json serialize_scene_json(const SceneSpec& spec) {
  using detail::json;
  json j;
  j["version"] = spec.version;
  j["name"] = spec.name;
  j["dimension"] = spec.dimension;
  j["particle_radius"] = spec.particle_radius;
  j["seed"] = spec.seed;
  j["duration"] = spec.duration;
  j["frame_rate"] = spec.frame_rate;
  j["solver"] = detail::solver_to_json(spec.solver);
  json mats = json::array();
  for (const auto& m : spec.materials) {
    json mj = {{"name", m.name},
               {"density", m.model.density},
               {"youngs_modulus", m.model.elastic.youngs_modulus},
               {"poisson_ratio", m.model.elastic.poisson_ratio},
               {"plasticity", detail::plastic_to_json(m.model.plastic)}};
    mats.push_back(mj);
  }
  j["materials"] = mats;
  json bodies = json::array();
  for (const auto& b : spec.bodies) {
    json bj = {{"shape", detail::shape_to_json(b.shape)},
               {"material", b.material},
               {"velocity", detail::to_json(b.velocity)},
               {"sampling", b.sampling == Sampling::Lattice ? "lattice" : "poisson"},
               {"fixed", b.fixed}};
    if (b.spacing) bj["spacing"] = *b.spacing;
    bodies.push_back(bj);
  }
  j["bodies"] = bodies;
  json cols = json::array();
  for (const auto& c : spec.colliders) cols.push_back(detail::collider_to_json(c));
  j["colliders"] = cols;
  return j;
}

inline std::string serialize_scene(const SceneSpec& spec) { return serialize_scene_json(spec).dump(2); }

/// Seeds every body. Rest volume per particle is the body's measure divided
/// by its sample count, so the particles of a body partition its volume.
inline ParticleSet build_particles(const SceneSpec& spec) {
  ParticleSet state;
  std::uint64_t body_seed = spec.seed;
  for (const auto& body : spec.bodies) {
    const double spacing = body.spacing.value_or(spec.particle_radius);
    std::vector<Vec3> pts = body.sampling == Sampling::Lattice
                                ? lattice_sample(body.shape, spacing, spec.dimension)
                                : poisson_disk_sample(body.shape, spacing, body_seed, spec.dimension);
    body_seed = body_seed * 6364136223846793005ull + 1442695040888963407ull;
    if (pts.empty()) continue;
    const double measure = body.shape.measure(spec.dimension);
    const double volume = measure / static_cast<double>(pts.size());
    const int mat = spec.material_index(body.material);
    const MaterialModel& model = spec.materials[static_cast<std::size_t>(mat)].model;
    for (const auto& p : pts)
      state.push_back(p, body.velocity, volume, model.density, mat, initial_hardening(model), body.fixed);
  }
  if (spec.dimension == 2)
    for (auto& v : state.v) v.z() = 0.0;
  return state;
}

// ---------------------------------------------------------------------------
// Frames

enum FrameField : std::uint32_t {
  kFramePositions = 1u << 0,
  kFrameVelocities = 1u << 1,
  kFrameDetF = 1u << 2,
  kFrameYield = 1u << 3,
  kFrameMass = 1u << 4,
};

enum class FrameFormat { Binary, Csv };

struct Frame {
  std::uint64_t step = 0;
  double time = 0.0;
  std::vector<Vec3> positions;
  std::vector<Vec3> velocities;     // optional
  std::vector<double> det_F;        // optional
  std::vector<double> yield_flags;  // optional, 0 or 1
  std::vector<double> mass;         // optional

  std::uint32_t field_mask() const {
    std::uint32_t m = kFramePositions;
    if (!velocities.empty()) m |= kFrameVelocities;
    if (!det_F.empty()) m |= kFrameDetF;
    if (!yield_flags.empty()) m |= kFrameYield;
    if (!mass.empty()) m |= kFrameMass;
    return m;
  }
  bool consistent() const {
    const std::size_t n = positions.size();
    const auto ok = [n](std::size_t s) { return s == 0 || s == n; };
    return ok(velocities.size()) && ok(det_F.size()) && ok(yield_flags.size()) && ok(mass.size());
  }
  bool operator==(const Frame&) const = default;
};

/// Frame from the particle state. Yield flags mark particles on or outside
/// their yield surface (within 1e-9).
inline Frame make_frame(const ParticleSet& state, std::span<const MaterialModel> materials,
                        std::uint64_t step, double time, bool with_velocity = true) {
  Frame f;
  f.step = step;
  f.time = time;
  f.positions = state.x;
  if (with_velocity) f.velocities = state.v;
  f.det_F.resize(state.size());
  f.mass = state.mass;
  bool any_plastic = false;
  for (const auto& m : materials) any_plastic = any_plastic || has_plasticity(m);
  if (any_plastic) f.yield_flags.assign(state.size(), 0.0);
  for (std::size_t p = 0; p < state.size(); ++p) {
    f.det_F[p] = state.F[p].determinant();
    const MaterialModel& m = materials[static_cast<std::size_t>(state.material[p])];
    if (any_plastic && has_plasticity(m))
      f.yield_flags[p] = yield_value(m, state.F[p], state.hardening[p]) >= -1e-9 ? 1.0 : 0.0;
  }
  return f;
}

namespace detail {

inline constexpr char kFrameMagic[4] = {'X', 'P', 'B', 'I'};
inline constexpr std::uint32_t kFrameVersion = 1;

template <class T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(std::istream& in, const std::string& path) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw IoError(path + ": truncated frame file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline void write_frame(const Frame& frame, const std::filesystem::path& path,
                        FrameFormat format = FrameFormat::Binary) {
  if (!frame.consistent()) throw std::invalid_argument("write_frame: inconsistent array lengths");
  std::ofstream out(path, format == FrameFormat::Binary ? std::ios::binary : std::ios::out);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  const std::uint32_t mask = frame.field_mask();
  const std::size_t n = frame.positions.size();
  if (format == FrameFormat::Binary) {
    out.write(detail::kFrameMagic, 4);
    detail::put_le<std::uint32_t>(out, detail::kFrameVersion);
    detail::put_le<std::uint64_t>(out, n);
    detail::put_le<std::uint32_t>(out, mask);
    detail::put_le<std::uint64_t>(out, frame.step);
    detail::put_le<double>(out, frame.time);
    const auto vecs = [&](const std::vector<Vec3>& a) {
      for (const auto& v : a)
        for (int k = 0; k < 3; ++k) detail::put_le<double>(out, v(k));
    };
    const auto scalars = [&](const std::vector<double>& a) {
      for (double v : a) detail::put_le<double>(out, v);
    };
    vecs(frame.positions);
    if (mask & kFrameVelocities) vecs(frame.velocities);
    if (mask & kFrameDetF) scalars(frame.det_F);
    if (mask & kFrameYield) scalars(frame.yield_flags);
    if (mask & kFrameMass) scalars(frame.mass);
  } else {
    out << "# xpbi frame v" << detail::kFrameVersion << " step=" << frame.step
        << " time=" << detail::fmt17(frame.time) << " count=" << n << " mask=" << mask << "\n";
    out << "x,y,z";
    if (mask & kFrameVelocities) out << ",vx,vy,vz";
    if (mask & kFrameDetF) out << ",det_F";
    if (mask & kFrameYield) out << ",yield";
    if (mask & kFrameMass) out << ",mass";
    out << "\n";
    for (std::size_t i = 0; i < n; ++i) {
      const auto& x = frame.positions[i];
      out << detail::fmt17(x.x()) << ',' << detail::fmt17(x.y()) << ',' << detail::fmt17(x.z());
      if (mask & kFrameVelocities) {
        const auto& v = frame.velocities[i];
        out << ',' << detail::fmt17(v.x()) << ',' << detail::fmt17(v.y()) << ',' << detail::fmt17(v.z());
      }
      if (mask & kFrameDetF) out << ',' << detail::fmt17(frame.det_F[i]);
      if (mask & kFrameYield) out << ',' << detail::fmt17(frame.yield_flags[i]);
      if (mask & kFrameMass) out << ',' << detail::fmt17(frame.mass[i]);
      out << '\n';
    }
  }
  out.flush();
  if (!out) throw IoError(path.string() + ": write failed");
}

inline Frame read_frame(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open for reading");
  const std::string p = path.string();
  char magic[4] = {};
  in.read(magic, 4);
  Frame f;
  if (in && std::equal(magic, magic + 4, detail::kFrameMagic)) {
    if (detail::get_le<std::uint32_t>(in, p) != detail::kFrameVersion) throw IoError(p + ": unsupported frame version");
    const auto n = detail::get_le<std::uint64_t>(in, p);
    const auto mask = detail::get_le<std::uint32_t>(in, p);
    f.step = detail::get_le<std::uint64_t>(in, p);
    f.time = detail::get_le<double>(in, p);
    const auto vecs = [&](std::vector<Vec3>& a) {
      a.resize(n);
      for (auto& v : a)
        for (int k = 0; k < 3; ++k) v(k) = detail::get_le<double>(in, p);
    };
    const auto scalars = [&](std::vector<double>& a) {
      a.resize(n);
      for (auto& v : a) v = detail::get_le<double>(in, p);
    };
    vecs(f.positions);
    if (mask & kFrameVelocities) vecs(f.velocities);
    if (mask & kFrameDetF) scalars(f.det_F);
    if (mask & kFrameYield) scalars(f.yield_flags);
    if (mask & kFrameMass) scalars(f.mass);
    return f;
  }

  // CSV
  in.clear();
  in.seekg(0);
  std::string header;
  std::getline(in, header);
  std::uint64_t count = 0;
  std::uint32_t mask = 0;
  if (std::sscanf(header.c_str(), "# xpbi frame v%*u step=%" SCNu64 " time=%*s count=%" SCNu64 " mask=%u",
                  &f.step, &count, &mask) != 3)
    throw IoError(p + ": not a frame file");
  const auto tpos = header.find("time=");
  f.time = std::strtod(header.c_str() + tpos + 5, nullptr);
  std::string line;
  std::getline(in, line);  // column names
  const auto read_row = [&](std::vector<double>& vals) {
    if (!std::getline(in, line)) throw IoError(p + ": truncated frame file");
    vals.clear();
    const char* c = line.c_str();
    while (*c) {
      char* end = nullptr;
      vals.push_back(std::strtod(c, &end));
      if (end == c) throw IoError(p + ": malformed number");
      c = *end == ',' ? end + 1 : end;
    }
  };
  std::vector<double> vals;
  for (std::uint64_t i = 0; i < count; ++i) {
    read_row(vals);
    std::size_t k = 0;
    const auto take = [&]() {
      if (k >= vals.size()) throw IoError(p + ": missing column");
      return vals[k++];
    };
    Vec3 x;
    x.x() = take(), x.y() = take(), x.z() = take();
    f.positions.push_back(x);
    if (mask & kFrameVelocities) {
      Vec3 v;
      v.x() = take(), v.y() = take(), v.z() = take();
      f.velocities.push_back(v);
    }
    if (mask & kFrameDetF) f.det_F.push_back(take());
    if (mask & kFrameYield) f.yield_flags.push_back(take());
    if (mask & kFrameMass) f.mass.push_back(take());
  }
  return f;
}

// ---------------------------------------------------------------------------
// Metrics

struct DistributionMetrics {
  bool defined = false;  // false for fewer than 2 particles
  double nn_mean = 0.0;
  double nn_std = 0.0;
  double max_density = 0.0;
  std::vector<double> nn_distance;
  std::vector<double> density;
};

/// Nearest-neighbor distance statistics and the SPH density estimate
/// rho_p = sum_{b in N_p + p} m_b W(|x_p - x_b|).
inline DistributionMetrics compute_metrics(std::span<const Vec3> x, std::span<const double> mass,
                                           const NeighborTable& table, const KernelSpec& kernel) {
  DistributionMetrics m;
  const std::size_t n = x.size();
  m.density.assign(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    double rho = mass[p] * kernel_value(kernel, 0.0);
    for (auto b : table.of(p)) rho += mass[b] * kernel_value(kernel, (x[p] - x[b]).norm());
    m.density[p] = rho;
    m.max_density = std::max(m.max_density, rho);
  }
  if (n < 2) return m;
  m.defined = true;
  m.nn_distance.assign(n, std::numeric_limits<double>::infinity());
  for (std::size_t p = 0; p < n; ++p) {
    double best = std::numeric_limits<double>::infinity();
    for (auto b : table.of(p)) best = std::min(best, (x[p] - x[b]).squaredNorm());
    if (!std::isfinite(best))  // isolated beyond the support: scan everything
      for (std::size_t b = 0; b < n; ++b)
        if (b != p) best = std::min(best, (x[p] - x[b]).squaredNorm());
    m.nn_distance[p] = std::sqrt(best);
  }
  double sum = 0.0;
  for (double d : m.nn_distance) sum += d;
  m.nn_mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (double d : m.nn_distance) var += (d - m.nn_mean) * (d - m.nn_mean);
  m.nn_std = std::sqrt(var / static_cast<double>(n));
  return m;
}

inline DistributionMetrics compute_metrics(const ParticleSet& state, const NeighborTable& table,
                                           const KernelSpec& kernel) {
  return compute_metrics(state.x, state.mass, table, kernel);
}

/// FNV-1a over the raw bytes of positions, velocities and F.
inline std::uint64_t state_hash(const ParticleSet& state) {
  std::uint64_t h = 1469598103934665603ull;
  const auto mix = [&](const void* data, std::size_t bytes) {
    const auto* c = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= c[i];
      h *= 1099511628211ull;
    }
  };
  for (std::size_t p = 0; p < state.size(); ++p) {
    mix(state.x[p].data(), sizeof(double) * 3);
    mix(state.v[p].data(), sizeof(double) * 3);
    mix(state.F[p].data(), sizeof(double) * 9);
    mix(&state.hardening[p], sizeof(double));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Scene-level driver

class Simulation {
 public:
  explicit Simulation(SceneSpec spec, int threads = 1)
      : spec_(std::move(spec)),
        state_(build_particles(spec_)),
        solver_(KernelSpec::make(spec_.particle_radius, spec_.dimension), spec_.material_table(),
                spec_.colliders, with_threads(spec_.solver, threads)) {
    if (spec_.dimension == 2) {
      // Gravity and velocities live in the xy plane.
      solver_.config().gravity.z() = 0.0;
    }
  }

  const SceneSpec& spec() const { return spec_; }
  ParticleSet& state() { return state_; }
  const ParticleSet& state() const { return state_; }
  Solver& solver() { return solver_; }
  double time() const { return time_; }
  std::uint64_t steps() const { return steps_; }

  StepDiagnostics step() {
    StepDiagnostics d = solver_.step(state_, time_);
    ++steps_;
    time_ = static_cast<double>(steps_) * solver_.config().dt;
    return d;
  }

 private:
  static SolverConfig with_threads(SolverConfig c, int threads) {
    c.threads = threads;
    return c;
  }

  SceneSpec spec_;
  ParticleSet state_;
  Solver solver_;
  double time_ = 0.0;
  std::uint64_t steps_ = 0;
};

}  // namespace xpbi
