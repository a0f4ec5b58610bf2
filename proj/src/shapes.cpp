#include "eqreg/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>

namespace eqreg {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kSurfaceTol = 1e-9;

Vec3 random_direction(Rng& rng) {
  Vec3 d;
  do {
    d = Vec3(rng.normal(), rng.normal(), rng.normal());
  } while (d.squaredNorm() < 1e-24);
  return d.normalized();
}

Vec3 local_surface_point(const Primitive& prim, Rng& rng) {
  const Vec3& s = prim.size;
  switch (prim.kind) {
    case PrimitiveKind::Sphere:
      return s(0) * random_direction(rng);
    case PrimitiveKind::Box: {
      const double ax = s(1) * s(2);
      const double ay = s(0) * s(2);
      const double az = s(0) * s(1);
      const double pick = rng.uniform(0.0, ax + ay + az);
      const int axis = pick < ax ? 0 : (pick < ax + ay ? 1 : 2);
      Vec3 p;
      for (int c = 0; c < 3; ++c) p(c) = rng.uniform(-s(c), s(c));
      p(axis) = rng.uniform() < 0.5 ? -s(axis) : s(axis);
      return p;
    }
    case PrimitiveKind::Capsule: {
      const double r = s(0);
      const double h = s(1);
      const double side = 2.0 * kPi * r * 2.0 * h;
      const double caps = 4.0 * kPi * r * r;
      if (rng.uniform(0.0, side + caps) < side) {
        const double a = rng.uniform(0.0, 2.0 * kPi);
        return {r * std::cos(a), r * std::sin(a), rng.uniform(-h, h)};
      }
      Vec3 d = r * random_direction(rng);
      d(2) += d(2) >= 0.0 ? h : -h;
      return d;
    }
    case PrimitiveKind::Cylinder: {
      const double r = s(0);
      const double h = s(1);
      const double side = 2.0 * kPi * r * 2.0 * h;
      const double caps = 2.0 * kPi * r * r;
      const double a = rng.uniform(0.0, 2.0 * kPi);
      if (rng.uniform(0.0, side + caps) < side) return {r * std::cos(a), r * std::sin(a), rng.uniform(-h, h)};
      const double rad = r * std::sqrt(rng.uniform());
      return {rad * std::cos(a), rad * std::sin(a), rng.uniform() < 0.5 ? -h : h};
    }
  }
  return Vec3::Zero();
}

const char* op_name(CsgOp op) { return op == CsgOp::Union ? "union" : "difference"; }

const char* kind_name(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::Sphere: return "sphere";
    case PrimitiveKind::Box: return "box";
    case PrimitiveKind::Capsule: return "capsule";
    case PrimitiveKind::Cylinder: return "cylinder";
  }
  return "sphere";
}

PrimitiveKind parse_kind(const std::string& s) {
  if (s == "sphere") return PrimitiveKind::Sphere;
  if (s == "box") return PrimitiveKind::Box;
  if (s == "capsule") return PrimitiveKind::Capsule;
  if (s == "cylinder") return PrimitiveKind::Cylinder;
  throw Error(Errc::Io, "unknown primitive kind '" + s + "'");
}

CsgOp parse_op(const std::string& s) {
  if (s == "union") return CsgOp::Union;
  if (s == "difference") return CsgOp::Difference;
  throw Error(Errc::Io, "unknown CSG op '" + s + "'");
}

Primitive random_primitive(Rng& rng, double scale) {
  Primitive p;
  p.kind = static_cast<PrimitiveKind>(rng.index(4));
  p.rotation = random_rotation(rng);
  switch (p.kind) {
    case PrimitiveKind::Sphere:
      p.size = Vec3(rng.uniform(0.25, 0.55), 0.0, 0.0) * scale;
      break;
    case PrimitiveKind::Box:
      p.size = Vec3(rng.uniform(0.15, 0.6), rng.uniform(0.15, 0.6), rng.uniform(0.15, 0.6)) * scale;
      break;
    case PrimitiveKind::Capsule:
    case PrimitiveKind::Cylinder:
      p.size = Vec3(rng.uniform(0.12, 0.35), rng.uniform(0.2, 0.6), 0.0) * scale;
      break;
  }
  return p;
}

double surface_acceptance(const ShapeModel& shape, Rng& rng, int trials) {
  double total_area = 0.0;
  for (const auto& n : shape.nodes()) total_area += n.primitive.surface_area();
  int hits = 0;
  for (int t = 0; t < trials; ++t) {
    double pick = rng.uniform(0.0, total_area);
    const Primitive* chosen = &shape.nodes().back().primitive;
    for (const auto& n : shape.nodes()) {
      pick -= n.primitive.surface_area();
      if (pick < 0.0) {
        chosen = &n.primitive;
        break;
      }
    }
    if (std::abs(shape.signed_distance(chosen->sample_surface(rng))) <= kSurfaceTol) ++hits;
  }
  return static_cast<double>(hits) / trials;
}

ShapeModel random_shape(Rng& rng) {
  for (;;) {
    const Index count = 2 + static_cast<Index>(rng.index(4));
    std::vector<CsgNode> nodes;
    CsgNode base;
    base.primitive = random_primitive(rng, 1.0);
    nodes.push_back(base);
    for (Index k = 1; k < count; ++k) {
      CsgNode node;
      node.op = rng.uniform() < 0.7 ? CsgOp::Union : CsgOp::Difference;
      const Primitive& anchor = nodes[rng.index(nodes.size())].primitive;
      node.primitive = random_primitive(rng, node.op == CsgOp::Union ? 0.9 : 0.6);
      // Attach near the anchor's surface so parts overlap or carve visibly.
      node.primitive.center = anchor.sample_surface(rng) + 0.15 * random_direction(rng);
      nodes.push_back(node);
    }
    ShapeModel shape = ShapeModel(std::move(nodes)).normalized();
    if (surface_acceptance(shape, rng, 400) >= 0.1) return shape;
  }
}

}  // namespace

double Primitive::signed_distance(const Vec3& p) const {
  const Vec3 x = rotation.transpose() * (p - center);
  switch (kind) {
    case PrimitiveKind::Sphere:
      return x.norm() - size(0);
    case PrimitiveKind::Box: {
      const Vec3 q = x.cwiseAbs() - size;
      return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
    }
    case PrimitiveKind::Capsule: {
      const double z = std::clamp(x(2), -size(1), size(1));
      return (x - Vec3(0.0, 0.0, z)).norm() - size(0);
    }
    case PrimitiveKind::Cylinder: {
      const double dr = std::hypot(x(0), x(1)) - size(0);
      const double dz = std::abs(x(2)) - size(1);
      return std::min(std::max(dr, dz), 0.0) + std::hypot(std::max(dr, 0.0), std::max(dz, 0.0));
    }
  }
  return std::numeric_limits<double>::infinity();
}

double Primitive::surface_area() const {
  const Vec3& s = size;
  switch (kind) {
    case PrimitiveKind::Sphere: return 4.0 * kPi * s(0) * s(0);
    case PrimitiveKind::Box: return 8.0 * (s(0) * s(1) + s(1) * s(2) + s(0) * s(2));
    case PrimitiveKind::Capsule: return 4.0 * kPi * s(0) * s(1) + 4.0 * kPi * s(0) * s(0);
    case PrimitiveKind::Cylinder: return 4.0 * kPi * s(0) * s(1) + 2.0 * kPi * s(0) * s(0);
  }
  return 0.0;
}

double Primitive::bounding_radius() const {
  switch (kind) {
    case PrimitiveKind::Sphere: return size(0);
    case PrimitiveKind::Box: return size.norm();
    case PrimitiveKind::Capsule: return size(0) + size(1);
    case PrimitiveKind::Cylinder: return std::hypot(size(0), size(1));
  }
  return 0.0;
}

Vec3 Primitive::sample_surface(Rng& rng) const { return rotation * local_surface_point(*this, rng) + center; }

ShapeModel::ShapeModel(std::vector<CsgNode> nodes) : nodes_(std::move(nodes)) {
  if (nodes_.empty()) throw Error(Errc::InvalidArgument, "shape needs at least one primitive");
  if (nodes_.front().op != CsgOp::Union) throw Error(Errc::InvalidArgument, "base node must be a union");
}

ShapeModel ShapeModel::sphere(double radius) {
  CsgNode n;
  n.primitive.kind = PrimitiveKind::Sphere;
  n.primitive.size = Vec3(radius, 0.0, 0.0);
  return ShapeModel({n});
}

ShapeModel ShapeModel::box(const Vec3& half_extents) {
  CsgNode n;
  n.primitive.kind = PrimitiveKind::Box;
  n.primitive.size = half_extents;
  return ShapeModel({n});
}

double ShapeModel::signed_distance(const Vec3& p) const {
  double d = nodes_.front().primitive.signed_distance(p);
  for (std::size_t k = 1; k < nodes_.size(); ++k) {
    const double dk = nodes_[k].primitive.signed_distance(p);
    d = nodes_[k].op == CsgOp::Union ? std::min(d, dk) : std::max(d, -dk);
  }
  return d;
}

ShapeModel ShapeModel::normalized() const {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& n : nodes_) {
    const double r = n.primitive.bounding_radius();
    lo = lo.cwiseMin(n.primitive.center - Vec3::Constant(r));
    hi = hi.cwiseMax(n.primitive.center + Vec3::Constant(r));
  }
  const Vec3 mid = 0.5 * (lo + hi);
  double extent = 0.0;
  for (const auto& n : nodes_) extent = std::max(extent, (n.primitive.center - mid).norm() + n.primitive.bounding_radius());
  const double scale = 1.0 / extent;
  std::vector<CsgNode> out = nodes_;
  for (auto& n : out) {
    n.primitive.center = (n.primitive.center - mid) * scale;
    n.primitive.size *= scale;
  }
  return ShapeModel(std::move(out));
}

int occupancy(const ShapeModel& shape, const Vec3& p) { return shape.signed_distance(p) <= 0.0 ? 1 : 0; }

PointCloud sample_surface(const ShapeModel& shape, Index n, Rng& rng) {
  if (n < 3) throw Error(Errc::InvalidArgument, "sample_surface needs n >= 3");
  const auto& nodes = shape.nodes();
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& node : nodes) {
    total += node.primitive.surface_area();
    cumulative.push_back(total);
  }
  Points3 out(3, n);
  Index filled = 0;
  std::uint64_t attempts = 0;
  const std::uint64_t max_attempts = 10'000ULL * static_cast<std::uint64_t>(n) + 100'000ULL;
  while (filled < n) {
    if (++attempts > max_attempts) throw Error(Errc::InvalidArgument, "shape has (almost) no exposed surface");
    const double pick = rng.uniform(0.0, total);
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), nodes.size() - 1);
    const Vec3 p = nodes[k].primitive.sample_surface(rng);
    if (std::abs(shape.signed_distance(p)) <= kSurfaceTol) out.col(filled++) = p;
  }
  return PointCloud(std::move(out));
}

std::vector<OccupancySample> sample_queries(const ShapeModel& shape, Index n, Rng& rng, const QueryParams& params) {
  if (n < 1) throw Error(Errc::InvalidArgument, "sample_queries needs n >= 1");
  std::vector<OccupancySample> out;
  out.reserve(static_cast<std::size_t>(n));
  const Index uniform_count = n / 2;
  for (Index i = 0; i < uniform_count; ++i) {
    Vec3 p;
    for (int c = 0; c < 3; ++c) p(c) = rng.uniform(-params.box_half_extent, params.box_half_extent);
    out.push_back({p, occupancy(shape, p)});
  }
  const Index near_count = n - uniform_count;
  if (near_count > 0) {
    const PointCloud anchors = sample_surface(shape, std::max<Index>(near_count, 3), rng);
    for (Index i = 0; i < near_count; ++i) {
      const Vec3 p = anchors.point(i) + rng.uniform(-params.band, params.band) * random_direction(rng);
      out.push_back({p, occupancy(shape, p)});
    }
  }
  return out;
}

std::vector<ShapeModel> generate_dataset(Index count, Rng& rng) {
  if (count < 1) throw Error(Errc::InvalidArgument, "generate_dataset needs count >= 1");
  std::vector<ShapeModel> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) out.push_back(random_shape(rng));
  return out;
}

std::vector<ShapeModel> generate_dataset(Index count, std::uint64_t seed) {
  Rng rng(seed);
  return generate_dataset(count, rng);
}

RegistrationPair make_registration_pair(const ShapeModel& shape, const PerturbationSpec& spec, Index points,
                                        Rng& rng, double keep_ratio) {
  spec.validate();
  PointCloud source = sample_surface(shape, points, rng);
  const RigidTransform gt = sample_transform(spec, rng);
  PointCloud target = [&] {
    if (spec.scenario == ScenarioKind::IndependentlySampled) return sample_surface(shape, points, rng);
    const auto perm = random_permutation(points, rng);
    return source.select(perm);
  }();
  switch (spec.scenario) {
    case ScenarioKind::Clean:
    case ScenarioKind::IndependentlySampled:
      break;
    case ScenarioKind::Noisy:
      source = jitter(source, rng);
      target = jitter(target, rng);
      break;
    case ScenarioKind::PartialOverlap:
      source = crop_partial(source, keep_ratio, rng, spec.crop);
      target = crop_partial(target, keep_ratio, rng, spec.crop);
      break;
  }
  return {std::move(source), apply(gt, target), gt};
}

std::uint64_t train_split_seed(std::uint64_t base) { return mix_seed(base, 0x7472616eULL); }
std::uint64_t test_split_seed(std::uint64_t base) { return mix_seed(base, 0x74657374ULL); }

void write_shapes(std::ostream& os, const std::vector<ShapeModel>& shapes) {
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& shape : shapes) {
    os << "shape " << shape.nodes().size() << '\n';
    for (const auto& node : shape.nodes()) {
      const Primitive& p = node.primitive;
      os << op_name(node.op) << ' ' << kind_name(p.kind);
      for (int c = 0; c < 3; ++c) os << ' ' << p.center(c);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) os << ' ' << p.rotation(r, c);
      for (int c = 0; c < 3; ++c) os << ' ' << p.size(c);
      os << '\n';
    }
  }
}

std::vector<ShapeModel> read_shapes(std::istream& is) {
  std::vector<ShapeModel> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream hs(line);
    std::string tag;
    std::size_t count = 0;
    if (!(hs >> tag >> count) || tag != "shape" || count == 0) throw Error(Errc::Io, "expected 'shape <count>'");
    std::vector<CsgNode> nodes;
    for (std::size_t k = 0; k < count; ++k) {
      if (!std::getline(is, line)) throw Error(Errc::Io, "truncated shape block");
      std::istringstream ls(line);
      std::string op, kind;
      CsgNode node;
      if (!(ls >> op >> kind)) throw Error(Errc::Io, "malformed shape node");
      node.op = parse_op(op);
      node.primitive.kind = parse_kind(kind);
      for (int c = 0; c < 3; ++c) ls >> node.primitive.center(c);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) ls >> node.primitive.rotation(r, c);
      for (int c = 0; c < 3; ++c) ls >> node.primitive.size(c);
      if (!ls) throw Error(Errc::Io, "malformed shape node");
      nodes.push_back(node);
    }
    out.emplace_back(std::move(nodes));
  }
  return out;
}

}  // namespace eqreg
