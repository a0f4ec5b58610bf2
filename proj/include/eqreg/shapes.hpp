#pragma once

#include "eqreg/geometry.hpp"
#include "eqreg/rng.hpp"
#include "eqreg/types.hpp"

#include <cstdint>
#include <iosfwd>
#include <vector>

namespace eqreg {

enum class PrimitiveKind { Sphere, Box, Capsule, Cylinder };
enum class CsgOp { Union, Difference };

/// One primitive with its pose. `size` is interpreted per kind:
///   Sphere   (radius, -, -)
///   Box      (half extents x, y, z)
///   Capsule  (radius, half length of the axis segment, -)
///   Cylinder (radius, half height, -)
/// Capsule and cylinder axes run along the local z axis.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  Mat3 rotation = Mat3::Identity();
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3(1.0, 0.0, 0.0);

  double signed_distance(const Vec3& p) const;
  double surface_area() const;
  /// Radius of a ball around `center` containing the primitive.
  double bounding_radius() const;
  /// Area-uniform point on the primitive's own boundary.
  Vec3 sample_surface(Rng& rng) const;

  friend bool operator==(const Primitive&, const Primitive&) = default;
};

struct CsgNode {
  CsgOp op = CsgOp::Union;
  Primitive primitive;
  friend bool operator==(const CsgNode&, const CsgNode&) = default;
};

/// Left-deep CSG composition: node 0 is the base; each later node is unioned
/// with or carved from everything before it.
class ShapeModel {
 public:
  ShapeModel() = default;
  explicit ShapeModel(std::vector<CsgNode> nodes);

  static ShapeModel sphere(double radius);
  static ShapeModel box(const Vec3& half_extents);

  const std::vector<CsgNode>& nodes() const { return nodes_; }

  /// Min/max composition of the primitive SDFs. Exact zero set and sign.
  double signed_distance(const Vec3& p) const;

  /// Uniformly rescales and recenters so every primitive (hence every surface
  /// point) lies in the unit ball.
  ShapeModel normalized() const;

  friend bool operator==(const ShapeModel&, const ShapeModel&) = default;

 private:
  std::vector<CsgNode> nodes_;
};

struct OccupancySample {
  Vec3 position = Vec3::Zero();
  int label = 0;
};

int occupancy(const ShapeModel& shape, const Vec3& p);

/// Rejection-samples primitive surfaces against the composite zero set.
PointCloud sample_surface(const ShapeModel& shape, Index n, Rng& rng);

struct QueryParams {
  double box_half_extent = 1.1;
  double band = 0.05;
};

/// First floor(n/2) queries uniform in the box, the rest within `band` of
/// the surface.
std::vector<OccupancySample> sample_queries(const ShapeModel& shape, Index n, Rng& rng,
                                            const QueryParams& params = {});

/// Random compositions of 2-5 primitives, normalized to the unit ball.
std::vector<ShapeModel> generate_dataset(Index count, Rng& rng);
std::vector<ShapeModel> generate_dataset(Index count, std::uint64_t seed);

/// Seeds for the train and test splits derived from one base seed; distinct
/// by construction.
std::uint64_t train_split_seed(std::uint64_t base);
std::uint64_t test_split_seed(std::uint64_t base);

/// Source/target clouds for one registration instance: target = gt(source)
/// up to the scenario's perturbation (permutation, jitter, resampling or
/// cropping).
struct RegistrationPair {
  PointCloud source;
  PointCloud target;
  RigidTransform gt;
};

RegistrationPair make_registration_pair(const ShapeModel& shape, const PerturbationSpec& spec, Index points,
                                        Rng& rng, double keep_ratio = 0.75);

// Plain-text persistence. Each shape is a "shape <count>" header followed by
// one line per node: op kind cx cy cz r00 r01 r02 r10 r11 r12 r20 r21 r22 s0 s1 s2.
void write_shapes(std::ostream& os, const std::vector<ShapeModel>& shapes);
std::vector<ShapeModel> read_shapes(std::istream& is);

}  // namespace eqreg
