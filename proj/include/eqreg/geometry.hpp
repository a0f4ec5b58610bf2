#pragma once

#include "eqreg/rigid_transform.hpp"
#include "eqreg/rng.hpp"
#include "eqreg/types.hpp"

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace eqreg {

/// Ordered 3D points stored as the columns of a 3xN matrix.
class PointCloud {
 public:
  PointCloud() = default;
  /// Throws Errc::InvalidArgument unless N >= 3 and all coordinates are finite.
  explicit PointCloud(Points3 points);

  const Points3& points() const { return points_; }
  Index size() const { return points_.cols(); }
  Vec3 point(Index i) const { return points_.col(i); }
  Vec3 centroid() const { return points_.rowwise().mean(); }

  PointCloud select(std::span<const Index> indices) const;

  friend bool operator==(const PointCloud& a, const PointCloud& b) { return a.points_ == b.points_; }

 private:
  Points3 points_;
};

enum class ScenarioKind { Clean, Noisy, IndependentlySampled, PartialOverlap };

/// How PartialOverlap crops a cloud. Fps is the default.
enum class CropMode { Fps, HalfSpace };

std::string_view to_string(ScenarioKind kind);
ScenarioKind parse_scenario(std::string_view name);

struct PerturbationSpec {
  double max_angle_deg = 45.0;
  double max_translation = 0.5;
  ScenarioKind scenario = ScenarioKind::Clean;
  CropMode crop = CropMode::Fps;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RegistrationErrors {
  double rot_err_deg = 0.0;
  double trans_err = 0.0;
};

PointCloud apply(const RigidTransform& t, const PointCloud& p);

/// Rotation about a coordinate axis (0 = x, 1 = y, 2 = z).
Mat3 axis_rotation(int axis, double radians);
Mat3 axis_angle(const Vec3& axis, double radians);
/// Rz(gamma) * Ry(beta) * Rx(alpha).
Mat3 euler_xyz(double alpha, double beta, double gamma);
/// Uniformly distributed rotation (Haar measure).
Mat3 random_rotation(Rng& rng);

/// Euler angles in [0, max_angle] and translation coordinates in [-d, d].
RigidTransform sample_transform(const PerturbationSpec& spec, Rng& rng);

struct JitterParams {
  double stddev = 0.01;
  double clip = 0.05;
};

/// Adds clipped zero-mean noise drawn from `normal()` (a standard normal
/// source) to every coordinate.
template <typename NormalSource>
PointCloud jitter(const PointCloud& p, NormalSource&& normal, const JitterParams& params = {}) {
  Points3 out = p.points();
  for (Index i = 0; i < out.cols(); ++i) {
    for (int c = 0; c < 3; ++c) {
      double d = params.stddev * normal();
      d = d < -params.clip ? -params.clip : (d > params.clip ? params.clip : d);
      out(c, i) += d;
    }
  }
  return PointCloud(std::move(out));
}

PointCloud jitter(const PointCloud& p, Rng& rng, const JitterParams& params = {});

/// Farthest-point traversal from a random start; keeps floor(keep_ratio * N).
std::vector<Index> farthest_point_indices(const PointCloud& p, Index count, Index start);
PointCloud crop_partial(const PointCloud& p, double keep_ratio, Rng& rng, CropMode mode = CropMode::Fps);

/// Random permutation of the point order.
std::vector<Index> random_permutation(Index n, Rng& rng);

/// Geodesic rotation angle between two rotations, in radians.
double rotation_angle(const Mat3& a, const Mat3& b);
RegistrationErrors registration_errors(const RigidTransform& gt, const RigidTransform& est);

struct RecallThresholds {
  double rot_deg = 5.0;
  double trans = 0.2;
};

/// Fraction of instances with rot_err < rot_deg and trans_err < trans.
double recall(std::span<const RegistrationErrors> errors, const RecallThresholds& thresholds = {});

/// Indices of the k nearest other points of every point, ascending by
/// distance with ties broken by index. Row-major: k entries per point.
std::vector<Index> knn_indices(const Points3& points, Index k);

}  // namespace eqreg
