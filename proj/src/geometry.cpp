#include "eqreg/geometry.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

namespace eqreg {

namespace {
constexpr double kDeg = std::numbers::pi / 180.0;
}

PointCloud::PointCloud(Points3 points) : points_(std::move(points)) {
  if (points_.cols() < 3) throw Error(Errc::InvalidArgument, "point cloud needs at least 3 points");
  if (!points_.allFinite()) throw Error(Errc::InvalidArgument, "point cloud has non-finite coordinates");
}

PointCloud PointCloud::select(std::span<const Index> indices) const {
  Points3 out(3, static_cast<Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) out.col(static_cast<Index>(k)) = points_.col(indices[k]);
  return PointCloud(std::move(out));
}

std::string_view to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::Clean: return "clean";
    case ScenarioKind::Noisy: return "noisy";
    case ScenarioKind::IndependentlySampled: return "independent";
    case ScenarioKind::PartialOverlap: return "partial";
  }
  return "clean";
}

ScenarioKind parse_scenario(std::string_view name) {
  if (name == "clean") return ScenarioKind::Clean;
  if (name == "noisy") return ScenarioKind::Noisy;
  if (name == "independent") return ScenarioKind::IndependentlySampled;
  if (name == "partial") return ScenarioKind::PartialOverlap;
  throw Error(Errc::ConfigInvalid, "unknown scenario '" + std::string(name) + "'");
}

void PerturbationSpec::validate() const {
  if (!(max_angle_deg >= 0.0 && max_angle_deg <= 180.0)) {
    throw Error(Errc::InvalidArgument, "max angle must lie in [0, 180]");
  }
  if (!(max_translation >= 0.0)) throw Error(Errc::InvalidArgument, "max translation must be >= 0");
}

PointCloud apply(const RigidTransform& t, const PointCloud& p) { return PointCloud(t * p.points()); }

Mat3 axis_rotation(int axis, double radians) {
  return Eigen::AngleAxisd(radians, Vec3::Unit(axis)).toRotationMatrix();
}

Mat3 axis_angle(const Vec3& axis, double radians) {
  return Eigen::AngleAxisd(radians, axis.normalized()).toRotationMatrix();
}

Mat3 euler_xyz(double alpha, double beta, double gamma) {
  return axis_rotation(2, gamma) * axis_rotation(1, beta) * axis_rotation(0, alpha);
}

Mat3 random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

RigidTransform sample_transform(const PerturbationSpec& spec, Rng& rng) {
  spec.validate();
  const double max_rad = spec.max_angle_deg * kDeg;
  const double alpha = rng.uniform(0.0, max_rad);
  const double beta = rng.uniform(0.0, max_rad);
  const double gamma = rng.uniform(0.0, max_rad);
  RigidTransform t;
  t.rotation = euler_xyz(alpha, beta, gamma);
  for (int c = 0; c < 3; ++c) t.translation(c) = rng.uniform(-spec.max_translation, spec.max_translation);
  return t;
}

PointCloud jitter(const PointCloud& p, Rng& rng, const JitterParams& params) {
  return jitter(p, [&rng] { return rng.normal(); }, params);
}

std::vector<Index> farthest_point_indices(const PointCloud& p, Index count, Index start) {
  const Index n = p.size();
  count = std::clamp<Index>(count, 0, n);
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(count));
  if (count == 0) return out;
  Vector dist = Vector::Constant(n, std::numeric_limits<double>::infinity());
  Index current = start;
  for (Index k = 0; k < count; ++k) {
    out.push_back(current);
    dist = dist.cwiseMin((p.points().colwise() - p.points().col(current)).colwise().squaredNorm().transpose());
    dist(current) = -1.0;
    Index next = 0;
    dist.maxCoeff(&next);
    current = next;
  }
  return out;
}

PointCloud crop_partial(const PointCloud& p, double keep_ratio, Rng& rng, CropMode mode) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw Error(Errc::InvalidArgument, "keep_ratio must lie in (0, 1]");
  const Index n = p.size();
  const auto keep = static_cast<Index>(std::floor(keep_ratio * static_cast<double>(n)));
  if (mode == CropMode::Fps) {
    const auto start = static_cast<Index>(rng.index(static_cast<std::uint64_t>(n)));
    const auto idx = farthest_point_indices(p, keep, start);
    return p.select(idx);
  }
  // Half-space crop: keep the points furthest along a random direction.
  const Vec3 dir = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
  const Vector proj = (p.points().colwise() - p.centroid()).transpose() * dir;
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return proj(a) > proj(b); });
  order.resize(static_cast<std::size_t>(keep));
  std::sort(order.begin(), order.end());
  return p.select(order);
}

std::vector<Index> random_permutation(Index n, Rng& rng) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  for (Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Index>(rng.index(static_cast<std::uint64_t>(i + 1)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  return perm;
}

double rotation_angle(const Mat3& a, const Mat3& b) {
  // arccos((tr(A^T B) - 1) / 2) evaluated through atan2 of the skew part,
  // which stays accurate near 0 and 180 degrees.
  const Mat3 rel = a.transpose() * b;
  const double cos_term = std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0);
  const Vec3 skew(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1));
  const double sin_term = 0.5 * skew.norm();
  return std::atan2(sin_term, cos_term);
}

RegistrationErrors registration_errors(const RigidTransform& gt, const RigidTransform& est) {
  return {rotation_angle(gt.rotation, est.rotation) / kDeg, (gt.translation - est.translation).norm()};
}

double recall(std::span<const RegistrationErrors> errors, const RecallThresholds& thresholds) {
  if (errors.empty()) throw Error(Errc::EmptyBatch, "recall of an empty batch");
  const auto hits = std::count_if(errors.begin(), errors.end(), [&](const RegistrationErrors& e) {
    return e.rot_err_deg < thresholds.rot_deg && e.trans_err < thresholds.trans;
  });
  return static_cast<double>(hits) / static_cast<double>(errors.size());
}

std::vector<Index> knn_indices(const Points3& points, Index k) {
  const Index n = points.cols();
  if (k < 1 || k >= n) throw Error(Errc::InvalidArgument, "knn: need 1 <= k < N");
  std::vector<Index> out(static_cast<std::size_t>(n * k));
  std::vector<double> best_d(static_cast<std::size_t>(k));
  std::vector<Index> best_j(static_cast<std::size_t>(k));
  for (Index i = 0; i < n; ++i) {
    Index filled = 0;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      // Squared distance from the explicit difference keeps ties symmetric.
      const double d = (points.col(j) - points.col(i)).squaredNorm();
      if (filled == k && d >= best_d[static_cast<std::size_t>(k - 1)]) continue;
      // Candidates arrive in index order, so a strict comparison keeps the
      // lower index first among equal distances.
      Index pos = filled < k ? filled++ : k - 1;
      while (pos > 0 && best_d[static_cast<std::size_t>(pos - 1)] > d) {
        best_d[static_cast<std::size_t>(pos)] = best_d[static_cast<std::size_t>(pos - 1)];
        best_j[static_cast<std::size_t>(pos)] = best_j[static_cast<std::size_t>(pos - 1)];
        --pos;
      }
      best_d[static_cast<std::size_t>(pos)] = d;
      best_j[static_cast<std::size_t>(pos)] = j;
    }
    std::copy(best_j.begin(), best_j.end(), out.begin() + i * k);
  }
  return out;
}

}  // namespace eqreg
