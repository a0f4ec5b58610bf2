#pragma once

#include <Eigen/Core>
#include <Eigen/LU>

namespace eqreg {

/// Rotation in SO(3) plus translation; maps x to R x + t.
template <typename Scalar_>
struct RigidTransformT {
  using Scalar = Scalar_;
  using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
  using Vec3 = Eigen::Matrix<Scalar, 3, 1>;

  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransformT identity() { return {}; }

  /// Applies to every column of a 3xN block.
  template <typename Derived>
  Eigen::Matrix<Scalar, 3, Eigen::Dynamic> operator*(const Eigen::MatrixBase<Derived>& points) const {
    return (rotation * points).colwise() + translation;
  }

  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }

  /// (this * other)(x) == this(other(x)).
  RigidTransformT compose(const RigidTransformT& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }

  RigidTransformT inverse() const {
    const Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  bool is_proper(Scalar tol = Scalar(1e-9)) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - Scalar(1)) <= tol;
  }
};

template <typename Scalar>
RigidTransformT<Scalar> operator*(const RigidTransformT<Scalar>& a, const RigidTransformT<Scalar>& b) {
  return a.compose(b);
}

using RigidTransform = RigidTransformT<double>;

}  // namespace eqreg
