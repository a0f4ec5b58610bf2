#pragma once

#include "eqreg/rigid_transform.hpp"
#include "eqreg/svd3.hpp"
#include "eqreg/types.hpp"

#include <Eigen/Core>
#include <Eigen/LU>

#include <cmath>

namespace eqreg {

/// Weighted orthogonal Procrustes: the proper rigid transform minimizing
/// sum_k w_k |R src_k + t - tgt_k|^2. Points are the columns of 3xK blocks.
///
/// Throws Errc::InvalidArgument on bad inputs and Errc::DegenerateConfiguration
/// when the weighted cross-covariance has rank < 2.
template <typename DerivedS, typename DerivedT, typename DerivedW>
RigidTransformT<typename DerivedS::Scalar> weighted_kabsch(const Eigen::MatrixBase<DerivedS>& src,
                                                           const Eigen::MatrixBase<DerivedT>& tgt,
                                                           const Eigen::MatrixBase<DerivedW>& weights) {
  using S = typename DerivedS::Scalar;
  using M3 = Eigen::Matrix<S, 3, 3>;
  using V3 = Eigen::Matrix<S, 3, 1>;

  const Index count = src.cols();
  if (src.rows() != 3 || tgt.rows() != 3 || tgt.cols() != count || weights.size() != count) {
    throw Error(Errc::InvalidArgument, "weighted_kabsch: expected matching 3xK blocks and K weights");
  }
  if (count < 3) throw Error(Errc::InvalidArgument, "weighted_kabsch: need at least 3 correspondences");
  if (!src.allFinite() || !tgt.allFinite() || !weights.allFinite()) {
    throw Error(Errc::InvalidArgument, "weighted_kabsch: non-finite input");
  }
  Index positive = 0;
  S total = 0;
  for (Index k = 0; k < count; ++k) {
    const S w = weights(k);
    if (w < S(0)) throw Error(Errc::InvalidArgument, "weighted_kabsch: negative weight");
    if (w > S(0)) ++positive;
    total += w;
  }
  if (positive < 3) throw Error(Errc::InvalidArgument, "weighted_kabsch: fewer than 3 positive weights");

  V3 src_mean = V3::Zero();
  V3 tgt_mean = V3::Zero();
  for (Index k = 0; k < count; ++k) {
    const S w = weights(k) / total;
    src_mean += w * src.col(k);
    tgt_mean += w * tgt.col(k);
  }

  // Cross-covariance H = sum w (tgt - tgt_mean)(src - src_mean)^T, so that
  // H = U S V^T gives R = U D V^T.
  M3 cov = M3::Zero();
  for (Index k = 0; k < count; ++k) {
    const S w = weights(k) / total;
    cov.noalias() += w * (tgt.col(k) - tgt_mean) * (src.col(k) - src_mean).transpose();
  }

  const Svd3<S> svd = svd3(cov);
  const S s_max = svd.s(0);
  if (!(s_max > S(0)) || svd.s(1) <= s_max * S(1e-12)) {
    throw Error(Errc::DegenerateConfiguration, "weighted_kabsch: cross-covariance rank < 2");
  }

  M3 d = M3::Identity();
  if ((svd.u * svd.v.transpose()).determinant() < S(0)) d(2, 2) = S(-1);

  RigidTransformT<S> out;
  out.rotation = svd.u * d * svd.v.transpose();
  out.translation = tgt_mean - out.rotation * src_mean;
  return out;
}

template <typename DerivedS, typename DerivedT>
RigidTransformT<typename DerivedS::Scalar> kabsch(const Eigen::MatrixBase<DerivedS>& src,
                                                  const Eigen::MatrixBase<DerivedT>& tgt) {
  using S = typename DerivedS::Scalar;
  return weighted_kabsch(src, tgt, Eigen::Matrix<S, Eigen::Dynamic, 1>::Ones(src.cols()));
}

}  // namespace eqreg
