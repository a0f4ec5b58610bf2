#pragma once

// Singular value decomposition of 3x3 matrices.
//
// Right singular vectors come from a cyclic Jacobi eigensolve of M^T M; the
// left factor is then read off a Givens QR of M V, which keeps U orthonormal
// even when trailing singular values vanish. One Newton-Schulz step polishes
// both factors back onto O(3).

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>

namespace eqreg {

template <typename Scalar>
struct Svd3 {
  Eigen::Matrix<Scalar, 3, 3> u;
  Eigen::Matrix<Scalar, 3, 1> s;  // descending, non-negative
  Eigen::Matrix<Scalar, 3, 3> v;
};

namespace detail {

template <typename Scalar>
void jacobi_eigen_sym3(Eigen::Matrix<Scalar, 3, 3>& a, Eigen::Matrix<Scalar, 3, 3>& v) {
  using std::abs;
  using std::sqrt;
  v.setIdentity();
  const Scalar eps = std::numeric_limits<Scalar>::epsilon();
  for (int sweep = 0; sweep < 64; ++sweep) {
    const Scalar off = abs(a(0, 1)) + abs(a(0, 2)) + abs(a(1, 2));
    const Scalar diag = abs(a(0, 0)) + abs(a(1, 1)) + abs(a(2, 2));
    if (off <= eps * eps * diag || off == Scalar(0)) break;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const Scalar apq = a(p, q);
        if (apq == Scalar(0)) continue;
        // Rotation annihilating a(p,q); numerically stable tangent.
        const Scalar theta = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        const Scalar t = (theta >= Scalar(0) ? Scalar(1) : Scalar(-1)) /
                         (abs(theta) + sqrt(theta * theta + Scalar(1)));
        const Scalar c = Scalar(1) / sqrt(t * t + Scalar(1));
        const Scalar s = t * c;
        for (int k = 0; k < 3; ++k) {
          const Scalar akp = a(k, p);
          const Scalar akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < 3; ++k) {
          const Scalar apk = a(p, k);
          const Scalar aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < 3; ++k) {
          const Scalar vkp = v(k, p);
          const Scalar vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
}

// Q R = B with Q a product of Givens rotations.
template <typename Scalar>
void givens_qr3(Eigen::Matrix<Scalar, 3, 3>& r, Eigen::Matrix<Scalar, 3, 3>& q) {
  using std::hypot;
  q.setIdentity();
  constexpr std::array<std::pair<int, int>, 3> order{{{1, 0}, {2, 0}, {2, 1}}};
  for (const auto& [row, col] : order) {
    const Scalar a = r(col, col);
    const Scalar b = r(row, col);
    if (b == Scalar(0)) continue;
    const Scalar h = hypot(a, b);
    const Scalar c = a / h;
    const Scalar s = b / h;
    for (int k = 0; k < 3; ++k) {
      const Scalar x = r(col, k);
      const Scalar y = r(row, k);
      r(col, k) = c * x + s * y;
      r(row, k) = -s * x + c * y;
    }
    for (int k = 0; k < 3; ++k) {
      const Scalar x = q(k, col);
      const Scalar y = q(k, row);
      q(k, col) = c * x + s * y;
      q(k, row) = -s * x + c * y;
    }
  }
}

template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> newton_schulz_step(const Eigen::Matrix<Scalar, 3, 3>& x) {
  return Scalar(0.5) * x * (Scalar(3) * Eigen::Matrix<Scalar, 3, 3>::Identity() - x.transpose() * x);
}

}  // namespace detail

template <typename Derived>
Svd3<typename Derived::Scalar> svd3(const Eigen::MatrixBase<Derived>& m_in) {
  using Scalar = typename Derived::Scalar;
  using M3 = Eigen::Matrix<Scalar, 3, 3>;
  const M3 m = m_in;

  M3 gram = m.transpose() * m;
  M3 v;
  detail::jacobi_eigen_sym3(gram, v);

  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int i, int j) { return gram(i, i) > gram(j, j); });
  M3 v_sorted;
  for (int k = 0; k < 3; ++k) v_sorted.col(k) = v.col(order[k]);
  v = detail::newton_schulz_step<Scalar>(v_sorted);

  M3 r = m * v;
  M3 q;
  detail::givens_qr3(r, q);

  Svd3<Scalar> out;
  for (int k = 0; k < 3; ++k) {
    out.s(k) = r(k, k);
    if (out.s(k) < Scalar(0)) {
      out.s(k) = -out.s(k);
      q.col(k) = -q.col(k);
    }
  }
  out.u = detail::newton_schulz_step<Scalar>(q);
  out.v = v;

  // Jacobi ordering can disagree with |R_kk| by roundoff on near-ties.
  for (int pass = 0; pass < 2; ++pass) {
    for (int k = 0; k < 2; ++k) {
      if (out.s(k) < out.s(k + 1)) {
        std::swap(out.s(k), out.s(k + 1));
        out.u.col(k).swap(out.u.col(k + 1));
        out.v.col(k).swap(out.v.col(k + 1));
      }
    }
  }
  return out;
}

}  // namespace eqreg
