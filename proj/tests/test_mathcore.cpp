#include "eqreg/grad_tape.hpp"
#include "eqreg/gradcheck.hpp"
#include "eqreg/kabsch.hpp"
#include "eqreg/geometry.hpp"
#include "eqreg/rng.hpp"
#include "eqreg/svd3.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace eqreg;

namespace {

Mat3 random_mat3(Rng& rng) {
  Mat3 m;
  for (int i = 0; i < 9; ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

Points3 random_points(Index n, Rng& rng) {
  Points3 p(3, n);
  for (Index i = 0; i < n; ++i) p.col(i) = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  return p;
}

double weighted_cost(const RigidTransform& t, const Points3& src, const Points3& tgt, const Vector& w) {
  return (w.transpose() * ((t * src) - tgt).colwise().squaredNorm().transpose()).value();
}

}  // namespace

TEST_CASE("svd3 of the identity") {
  const Svd3<double> d = svd3(Mat3::Identity());
  CHECK((d.s - Vec3::Ones()).norm() < 1e-15);
  CHECK((d.u * d.v.transpose() - Mat3::Identity()).norm() < 1e-12);
}

TEST_CASE("svd3 of a rotation reconstructs it") {
  const Mat3 r = axis_angle(Vec3::UnitZ(), std::numbers::pi / 6.0);
  const Svd3<double> d = svd3(r);
  CHECK((d.u * d.v.transpose() - r).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((d.s - Vec3::Ones()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("svd3 of a rank-1 outer product") {
  const Vec3 a(1.0, 0.0, 0.0);
  const Svd3<double> d = svd3(Mat3(a * a.transpose()));
  CHECK(d.s(0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(std::abs(d.s(1)) < 1e-14);
  CHECK(std::abs(d.s(2)) < 1e-14);
}

TEST_CASE("svd3 reconstruction and orthonormality over random and near-singular inputs") {
  Rng rng(11);
  double worst_recon = 0.0;
  double worst_orth = 0.0;
  bool sorted = true;
  for (int i = 0; i < 10000; ++i) {
    Mat3 m = random_mat3(rng);
    switch (i % 4) {
      case 1:  // nearly rank 2
        m.col(2) = m.col(0) + 1e-9 * m.col(1);
        break;
      case 2:  // rank 1
        m = m.col(0) * m.col(1).transpose();
        break;
      case 3:  // repeated singular values
        m = axis_angle(m.col(0).normalized(), rng.uniform(0, 3)) * 2.5;
        break;
      default:
        break;
    }
    const Svd3<double> d = svd3(m);
    const double scale = m.cwiseAbs().maxCoeff();
    worst_recon = std::max(worst_recon, (d.u * d.s.asDiagonal() * d.v.transpose() - m).cwiseAbs().maxCoeff() / scale);
    worst_orth = std::max({worst_orth, (d.u.transpose() * d.u - Mat3::Identity()).cwiseAbs().maxCoeff(),
                           (d.v.transpose() * d.v - Mat3::Identity()).cwiseAbs().maxCoeff()});
    sorted = sorted && d.s(0) >= d.s(1) && d.s(1) >= d.s(2) && d.s(2) >= 0.0;
  }
  CHECK(worst_recon < 1e-9);
  CHECK(worst_orth < 1e-9);
  CHECK(sorted);
}

TEST_CASE("weighted_kabsch of identical sets is the identity") {
  Rng rng(3);
  const Points3 p = random_points(20, rng);
  const RigidTransform t = kabsch(p, p);
  CHECK((t.rotation - Mat3::Identity()).norm() < 1e-12);
  CHECK(t.translation.norm() < 1e-12);
}

TEST_CASE("weighted_kabsch recovers random rigid motions") {
  Rng rng(5);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Points3 src = random_points(3 + static_cast<Index>(rng.index(30)), rng);
    const RigidTransform g{random_rotation(rng), Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1))};
    const RigidTransform est = kabsch(src, g * src);
    const RigidTransform residual = g.inverse() * est;
    worst = std::max({worst, rotation_angle(residual.rotation, Mat3::Identity()) * 180.0 / std::numbers::pi,
                      residual.translation.norm()});
  }
  CHECK(worst < 1e-7);
}

TEST_CASE("weighted_kabsch ignores uniform weight rescaling") {
  Rng rng(8);
  const Points3 src = random_points(15, rng);
  Points3 tgt = RigidTransform{random_rotation(rng), Vec3(0.1, 0.2, 0.3)} * src;
  tgt += 0.05 * random_points(15, rng);
  Vector w(15);
  for (Index i = 0; i < 15; ++i) w(i) = rng.uniform(0.1, 2.0);
  const RigidTransform a = weighted_kabsch(src, tgt, w);
  const RigidTransform b = weighted_kabsch(src, tgt, Vector(37.5 * w));
  CHECK((a.rotation - b.rotation).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.translation - b.translation).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("weighted_kabsch corrects reflections") {
  Rng rng(21);
  SUBCASE("planar source mirrored in-plane has an exact proper solution") {
    Points3 src = random_points(12, rng);
    src.row(2).setZero();
    Points3 tgt = src;
    tgt.row(0) *= -1.0;
    const RigidTransform t = kabsch(src, tgt);
    CHECK(t.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(((t * src) - tgt).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("mirrored 3D source gets the best proper rotation") {
    const Points3 src = random_points(12, rng);
    Points3 tgt = src;
    tgt.row(0) *= -1.0;
    const Vector w = Vector::Ones(12);
    const RigidTransform t = weighted_kabsch(src, tgt, w);
    CHECK(t.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    // Brute force over proper rotations; translation is optimal at the
    // centroid difference for each candidate.
    const Vec3 cs = src.rowwise().mean();
    const Vec3 ct = tgt.rowwise().mean();
    const double best = weighted_cost(t, src, tgt, w);
    double brute = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 50000; ++i) {
      const Mat3 r = random_rotation(rng);
      brute = std::min(brute, weighted_cost({r, ct - r * cs}, src, tgt, w));
    }
    CHECK(best <= brute + 1e-12);
  }
}

TEST_CASE("weighted_kabsch input validation") {
  Rng rng(2);
  const Points3 p = random_points(5, rng);
  CHECK_THROWS_AS(kabsch(Points3(p.leftCols(2)), Points3(p.leftCols(2))), Error);
  Vector w = Vector::Ones(5);
  w(0) = -1.0;
  CHECK_THROWS_AS(weighted_kabsch(p, p, w), Error);
  Points3 line(3, 6);
  for (Index i = 0; i < 6; ++i) line.col(i) = Vec3(0.1 * static_cast<double>(i), 0.0, 0.0);
  try {
    (void)kabsch(line, line);
    FAIL("collinear input accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::DegenerateConfiguration);
  }
}

TEST_CASE("tape: gradient of x^2 at 3") {
  GradTape tape;
  const auto x = tape.parameter(Matrix::Constant(1, 1, 3.0));
  tape.backward(tape.sum_squares(x));
  CHECK(tape.grad(x)(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("tape: cross-entropy of sigmoid(0) against label 1") {
  GradTape tape;
  const auto logit = tape.parameter(Matrix::Zero(1, 1));
  const auto loss = tape.binary_cross_entropy(tape.sigmoid(logit), Matrix::Ones(1, 1));
  CHECK(tape.scalar(loss) == doctest::Approx(std::log(2.0)));
  tape.backward(loss);
  CHECK(tape.grad(logit)(0, 0) == doctest::Approx(-0.5));
}

TEST_CASE("tape: constants receive no gradient and parameters are recorded") {
  GradTape tape;
  const auto a = tape.parameter(Matrix::Ones(2, 2));
  const auto c = tape.constant(Matrix::Ones(2, 2));
  tape.backward(tape.sum(tape.cwise_mul(a, c)));
  CHECK_FALSE(tape.requires_grad(c));
  CHECK(tape.parameters().size() == 1);
  CHECK((tape.grad(a) - Matrix::Ones(2, 2)).norm() == 0.0);
}

TEST_CASE("tape: shape mismatches are reported") {
  GradTape tape;
  const auto a = tape.parameter(Matrix::Ones(2, 3));
  const auto b = tape.parameter(Matrix::Ones(3, 2));
  CHECK_THROWS_AS(tape.add(a, b), Error);
}

TEST_CASE("finite-difference checks for every primitive and loss") {
  const auto checks = primitive_gradient_checks(1234);
  CHECK(checks.size() >= 30);
  for (const auto& c : checks) {
    INFO(c.name);
    CHECK(c.result.max_rel_error < 1e-4);
  }
}

TEST_CASE("check_gradients flags a wrong gradient") {
  // The analytic pass sees sum(x^2); every later evaluation sees 3 sum(x^2).
  const std::vector<Matrix> params{Matrix::Constant(2, 2, 0.5)};
  std::size_t calls = 0;
  const LossBuilder build = [&calls](GradTape& t, const std::vector<GradTape::Var>& v) {
    ++calls;
    return calls == 1 ? t.sum_squares(v[0]) : t.scale(t.sum_squares(v[0]), 3.0);
  };
  CHECK(check_gradients(params, build).max_rel_error > 0.5);
}
