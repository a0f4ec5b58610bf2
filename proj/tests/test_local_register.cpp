#include "eqreg/checkpoint.hpp"
#include "eqreg/global_register.hpp"
#include "eqreg/local_register.hpp"
#include "eqreg/shapes.hpp"

#include <doctest.h>

#include <algorithm>
#include <numbers>

using namespace eqreg;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

ExtractorWeights weights(std::uint64_t seed) {
  Rng rng(seed);
  return ExtractorWeights::random({}, rng);
}

PointCloud cloud(std::uint64_t seed, Index n) {
  Rng rng(seed);
  return sample_surface(generate_dataset(1, rng).front(), n, rng);
}

LocalFeature random_local(Index n, Index c, Rng& rng) {
  LocalFeature f{Matrix(n, c)};
  for (Index i = 0; i < f.descriptors.size(); ++i) f.descriptors.data()[i] = rng.uniform(-1, 1);
  return f;
}

RigidTransform small_motion(Rng& rng, double max_deg, double max_trans) {
  const Vec3 axis = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)).normalized();
  const Vec3 dir = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)).normalized();
  return {axis_angle(axis, rng.uniform(0, max_deg) * kDeg), rng.uniform(0, max_trans) * dir};
}

}  // namespace

TEST_CASE("hard elimination") {
  Rng rng(1);
  SUBCASE("keeps floor(N / 6)") {
    const PointCloud p = cloud(2, 1024);
    const KeptPoints k = hard_eliminate(p, random_local(1024, 16, rng));
    CHECK(k.indices.size() == 170);
    CHECK(k.features.rows() == 170);
  }
  SUBCASE("equal scores keep the lowest indices") {
    EliminationScores s{Vector::Constant(1024, 0.25)};
    const auto idx = top_indices(s, 170);
    for (Index i = 0; i < 170; ++i) CHECK(idx[static_cast<std::size_t>(i)] == i);
  }
  SUBCASE("order is by descending score") {
    EliminationScores s{Vector(5)};
    s.values << 0.1, 0.9, 0.5, 0.9, 0.0;
    CHECK(top_indices(s, 3) == std::vector<Index>{1, 3, 2});
  }
  SUBCASE("too few points") {
    const PointCloud p(Points3::Random(3, 5));
    try {
      (void)hard_eliminate(p, random_local(5, 4, rng));
      FAIL("five points accepted");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::TooFewPoints);
    }
  }
  SUBCASE("permuting the input permutes the kept set") {
    const PointCloud p = cloud(3, 120);
    const LocalFeature f = random_local(120, 8, rng);
    const std::vector<Index> perm = random_permutation(120, rng);
    LocalFeature fp{Matrix(120, 8)};
    for (Index i = 0; i < 120; ++i) fp.descriptors.row(i) = f.descriptors.row(perm[static_cast<std::size_t>(i)]);
    const KeptPoints a = hard_eliminate(p, f);
    const KeptPoints b = hard_eliminate(p.select(perm), fp);
    std::vector<Index> mapped;
    for (Index i : b.indices) mapped.push_back(perm[static_cast<std::size_t>(i)]);
    std::vector<Index> sa = a.indices;
    std::sort(sa.begin(), sa.end());
    std::sort(mapped.begin(), mapped.end());
    CHECK(sa == mapped);
  }
  SUBCASE("fallback saliency is the distance to the mean normalized descriptor") {
    const LocalFeature f = random_local(10, 4, rng);
    const Matrix n = normalize_rows(f.descriptors);
    const RowVector mean = n.colwise().mean();
    const EliminationScores s = saliency(f);
    for (Index i = 0; i < 10; ++i) CHECK(s.values(i) == doctest::Approx((n.row(i) - mean).squaredNorm()));
  }
}

TEST_CASE("normalize_rows") {
  Matrix m(2, 3);
  m << 3, 0, 4,  //
      0, 0, 0;
  const Matrix n = normalize_rows(m);
  CHECK(n.row(0).norm() == doctest::Approx(1.0));
  CHECK(n.row(1).isZero(0.0));
}

TEST_CASE("similarity") {
  const ExtractorWeights w = weights(4);
  const PointCloud p = cloud(5, 256);
  const LocalFeature f = encode(w, p).local;
  SUBCASE("identical clouds match themselves under the fallback") {
    const Matrix s = compute_similarity(f.descriptors, f.descriptors, p.points(), p.points());
    const auto m = row_argmax(s);
    for (Index i = 0; i < p.size(); ++i) CHECK(m[static_cast<std::size_t>(i)] == i);
  }
  SUBCASE("far pairs score below near pairs when features agree") {
    Matrix fs(1, 4), ft(2, 4);
    fs << 1, 0, 0, 0;
    ft << 1, 0, 0, 0,  //
        1, 0, 0, 0;
    Points3 ps(3, 1), pt(3, 2);
    ps.col(0) = Vec3::Zero();
    pt.col(0) = Vec3(0.1, 0, 0);
    pt.col(1) = Vec3(0.8, 0, 0);
    const Matrix s = compute_similarity(fs, ft, ps, pt);
    CHECK(s(0, 0) > s(0, 1));
  }
  SUBCASE("row softmax sums to one") {
    Rng rng(6);
    Matrix s(7, 9);
    for (Index i = 0; i < s.size(); ++i) s.data()[i] = rng.uniform(-50, 50);
    const Matrix sm = softmax_rows(s);
    for (Index i = 0; i < 7; ++i) CHECK(std::abs(sm.row(i).sum() - 1.0) < 1e-9);
  }
  SUBCASE("learned similarity is unchanged by a shared rigid motion") {
    Rng rng(7);
    const MatcherWeights m = MatcherWeights::random(512, 16, rng);
    const PointCloud q = apply(small_motion(rng, 20, 0.1), p);
    const LocalFeature fq = encode(w, q).local;
    const Matrix s = compute_similarity(f.descriptors, fq.descriptors, p.points(), q.points(), m);
    const RigidTransform t{random_rotation(rng), Vec3(0.3, -0.2, 0.5)};
    const PointCloud tp = apply(t, p);
    const PointCloud tq = apply(t, q);
    const Matrix st = compute_similarity(encode(w, tp).local.descriptors, encode(w, tq).local.descriptors,
                                         tp.points(), tq.points(), m);
    CHECK(relative_residual(st, s) < 1e-5);
  }
  CHECK_THROWS_AS(compute_similarity(Matrix::Zero(3, 4), Matrix::Zero(3, 5), p.points().leftCols(3),
                                     p.points().leftCols(3)),
                  Error);
}

TEST_CASE("row_argmax and confidence weights") {
  Matrix s(2, 3);
  s << 1, 3, 3,  //
      -1, -2, -3;
  CHECK(row_argmax(s) == std::vector<Index>{1, 0});
  const Vector c = confidence_weights(s);
  const Matrix sm = softmax_rows(s);
  CHECK(c(0) == doctest::Approx(sm.row(0).maxCoeff()));
  CHECK(c(1) == doctest::Approx(sm.row(1).maxCoeff()));
  Rng rng(8);
  const MatcherWeights m = MatcherWeights::random(4, 2, rng);
  const Vector lc = confidence_weights(s, m);
  CHECK((lc.array() > 0.0).all());
  CHECK((lc.array() < 1.0).all());
}

TEST_CASE("match_targets") {
  Points3 src(3, 3), tgt(3, 2);
  src << 0, 1, 5,  //
      0, 0, 5,     //
      0, 0, 5;
  tgt << 0.05, 1.0,  //
      0, 0.02,       //
      0, 0;
  CHECK(match_targets(src, tgt, 0.1) == std::vector<Index>{0, 1, -1});
}

TEST_CASE("refine with the fallback scorer") {
  const ExtractorWeights w = weights(9);
  Rng rng(10);
  SUBCASE("exact copies converge from a perturbed start") {
    for (int i = 0; i < 10; ++i) {
      const PointCloud p = cloud(200 + static_cast<std::uint64_t>(i), 512);
      const RigidTransform gt{random_rotation(rng), Vec3(0.2, -0.1, 0.3)};
      const PointCloud q = apply(gt, p.select(random_permutation(p.size(), rng)));
      const RigidTransform init = gt * small_motion(rng, 10.0, 0.1);
      const RefineResult r = refine(p, q, encode(w, p).local, encode(w, q).local, init);
      CHECK_FALSE(r.degenerate);
      CHECK(r.iterations == 3);
      CHECK(registration_errors(gt, r.transform).rot_err_deg < 1e-4);
      CHECK(r.transform.is_proper());
    }
  }
  SUBCASE("the ground truth is a fixed point") {
    const PointCloud p = cloud(11, 512);
    const RigidTransform gt{random_rotation(rng), Vec3(0.1, 0.1, 0.1)};
    const PointCloud q = apply(gt, p);
    const RefineResult r = refine(p, q, encode(w, p).local, encode(w, q).local, gt);
    const RegistrationErrors e = registration_errors(gt, r.transform);
    CHECK(e.rot_err_deg < 1e-6);
    CHECK(e.trans_err < 1e-6);
  }
  SUBCASE("zero iterations are rejected") {
    const PointCloud p = cloud(12, 64);
    RefineOptions options;
    options.iterations = 0;
    const LocalFeature f = encode(w, p).local;
    CHECK_THROWS_AS(refine(p, p, f, f, RigidTransform::identity(), {}, options), Error);
  }
  SUBCASE("every iterate is a proper rotation") {
    const PointCloud p = cloud(13, 256);
    PerturbationSpec spec;
    spec.scenario = ScenarioKind::Noisy;
    Rng prng(14);
    const RegistrationPair pair = make_registration_pair(generate_dataset(1, 15).front(), spec, 256, prng);
    const Encoding ep = encode(w, pair.source);
    const Encoding eq = encode(w, pair.target);
    const RigidTransform init = align_global(ep.global, eq.global).transform;
    for (Index n = 1; n <= 4; ++n) {
      RefineOptions options;
      options.iterations = n;
      const RefineResult r = refine(pair.source, pair.target, ep.local, eq.local, init, {}, options);
      CHECK(std::abs(r.transform.rotation.determinant() - 1.0) < 1e-9);
      CHECK(r.transform.is_proper());
    }
  }
}

TEST_CASE("exact copies are matched from any starting pose") {
  const ExtractorWeights w = weights(16);
  const auto shapes = generate_dataset(40, 17);
  Rng rng(18);
  std::vector<double> one, three;
  for (const auto& shape : shapes) {
    const PointCloud p = sample_surface(shape, 256, rng);
    const RigidTransform gt{random_rotation(rng), Vec3(0.1, 0.2, -0.1)};
    const PointCloud q = apply(gt, p.select(random_permutation(p.size(), rng)));
    const LocalFeature fp = encode(w, p).local;
    const LocalFeature fq = encode(w, q).local;
    const RigidTransform init = gt * small_motion(rng, 180.0, 1.0);
    RefineOptions options;
    options.iterations = 1;
    one.push_back(registration_errors(gt, refine(p, q, fp, fq, init, {}, options).transform).rot_err_deg);
    options.iterations = 3;
    three.push_back(registration_errors(gt, refine(p, q, fp, fq, init, {}, options).transform).rot_err_deg);
  }
  const auto converged = [](const std::vector<double>& e) {
    return std::count_if(e.begin(), e.end(), [](double x) { return x < 1e-6; });
  };
  CHECK(converged(one) == 40);
  CHECK(converged(three) == 40);
}

TEST_CASE("fine weights persistence") {
  Rng rng(19);
  FineWeights fw{ScorerWeights::random(512, 32, rng), MatcherWeights::random(512, 64, rng)};
  CHECK(fw.matcher.distance_weight(0, 0) == 0.5);
  Checkpoint ck;
  store_fine(ck, fw);
  const FineWeights back = load_fine(Checkpoint::decode(ck.encode()));
  CHECK(back.scorer.w1 == fw.scorer.w1);
  CHECK(back.scorer.b2 == fw.scorer.b2);
  CHECK(back.matcher.projection == fw.matcher.projection);
  CHECK(back.matcher.confidence == fw.matcher.confidence);
  try {
    (void)load_fine(Checkpoint{});
    FAIL("missing fine section accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::MissingCheckpoint);
  }
}

TEST_CASE("stage 2 training") {
  const auto data = generate_dataset(3, train_split_seed(20));
  const ExtractorWeights w = weights(21);
  FineTrainConfig cfg;
  cfg.steps = 5;
  cfg.points = 192;
  const std::uint64_t before = weights_checksum(w);
  const Stage2Result a = train_stage2(data, w, cfg);
  const Stage2Result b = train_stage2(data, w, cfg);
  CHECK(weights_checksum(w) == before);
  REQUIRE(a.history.size() == 5);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].matching == b.history[i].matching);
    CHECK(a.history[i].scorer == b.history[i].scorer);
    CHECK(std::isfinite(a.history[i].reg));
  }
  CHECK(a.weights.matcher.projection == b.weights.matcher.projection);

  FineTrainConfig bad;
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(train_stage2({}, w, cfg), Error);
}

TEST_CASE("a scorer trained on boxes prefers corners over face interiors") {
  const ShapeModel box = ShapeModel::box(Vec3(0.5, 0.4, 0.3)).normalized();
  const ExtractorWeights w = weights(22);
  FineTrainConfig cfg;
  cfg.steps = 60;
  cfg.points = 512;
  const Stage2Result r = train_stage2({box}, w, cfg);

  Rng rng(23);
  const PointCloud p = sample_surface(box, 1024, rng);
  const EliminationScores s = saliency(encode(w, p).local, r.weights.scorer);
  const Vec3 half = box.nodes().front().primitive.size;
  const Vec3 c = box.nodes().front().primitive.center;
  double corner = 0.0, face = 0.0;
  int nc = 0, nf = 0;
  for (Index i = 0; i < p.size(); ++i) {
    const Vec3 gap = half - (p.point(i) - c).cwiseAbs();  // distance to each pair of faces
    std::array<double, 3> g{gap(0), gap(1), gap(2)};
    std::sort(g.begin(), g.end());
    if (g[2] < 0.15 * half.minCoeff() + 0.1) {
      corner += s.values(i);
      ++nc;
    } else if (g[1] > 0.15) {
      face += s.values(i);
      ++nf;
    }
  }
  REQUIRE(nc > 0);
  REQUIRE(nf > 0);
  CHECK(corner / nc > face / nf);
}
