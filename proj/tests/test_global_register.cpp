#include "eqreg/checkpoint.hpp"
#include "eqreg/global_register.hpp"
#include "eqreg/shapes.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace eqreg;

namespace {

RigidTransform random_motion(Rng& rng) {
  return {random_rotation(rng), Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5))};
}

ExtractorWeights weights(std::uint64_t seed) {
  Rng rng(seed);
  return ExtractorWeights::random({}, rng);
}

PointCloud cloud(std::uint64_t seed, Index n = 256) {
  Rng rng(seed);
  return sample_surface(generate_dataset(1, rng).front(), n, rng);
}

}  // namespace

TEST_CASE("align_global recovers the motion of a permuted copy with untrained weights") {
  const ExtractorWeights w = weights(1);
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const PointCloud p = cloud(100 + static_cast<std::uint64_t>(i));
    const RigidTransform t = random_motion(rng);
    const PointCloud q = apply(t, p.select(random_permutation(p.size(), rng)));
    const CoarseAlignment a = align_global(encode_global(w, p), encode_global(w, q));
    CHECK_FALSE(a.degenerate);
    const RegistrationErrors e = registration_errors(t, a.transform);
    CHECK(e.rot_err_deg < 1e-4);
    CHECK(e.trans_err < 1e-6);
  }
}

TEST_CASE("align_global of identical features is the identity") {
  const GlobalFeature g = encode_global(weights(3), cloud(4));
  const CoarseAlignment a = align_global(g, g);
  CHECK((a.transform.rotation - Mat3::Identity()).norm() < 1e-12);
  CHECK(a.transform.translation.norm() < 1e-12);
}

TEST_CASE("align_global falls back to the identity on collinear channels") {
  GlobalFeature g;
  g.channels = Points3::Zero(3, 8);
  for (Index i = 0; i < 8; ++i) g.channels(0, i) = 0.1 * static_cast<double>(i);
  g.centroid = Vec3(1, 2, 3);
  const CoarseAlignment a = align_global(g, g);
  CHECK(a.degenerate);
  CHECK(a.transform.rotation == Mat3::Identity());
  CHECK(a.transform.translation == Vec3::Zero());
  GlobalFeature other = g;
  other.channels = Points3::Zero(3, 9);
  CHECK_THROWS_AS(align_global(g, other), Error);
}

TEST_CASE("align_global is conjugation consistent") {
  const ExtractorWeights w = weights(5);
  Rng rng(6);
  const ShapeModel shape = generate_dataset(1, 7).front();
  PerturbationSpec spec;
  spec.scenario = ScenarioKind::Noisy;
  spec.max_angle_deg = 60.0;
  const RegistrationPair pair = make_registration_pair(shape, spec, 256, rng);
  const RigidTransform r0 = align_global(encode_global(w, pair.source), encode_global(w, pair.target)).transform;
  for (int i = 0; i < 5; ++i) {
    const RigidTransform t = random_motion(rng);
    const RigidTransform rt =
        align_global(encode_global(w, apply(t, pair.source)), encode_global(w, apply(t, pair.target))).transform;
    const RigidTransform expected = t * r0 * t.inverse();
    CHECK((rt.rotation - expected.rotation).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((rt.translation - expected.translation).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("decoder inputs and occupancy") {
  const ExtractorWeights w = weights(8);
  const PointCloud p = cloud(9);
  const GlobalFeature g = encode_global(w, p);
  Rng rng(10);
  const OccupancyDecoder dec = OccupancyDecoder::random(32, 16, rng);
  CHECK(dec.input_size() == 33);

  SUBCASE("pose consistency") {
    for (int i = 0; i < 10; ++i) {
      const RigidTransform t = random_motion(rng);
      const GlobalFeature gt = encode_global(w, apply(t, p));
      const Vec3 x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      CHECK(std::abs(decode_occupancy(dec, gt, t.apply(x)) - decode_occupancy(dec, g, x)) < 1e-6);
    }
  }
  SUBCASE("zero weights predict one half") {
    CHECK(decode_occupancy(OccupancyDecoder::zeros(32, 16), g, Vec3(0.3, 0.1, 0.0)) == 0.5);
  }
  SUBCASE("input layout") {
    Points3 q(3, 1);
    q.col(0) = g.centroid + Vec3(0.2, -0.1, 0.4);
    const Matrix in = decoder_inputs(g, q);
    REQUIRE(in.cols() == 33);
    const double rms = std::sqrt(g.channels.squaredNorm() / 32.0 + kRmsFloor);
    CHECK(channel_rms(g.channels) == doctest::Approx(rms).epsilon(1e-14));
    CHECK(in(0, 3) == doctest::Approx(Vec3(0.2, -0.1, 0.4).dot(g.channels.col(3)) / rms).epsilon(1e-12));
    CHECK(in(0, 32) == doctest::Approx(Vec3(0.2, -0.1, 0.4).norm()).epsilon(1e-12));
  }
}

TEST_CASE("loss_occ limits") {
  const GlobalFeature g = encode_global(weights(11), cloud(12));
  std::vector<OccupancySample> qs;
  for (int i = 0; i < 10; ++i) qs.push_back({Vec3(0.1 * i, 0.0, 0.0), 1});
  SUBCASE("uniform one half gives n ln 2") {
    CHECK(loss_occ(OccupancyDecoder::zeros(32, 8), g, qs) == doctest::Approx(10.0 * std::log(2.0)));
  }
  SUBCASE("saturated correct predictions hit the clamp") {
    OccupancyDecoder dec = OccupancyDecoder::zeros(32, 8);
    dec.biases.back()(0, 0) = 60.0;
    const double eps = 1e-7;
    CHECK(loss_occ(dec, g, qs, eps) == doctest::Approx(-10.0 * std::log(1.0 - eps)).epsilon(1e-6));
    dec.biases.back()(0, 0) = -60.0;
    CHECK(loss_occ(dec, g, qs, eps) == doctest::Approx(-10.0 * std::log(eps)).epsilon(1e-6));
  }
  SUBCASE("empty query set") {
    try {
      (void)loss_occ(OccupancyDecoder::zeros(32, 8), g, {});
      FAIL("empty query set accepted");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::EmptyQuerySet);
    }
  }
  SUBCASE("tape value matches") {
    Rng rng(13);
    const OccupancyDecoder dec = OccupancyDecoder::random(32, 8, rng);
    GradTape tape;
    const DecoderVars dv = bind_decoder(tape, dec, true);
    const auto loss = build_loss_occ(tape, dv, tape.constant(g.channels), g.centroid, qs);
    CHECK(tape.scalar(loss) == doctest::Approx(loss_occ(dec, g, qs)).epsilon(1e-12));
  }
}

TEST_CASE("loss_reg") {
  Rng rng(14);
  const RigidTransform gt = random_motion(rng);
  CHECK(loss_reg(gt, gt) < 1e-24);
  const RigidTransform flipped{gt.rotation * axis_rotation(2, std::numbers::pi), gt.translation};
  CHECK(loss_reg(flipped, gt) == doctest::Approx(8.0).epsilon(1e-12));
  const RigidTransform shifted{gt.rotation, gt.translation + Vec3(0, 0.3, 0)};
  CHECK(loss_reg(shifted, gt) == doctest::Approx(0.09).epsilon(1e-12));

  const RigidTransform est = random_motion(rng);
  GradTape tape;
  const auto loss = build_loss_reg(tape, tape.constant(est.rotation), tape.constant(Matrix(est.translation)), gt);
  CHECK(tape.scalar(loss) == doctest::Approx(loss_reg(est, gt)).epsilon(1e-12));
}

TEST_CASE("alignment residual vanishes on exactly corresponding features") {
  const ExtractorWeights w = weights(15);
  Rng rng(16);
  const PointCloud p = cloud(17);
  const RigidTransform t = random_motion(rng);
  const GlobalFeature gp = encode_global(w, p);
  const GlobalFeature gq = encode_global(w, apply(t, p));
  GradTape tape;
  const auto r = build_alignment_residual(tape, tape.constant(gp.channels), gp.centroid, tape.constant(gq.channels),
                                          gq.centroid, t);
  CHECK(tape.scalar(r) < 1e-20);
}

TEST_CASE("decoder checkpoint round trip") {
  Rng rng(18);
  const OccupancyDecoder dec = OccupancyDecoder::random(32, 16, rng);
  Checkpoint ck;
  store_decoder(ck, dec);
  const OccupancyDecoder back = load_decoder(Checkpoint::decode(ck.encode()));
  REQUIRE(back.weights.size() == dec.weights.size());
  for (std::size_t l = 0; l < dec.weights.size(); ++l) {
    CHECK(back.weights[l] == dec.weights[l]);
    CHECK(back.biases[l] == dec.biases[l]);
  }
  CHECK_THROWS_AS(load_decoder(Checkpoint{}), Error);
}

TEST_CASE("training helpers") {
  CHECK(window_mean({1, 2, 3, 4}, 1, 2) == 2.5);
  CHECK_THROWS_AS(window_mean({1, 2}, 1, 2), Error);

  GradTape tape;
  Matrix a = Matrix::Constant(1, 2, 1.0);
  const auto va = tape.parameter(a);
  tape.backward(tape.scale(tape.sum(va), 10.0));  // gradient (10, 10)
  const double norm = clipped_descent_step(tape, {{va, &a}}, 0.5, 1.0);
  CHECK(norm == doctest::Approx(std::sqrt(200.0)));
  CHECK(a(0, 0) == doctest::Approx(1.0 - 0.5 / std::sqrt(2.0)));

  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda = 1.5;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.lambda = 0.5;
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK_THROWS_AS(train_stage1({}, TrainConfig{}), Error);
}

TEST_CASE("stage 1 training is deterministic and respects the loss mix") {
  const auto data = generate_dataset(3, train_split_seed(4));
  TrainConfig cfg;
  cfg.steps = 6;
  cfg.points = 96;
  cfg.queries = 32;
  cfg.decoder_hidden = 8;
  const Stage1Result a = train_stage1(data, cfg);
  const Stage1Result b = train_stage1(data, cfg);
  REQUIRE(a.history.size() == 6);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].occ == b.history[i].occ);
    CHECK(a.history[i].reg == b.history[i].reg);
    CHECK(a.history[i].total >= 0.5 * a.history[i].occ);
  }
  CHECK(weights_checksum(a.extractor) == weights_checksum(b.extractor));

  cfg.lambda = 1.0;
  const Stage1Result c = train_stage1(data, cfg);
  for (const auto& h : c.history) {
    CHECK(std::isfinite(h.reg));
    CHECK(h.total == doctest::Approx(h.occ));
  }
}

TEST_CASE("a decoder trained on a sphere separates inside from outside") {
  const std::vector<ShapeModel> data{ShapeModel::sphere(0.7)};
  TrainConfig cfg;
  cfg.steps = 150;
  cfg.points = 128;
  cfg.queries = 128;
  cfg.decoder_hidden = 16;
  cfg.scenario = ScenarioKind::Clean;
  const Stage1Result r = train_stage1(data, cfg);
  Rng rng(19);
  const PointCloud p = sample_surface(data.front(), 128, rng);
  const GlobalFeature g = encode_global(r.extractor, p);
  CHECK(decode_occupancy(r.decoder, g, g.centroid) > 0.5);
  CHECK(decode_occupancy(r.decoder, g, g.centroid + Vec3(1.0, 0.2, 0.0)) < 0.5);
}
