#include "eqreg/selftest.hpp"

#include "eqreg/checkpoint.hpp"
#include "eqreg/equinet.hpp"
#include "eqreg/geometry.hpp"
#include "eqreg/gradcheck.hpp"
#include "eqreg/kabsch.hpp"
#include "eqreg/shapes.hpp"
#include "eqreg/svd3.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

namespace eqreg {

namespace {

constexpr double kPropertyTolerance = 1e-5;
constexpr double kAblationFloor = 0.01;
constexpr double kGradTolerance = 1e-4;

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

RigidTransform random_motion(Rng& rng) {
  return {random_rotation(rng), Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5))};
}

SuiteResult threshold_suite(std::string name, double value, double limit) {
  SuiteResult r{std::move(name), value < limit, {}};
  r.detail = "max residual " + sci(value) + " (limit " + sci(limit) + ")";
  return r;
}

SuiteResult checkpoint_suite(const SelftestOptions& options) {
  SuiteResult r{"checkpoint", false, {}};
  try {
    Checkpoint ck;
    if (options.checkpoint) {
      ck = Checkpoint::load(*options.checkpoint);
      (void)load_extractor(ck);
    } else {
      Rng rng(mix_seed(options.seed, 0x636b7074ULL));
      store_extractor(ck, ExtractorWeights::random({}, rng));
    }
    std::vector<std::uint8_t> bytes = ck.encode();
    if (!(Checkpoint::decode(bytes) == ck)) {
      r.detail = "decode(encode(x)) differs from x";
      return r;
    }
    bytes[bytes.size() / 2] ^= 0x5a;
    bool rejected = false;
    try {
      (void)Checkpoint::decode(bytes);
    } catch (const Error&) {
      rejected = true;
    }
    if (!rejected) {
      r.detail = "a flipped byte was not detected";
      return r;
    }
    r.passed = true;
    r.detail = std::to_string(ck.tensors().size()) + " tensors round-tripped";
  } catch (const std::exception& e) {
    r.detail = e.what();
  }
  return r;
}

}  // namespace

PropertyTrials run_property_trials(Index trials, std::uint64_t seed, Index points) {
  PropertyTrials out;
  out.min_unconstrained = std::numeric_limits<double>::infinity();
  out.min_without_head = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < trials; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    const ShapeModel shape = generate_dataset(1, rng).front();
    const PointCloud p = sample_surface(shape, points, rng);
    const ExtractorWeights w = ExtractorWeights::random({}, rng);
    const UnconstrainedWeights dense = UnconstrainedWeights::random({}, rng);
    const RigidTransform g = random_motion(rng);
    const PointCloud gp = apply(g, p);

    const Encoding a = encode(w, p);
    const Encoding b = encode(w, gp);
    out.max_equivariance =
        std::max(out.max_equivariance, relative_residual(b.global.as_points(), g * a.global.as_points()));
    out.max_invariance = std::max(out.max_invariance, relative_residual(b.local.descriptors, a.local.descriptors));

    const GlobalFeature da = encode_global_unconstrained(dense, p);
    const GlobalFeature db = encode_global_unconstrained(dense, gp);
    out.min_unconstrained = std::min(out.min_unconstrained, relative_residual(db.as_points(), g * da.as_points()));

    const LocalFeature ha = encode_local_without_head(w, p);
    const LocalFeature hb = encode_local_without_head(w, gp);
    out.min_without_head = std::min(out.min_without_head, relative_residual(hb.descriptors, ha.descriptors));
  }
  return out;
}

KabschTrials run_kabsch_trials(Index trials, std::uint64_t seed) {
  KabschTrials out;
  for (Index i = 0; i < trials; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    const Index k = 3 + static_cast<Index>(rng.index(60));
    Points3 src(3, k);
    Vector w(k);
    for (Index j = 0; j < k; ++j) {
      src.col(j) = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      w(j) = rng.uniform(0.05, 1.0);
    }
    const RigidTransform g = random_motion(rng);
    const RigidTransform est = weighted_kabsch(src, g * src, w);
    const RegistrationErrors e = registration_errors(g, est);
    out.max_rot_err_deg = std::max(out.max_rot_err_deg, e.rot_err_deg);
    out.max_trans_err = std::max(out.max_trans_err, e.trans_err);
  }
  return out;
}

double run_svd_trials(Index trials, std::uint64_t seed) {
  double worst = 0.0;
  for (Index i = 0; i < trials; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    Mat3 m;
    for (Index j = 0; j < 9; ++j) m.data()[j] = rng.uniform(-1, 1);
    if (i % 3 == 1) m.col(2) = 0.5 * m.col(0) - 2.0 * m.col(1);  // rank 2
    if (i % 3 == 2) m = m.col(0) * Vec3(rng.uniform(-1, 1), 1.0, rng.uniform(-1, 1)).transpose();  // rank 1
    const Svd3<double> d = svd3(m);
    const double scale = std::max(m.norm(), 1e-300);
    const Mat3 recon = d.u * d.s.asDiagonal() * d.v.transpose();
    worst = std::max({worst, (recon - m).norm() / scale,
                      (d.u.transpose() * d.u - Mat3::Identity()).norm(),
                      (d.v.transpose() * d.v - Mat3::Identity()).norm()});
    if (d.s(0) < d.s(1) || d.s(1) < d.s(2) || d.s(2) < 0.0) worst = std::max(worst, 1.0);
  }
  return worst;
}

bool SelftestSummary::passed() const {
  return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.passed; });
}

SelftestSummary selftest(const SelftestOptions& options) {
  SelftestSummary summary;

  summary.suites.push_back(threshold_suite("svd", run_svd_trials(options.trials, options.seed), 1e-12));

  const KabschTrials k = run_kabsch_trials(options.trials, options.seed);
  SuiteResult kabsch{"kabsch", k.max_rot_err_deg < 1e-7 && k.max_trans_err < 1e-9, {}};
  kabsch.detail = "max rot " + sci(k.max_rot_err_deg) + " deg, max trans " + sci(k.max_trans_err);
  summary.suites.push_back(kabsch);

  const PropertyTrials p = run_property_trials(options.trials, options.seed);
  summary.suites.push_back(threshold_suite("equivariance", p.max_equivariance, kPropertyTolerance));
  summary.suites.push_back(threshold_suite("invariance", p.max_invariance, kPropertyTolerance));
  SuiteResult ablation{"ablation", p.min_unconstrained > kAblationFloor && p.min_without_head > kAblationFloor, {}};
  ablation.detail = "min dense residual " + sci(p.min_unconstrained) + ", min headless residual " +
                    sci(p.min_without_head);
  summary.suites.push_back(ablation);

  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : primitive_gradient_checks(options.seed)) {
    if (c.result.max_rel_error >= worst) {
      worst = c.result.max_rel_error;
      worst_name = c.name;
    }
  }
  SuiteResult grad = threshold_suite("gradient", worst, kGradTolerance);
  grad.detail += " worst case " + worst_name;
  summary.suites.push_back(grad);

  summary.suites.push_back(checkpoint_suite(options));
  return summary;
}

}  // namespace eqreg
