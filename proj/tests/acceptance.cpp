// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "eqreg/global_register.hpp"
#include "eqreg/gradcheck.hpp"
#include "eqreg/harness.hpp"
#include "eqreg/local_register.hpp"
#include "eqreg/selftest.hpp"
#include "eqreg/shapes.hpp"

#include <chrono>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <string>

using namespace eqreg;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
  std::printf("%s criterion %2d: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void clean_recall() {
  ExperimentConfig cfg;
  const auto t0 = std::chrono::steady_clock::now();
  const RecallReport r = run_experiment(cfg);
  const double secs = seconds_since(t0);
  bool ok = secs < 120.0;
  std::ostringstream detail;
  detail << "clean coarse, untrained weights, 200 per range, recall";
  for (const auto& c : r.cells) {
    ok = ok && c.recall == 1.0;
    detail << ' ' << c.max_angle << ':' << c.recall;
  }
  detail << fmt(", %.1f s", secs);
  report(1, ok, detail.str());
}

void property_suites() {
  const PropertyTrials t = run_property_trials(100, 7);
  report(2, t.max_equivariance < 1e-5, fmt("max global-feature equivariance residual %.3e (< 1e-5)", t.max_equivariance));
  report(3, t.max_invariance < 1e-5, fmt("max local-descriptor invariance residual %.3e (< 1e-5)", t.max_invariance));
  report(4, t.min_unconstrained > 0.01 && t.min_without_head > 0.01,
         fmt("min residual unconstrained %.3e, without head %.3e (> 0.01)", t.min_unconstrained, t.min_without_head));
}

void kabsch_exactness() {
  const KabschTrials k = run_kabsch_trials(1000, 11);
  report(5, k.max_rot_err_deg < 1e-7 && k.max_trans_err < 1e-9,
         fmt("1000 problems, max rotation error %.3e deg, translation %.3e", k.max_rot_err_deg, k.max_trans_err));
}

void gradients() {
  double worst = 0.0;
  std::string worst_name;
  std::size_t count = 0;
  for (const auto& c : primitive_gradient_checks(5)) {
    ++count;
    if (c.result.max_rel_error >= worst) {
      worst = c.result.max_rel_error;
      worst_name = c.name;
    }
  }
  report(6, worst < 1e-4, fmt("%zu finite-difference checks, worst %.3e (%s)", count, worst, worst_name.c_str()));
}

void local_exactness() {
  Rng rng(31);
  Rng wrng(32);
  const ExtractorWeights w = ExtractorWeights::random({}, wrng);
  const auto shapes = generate_dataset(100, test_split_seed(33));
  int hits = 0;
  double worst = 0.0;
  for (const auto& shape : shapes) {
    const PointCloud p = sample_surface(shape, 1024, rng);
    const RigidTransform gt = sample_transform({180.0, 0.5, ScenarioKind::Clean}, rng);
    const PointCloud q = apply(gt, p.select(random_permutation(p.size(), rng)));
    const Vec3 axis = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)).normalized();
    const Vec3 dir = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)).normalized();
    const RigidTransform offset{axis_angle(axis, rng.uniform(0, 10) * std::numbers::pi / 180.0),
                                rng.uniform(0, 0.1) * dir};
    const RefineResult r = refine(p, q, encode(w, p).local, encode(w, q).local, gt * offset);
    const double err = registration_errors(gt, r.transform).rot_err_deg;
    worst = std::max(worst, err);
    if (err < 1e-4 && r.iterations <= 3) ++hits;
  }
  report(7, hits == 100, fmt("fallback refine %d/100 below 1e-4 deg, worst %.3e deg", hits, worst));
}

struct Trained {
  ExtractorWeights extractor;
  FineWeights fine;
};

Trained training_smoke() {
  const auto data = generate_dataset(20, train_split_seed(1));
  TrainConfig c1;
  const auto t0 = std::chrono::steady_clock::now();
  const Stage1Result s1 = train_stage1(data, c1);
  const double t1 = seconds_since(t0);
  std::vector<double> occ;
  for (const auto& h : s1.history) occ.push_back(h.occ);
  const double occ_first = window_mean(occ, 0, 10);
  const double occ_last = window_mean(occ, occ.size() - 10, 10);
  const double occ_drop = 1.0 - occ_last / occ_first;

  const std::uint64_t before = weights_checksum(s1.extractor);
  const auto t2 = std::chrono::steady_clock::now();
  const Stage2Result s2 = train_stage2(data, s1.extractor, FineTrainConfig{});
  const double t3 = seconds_since(t2);
  const bool unchanged = weights_checksum(s1.extractor) == before;
  std::vector<double> match;
  for (const auto& h : s2.history) match.push_back(h.matching);
  const double m_first = window_mean(match, 0, 10);
  const double m_last = window_mean(match, match.size() - 10, 10);
  const double m_drop = 1.0 - m_last / m_first;

  report(8, occ_drop >= 0.5 && m_drop >= 0.3 && unchanged,
         fmt("stage 1 L_occ %.2f -> %.2f (drop %.1f%%, need 50%%, %.0f s); stage 2 matching %.3f -> %.3f "
             "(drop %.1f%%, need 30%%, %.0f s); extractor %s",
             occ_first, occ_last, 100.0 * occ_drop, t1, m_first, m_last, 100.0 * m_drop, t3,
             unchanged ? "bit-identical" : "CHANGED"));
  return {s1.extractor, s2.weights};
}

void robustness(const Trained& t) {
  ExperimentConfig cfg;
  cfg.scenario = ScenarioKind::Noisy;
  cfg.stage = Stage::Full;
  cfg.angles = {45.0, 180.0};
  cfg.instances = 100;
  const RecallReport r = run_experiment(cfg, Models{t.extractor, t.fine});
  const double m45 = r.cells[0].median_rot_deg;
  const double m180 = r.cells[1].median_rot_deg;
  report(9, m180 <= 1.2 * m45,
         fmt("noisy coarse+fine median rotation error %.3f deg at 45, %.3f deg at 180 (ratio %.3f, limit 1.2)", m45,
             m180, m180 / m45));
}

void determinism(const Trained& t) {
  ExperimentConfig cfg;
  cfg.scenario = ScenarioKind::Noisy;
  cfg.stage = Stage::Full;
  cfg.instances = 10;
  cfg.points = 512;
  const Models models{t.extractor, t.fine};
  bool ok = true;
  for (ReportFormat f : {ReportFormat::Csv, ReportFormat::Json, ReportFormat::Table}) {
    const std::string a = report_format(run_experiment(cfg, models), f);
    const std::string b = report_format(run_experiment(cfg, models), f);
    ok = ok && a == b;
  }
  cfg.threads = 4;
  const std::string threaded = report_format(run_experiment(cfg, models), ReportFormat::Json);
  cfg.threads = 1;
  ok = ok && threaded == report_format(run_experiment(cfg, models), ReportFormat::Json);
  report(10, ok, "repeated eval runs (csv, json, table; 1 and 4 threads) are byte-identical");
}

}  // namespace

int main() {
  try {
    clean_recall();
    property_suites();
    kabsch_exactness();
    gradients();
    local_exactness();
    const Trained t = training_smoke();
    robustness(t);
    determinism(t);
  } catch (const std::exception& e) {
    std::printf("FAIL aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
