#include "eqreg/checkpoint.hpp"
#include "eqreg/harness.hpp"
#include "eqreg/selftest.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace eqreg;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.instances = 6;
  cfg.points = 256;
  cfg.angles = {45.0, 180.0};
  return cfg;
}

}  // namespace

TEST_CASE("stage names") {
  CHECK(parse_stage("coarse") == Stage::Coarse);
  CHECK(parse_stage("full") == Stage::Full);
  CHECK(to_string(Stage::Full) == "full");
  try {
    (void)parse_stage("fine");
    FAIL("unknown stage accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ConfigInvalid);
  }
}

TEST_CASE("config files") {
  const ExperimentConfig cfg = read_experiment_config(
      "# comment\n"
      "scenario = partial\n"
      "max-angle = 30, 60\n"
      "instances = 12   # trailing\n"
      "stage = full\n"
      "fallback-scorer = true\n"
      "crop = halfspace\n"
      "threads = 3\n"
      "timing = no\n");
  CHECK(cfg.scenario == ScenarioKind::PartialOverlap);
  CHECK(cfg.angles == std::vector<double>{30.0, 60.0});
  CHECK(cfg.instances == 12);
  CHECK(cfg.stage == Stage::Full);
  CHECK(cfg.fallback_scorer);
  CHECK(cfg.crop == CropMode::HalfSpace);
  CHECK(cfg.threads == 3);
  CHECK_FALSE(cfg.timing);
  CHECK(cfg.points == 1024);

  for (const char* bad : {"colour = red\n", "instances = many\n", "just words\n", "crop = circle\n"}) {
    try {
      (void)read_experiment_config(bad);
      FAIL("accepted: " << bad);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::ConfigInvalid);
    }
  }
}

TEST_CASE("config validation") {
  ExperimentConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.angles = {0.0};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.angles = {181.0};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.instances = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.threads = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.refine_iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("model resolution") {
  ExperimentConfig cfg;
  cfg.stage = Stage::Full;
  try {
    (void)load_models(cfg);
    FAIL("full stage without checkpoint accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::MissingCheckpoint);
  }
  cfg.fallback_scorer = true;
  const Models m = load_models(cfg);
  CHECK_FALSE(m.fine.has_value());
  CHECK(weights_checksum(load_models(cfg).extractor) == weights_checksum(m.extractor));
  cfg.checkpoint = (std::filesystem::temp_directory_path() / "eqreg_missing.ck").string();
  CHECK_THROWS_AS(load_models(cfg), Error);
}

TEST_CASE("median") {
  CHECK(median({3.0}) == 3.0);
  CHECK(median({4.0, 1.0, 3.0}) == 3.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK_THROWS_AS(median({}), Error);
}

TEST_CASE("experiments") {
  SUBCASE("a zero perturbation is always recalled") {
    ExperimentConfig cfg = small_config();
    cfg.max_translation = 0.0;
    cfg.angles = {1e-9};
    const RecallReport r = run_experiment(cfg);
    REQUIRE(r.cells.size() == 1);
    CHECK(r.cells[0].recall == 1.0);
    CHECK(r.cells[0].median_rot_deg < 1e-4);
  }
  SUBCASE("same seed gives byte identical reports") {
    ExperimentConfig cfg = small_config();
    cfg.scenario = ScenarioKind::Noisy;
    cfg.stage = Stage::Full;
    cfg.fallback_scorer = true;
    const std::string a = report_format(run_experiment(cfg), ReportFormat::Csv);
    const std::string b = report_format(run_experiment(cfg), ReportFormat::Csv);
    CHECK(a == b);
    cfg.threads = 3;
    CHECK(report_format(run_experiment(cfg), ReportFormat::Csv) == a);
    cfg.seed = 2;
    CHECK(report_format(run_experiment(cfg), ReportFormat::Csv) != a);
  }
  SUBCASE("report labels") {
    const RecallReport r = run_experiment(small_config());
    CHECK(r.method == "Ours-coarse");
    CHECK(r.scenario == "clean");
    CHECK(r.stage == "coarse");
    CHECK(r.cells[0].instances == 6);
    CHECK(r.cells[1].max_angle == 180.0);
  }
}

TEST_CASE("report formats") {
  RecallReport r{"noisy", "full", "Ours-full", false, {}};
  for (double a : {45.0, 90.0, 135.0, 180.0}) r.cells.push_back({a, 10, 0.5, 1.25, 0.0625, 0.0});

  SUBCASE("table headers") {
    const std::string t = report_format(r, "table");
    for (const char* label : {"[0,45]", "[0,90]", "[0,135]", "[0,180]"}) CHECK(t.find(label) != std::string::npos);
    CHECK(t.find("50.0") != std::string::npos);
    CHECK(t.find("seconds") == std::string::npos);
  }
  SUBCASE("empty angle lists give a header only") {
    RecallReport empty = r;
    empty.cells.clear();
    const std::string t = report_format(empty, "table");
    CHECK(std::count(t.begin(), t.end(), '\n') == 1);
    const std::string c = report_format(empty, "csv");
    CHECK(std::count(c.begin(), c.end(), '\n') == 1);
  }
  SUBCASE("csv") {
    const std::string c = report_format(r, ReportFormat::Csv);
    CHECK(c.rfind("scenario,stage,method,max_angle", 0) == 0);
    CHECK(c.find("noisy,full,Ours-full,135,10,0.5,1.25,0.0625\n") != std::string::npos);
  }
  SUBCASE("json round trip") {
    CHECK(parse_report_json(report_format(r, ReportFormat::Json)) == r);
    RecallReport timed = r;
    timed.timing = true;
    timed.cells[2].seconds_per_instance = 0.75;
    CHECK(parse_report_json(report_format(timed, ReportFormat::Json)) == timed);
    CHECK_THROWS_AS(parse_report_json("{\"scenario\": 1}"), Error);
  }
  SUBCASE("unknown formats") {
    try {
      (void)report_format(r, "xml");
      FAIL("xml accepted");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::UnknownFormat);
    }
  }
}

TEST_CASE("selftest") {
  SelftestOptions options;
  options.trials = 10;
  const SelftestSummary s = selftest(options);
  for (const auto& suite : s.suites) CHECK_MESSAGE(suite.passed, suite.name << ": " << suite.detail);
  CHECK(s.passed());

  SUBCASE("a corrupt checkpoint fails its suite") {
    Rng rng(3);
    Checkpoint ck;
    store_extractor(ck, ExtractorWeights::random({}, rng));
    auto bytes = ck.encode();
    bytes[bytes.size() / 2] ^= 0x10;
    const auto path = std::filesystem::temp_directory_path() / "eqreg_corrupt.ck";
    {
      std::ofstream out(path, std::ios::binary);
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    options.checkpoint = path.string();
    const SelftestSummary bad = selftest(options);
    std::filesystem::remove(path);
    CHECK_FALSE(bad.passed());
    bool checkpoint_failed = false;
    for (const auto& suite : bad.suites) {
      if (suite.name == "checkpoint") checkpoint_failed = !suite.passed;
    }
    CHECK(checkpoint_failed);
  }
}
