#include "eqreg/harness.hpp"

#include "eqreg/checkpoint.hpp"
#include "eqreg/global_register.hpp"
#include "eqreg/shapes.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <sstream>
#include <thread>

namespace eqreg {

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974ULL;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw Error(Errc::ConfigInvalid, "config key '" + key + "' expects a number, got '" + value + "'");
  }
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw Error(Errc::ConfigInvalid, "config key '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw Error(Errc::ConfigInvalid, "config key '" + key + "' expects true or false, got '" + value + "'");
}

std::vector<double> parse_angle_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    if (!t.empty()) out.push_back(parse_double(key, t));
  }
  return out;
}

std::string method_name(const ExperimentConfig& cfg) {
  if (cfg.stage == Stage::Coarse) return "Ours-coarse";
  return cfg.fallback_scorer ? "Ours-full-fallback" : "Ours-full";
}

}  // namespace

std::string_view to_string(Stage stage) { return stage == Stage::Coarse ? "coarse" : "full"; }

Stage parse_stage(std::string_view name) {
  if (name == "coarse") return Stage::Coarse;
  if (name == "full") return Stage::Full;
  throw Error(Errc::ConfigInvalid, "unknown stage '" + std::string(name) + "' (expected coarse or full)");
}

void ExperimentConfig::validate() const {
  if (instances < 1) throw Error(Errc::ConfigInvalid, "instance count must be at least 1");
  for (double a : angles) {
    if (!(a > 0.0 && a <= 180.0)) throw Error(Errc::ConfigInvalid, "angle ranges must lie in (0, 180]");
  }
  if (!(max_translation >= 0.0) || !std::isfinite(max_translation)) {
    throw Error(Errc::ConfigInvalid, "max translation must be finite and non-negative");
  }
  if (points < 6) throw Error(Errc::ConfigInvalid, "at least 6 points per cloud are required");
  if (refine_iterations < 1) throw Error(Errc::ConfigInvalid, "refine needs at least one iteration");
  if (threads < 1) throw Error(Errc::ConfigInvalid, "thread count must be at least 1");
}

Models load_models(const ExperimentConfig& cfg) {
  Models m;
  const bool needs_fine = cfg.stage == Stage::Full && !cfg.fallback_scorer;
  if (cfg.checkpoint.empty()) {
    if (needs_fine) {
      throw Error(Errc::MissingCheckpoint, "the learned fine register needs --checkpoint (or use --fallback-scorer)");
    }
    Rng rng(mix_seed(cfg.seed, kInitStream));
    m.extractor = ExtractorWeights::random({}, rng);
    return m;
  }
  const Checkpoint ck = Checkpoint::load(cfg.checkpoint);
  m.extractor = load_extractor(ck);
  if (needs_fine) m.fine = load_fine(ck);
  return m;
}

InstanceOutcome run_instance(const ExperimentConfig& cfg, const Models& models, double max_angle, Index index) {
  const auto start = std::chrono::steady_clock::now();
  Rng shape_rng(mix_seed(test_split_seed(cfg.seed), static_cast<std::uint64_t>(index)));
  const ShapeModel shape = generate_dataset(1, shape_rng).front();

  PerturbationSpec spec;
  spec.max_angle_deg = max_angle;
  spec.max_translation = cfg.max_translation;
  spec.scenario = cfg.scenario;
  spec.crop = cfg.crop;
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(index)));
  const RegistrationPair pair = make_registration_pair(shape, spec, cfg.points, rng);

  InstanceOutcome out;
  out.gt = pair.gt;
  if (cfg.stage == Stage::Coarse) {
    const CoarseAlignment coarse =
        align_global(encode_global(models.extractor, pair.source), encode_global(models.extractor, pair.target));
    out.estimate = coarse.transform;
    out.degenerate = coarse.degenerate;
  } else {
    const Encoding ep = encode(models.extractor, pair.source);
    const Encoding eq = encode(models.extractor, pair.target);
    const CoarseAlignment coarse = align_global(ep.global, eq.global);
    RefineOptions options;
    options.iterations = cfg.refine_iterations;
    const FineWeights fine = models.fine.value_or(FineWeights{});
    const RefineResult fine_result =
        refine(pair.source, pair.target, ep.local, eq.local, coarse.transform, fine, options);
    out.estimate = fine_result.transform;
    out.degenerate = coarse.degenerate || fine_result.degenerate;
  }
  out.errors = registration_errors(out.gt, out.estimate);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw Error(Errc::EmptyBatch, "median of an empty list");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

RecallReport run_experiment(const ExperimentConfig& cfg) { return run_experiment(cfg, load_models(cfg)); }

RecallReport run_experiment(const ExperimentConfig& cfg, const Models& models) {
  cfg.validate();
  models.extractor.validate();
  const std::size_t per_angle = static_cast<std::size_t>(cfg.instances);
  const std::size_t jobs = cfg.angles.size() * per_angle;
  std::vector<InstanceOutcome> outcomes(jobs);

  // Workers claim job indices; each result lands in its own slot, so the
  // aggregation below is independent of scheduling.
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  const auto worker = [&] {
    for (std::size_t job = next++; job < jobs && !failed; job = next++) {
      try {
        outcomes[job] = run_instance(cfg, models, cfg.angles[job / per_angle], static_cast<Index>(job % per_angle));
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
      }
    }
  };
  const std::size_t thread_count = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), std::max<std::size_t>(jobs, 1));
  if (thread_count <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < thread_count; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  RecallReport report;
  report.scenario = std::string(to_string(cfg.scenario));
  report.stage = std::string(to_string(cfg.stage));
  report.method = method_name(cfg);
  report.timing = cfg.timing;
  for (std::size_t a = 0; a < cfg.angles.size(); ++a) {
    std::vector<RegistrationErrors> errors;
    std::vector<double> rot, trans;
    double seconds = 0.0;
    for (std::size_t i = 0; i < per_angle; ++i) {
      const InstanceOutcome& o = outcomes[a * per_angle + i];
      errors.push_back(o.errors);
      rot.push_back(o.errors.rot_err_deg);
      trans.push_back(o.errors.trans_err);
      seconds += o.seconds;
    }
    RecallCell cell;
    cell.max_angle = cfg.angles[a];
    cell.instances = cfg.instances;
    cell.recall = recall(errors);
    cell.median_rot_deg = median(rot);
    cell.median_trans = median(trans);
    cell.seconds_per_instance = cfg.timing ? seconds / static_cast<double>(per_angle) : 0.0;
    report.cells.push_back(cell);
  }
  return report;
}

ExperimentConfig read_experiment_config(const std::string& text, ExperimentConfig cfg) {
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw Error(Errc::ConfigInvalid, "config line " + std::to_string(line_no) + " is not key = value");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key == "scenario") {
      cfg.scenario = parse_scenario(value);
    } else if (key == "max-angle") {
      cfg.angles = parse_angle_list(key, value);
    } else if (key == "max-trans") {
      cfg.max_translation = parse_double(key, value);
    } else if (key == "instances") {
      cfg.instances = static_cast<Index>(parse_unsigned(key, value));
    } else if (key == "seed") {
      cfg.seed = parse_unsigned(key, value);
    } else if (key == "stage") {
      cfg.stage = parse_stage(value);
    } else if (key == "fallback-scorer") {
      cfg.fallback_scorer = parse_bool(key, value);
    } else if (key == "checkpoint") {
      cfg.checkpoint = value;
    } else if (key == "points") {
      cfg.points = static_cast<Index>(parse_unsigned(key, value));
    } else if (key == "crop") {
      if (value == "fps") {
        cfg.crop = CropMode::Fps;
      } else if (value == "halfspace") {
        cfg.crop = CropMode::HalfSpace;
      } else {
        throw Error(Errc::ConfigInvalid, "crop must be fps or halfspace");
      }
    } else if (key == "iterations") {
      cfg.refine_iterations = static_cast<Index>(parse_unsigned(key, value));
    } else if (key == "threads") {
      cfg.threads = static_cast<Index>(parse_unsigned(key, value));
    } else if (key == "timing") {
      cfg.timing = parse_bool(key, value);
    } else {
      throw Error(Errc::ConfigInvalid, "unknown config key '" + key + "'");
    }
  }
  return cfg;
}

}  // namespace eqreg
