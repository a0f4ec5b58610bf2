#include "eqreg/checkpoint.hpp"
#include "eqreg/cloud_io.hpp"
#include "eqreg/global_register.hpp"
#include "eqreg/harness.hpp"
#include "eqreg/local_register.hpp"
#include "eqreg/selftest.hpp"
#include "eqreg/shapes.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace {

using namespace eqreg;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitSelftest = 2;

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::Io, "cannot write '" + path + "'");
  out << text;
}

std::vector<ShapeModel> load_or_generate(const std::string& data, Index count, std::uint64_t seed) {
  if (data.empty()) return generate_dataset(count, train_split_seed(seed));
  std::istringstream in(read_text(data));
  return read_shapes(in);
}

// Experiment flags shared by `eval`. Values stay unset until parsed so that
// only flags given on the command line override the config file.
struct ExperimentFlags {
  std::string config;
  std::string scenario;
  std::vector<std::string> angles;
  double max_trans = 0.0;
  Index instances = 0;
  std::uint64_t seed = 0;
  std::string stage;
  bool fallback = false;
  std::string checkpoint;
  Index points = 0;
  std::string crop;
  Index iterations = 0;
  Index threads = 0;
  bool timing = false;
  std::string out;
  std::string format = "table";

  CLI::Option* o_scenario = nullptr;
  CLI::Option* o_angles = nullptr;
  CLI::Option* o_trans = nullptr;
  CLI::Option* o_instances = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_stage = nullptr;
  CLI::Option* o_fallback = nullptr;
  CLI::Option* o_checkpoint = nullptr;
  CLI::Option* o_points = nullptr;
  CLI::Option* o_crop = nullptr;
  CLI::Option* o_iterations = nullptr;
  CLI::Option* o_threads = nullptr;
  CLI::Option* o_timing = nullptr;

  void attach(CLI::App& app) {
    app.add_option("--config", config, "key = value experiment file; flags override it");
    o_scenario = app.add_option("--scenario", scenario, "clean | noisy | independent | partial");
    o_angles = app.add_option("--max-angle", angles, "maximum angle(s) in degrees, comma separated")->delimiter(',');
    o_trans = app.add_option("--max-trans", max_trans, "maximum translation per axis (default 0.5)");
    o_instances = app.add_option("--instances", instances, "instances per angle range (default 200)");
    o_seed = app.add_option("--seed", seed, "base seed (default 1)");
    o_stage = app.add_option("--stage", stage, "coarse | full");
    o_fallback = app.add_flag("--fallback-scorer", fallback, "use the non-learned fine scorer");
    o_checkpoint = app.add_option("--checkpoint", checkpoint, "trained weights");
    o_points = app.add_option("--points", points, "points per cloud (default 1024)");
    o_crop = app.add_option("--crop", crop, "partial-overlap crop: fps | halfspace");
    o_iterations = app.add_option("--iterations", iterations, "fine refinement iterations (default 3)");
    o_threads = app.add_option("--threads", threads, "worker threads (default 1)");
    o_timing = app.add_flag("--timing", timing, "report wall-clock seconds per instance");
    app.add_option("--out", out, "output file (default stdout)");
    app.add_option("--format", format, "csv | json | table");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg;
    if (!config.empty()) cfg = read_experiment_config(read_text(config));
    if (o_scenario->count()) cfg.scenario = parse_scenario(scenario);
    if (o_angles->count()) {
      cfg.angles.clear();
      for (const auto& a : angles) {
        try {
          cfg.angles.push_back(std::stod(a));
        } catch (const std::exception&) {
          throw Error(Errc::ConfigInvalid, "--max-angle expects numbers, got '" + a + "'");
        }
      }
    }
    if (o_trans->count()) cfg.max_translation = max_trans;
    if (o_instances->count()) cfg.instances = instances;
    if (o_seed->count()) cfg.seed = seed;
    if (o_stage->count()) cfg.stage = parse_stage(stage);
    if (o_fallback->count()) cfg.fallback_scorer = fallback;
    if (o_checkpoint->count()) cfg.checkpoint = checkpoint;
    if (o_points->count()) cfg.points = points;
    if (o_crop->count()) cfg.crop = read_experiment_config("crop = " + crop).crop;
    if (o_iterations->count()) cfg.refine_iterations = iterations;
    if (o_threads->count()) cfg.threads = threads;
    if (o_timing->count()) cfg.timing = timing;
    cfg.validate();
    return cfg;
  }
};

int run_eval(const ExperimentFlags& flags) {
  const ReportFormat fmt = parse_format(flags.format);
  const RecallReport report = run_experiment(flags.resolve());
  write_output(flags.out, report_format(report, fmt));
  return kExitOk;
}

struct GenDataFlags {
  Index count = 20;
  std::uint64_t seed = 1;
  std::string split = "train";
  std::string out;
  std::string pairs;
  std::string scenario = "clean";
  double max_angle = 45.0;
  double max_trans = 0.5;
  Index points = 1024;
};

int run_gen_data(const GenDataFlags& f) {
  if (f.count < 1) throw Error(Errc::ConfigInvalid, "--count must be at least 1");
  std::uint64_t seed = 0;
  if (f.split == "train") {
    seed = train_split_seed(f.seed);
  } else if (f.split == "test") {
    seed = test_split_seed(f.seed);
  } else {
    throw Error(Errc::ConfigInvalid, "--split must be train or test");
  }
  const std::vector<ShapeModel> shapes = generate_dataset(f.count, seed);
  std::ostringstream os;
  write_shapes(os, shapes);
  write_output(f.out, os.str());

  if (f.pairs.empty()) return kExitOk;
  PerturbationSpec spec;
  spec.scenario = parse_scenario(f.scenario);
  spec.max_angle_deg = f.max_angle;
  spec.max_translation = f.max_trans;
  spec.validate();
  const std::filesystem::path dir(f.pairs);
  std::filesystem::create_directories(dir);
  std::ostringstream gt;
  gt << "index,r00,r01,r02,r10,r11,r12,r20,r21,r22,t0,t1,t2\n" << std::setprecision(17);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Rng rng(mix_seed(f.seed, i));
    const RegistrationPair pair = make_registration_pair(shapes[i], spec, f.points, rng);
    save_xyz(dir / ("source_" + std::to_string(i) + ".xyz"), pair.source);
    save_xyz(dir / ("target_" + std::to_string(i) + ".xyz"), pair.target);
    gt << i;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) gt << ',' << pair.gt.rotation(r, c);
    for (int r = 0; r < 3; ++r) gt << ',' << pair.gt.translation(r);
    gt << '\n';
  }
  write_output((dir / "ground_truth.csv").string(), gt.str());
  return kExitOk;
}

struct TrainFlags {
  std::string data;
  Index count = 20;
  std::uint64_t seed = 1;
  Index steps = 200;
  double lr = 0.0;
  std::string checkpoint;
  std::string out;
  std::string log;
  CLI::Option* o_lr = nullptr;
  CLI::Option* o_seed = nullptr;
};

int run_train_coarse(const TrainFlags& f) {
  if (f.out.empty()) throw Error(Errc::ConfigInvalid, "train-coarse needs --out");
  TrainConfig cfg;
  cfg.steps = f.steps;
  cfg.seed = f.seed;
  if (f.o_lr->count()) cfg.learning_rate = f.lr;
  cfg.validate();
  const Stage1Result r = train_stage1(load_or_generate(f.data, f.count, f.seed), cfg);
  Checkpoint ck;
  store_extractor(ck, r.extractor);
  store_decoder(ck, r.decoder);
  ck.save(f.out);
  if (!f.log.empty()) {
    std::ostringstream os;
    os << "step,occ,reg,total\n" << std::setprecision(10);
    for (const auto& h : r.history) os << h.step << ',' << h.occ << ',' << h.reg << ',' << h.total << '\n';
    write_output(f.log, os.str());
  }
  std::cerr << "stage 1: " << r.history.size() << " steps, final L_occ " << r.history.back().occ << '\n';
  return kExitOk;
}

int run_train_fine(const TrainFlags& f) {
  if (f.checkpoint.empty()) throw Error(Errc::MissingCheckpoint, "train-fine needs --checkpoint from train-coarse");
  if (f.out.empty()) throw Error(Errc::ConfigInvalid, "train-fine needs --out");
  const Checkpoint in = Checkpoint::load(f.checkpoint);
  const ExtractorWeights extractor = load_extractor(in);
  FineTrainConfig cfg;
  cfg.steps = f.steps;
  if (f.o_seed->count()) cfg.seed = f.seed;
  if (f.o_lr->count()) cfg.learning_rate = f.lr;
  cfg.validate();
  const Stage2Result r = train_stage2(load_or_generate(f.data, f.count, f.seed), extractor, cfg);
  Checkpoint ck;
  store_extractor(ck, extractor);
  if (in.has_section("decoder/")) store_decoder(ck, load_decoder(in));
  store_fine(ck, r.weights);
  ck.save(f.out);
  if (!f.log.empty()) {
    std::ostringstream os;
    os << "step,matching,scorer,confidence,reg\n" << std::setprecision(10);
    for (const auto& h : r.history) {
      os << h.step << ',' << h.matching << ',' << h.scorer << ',' << h.confidence << ',' << h.reg << '\n';
    }
    write_output(f.log, os.str());
  }
  std::cerr << "stage 2: " << r.history.size() << " steps, final matching loss " << r.history.back().matching
            << '\n';
  return kExitOk;
}

int run_selftest(std::uint64_t seed, Index trials, const std::string& checkpoint) {
  SelftestOptions options;
  options.seed = seed;
  options.trials = trials;
  if (!checkpoint.empty()) options.checkpoint = checkpoint;
  const SelftestSummary s = selftest(options);
  for (const auto& suite : s.suites) {
    std::cout << (suite.passed ? "PASS " : "FAIL ") << std::left << std::setw(14) << suite.name << suite.detail
              << '\n';
  }
  std::cout << (s.passed() ? "selftest passed" : "selftest FAILED") << '\n';
  return s.passed() ? kExitOk : kExitSelftest;
}

int run_report(const std::vector<std::string>& inputs, const std::string& format, const std::string& out) {
  const ReportFormat fmt = parse_format(format);
  std::string text;
  for (const auto& path : inputs) text += report_format(parse_report_json(read_text(path)), fmt);
  write_output(out, text);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine rigid point cloud registration with equivariant features"};
  app.require_subcommand(1);

  GenDataFlags gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "write procedural shapes (and optional registration pairs)");
  gen_cmd->add_option("--count", gen.count, "number of shapes");
  gen_cmd->add_option("--seed", gen.seed, "base seed");
  gen_cmd->add_option("--split", gen.split, "train | test");
  gen_cmd->add_option("--out", gen.out, "shape file (default stdout)");
  gen_cmd->add_option("--pairs", gen.pairs, "directory for source/target clouds and ground truth");
  gen_cmd->add_option("--scenario", gen.scenario, "clean | noisy | independent | partial");
  gen_cmd->add_option("--max-angle", gen.max_angle, "maximum angle in degrees");
  gen_cmd->add_option("--max-trans", gen.max_trans, "maximum translation per axis");
  gen_cmd->add_option("--points", gen.points, "points per cloud");

  TrainFlags coarse;
  CLI::App* coarse_cmd = app.add_subcommand("train-coarse", "stage 1: extractor and occupancy decoder");
  TrainFlags fine;
  fine.seed = 2;
  CLI::App* fine_cmd = app.add_subcommand("train-fine", "stage 2: saliency scorer and matcher");
  for (auto [cmd, f] : {std::pair{coarse_cmd, &coarse}, std::pair{fine_cmd, &fine}}) {
    cmd->add_option("--data", f->data, "shape file from gen-data (default: generate)");
    cmd->add_option("--count", f->count, "shapes to generate when --data is absent");
    f->o_seed = cmd->add_option("--seed", f->seed, "training seed");
    cmd->add_option("--steps", f->steps, "gradient steps");
    f->o_lr = cmd->add_option("--lr", f->lr, "learning rate");
    cmd->add_option("--out", f->out, "checkpoint to write");
    cmd->add_option("--log", f->log, "per-step loss csv");
  }
  fine_cmd->add_option("--checkpoint", fine.checkpoint, "stage-1 checkpoint");

  ExperimentFlags eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "run a recall experiment");
  eval.attach(*eval_cmd);

  std::uint64_t st_seed = 7;
  Index st_trials = 100;
  std::string st_checkpoint;
  CLI::App* st_cmd = app.add_subcommand("selftest", "property suites; exit 2 on failure");
  st_cmd->add_option("--seed", st_seed, "seed");
  st_cmd->add_option("--trials", st_trials, "trials per property suite");
  st_cmd->add_option("--checkpoint", st_checkpoint, "also round-trip this checkpoint");

  std::vector<std::string> report_inputs;
  std::string report_format_name = "table";
  std::string report_out;
  CLI::App* report_cmd = app.add_subcommand("report", "re-render json reports");
  report_cmd->add_option("inputs", report_inputs, "json reports from eval")->required();
  report_cmd->add_option("--format", report_format_name, "csv | json | table");
  report_cmd->add_option("--out", report_out, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*coarse_cmd) return run_train_coarse(coarse);
    if (*fine_cmd) return run_train_fine(fine);
    if (*eval_cmd) return run_eval(eval);
    if (*st_cmd) return run_selftest(st_seed, st_trials, st_checkpoint);
    if (*report_cmd) return run_report(report_inputs, report_format_name, report_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}
