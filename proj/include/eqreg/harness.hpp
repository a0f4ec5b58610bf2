#pragma once

#include "eqreg/equinet.hpp"
#include "eqreg/geometry.hpp"
#include "eqreg/local_register.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace eqreg {

enum class Stage { Coarse, Full };

std::string_view to_string(Stage stage);
/// "coarse" or "full"; throws ConfigInvalid otherwise.
Stage parse_stage(std::string_view name);

struct ExperimentConfig {
  ScenarioKind scenario = ScenarioKind::Clean;
  std::vector<double> angles{45.0, 90.0, 135.0, 180.0};
  double max_translation = 0.5;
  Index instances = 200;
  Stage stage = Stage::Coarse;
  bool fallback_scorer = false;
  std::uint64_t seed = 1;
  std::string checkpoint;  // empty: untrained extractor drawn from `seed`
  Index points = 1024;
  CropMode crop = CropMode::Fps;
  Index refine_iterations = 3;
  Index threads = 1;
  bool timing = false;  // wall-clock is non-deterministic, so off by default

  void validate() const;
};

struct RecallCell {
  double max_angle = 0.0;
  Index instances = 0;
  double recall = 0.0;
  double median_rot_deg = 0.0;
  double median_trans = 0.0;
  double seconds_per_instance = 0.0;  // only meaningful when timing is on

  friend bool operator==(const RecallCell&, const RecallCell&) = default;
};

struct RecallReport {
  std::string scenario;
  std::string stage;
  std::string method;
  bool timing = false;
  std::vector<RecallCell> cells;

  friend bool operator==(const RecallReport&, const RecallReport&) = default;
};

/// Weights used by an experiment. `fine` empty means the fallback scorer.
struct Models {
  ExtractorWeights extractor;
  std::optional<FineWeights> fine;
};

/// Resolves the models an experiment needs: the checkpoint when one is
/// named, otherwise an untrained extractor seeded from cfg.seed. Throws
/// MissingCheckpoint when the full pipeline needs learned fine weights that
/// are not available.
Models load_models(const ExperimentConfig& cfg);

struct InstanceOutcome {
  RigidTransform gt;
  RigidTransform estimate;
  RegistrationErrors errors;
  bool degenerate = false;
  double seconds = 0.0;
};

/// One registration instance. Instance `index` sees the same shape, clouds
/// and noise for every angle; only the sampled transform depends on it.
InstanceOutcome run_instance(const ExperimentConfig& cfg, const Models& models, double max_angle, Index index);

RecallReport run_experiment(const ExperimentConfig& cfg);
RecallReport run_experiment(const ExperimentConfig& cfg, const Models& models);

/// Median of a non-empty list (mean of the middle pair for even sizes).
double median(std::vector<double> values);

enum class ReportFormat { Csv, Json, Table };

/// Throws UnknownFormat for anything but csv, json or table.
ReportFormat parse_format(std::string_view name);
std::string report_format(const RecallReport& r, ReportFormat fmt);
std::string report_format(const RecallReport& r, std::string_view fmt);
/// Inverse of the json format. Throws ConfigInvalid on malformed input.
RecallReport parse_report_json(std::string_view text);

/// Reads `key = value` lines; '#' starts a comment. Throws ConfigInvalid on
/// unknown keys or malformed values.
ExperimentConfig read_experiment_config(const std::string& text, ExperimentConfig base = {});

}  // namespace eqreg
