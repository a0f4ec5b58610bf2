#pragma once

#include "eqreg/types.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace eqreg {

/// Worst-case residuals over random (cloud, weights, R, t) trials.
struct PropertyTrials {
  double max_equivariance = 0.0;   // global features: |g(RP+t) - R g(P) - t| relative
  double max_invariance = 0.0;     // local descriptors: |d(RP+t) - d(P)| relative
  double min_unconstrained = 0.0;  // equivariance residual with dense layers
  double min_without_head = 0.0;   // invariance residual with the head removed
};

PropertyTrials run_property_trials(Index trials, std::uint64_t seed, Index points = 128);

struct KabschTrials {
  double max_rot_err_deg = 0.0;
  double max_trans_err = 0.0;
};

/// Exact-correspondence weighted Procrustes problems with random weights.
KabschTrials run_kabsch_trials(Index trials, std::uint64_t seed);

/// max over random 3x3 inputs (including rank-deficient ones) of the
/// reconstruction and orthogonality residuals of svd3.
double run_svd_trials(Index trials, std::uint64_t seed);

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelftestSummary {
  std::vector<SuiteResult> suites;
  bool passed() const;
};

struct SelftestOptions {
  std::uint64_t seed = 7;
  Index trials = 100;
  std::optional<std::filesystem::path> checkpoint;  // also round-trip this file
};

SelftestSummary selftest(const SelftestOptions& options = {});

}  // namespace eqreg
