#pragma once
// Fine register: keep the most salient points of each cloud, match them by a
// distance-aware similarity over invariant descriptors, and re-solve the
// rigid transform with confidence-weighted Kabsch a few times.
//
// Every learned component has a deterministic fallback so the geometric
// pipeline runs without a stage-2 checkpoint.

#include "eqreg/checkpoint.hpp"
#include "eqreg/equinet.hpp"
#include "eqreg/geometry.hpp"
#include "eqreg/grad_tape.hpp"
#include "eqreg/shapes.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace eqreg {

struct EliminationScores {
  Vector values;  // one saliency per point
};

/// Two-layer saliency head on row-normalized descriptors.
struct ScorerWeights {
  Matrix w1, b1, w2, b2;  // (C1 x h), (1 x h), (h x 1), (1 x 1)

  static ScorerWeights random(Index descriptor_size, Index hidden, Rng& rng);
  bool empty() const { return w1.size() == 0; }
};

/// Learned similarity: descriptors are projected by `projection`, compared by
/// squared distance, and penalized by `distance_weight` times the current
/// Euclidean separation. Confidence is sigmoid(conf(0) * peak + conf(1)),
/// where peak is the row-softmax maximum.
struct MatcherWeights {
  Matrix projection;       // C1 x h
  Matrix distance_weight;  // 1 x 1
  Matrix confidence;       // 1 x 2

  static MatcherWeights random(Index descriptor_size, Index hidden, Rng& rng);
  bool empty() const { return projection.size() == 0; }
};

struct FineWeights {
  ScorerWeights scorer;
  MatcherWeights matcher;
};

struct FallbackParams {
  double temperature = 0.01;     // divides squared descriptor distance
  double distance_weight = 0.5;  // per unit of Euclidean separation
};

/// Descriptors scaled to unit row norm (rows with norm below 1e-12 are zeroed).
Matrix normalize_rows(const Matrix& descriptors);

/// Learned scores when `scorer` is non-empty, otherwise the squared distance
/// of each normalized descriptor from the cloud's mean descriptor.
EliminationScores saliency(const LocalFeature& f, const ScorerWeights& scorer = {});

/// Indices of the `keep` highest scores, ties to the lower index, in
/// descending score order.
std::vector<Index> top_indices(const EliminationScores& scores, Index keep);

struct KeptPoints {
  std::vector<Index> indices;
  Matrix features;  // rows of the input descriptors, in `indices` order
};

/// Keeps floor(N / 6) points by saliency. Throws TooFewPoints when N < 6.
KeptPoints hard_eliminate(const PointCloud& p, const LocalFeature& f, const ScorerWeights& scorer = {});

/// Pairwise Euclidean distances between the columns of `a` and `b`.
Matrix pairwise_distances(const Points3& a, const Points3& b);

/// Similarity between kept source and target points. `ps` must already be
/// mapped by the current transform.
Matrix compute_similarity(const Matrix& fs, const Matrix& ft, const Points3& ps, const Points3& pt,
                          const MatcherWeights& matcher = {}, const FallbackParams& fallback = {});

/// Row-wise softmax.
Matrix softmax_rows(const Matrix& s);

struct MatchState {
  std::vector<Index> source;  // kept source indices
  std::vector<Index> target;  // kept target indices
  Matrix similarity;          // |source| x |target|
  Vector weights;             // per kept source point
  RigidTransform transform;
  Index iteration = 0;
};

struct RefineResult {
  RigidTransform transform;
  bool degenerate = false;  // a Kabsch solve failed; transform is the best so far
  Index iterations = 0;
  MatchState state;
};

struct RefineOptions {
  Index iterations = 3;
  FallbackParams fallback;
};

/// Iterative matching plus weighted Kabsch starting from `init`. Empty
/// weights in `fine` select the fallback scorer and matcher.
RefineResult refine(const PointCloud& p, const PointCloud& q, const LocalFeature& fp, const LocalFeature& fq,
                    const RigidTransform& init, const FineWeights& fine = {}, const RefineOptions& options = {});

/// Per-row argmax, ties to the lower column.
std::vector<Index> row_argmax(const Matrix& s);

/// Confidence per row from the softmax peak (fallback: the peak itself).
Vector confidence_weights(const Matrix& similarity, const MatcherWeights& matcher = {});

// Tape-level pieces.

struct MatcherVars {
  GradTape::Var projection, distance_weight, confidence;
};
struct ScorerVars {
  GradTape::Var w1, b1, w2, b2;
};

MatcherVars bind_matcher(GradTape& tape, const MatcherWeights& m, bool trainable);
ScorerVars bind_scorer(GradTape& tape, const ScorerWeights& s, bool trainable);

GradTape::Var build_similarity(GradTape& tape, const MatcherVars& vars, const Matrix& fs, const Matrix& ft,
                               const Matrix& distances);
/// Logits (N x 1) of the saliency head for the given raw descriptors.
GradTape::Var build_saliency(GradTape& tape, const ScorerVars& vars, const Matrix& descriptors);
/// Weights (K x 1) from the softmax peak of each similarity row.
GradTape::Var build_confidence(GradTape& tape, const MatcherVars& vars, const Matrix& peaks);

/// Target per row: index of the nearest kept target point under the
/// ground-truth map, or -1 when that point is farther than `radius`.
std::vector<Index> match_targets(const Points3& ps_gt, const Points3& pt, double radius);

void store_fine(Checkpoint& ck, const FineWeights& w);
FineWeights load_fine(const Checkpoint& ck);

struct FineTrainConfig {
  double learning_rate = 0.3;
  Index steps = 200;
  Index points = 512;
  Index scorer_hidden = 32;
  Index matcher_hidden = 64;
  double match_radius = 0.1;      // ground-truth correspondence cutoff
  double salient_radius = 0.05;   // scorer label cutoff
  double confidence_weight = 1.0; // weight of the confidence surrogate
  double clip_norm = 1.0;
  ScenarioKind scenario = ScenarioKind::Noisy;
  double max_angle_deg = 180.0;
  double max_translation = 0.5;
  std::uint64_t seed = 2;

  void validate() const;
};

struct FineLossRecord {
  Index step = 0;
  double matching = 0.0;
  double scorer = 0.0;
  double confidence = 0.0;
  double reg = 0.0;
};

struct Stage2Result {
  FineWeights weights;
  std::vector<FineLossRecord> history;
};

/// Trains the saliency head and matcher with the extractor frozen. The
/// extractor checksum is compared before and after; a change throws.
Stage2Result train_stage2(const std::vector<ShapeModel>& dataset, const ExtractorWeights& extractor,
                          const FineTrainConfig& cfg);

}  // namespace eqreg
