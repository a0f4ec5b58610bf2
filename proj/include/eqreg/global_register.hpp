#pragma once

#include "eqreg/checkpoint.hpp"
#include "eqreg/equinet.hpp"
#include "eqreg/geometry.hpp"
#include "eqreg/grad_tape.hpp"
#include "eqreg/shapes.hpp"

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

namespace eqreg {

struct CoarseAlignment {
  RigidTransform transform;
  bool degenerate = false;  // identity fallback was used
};

/// Closed-form alignment of the global channel points (centroid re-added),
/// which correspond one-to-one by construction.
CoarseAlignment align_global(const GlobalFeature& fp, const GlobalFeature& fq);

/// Fully-connected occupancy head. Input per query: the C0 inner products
/// <p - centroid, channel_i>, divided by the RMS channel norm, followed by
/// |p - centroid|. The division keeps the pairing on a unit scale however
/// small the pooled channels are; it is rotation invariant.
struct OccupancyDecoder {
  std::vector<Matrix> weights;  // in x out
  std::vector<Matrix> biases;   // 1 x out

  static OccupancyDecoder random(Index global_channels, Index hidden, Rng& rng);
  static OccupancyDecoder zeros(Index global_channels, Index hidden);
  Index input_size() const { return weights.front().rows(); }
};

inline constexpr double kRmsFloor = 1e-24;

/// sqrt(|channels|_F^2 / C0 + kRmsFloor).
double channel_rms(const Points3& channels);

/// Pose-invariant decoder inputs for each query column (Q x (C0 + 1)).
Matrix decoder_inputs(const GlobalFeature& g, const Points3& queries);
Vector decode_logits(const OccupancyDecoder& dec, const GlobalFeature& g, const Points3& queries);
double decode_occupancy(const OccupancyDecoder& dec, const GlobalFeature& g, const Vec3& p);

/// Summed clamped cross-entropy of predicted occupancy against labels.
double loss_occ(const OccupancyDecoder& dec, const GlobalFeature& g, const std::vector<OccupancySample>& queries,
                double eps = 1e-7);

/// |R_gt^T R_est - I|_F^2 + |t_gt - t_est|^2.
double loss_reg(const RigidTransform& est, const RigidTransform& gt);

// Tape-level pieces.

struct DecoderVars {
  std::vector<GradTape::Var> weights;
  std::vector<GradTape::Var> biases;
};

DecoderVars bind_decoder(GradTape& tape, const OccupancyDecoder& dec, bool trainable);
void read_decoder(const GradTape& tape, const DecoderVars& vars, OccupancyDecoder& dec);
std::vector<GradTape::Var> decoder_params(const DecoderVars& vars);

/// Logits (Q x 1) for queries against a taped global feature (3 x C0).
GradTape::Var build_decoder_logits(GradTape& tape, const DecoderVars& vars, GradTape::Var global,
                                   const Vec3& centroid, const Points3& queries);
GradTape::Var build_loss_occ(GradTape& tape, const DecoderVars& vars, GradTape::Var global, const Vec3& centroid,
                             const std::vector<OccupancySample>& queries, double eps = 1e-7);
/// loss_reg with the estimate on the tape (rotation 3x3, translation 3x1).
GradTape::Var build_loss_reg(GradTape& tape, GradTape::Var rotation, GradTape::Var translation,
                             const RigidTransform& gt);
/// Alignment objective evaluated at the ground-truth transform:
/// (1/C0) sum_i |R_gt (f_P,i + c_P) + t_gt - (f_Q,i + c_Q)|^2. Its gradient
/// with respect to the feature rows is the signal used in place of
/// differentiating through the SVD.
GradTape::Var build_alignment_residual(GradTape& tape, GradTape::Var fp, const Vec3& cp, GradTape::Var fq,
                                       const Vec3& cq, const RigidTransform& gt);

void store_decoder(Checkpoint& ck, const OccupancyDecoder& dec);
OccupancyDecoder load_decoder(const Checkpoint& ck);

struct TrainConfig {
  double learning_rate = 0.05;
  Index steps = 200;
  Index batch_size = 1;
  Index queries = 256;       // n per shape
  Index points = 512;        // cloud size during training
  double lambda = 0.5;       // weight of L_occ against L_reg
  double clip_norm = 1.0;
  Index decoder_hidden = 64;
  ScenarioKind scenario = ScenarioKind::IndependentlySampled;
  double max_angle_deg = 180.0;
  double max_translation = 0.5;
  std::uint64_t seed = 1;

  void validate() const;
};

struct LossRecord {
  Index step = 0;
  double occ = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

struct Stage1Result {
  ExtractorWeights extractor;
  OccupancyDecoder decoder;
  std::vector<LossRecord> history;
};

/// Joint training of extractor and decoder with plain gradient descent and
/// global gradient-norm clipping. Deterministic per seed.
Stage1Result train_stage1(const std::vector<ShapeModel>& dataset, const TrainConfig& cfg,
                          const ExtractorConfig& extractor_config = {},
                          std::optional<ExtractorWeights> init = std::nullopt);

/// Scales all gradients so their joint L2 norm is at most max_norm, then
/// takes one descent step. Returns the pre-clip norm.
using ParamBinding = std::pair<GradTape::Var, Matrix*>;
double clipped_descent_step(const GradTape& tape, const std::vector<ParamBinding>& params, double learning_rate,
                            double max_norm);

/// Pointers to every extractor matrix in bind_extractor order.
std::vector<Matrix*> extractor_matrices(ExtractorWeights& weights);

/// Mean of `values[begin, begin + window)`.
double window_mean(const std::vector<double>& values, std::size_t begin, std::size_t window);

}  // namespace eqreg
