#pragma once

// SE(3)-equivariant feature extractor.
//
// Pipeline: subtract the centroid, build edge features [x_j - x_i, x_i] over
// the k nearest neighbors, run vector-neuron layers (channel mixing plus the
// direction-gated projection nonlinearity), average-pool to the global
// channels, then fuse per-point and global channels and detach the pose with
// an invariant head F V^T.
//
// Rotations act on every 3-vector channel identically, so the global channels
// rotate with the input and the centroid carries the translation. The local
// descriptors are inner products of co-rotating vectors and do not move.

#include "eqreg/geometry.hpp"
#include "eqreg/grad_tape.hpp"
#include "eqreg/rng.hpp"
#include "eqreg/types.hpp"

#include <vector>

namespace eqreg {

struct ExtractorConfig {
  Index neighbors = 16;
  Index global_channels = 32;    // backbone width; also C0
  Index feature_channels = 32;   // fused per-point channels
  Index invariant_channels = 16; // vectors produced by the invariant head
  Index layers = 4;              // first layer is the edge layer

  Index descriptor_size() const { return feature_channels * invariant_channels; }
  friend bool operator==(const ExtractorConfig&, const ExtractorConfig&) = default;
};

/// Channel-mixing weights (C_in x C_out) and nonlinearity directions
/// (C_out x C_out). Neither touches the coordinate axis.
struct VNLayerParams {
  Matrix linear;
  Matrix direction;
};

struct ExtractorWeights {
  ExtractorConfig config;
  std::vector<VNLayerParams> backbone;
  VNLayerParams fusion;
  Matrix head;  // feature_channels x invariant_channels

  /// Uniform in +-1/sqrt(C_in).
  static ExtractorWeights random(const ExtractorConfig& config, Rng& rng);
  void validate() const;
};

/// Per-point vector features in stacked layout (3N x C).
struct VNFeature {
  Matrix data;
  Index points() const { return data.rows() / 3; }
  Index channels() const { return data.cols(); }
};

VNFeature lift(const PointCloud& p);  // one channel holding the coordinates
VNFeature vn_linear(const Matrix& weights, const VNFeature& x);
VNFeature vn_nonlinear(const Matrix& direction, const VNFeature& x);
/// Applies the rotation to every channel vector.
VNFeature rotate(const Mat3& r, const VNFeature& x);

struct GlobalFeature {
  Points3 channels;  // 3 x C0, centered; column i is channel vector i
  Vec3 centroid = Vec3::Zero();

  Index size() const { return channels.cols(); }
  /// Channel vectors with the centroid re-added: the C0 labeled points that
  /// move rigidly with the input.
  Points3 as_points() const { return channels.colwise() + centroid; }
};

struct LocalFeature {
  Matrix descriptors;  // N x C1
};

struct Encoding {
  GlobalFeature global;
  LocalFeature local;
};

GlobalFeature encode_global(const ExtractorWeights& weights, const PointCloud& p);
/// `g` must come from `p` through the same weights; its channels are reused.
LocalFeature encode_local(const ExtractorWeights& weights, const PointCloud& p, const GlobalFeature& g);
/// Shared pass producing both features from one backbone evaluation.
Encoding encode(const ExtractorWeights& weights, const PointCloud& p);
/// Same result as encode(), evaluated through the training graph.
Encoding encode_on_tape(const ExtractorWeights& weights, const PointCloud& p);

// Tape-level construction, used for training.

struct ExtractorVars {
  std::vector<GradTape::Var> linear;
  std::vector<GradTape::Var> direction;
  GradTape::Var fusion_linear;
  GradTape::Var fusion_direction;
  GradTape::Var head;
};

/// Registers the weights on the tape as parameters (trainable) or constants.
ExtractorVars bind_extractor(GradTape& tape, const ExtractorWeights& weights, bool trainable);
/// Writes tape values back into `weights` (same layout as bind_extractor).
void read_extractor(const GradTape& tape, const ExtractorVars& vars, ExtractorWeights& weights);
std::vector<GradTape::Var> extractor_params(const ExtractorVars& vars);

struct EncoderGraph {
  GradTape::Var global;       // 3 x C0, centered
  GradTape::Var per_point;    // 3N x C0 backbone output
  GradTape::Var descriptors;  // N x C1 (invalid when local branch skipped)
  Vec3 centroid = Vec3::Zero();
};

EncoderGraph build_encoder(GradTape& tape, const ExtractorVars& vars, const ExtractorConfig& config,
                           const PointCloud& p, bool with_local);

/// Constant (3 N k x 2) edge-feature block for centered coordinates.
Matrix edge_features(const Points3& centered, const std::vector<Index>& neighbors, Index k);

// Ablation variants with the structural constraints removed.

/// Per-point features flattened to 3C-vectors and mixed by unconstrained
/// dense layers with ReLU; nothing ties coordinates together.
struct UnconstrainedWeights {
  ExtractorConfig config;
  std::vector<Matrix> layers;  // (3C_out x 3C_in), first layer takes 6 inputs

  static UnconstrainedWeights random(const ExtractorConfig& config, Rng& rng);
};

GlobalFeature encode_global_unconstrained(const UnconstrainedWeights& weights, const PointCloud& p);

/// Local descriptors without the invariant head: the fused vector features
/// flattened per point (3 * feature_channels values).
LocalFeature encode_local_without_head(const ExtractorWeights& weights, const PointCloud& p);

/// max|a - b| / max(max|b|, floor).
double relative_residual(const Matrix& a, const Matrix& b, double floor = 1e-12);

}  // namespace eqreg
