#include "eqreg/equinet.hpp"

#include <algorithm>
#include <cmath>

namespace eqreg {

namespace {

Matrix uniform_matrix(Index rows, Index cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.uniform(-bound, bound);
  return m;
}

void check_cloud(const PointCloud& p) {
  if (p.size() < 3) throw Error(Errc::InvalidArgument, "encoder needs at least 3 points");
  const Points3 centered = p.points().colwise() - p.centroid();
  if (centered.cwiseAbs().maxCoeff() < 1e-12) throw Error(Errc::DegenerateCloud, "all points coincide");
}

Index effective_neighbors(const ExtractorConfig& config, Index n) { return std::min(config.neighbors, n - 1); }

void check_shape(const Matrix& m, Index rows, Index cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) throw Error(Errc::ShapeMismatch, what);
}

}  // namespace

ExtractorWeights ExtractorWeights::random(const ExtractorConfig& config, Rng& rng) {
  ExtractorWeights w;
  w.config = config;
  const Index c = config.global_channels;
  for (Index l = 0; l < config.layers; ++l) {
    VNLayerParams layer;
    layer.linear = uniform_matrix(l == 0 ? 2 : c, c, rng);
    layer.direction = uniform_matrix(c, c, rng);
    w.backbone.push_back(std::move(layer));
  }
  w.fusion.linear = uniform_matrix(2 * c, config.feature_channels, rng);
  w.fusion.direction = uniform_matrix(config.feature_channels, config.feature_channels, rng);
  w.head = uniform_matrix(config.feature_channels, config.invariant_channels, rng);
  return w;
}

void ExtractorWeights::validate() const {
  const Index c = config.global_channels;
  if (config.layers < 1 || static_cast<Index>(backbone.size()) != config.layers) {
    throw Error(Errc::ShapeMismatch, "backbone layer count does not match config");
  }
  for (Index l = 0; l < config.layers; ++l) {
    check_shape(backbone[l].linear, l == 0 ? 2 : c, c, "backbone linear weights");
    check_shape(backbone[l].direction, c, c, "backbone direction weights");
  }
  check_shape(fusion.linear, 2 * c, config.feature_channels, "fusion linear weights");
  check_shape(fusion.direction, config.feature_channels, config.feature_channels, "fusion direction weights");
  check_shape(head, config.feature_channels, config.invariant_channels, "invariant head weights");
}

VNFeature lift(const PointCloud& p) {
  VNFeature f;
  f.data = Eigen::Map<const Vector>(p.points().data(), 3 * p.size());
  return f;
}

VNFeature vn_linear(const Matrix& weights, const VNFeature& x) {
  if (weights.rows() != x.channels()) throw Error(Errc::ShapeMismatch, "vn_linear: channel count mismatch");
  return {x.data * weights};
}

VNFeature vn_nonlinear(const Matrix& direction, const VNFeature& x) {
  if (direction.rows() != x.channels()) throw Error(Errc::ShapeMismatch, "vn_nonlinear: channel count mismatch");
  return {vn_relu_forward(x.data, x.data * direction)};
}

VNFeature rotate(const Mat3& r, const VNFeature& x) {
  VNFeature out{x.data};
  for (Index i = 0; i < x.points(); ++i) out.data.middleRows<3>(3 * i) = r * x.data.middleRows<3>(3 * i);
  return out;
}

Matrix edge_features(const Points3& centered, const std::vector<Index>& neighbors, Index k) {
  const Index n = centered.cols();
  Matrix e(3 * n * k, 2);
  for (Index i = 0; i < n; ++i) {
    for (Index m = 0; m < k; ++m) {
      const Index j = neighbors[static_cast<std::size_t>(i * k + m)];
      const Index row = 3 * (i * k + m);
      e.block<3, 1>(row, 0) = centered.col(j) - centered.col(i);
      e.block<3, 1>(row, 1) = centered.col(i);
    }
  }
  return e;
}

ExtractorVars bind_extractor(GradTape& tape, const ExtractorWeights& weights, bool trainable) {
  weights.validate();
  auto bind = [&](const Matrix& m) { return trainable ? tape.parameter(m) : tape.constant(m); };
  ExtractorVars v;
  for (const auto& layer : weights.backbone) {
    v.linear.push_back(bind(layer.linear));
    v.direction.push_back(bind(layer.direction));
  }
  v.fusion_linear = bind(weights.fusion.linear);
  v.fusion_direction = bind(weights.fusion.direction);
  v.head = bind(weights.head);
  return v;
}

void read_extractor(const GradTape& tape, const ExtractorVars& vars, ExtractorWeights& weights) {
  for (std::size_t l = 0; l < vars.linear.size(); ++l) {
    weights.backbone[l].linear = tape.value(vars.linear[l]);
    weights.backbone[l].direction = tape.value(vars.direction[l]);
  }
  weights.fusion.linear = tape.value(vars.fusion_linear);
  weights.fusion.direction = tape.value(vars.fusion_direction);
  weights.head = tape.value(vars.head);
}

std::vector<GradTape::Var> extractor_params(const ExtractorVars& vars) {
  std::vector<GradTape::Var> out;
  for (std::size_t l = 0; l < vars.linear.size(); ++l) {
    out.push_back(vars.linear[l]);
    out.push_back(vars.direction[l]);
  }
  out.push_back(vars.fusion_linear);
  out.push_back(vars.fusion_direction);
  out.push_back(vars.head);
  return out;
}

EncoderGraph build_encoder(GradTape& tape, const ExtractorVars& vars, const ExtractorConfig& config,
                           const PointCloud& p, bool with_local) {
  check_cloud(p);
  const Index n = p.size();
  const Index k = effective_neighbors(config, n);
  EncoderGraph g;
  g.centroid = p.centroid();
  const Points3 centered = p.points().colwise() - g.centroid;
  const auto neighbors = knn_indices(centered, k);

  auto vn_layer = [&](GradTape::Var x, GradTape::Var w, GradTape::Var u) {
    const GradTape::Var y = tape.matmul(x, w);
    return tape.vn_relu(y, tape.matmul(y, u));
  };

  // The edge input has only two channels, so the direction is formed from
  // the folded weights W U rather than from the wide linear output.
  const GradTape::Var edges = tape.constant(edge_features(centered, neighbors, k));
  const GradTape::Var y0 = tape.matmul(edges, vars.linear[0]);
  const GradTape::Var k0 = tape.matmul(edges, tape.matmul(vars.linear[0], vars.direction[0]));
  GradTape::Var x = tape.group_mean(tape.vn_relu(y0, k0), 3, k);
  for (std::size_t l = 1; l < vars.linear.size(); ++l) x = vn_layer(x, vars.linear[l], vars.direction[l]);
  g.per_point = x;
  g.global = tape.group_mean(x, 3, n);

  if (with_local) {
    const GradTape::Var fused = tape.hconcat(x, tape.tile_rows(g.global, n));
    const GradTape::Var f = vn_layer(fused, vars.fusion_linear, vars.fusion_direction);
    const GradTape::Var v = tape.matmul(f, vars.head);
    g.descriptors = tape.block_gram(f, v, 3);
  }
  return g;
}

namespace {

struct Backbone {
  Matrix per_point;  // 3N x C0
  Points3 global;    // 3 x C0
  Vec3 centroid;
};

// Tape-free forward pass. The edge layer is fused so the 3Nk-row edge block
// is never materialized.
Backbone backbone_forward(const ExtractorWeights& weights, const PointCloud& p) {
  weights.validate();
  check_cloud(p);
  const Index n = p.size();
  const Index k = effective_neighbors(weights.config, n);
  const Index c = weights.config.global_channels;
  Backbone b;
  b.centroid = p.centroid();
  const Points3 centered = p.points().colwise() - b.centroid;
  const auto neighbors = knn_indices(centered, k);

  const Matrix& w0 = weights.backbone[0].linear;
  const Matrix u0 = w0 * weights.backbone[0].direction;
  Matrix x = Matrix::Zero(3 * n, c);
  for (Index i = 0; i < n; ++i) {
    const Vec3 xi = centered.col(i);
    for (Index m = 0; m < k; ++m) {
      const Vec3 rel = centered.col(neighbors[static_cast<std::size_t>(i * k + m)]) - xi;
      for (Index ch = 0; ch < c; ++ch) {
        Vec3 v = w0(0, ch) * rel + w0(1, ch) * xi;
        const Vec3 d = u0(0, ch) * rel + u0(1, ch) * xi;
        const double dd = d.squaredNorm();
        const double vd = v.dot(d);
        if (dd >= 1e-24 && vd < 0.0) v -= (vd / dd) * d;
        x.block<3, 1>(3 * i, ch) += v;
      }
    }
  }
  x /= static_cast<double>(k);
  for (std::size_t l = 1; l < weights.backbone.size(); ++l) {
    const Matrix y = x * weights.backbone[l].linear;
    x = vn_relu_forward(y, y * weights.backbone[l].direction);
  }
  b.global = Points3::Zero(3, c);
  for (Index i = 0; i < n; ++i) b.global += x.middleRows<3>(3 * i);
  b.global /= static_cast<double>(n);
  b.per_point = std::move(x);
  return b;
}

Matrix local_forward(const ExtractorWeights& weights, const Matrix& per_point, const Points3& global) {
  const Index n = per_point.rows() / 3;
  const Index c = per_point.cols();
  Matrix fused(3 * n, c + global.cols());
  fused.leftCols(c) = per_point;
  for (Index i = 0; i < n; ++i) fused.block(3 * i, c, 3, global.cols()) = global;
  const Matrix y = fused * weights.fusion.linear;
  const Matrix f = vn_relu_forward(y, y * weights.fusion.direction);
  return block_gram_forward(f, f * weights.head, 3);
}

}  // namespace

Encoding encode(const ExtractorWeights& weights, const PointCloud& p) {
  const Backbone b = backbone_forward(weights, p);
  Encoding out;
  out.global.channels = b.global;
  out.global.centroid = b.centroid;
  out.local.descriptors = local_forward(weights, b.per_point, b.global);
  return out;
}

Encoding encode_on_tape(const ExtractorWeights& weights, const PointCloud& p) {
  GradTape tape;
  const ExtractorVars vars = bind_extractor(tape, weights, false);
  const EncoderGraph g = build_encoder(tape, vars, weights.config, p, true);
  Encoding out;
  out.global.channels = tape.value(g.global);
  out.global.centroid = g.centroid;
  out.local.descriptors = tape.value(g.descriptors);
  return out;
}

GlobalFeature encode_global(const ExtractorWeights& weights, const PointCloud& p) {
  const Backbone b = backbone_forward(weights, p);
  return {b.global, b.centroid};
}

LocalFeature encode_local(const ExtractorWeights& weights, const PointCloud& p, const GlobalFeature& global) {
  if (global.size() != weights.config.global_channels) {
    throw Error(Errc::ShapeMismatch, "encode_local: global feature width does not match weights");
  }
  const Backbone b = backbone_forward(weights, p);
  return {local_forward(weights, b.per_point, global.channels)};
}

UnconstrainedWeights UnconstrainedWeights::random(const ExtractorConfig& config, Rng& rng) {
  UnconstrainedWeights w;
  w.config = config;
  const Index width = 3 * config.global_channels;
  for (Index l = 0; l < config.layers; ++l) w.layers.push_back(uniform_matrix(l == 0 ? 6 : width, width, rng).transpose());
  return w;
}

GlobalFeature encode_global_unconstrained(const UnconstrainedWeights& weights, const PointCloud& p) {
  check_cloud(p);
  const Index n = p.size();
  const Index k = effective_neighbors(weights.config, n);
  const Vec3 centroid = p.centroid();
  const Points3 centered = p.points().colwise() - centroid;
  const auto neighbors = knn_indices(centered, k);
  const Index width = weights.layers.front().rows();

  Matrix x = Matrix::Zero(width, n);  // column per point
  Eigen::Matrix<double, 6, 1> edge;
  for (Index i = 0; i < n; ++i) {
    for (Index m = 0; m < k; ++m) {
      const Index j = neighbors[static_cast<std::size_t>(i * k + m)];
      edge << centered.col(j) - centered.col(i), centered.col(i);
      x.col(i) += (weights.layers[0] * edge).cwiseMax(0.0);
    }
  }
  x /= static_cast<double>(k);
  for (std::size_t l = 1; l < weights.layers.size(); ++l) x = (weights.layers[l] * x).cwiseMax(0.0);
  const Vector pooled = x.rowwise().mean();
  GlobalFeature g;
  g.channels = Eigen::Map<const Points3>(pooled.data(), 3, width / 3);
  g.centroid = centroid;
  return g;
}

LocalFeature encode_local_without_head(const ExtractorWeights& weights, const PointCloud& p) {
  GradTape tape;
  const ExtractorVars vars = bind_extractor(tape, weights, false);
  const EncoderGraph g = build_encoder(tape, vars, weights.config, p, false);
  const Index n = p.size();
  const GradTape::Var fused = tape.hconcat(g.per_point, tape.tile_rows(g.global, n));
  const GradTape::Var y = tape.matmul(fused, vars.fusion_linear);
  const Matrix f = tape.value(tape.vn_relu(y, tape.matmul(y, vars.fusion_direction)));
  const Index c = f.cols();
  LocalFeature out{Matrix(n, 3 * c)};
  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) out.descriptors.row(i).segment<3>(3 * ch) = f.col(ch).segment<3>(3 * i).transpose();
  }
  return out;
}

double relative_residual(const Matrix& a, const Matrix& b, double floor) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(Errc::ShapeMismatch, "relative_residual: shapes differ");
  if (a.size() == 0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), floor);
}

}  // namespace eqreg
