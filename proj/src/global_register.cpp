#include "eqreg/global_register.hpp"

#include "eqreg/kabsch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace eqreg {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Points3 query_matrix(const std::vector<OccupancySample>& queries) {
  Points3 q(3, static_cast<Index>(queries.size()));
  for (std::size_t i = 0; i < queries.size(); ++i) q.col(static_cast<Index>(i)) = queries[i].position;
  return q;
}

Matrix label_matrix(const std::vector<OccupancySample>& queries) {
  Matrix y(static_cast<Index>(queries.size()), 1);
  for (std::size_t i = 0; i < queries.size(); ++i) y(static_cast<Index>(i), 0) = queries[i].label;
  return y;
}

}  // namespace

CoarseAlignment align_global(const GlobalFeature& fp, const GlobalFeature& fq) {
  if (fp.size() != fq.size()) throw Error(Errc::ShapeMismatch, "align_global: channel counts differ");
  try {
    return {kabsch(fp.as_points(), fq.as_points()), false};
  } catch (const Error& e) {
    if (e.code() != Errc::DegenerateConfiguration) throw;
    return {RigidTransform::identity(), true};
  }
}

OccupancyDecoder OccupancyDecoder::random(Index global_channels, Index hidden, Rng& rng) {
  OccupancyDecoder d;
  const std::vector<Index> dims{global_channels + 1, hidden, hidden, 1};
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    Matrix w(dims[l], dims[l + 1]);
    for (Index j = 0; j < w.cols(); ++j)
      for (Index i = 0; i < w.rows(); ++i) w(i, j) = rng.uniform(-bound, bound);
    d.weights.push_back(std::move(w));
    d.biases.push_back(Matrix::Zero(1, dims[l + 1]));
  }
  return d;
}

OccupancyDecoder OccupancyDecoder::zeros(Index global_channels, Index hidden) {
  OccupancyDecoder d;
  const std::vector<Index> dims{global_channels + 1, hidden, hidden, 1};
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    d.weights.push_back(Matrix::Zero(dims[l], dims[l + 1]));
    d.biases.push_back(Matrix::Zero(1, dims[l + 1]));
  }
  return d;
}

double channel_rms(const Points3& channels) {
  return std::sqrt(channels.squaredNorm() / static_cast<double>(channels.cols()) + kRmsFloor);
}

Matrix decoder_inputs(const GlobalFeature& g, const Points3& queries) {
  const Points3 rel = queries.colwise() - g.centroid;
  Matrix x(queries.cols(), g.size() + 1);
  x.leftCols(g.size()).noalias() = rel.transpose() * g.channels / channel_rms(g.channels);
  x.col(g.size()) = rel.colwise().norm().transpose();
  return x;
}

Vector decode_logits(const OccupancyDecoder& dec, const GlobalFeature& g, const Points3& queries) {
  if (dec.input_size() != g.size() + 1) throw Error(Errc::ShapeMismatch, "decoder input width does not match C0 + 1");
  Matrix h = decoder_inputs(g, queries);
  for (std::size_t l = 0; l < dec.weights.size(); ++l) {
    h = (h * dec.weights[l]).rowwise() + dec.biases[l].row(0);
    if (l + 1 < dec.weights.size()) h = h.array().tanh().matrix();
  }
  return h.col(0);
}

double decode_occupancy(const OccupancyDecoder& dec, const GlobalFeature& g, const Vec3& p) {
  Points3 q(3, 1);
  q.col(0) = p;
  return sigmoid(decode_logits(dec, g, q)(0));
}

double loss_occ(const OccupancyDecoder& dec, const GlobalFeature& g, const std::vector<OccupancySample>& queries,
                double eps) {
  if (queries.empty()) throw Error(Errc::EmptyQuerySet, "loss_occ needs at least one query");
  const Vector logits = decode_logits(dec, g, query_matrix(queries));
  double total = 0.0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const double p = std::clamp(sigmoid(logits(static_cast<Index>(i))), eps, 1.0 - eps);
    total -= queries[i].label == 1 ? std::log(p) : std::log(1.0 - p);
  }
  return total;
}

double loss_reg(const RigidTransform& est, const RigidTransform& gt) {
  return (gt.rotation.transpose() * est.rotation - Mat3::Identity()).squaredNorm() +
         (gt.translation - est.translation).squaredNorm();
}

DecoderVars bind_decoder(GradTape& tape, const OccupancyDecoder& dec, bool trainable) {
  DecoderVars v;
  for (std::size_t l = 0; l < dec.weights.size(); ++l) {
    v.weights.push_back(trainable ? tape.parameter(dec.weights[l]) : tape.constant(dec.weights[l]));
    v.biases.push_back(trainable ? tape.parameter(dec.biases[l]) : tape.constant(dec.biases[l]));
  }
  return v;
}

void read_decoder(const GradTape& tape, const DecoderVars& vars, OccupancyDecoder& dec) {
  for (std::size_t l = 0; l < vars.weights.size(); ++l) {
    dec.weights[l] = tape.value(vars.weights[l]);
    dec.biases[l] = tape.value(vars.biases[l]);
  }
}

std::vector<GradTape::Var> decoder_params(const DecoderVars& vars) {
  std::vector<GradTape::Var> out;
  for (std::size_t l = 0; l < vars.weights.size(); ++l) {
    out.push_back(vars.weights[l]);
    out.push_back(vars.biases[l]);
  }
  return out;
}

GradTape::Var build_decoder_logits(GradTape& tape, const DecoderVars& vars, GradTape::Var global,
                                   const Vec3& centroid, const Points3& queries) {
  const Points3 rel = queries.colwise() - centroid;
  const Index c0 = tape.value(global).cols();
  const GradTape::Var mean_sq = tape.scale(tape.sum_squares(global), 1.0 / static_cast<double>(c0));
  const GradTape::Var rms = tape.sqrt(tape.add(mean_sq, tape.constant(Matrix::Constant(1, 1, kRmsFloor))));
  const GradTape::Var inv = tape.div(tape.constant(Matrix::Constant(1, 1, 1.0)), rms);
  const GradTape::Var dots = tape.mul_scalar(tape.matmul(tape.constant(rel.transpose()), global), inv);
  GradTape::Var h = tape.hconcat(dots, tape.constant(rel.colwise().norm().transpose()));
  for (std::size_t l = 0; l < vars.weights.size(); ++l) {
    h = tape.add_row_broadcast(tape.matmul(h, vars.weights[l]), vars.biases[l]);
    if (l + 1 < vars.weights.size()) h = tape.tanh(h);
  }
  return h;
}

GradTape::Var build_loss_occ(GradTape& tape, const DecoderVars& vars, GradTape::Var global, const Vec3& centroid,
                             const std::vector<OccupancySample>& queries, double eps) {
  if (queries.empty()) throw Error(Errc::EmptyQuerySet, "loss_occ needs at least one query");
  const GradTape::Var logits = build_decoder_logits(tape, vars, global, centroid, query_matrix(queries));
  return tape.binary_cross_entropy(tape.sigmoid(logits), label_matrix(queries), eps);
}

GradTape::Var build_loss_reg(GradTape& tape, GradTape::Var rotation, GradTape::Var translation,
                             const RigidTransform& gt) {
  const GradTape::Var rel = tape.matmul(tape.constant(gt.rotation.transpose()), rotation);
  const GradTape::Var rot_term = tape.sum_squares(tape.sub(rel, tape.constant(Mat3::Identity())));
  const GradTape::Var trans_term = tape.sum_squares(tape.sub(tape.constant(gt.translation), translation));
  return tape.add(rot_term, trans_term);
}

GradTape::Var build_alignment_residual(GradTape& tape, GradTape::Var fp, const Vec3& cp, GradTape::Var fq,
                                       const Vec3& cq, const RigidTransform& gt) {
  const Index c0 = tape.value(fp).cols();
  const Vec3 offset = gt.rotation * cp + gt.translation - cq;
  const GradTape::Var moved = tape.add_col_broadcast(tape.matmul(tape.constant(gt.rotation), fp), tape.constant(offset));
  return tape.scale(tape.sum_squares(tape.sub(moved, fq)), 1.0 / static_cast<double>(c0));
}

void store_decoder(Checkpoint& ck, const OccupancyDecoder& dec) {
  for (std::size_t l = 0; l < dec.weights.size(); ++l) {
    ck.put("decoder/layer" + std::to_string(l) + "/weight", dec.weights[l]);
    ck.put("decoder/layer" + std::to_string(l) + "/bias", dec.biases[l]);
  }
}

OccupancyDecoder load_decoder(const Checkpoint& ck) {
  OccupancyDecoder dec;
  for (std::size_t l = 0; ck.contains("decoder/layer" + std::to_string(l) + "/weight"); ++l) {
    dec.weights.push_back(ck.get("decoder/layer" + std::to_string(l) + "/weight"));
    dec.biases.push_back(ck.get("decoder/layer" + std::to_string(l) + "/bias"));
  }
  if (dec.weights.empty()) throw Error(Errc::MissingCheckpoint, "checkpoint has no decoder section");
  return dec;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || steps < 1 || batch_size < 1 || queries < 1 || points < 3 || !(clip_norm > 0.0)) {
    throw Error(Errc::ConfigInvalid, "training rates and counts must be positive");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error(Errc::ConfigInvalid, "lambda must lie in [0, 1]");
}

std::vector<Matrix*> extractor_matrices(ExtractorWeights& w) {
  std::vector<Matrix*> out;
  for (auto& layer : w.backbone) {
    out.push_back(&layer.linear);
    out.push_back(&layer.direction);
  }
  out.push_back(&w.fusion.linear);
  out.push_back(&w.fusion.direction);
  out.push_back(&w.head);
  return out;
}

double clipped_descent_step(const GradTape& tape, const std::vector<ParamBinding>& params, double learning_rate,
                            double max_norm) {
  double sq = 0.0;
  for (const auto& [var, target] : params) {
    if (tape.grad(var).size() > 0) sq += tape.grad(var).squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const double factor = norm > max_norm ? max_norm / norm : 1.0;
  for (const auto& [var, target] : params) {
    if (tape.grad(var).size() > 0) *target -= (learning_rate * factor) * tape.grad(var);
  }
  return norm;
}

double window_mean(const std::vector<double>& values, std::size_t begin, std::size_t window) {
  if (window == 0 || begin + window > values.size()) throw Error(Errc::InvalidArgument, "window out of range");
  return std::accumulate(values.begin() + static_cast<std::ptrdiff_t>(begin),
                         values.begin() + static_cast<std::ptrdiff_t>(begin + window), 0.0) /
         static_cast<double>(window);
}

Stage1Result train_stage1(const std::vector<ShapeModel>& dataset, const TrainConfig& cfg,
                          const ExtractorConfig& extractor_config, std::optional<ExtractorWeights> init) {
  if (dataset.empty()) throw Error(Errc::InvalidArgument, "train_stage1 needs a non-empty dataset");
  cfg.validate();
  Rng rng(cfg.seed);
  Rng init_rng = rng.child(1);
  Stage1Result result;
  result.extractor = init ? std::move(*init) : ExtractorWeights::random(extractor_config, init_rng);
  result.decoder = OccupancyDecoder::random(result.extractor.config.global_channels, cfg.decoder_hidden, init_rng);

  PerturbationSpec spec;
  spec.scenario = cfg.scenario;
  spec.max_angle_deg = cfg.max_angle_deg;
  spec.max_translation = cfg.max_translation;

  for (Index step = 0; step < cfg.steps; ++step) {
    GradTape tape;
    const ExtractorVars ev = bind_extractor(tape, result.extractor, true);
    const DecoderVars dv = bind_decoder(tape, result.decoder, true);

    GradTape::Var occ_sum;
    GradTape::Var res_sum;
    double reg_value = 0.0;
    for (Index b = 0; b < cfg.batch_size; ++b) {
      const ShapeModel& shape = dataset[rng.index(dataset.size())];
      const RegistrationPair pair = make_registration_pair(shape, spec, cfg.points, rng);
      const auto queries = sample_queries(shape, cfg.queries, rng);
      std::vector<OccupancySample> moved = queries;
      for (auto& q : moved) q.position = pair.gt.apply(q.position);

      const EncoderGraph gp = build_encoder(tape, ev, result.extractor.config, pair.source, false);
      const EncoderGraph gq = build_encoder(tape, ev, result.extractor.config, pair.target, false);

      const GradTape::Var occ = tape.scale(
          tape.add(build_loss_occ(tape, dv, gp.global, gp.centroid, queries),
                   build_loss_occ(tape, dv, gq.global, gq.centroid, moved)),
          0.5);
      const GradTape::Var res = build_alignment_residual(tape, gp.global, gp.centroid, gq.global, gq.centroid, pair.gt);
      occ_sum = occ_sum.valid() ? tape.add(occ_sum, occ) : occ;
      res_sum = res_sum.valid() ? tape.add(res_sum, res) : res;

      const GlobalFeature fp{tape.value(gp.global), gp.centroid};
      const GlobalFeature fq{tape.value(gq.global), gq.centroid};
      reg_value += loss_reg(align_global(fp, fq).transform, pair.gt);
    }
    const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
    const GradTape::Var occ_mean = tape.scale(occ_sum, inv_batch);
    const GradTape::Var res_mean = tape.scale(res_sum, inv_batch);
    const GradTape::Var total = tape.add(tape.scale(occ_mean, cfg.lambda), tape.scale(res_mean, 1.0 - cfg.lambda));

    LossRecord rec;
    rec.step = step;
    rec.occ = tape.scalar(occ_mean);
    rec.reg = reg_value * inv_batch;
    rec.total = tape.scalar(total);
    if (!std::isfinite(rec.occ) || !std::isfinite(rec.reg) || !std::isfinite(rec.total)) {
      throw Error(Errc::NonFiniteLoss, "stage 1 loss became non-finite at step " + std::to_string(step));
    }
    result.history.push_back(rec);

    tape.backward(total);
    std::vector<ParamBinding> bindings;
    const auto evars = extractor_params(ev);
    const auto emats = extractor_matrices(result.extractor);
    for (std::size_t i = 0; i < evars.size(); ++i) bindings.emplace_back(evars[i], emats[i]);
    for (std::size_t l = 0; l < dv.weights.size(); ++l) {
      bindings.emplace_back(dv.weights[l], &result.decoder.weights[l]);
      bindings.emplace_back(dv.biases[l], &result.decoder.biases[l]);
    }
    clipped_descent_step(tape, bindings, cfg.learning_rate, cfg.clip_norm);
  }
  return result;
}

}  // namespace eqreg
