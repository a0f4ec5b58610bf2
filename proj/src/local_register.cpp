#include "eqreg/local_register.hpp"

#include "eqreg/global_register.hpp"
#include "eqreg/kabsch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace eqreg {

namespace {

Matrix gaussian(Index rows, Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.normal(0.0, stddev);
  return m;
}

Points3 gather(const Points3& points, const std::vector<Index>& indices) {
  Points3 out(3, static_cast<Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) out.col(static_cast<Index>(k)) = points.col(indices[k]);
  return out;
}

Matrix gather_rows(const Matrix& m, const std::vector<Index>& indices) {
  Matrix out(static_cast<Index>(indices.size()), m.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) out.row(static_cast<Index>(k)) = m.row(indices[k]);
  return out;
}

Vector row_peaks(const Matrix& s) { return softmax_rows(s).rowwise().maxCoeff(); }

Matrix peak_inputs(const Matrix& peaks) {
  Matrix x(peaks.rows(), 2);
  x.col(0) = peaks.col(0);
  x.col(1).setOnes();
  return x;
}

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

ScorerWeights ScorerWeights::random(Index descriptor_size, Index hidden, Rng& rng) {
  ScorerWeights s;
  s.w1 = gaussian(descriptor_size, hidden, 1.0, rng);
  s.b1 = Matrix::Zero(1, hidden);
  s.w2 = gaussian(hidden, 1, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  s.b2 = Matrix::Zero(1, 1);
  return s;
}

MatcherWeights MatcherWeights::random(Index descriptor_size, Index hidden, Rng& rng) {
  const FallbackParams defaults;
  MatcherWeights m;
  // Scaled so that the projected squared distance matches the fallback's
  // descriptor distance over its temperature in expectation.
  m.projection = gaussian(descriptor_size, hidden, std::sqrt(1.0 / (defaults.temperature * hidden)), rng);
  m.distance_weight = Matrix::Constant(1, 1, defaults.distance_weight);
  m.confidence = Matrix(1, 2);
  m.confidence << 4.0, -2.0;
  return m;
}

Matrix normalize_rows(const Matrix& descriptors) {
  Matrix out = descriptors;
  for (Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n < 1e-12) {
      out.row(i).setZero();
    } else {
      out.row(i) /= n;
    }
  }
  return out;
}

EliminationScores saliency(const LocalFeature& f, const ScorerWeights& scorer) {
  const Matrix x = normalize_rows(f.descriptors);
  EliminationScores out;
  if (scorer.empty()) {
    const RowVector mean = x.colwise().mean();
    out.values = (x.rowwise() - mean).rowwise().squaredNorm();
    return out;
  }
  if (scorer.w1.rows() != x.cols()) throw Error(Errc::ShapeMismatch, "scorer input width does not match descriptors");
  const Matrix h = ((x * scorer.w1).rowwise() + scorer.b1.row(0)).array().tanh().matrix();
  out.values = ((h * scorer.w2).rowwise() + scorer.b2.row(0)).col(0);
  return out;
}

std::vector<Index> top_indices(const EliminationScores& scores, Index keep) {
  const Index n = scores.values.size();
  if (keep < 0 || keep > n) throw Error(Errc::InvalidArgument, "top_indices: keep out of range");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const auto better = [&](Index a, Index b) {
    const double sa = scores.values(a);
    const double sb = scores.values(b);
    return sa != sb ? sa > sb : a < b;
  };
  std::partial_sort(order.begin(), order.begin() + keep, order.end(), better);
  order.resize(static_cast<std::size_t>(keep));
  return order;
}

KeptPoints hard_eliminate(const PointCloud& p, const LocalFeature& f, const ScorerWeights& scorer) {
  const Index n = p.size();
  if (n < 6) throw Error(Errc::TooFewPoints, "hard_eliminate needs at least 6 points");
  if (f.descriptors.rows() != n) throw Error(Errc::ShapeMismatch, "one descriptor row per point expected");
  KeptPoints kept;
  kept.indices = top_indices(saliency(f, scorer), n / 6);
  kept.features = gather_rows(f.descriptors, kept.indices);
  return kept;
}

Matrix pairwise_distances(const Points3& a, const Points3& b) {
  Matrix d(a.cols(), b.cols());
  for (Index j = 0; j < b.cols(); ++j)
    for (Index i = 0; i < a.cols(); ++i) d(i, j) = (a.col(i) - b.col(j)).norm();
  return d;
}

Matrix compute_similarity(const Matrix& fs, const Matrix& ft, const Points3& ps, const Points3& pt,
                          const MatcherWeights& matcher, const FallbackParams& fallback) {
  if (fs.rows() != ps.cols() || ft.rows() != pt.cols() || fs.cols() != ft.cols()) {
    throw Error(Errc::ShapeMismatch, "compute_similarity: feature and point counts disagree");
  }
  const Matrix d = pairwise_distances(ps, pt);
  Matrix a = normalize_rows(fs);
  Matrix b = normalize_rows(ft);
  double beta = fallback.distance_weight;
  if (matcher.empty()) {
    const double scale = 1.0 / std::sqrt(fallback.temperature);
    a *= scale;
    b *= scale;
  } else {
    if (matcher.projection.rows() != fs.cols()) throw Error(Errc::ShapeMismatch, "matcher projection width");
    a = a * matcher.projection;
    b = b * matcher.projection;
    beta = matcher.distance_weight(0, 0);
  }
  Matrix s = 2.0 * a * b.transpose();
  s.colwise() -= a.rowwise().squaredNorm();
  s.rowwise() -= b.rowwise().squaredNorm().transpose();
  s -= beta * d;
  return s;
}

Matrix softmax_rows(const Matrix& s) {
  Matrix out(s.rows(), s.cols());
  for (Index i = 0; i < s.rows(); ++i) {
    const auto e = (s.row(i).array() - s.row(i).maxCoeff()).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

std::vector<Index> row_argmax(const Matrix& s) {
  std::vector<Index> out(static_cast<std::size_t>(s.rows()));
  for (Index i = 0; i < s.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < s.cols(); ++j)
      if (s(i, j) > s(i, best)) best = j;
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

Vector confidence_weights(const Matrix& similarity, const MatcherWeights& matcher) {
  const Vector peaks = row_peaks(similarity);
  if (matcher.empty()) return peaks;
  Vector w(peaks.size());
  for (Index i = 0; i < peaks.size(); ++i) {
    w(i) = stable_sigmoid(matcher.confidence(0, 0) * peaks(i) + matcher.confidence(0, 1));
  }
  return w;
}

RefineResult refine(const PointCloud& p, const PointCloud& q, const LocalFeature& fp, const LocalFeature& fq,
                    const RigidTransform& init, const FineWeights& fine, const RefineOptions& options) {
  if (options.iterations < 1) throw Error(Errc::InvalidArgument, "refine needs at least one iteration");
  const KeptPoints ks = hard_eliminate(p, fp, fine.scorer);
  const KeptPoints kt = hard_eliminate(q, fq, fine.scorer);
  const Points3 src = gather(p.points(), ks.indices);
  const Points3 tgt = gather(q.points(), kt.indices);

  RefineResult result;
  result.transform = init;
  result.state.source = ks.indices;
  result.state.target = kt.indices;
  result.state.transform = init;
  for (Index it = 0; it < options.iterations; ++it) {
    MatchState& st = result.state;
    st.similarity = compute_similarity(ks.features, kt.features, result.transform * src, tgt, fine.matcher,
                                       options.fallback);
    st.weights = confidence_weights(st.similarity, fine.matcher);
    const auto match = row_argmax(st.similarity);
    const Points3 matched = gather(tgt, match);
    try {
      result.transform = weighted_kabsch(src, matched, st.weights);
    } catch (const Error& e) {
      if (e.code() != Errc::DegenerateConfiguration && e.code() != Errc::InvalidArgument) throw;
      result.degenerate = true;
      break;
    }
    st.transform = result.transform;
    st.iteration = it + 1;
    result.iterations = it + 1;
  }
  return result;
}

MatcherVars bind_matcher(GradTape& tape, const MatcherWeights& m, bool trainable) {
  const auto bind = [&](const Matrix& v) { return trainable ? tape.parameter(v) : tape.constant(v); };
  return {bind(m.projection), bind(m.distance_weight), bind(m.confidence)};
}

ScorerVars bind_scorer(GradTape& tape, const ScorerWeights& s, bool trainable) {
  const auto bind = [&](const Matrix& v) { return trainable ? tape.parameter(v) : tape.constant(v); };
  return {bind(s.w1), bind(s.b1), bind(s.w2), bind(s.b2)};
}

GradTape::Var build_similarity(GradTape& tape, const MatcherVars& vars, const Matrix& fs, const Matrix& ft,
                               const Matrix& distances) {
  const GradTape::Var a = tape.matmul(tape.constant(normalize_rows(fs)), vars.projection);
  const GradTape::Var b = tape.matmul(tape.constant(normalize_rows(ft)), vars.projection);
  GradTape::Var s = tape.scale(tape.matmul_nt(a, b), 2.0);
  s = tape.add_col_broadcast(s, tape.scale(tape.row_sq_norms(a), -1.0));
  s = tape.add_row_broadcast(s, tape.scale(tape.transpose(tape.row_sq_norms(b)), -1.0));
  return tape.sub(s, tape.mul_scalar(tape.constant(distances), vars.distance_weight));
}

GradTape::Var build_saliency(GradTape& tape, const ScorerVars& vars, const Matrix& descriptors) {
  const GradTape::Var x = tape.constant(normalize_rows(descriptors));
  const GradTape::Var h = tape.tanh(tape.add_row_broadcast(tape.matmul(x, vars.w1), vars.b1));
  return tape.add_row_broadcast(tape.matmul(h, vars.w2), vars.b2);
}

GradTape::Var build_confidence(GradTape& tape, const MatcherVars& vars, const Matrix& peaks) {
  return tape.sigmoid(tape.matmul_nt(tape.constant(peak_inputs(peaks)), vars.confidence));
}

std::vector<Index> match_targets(const Points3& ps_gt, const Points3& pt, double radius) {
  std::vector<Index> out(static_cast<std::size_t>(ps_gt.cols()), -1);
  for (Index i = 0; i < ps_gt.cols(); ++i) {
    Index best = -1;
    double best_d = radius;
    for (Index j = 0; j < pt.cols(); ++j) {
      const double d = (ps_gt.col(i) - pt.col(j)).norm();
      if (d <= best_d && (best < 0 || d < best_d)) {
        best = j;
        best_d = d;
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

void store_fine(Checkpoint& ck, const FineWeights& w) {
  if (!w.scorer.empty()) {
    ck.put("fine/scorer/w1", w.scorer.w1);
    ck.put("fine/scorer/b1", w.scorer.b1);
    ck.put("fine/scorer/w2", w.scorer.w2);
    ck.put("fine/scorer/b2", w.scorer.b2);
  }
  if (!w.matcher.empty()) {
    ck.put("fine/matcher/projection", w.matcher.projection);
    ck.put("fine/matcher/distance_weight", w.matcher.distance_weight);
    ck.put("fine/matcher/confidence", w.matcher.confidence);
  }
}

FineWeights load_fine(const Checkpoint& ck) {
  if (!ck.has_section("fine/")) throw Error(Errc::MissingCheckpoint, "checkpoint has no fine-register section");
  FineWeights w;
  if (ck.has_section("fine/scorer/")) {
    w.scorer.w1 = ck.get("fine/scorer/w1");
    w.scorer.b1 = ck.get("fine/scorer/b1");
    w.scorer.w2 = ck.get("fine/scorer/w2");
    w.scorer.b2 = ck.get("fine/scorer/b2");
  }
  if (ck.has_section("fine/matcher/")) {
    w.matcher.projection = ck.get("fine/matcher/projection");
    w.matcher.distance_weight = ck.get("fine/matcher/distance_weight");
    w.matcher.confidence = ck.get("fine/matcher/confidence");
  }
  return w;
}

void FineTrainConfig::validate() const {
  if (!(learning_rate > 0.0) || steps < 1 || points < 6 || scorer_hidden < 1 || matcher_hidden < 1 ||
      !(match_radius > 0.0) || !(salient_radius > 0.0) || !(confidence_weight >= 0.0) || !(clip_norm > 0.0)) {
    throw Error(Errc::ConfigInvalid, "stage 2 rates, radii and counts must be positive");
  }
}

Stage2Result train_stage2(const std::vector<ShapeModel>& dataset, const ExtractorWeights& extractor,
                          const FineTrainConfig& cfg) {
  if (dataset.empty()) throw Error(Errc::InvalidArgument, "train_stage2 needs a non-empty dataset");
  cfg.validate();
  const std::uint64_t checksum_before = weights_checksum(extractor);

  Rng rng(cfg.seed);
  Rng init_rng = rng.child(1);
  const Index c1 = extractor.config.descriptor_size();
  Stage2Result result;
  result.weights.scorer = ScorerWeights::random(c1, cfg.scorer_hidden, init_rng);
  result.weights.matcher = MatcherWeights::random(c1, cfg.matcher_hidden, init_rng);

  PerturbationSpec spec;
  spec.scenario = cfg.scenario;
  spec.max_angle_deg = cfg.max_angle_deg;
  spec.max_translation = cfg.max_translation;

  for (Index step = 0; step < cfg.steps; ++step) {
    const ShapeModel& shape = dataset[rng.index(dataset.size())];
    const RegistrationPair pair = make_registration_pair(shape, spec, cfg.points, rng);
    const Encoding ep = encode(extractor, pair.source);
    const Encoding eq = encode(extractor, pair.target);
    const RigidTransform init = align_global(ep.global, eq.global).transform;

    const Points3 src_gt = pair.gt * pair.source.points();
    const Points3& tgt_all = pair.target.points();

    // Saliency labels: does the point's descriptor nearest neighbour in the
    // other cloud land near its true position?
    Matrix labels(pair.source.size(), 1);
    {
      const Matrix a = normalize_rows(ep.local.descriptors);
      const Matrix b = normalize_rows(eq.local.descriptors);
      const Matrix dots = a * b.transpose();
      const Vector bn = b.rowwise().squaredNorm();
      for (Index i = 0; i < a.rows(); ++i) {
        Index best = 0;
        double best_d = bn(0) - 2.0 * dots(i, 0);
        for (Index j = 1; j < b.rows(); ++j) {
          const double d = bn(j) - 2.0 * dots(i, j);
          if (d < best_d) {
            best_d = d;
            best = j;
          }
        }
        labels(i, 0) = (src_gt.col(i) - tgt_all.col(best)).norm() < cfg.salient_radius ? 1.0 : 0.0;
      }
    }

    const KeptPoints ks = hard_eliminate(pair.source, ep.local, result.weights.scorer);
    const KeptPoints kt = hard_eliminate(pair.target, eq.local, result.weights.scorer);
    const Points3 src = gather(pair.source.points(), ks.indices);
    const Points3 tgt = gather(tgt_all, kt.indices);
    const Points3 src_kept_gt = pair.gt * src;
    const Matrix distances = pairwise_distances(init * src, tgt);
    const auto targets = match_targets(src_kept_gt, tgt, cfg.match_radius);
    const auto valid = std::count_if(targets.begin(), targets.end(), [](Index t) { return t >= 0; });

    GradTape tape;
    const ScorerVars sv = bind_scorer(tape, result.weights.scorer, true);
    const MatcherVars mv = bind_matcher(tape, result.weights.matcher, true);

    const GradTape::Var sal = build_saliency(tape, sv, ep.local.descriptors);
    const GradTape::Var scorer_loss =
        tape.scale(tape.binary_cross_entropy(tape.sigmoid(sal), labels), 1.0 / static_cast<double>(labels.rows()));

    const GradTape::Var sim = build_similarity(tape, mv, ks.features, kt.features, distances);
    const GradTape::Var matching =
        tape.scale(tape.softmax_cross_entropy_rows(sim, targets), 1.0 / static_cast<double>(std::max<Index>(valid, 1)));

    const Matrix& s_value = tape.value(sim);
    const auto match = row_argmax(s_value);
    Matrix residuals(static_cast<Index>(match.size()), 1);
    for (std::size_t i = 0; i < match.size(); ++i) {
      residuals(static_cast<Index>(i), 0) = (src_kept_gt.col(static_cast<Index>(i)) - tgt.col(match[i])).squaredNorm();
    }
    const Matrix peaks = row_peaks(s_value);
    const GradTape::Var w = build_confidence(tape, mv, peaks);
    const GradTape::Var conf_loss =
        tape.div(tape.sum(tape.cwise_mul(w, tape.constant(residuals))), tape.sum(w));

    const GradTape::Var total =
        tape.add(tape.add(matching, scorer_loss), tape.scale(conf_loss, cfg.confidence_weight));

    FineLossRecord rec;
    rec.step = step;
    rec.matching = tape.scalar(matching);
    rec.scorer = tape.scalar(scorer_loss);
    rec.confidence = tape.scalar(conf_loss);
    try {
      const Vector wv = tape.value(w).col(0);
      rec.reg = loss_reg(weighted_kabsch(src, gather(tgt, match), wv), pair.gt);
    } catch (const Error&) {
      rec.reg = loss_reg(init, pair.gt);
    }
    if (!std::isfinite(rec.matching) || !std::isfinite(rec.scorer) || !std::isfinite(rec.confidence) ||
        !std::isfinite(tape.scalar(total))) {
      throw Error(Errc::NonFiniteLoss, "stage 2 loss became non-finite at step " + std::to_string(step));
    }
    result.history.push_back(rec);

    tape.backward(total);
    FineWeights& fw = result.weights;
    const std::vector<ParamBinding> bindings{
        {sv.w1, &fw.scorer.w1},         {sv.b1, &fw.scorer.b1},
        {sv.w2, &fw.scorer.w2},         {sv.b2, &fw.scorer.b2},
        {mv.projection, &fw.matcher.projection}, {mv.distance_weight, &fw.matcher.distance_weight},
        {mv.confidence, &fw.matcher.confidence}};
    clipped_descent_step(tape, bindings, cfg.learning_rate, cfg.clip_norm);
  }

  if (weights_checksum(extractor) != checksum_before) {
    throw Error(Errc::InvalidArgument, "extractor weights changed during stage 2");
  }
  return result;
}

}  // namespace eqreg
