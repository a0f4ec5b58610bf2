#include "eqreg/gradcheck.hpp"

#include "eqreg/equinet.hpp"
#include "eqreg/global_register.hpp"
#include "eqreg/local_register.hpp"
#include "eqreg/rng.hpp"
#include "eqreg/shapes.hpp"

#include <algorithm>
#include <cmath>

namespace eqreg {

namespace {

double evaluate(const std::vector<Matrix>& params, const LossBuilder& build) {
  GradTape tape;
  std::vector<GradTape::Var> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  return tape.scalar(build(tape, vars));
}

Matrix random_matrix(Index rows, Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// Contracts a node with a fixed random weight so every output entry gets a
// distinct upstream gradient.
GradTape::Var contract(GradTape& tape, GradTape::Var v, std::uint64_t salt) {
  Rng rng(salt);
  const Matrix& x = tape.value(v);
  return tape.sum(tape.cwise_mul(v, tape.constant(random_matrix(x.rows(), x.cols(), rng))));
}

}  // namespace

GradCheckResult check_gradients(const std::vector<Matrix>& params, const LossBuilder& build, double step,
                                double floor) {
  GradTape tape;
  std::vector<GradTape::Var> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  const GradTape::Var loss = build(tape, vars);
  tape.backward(loss);

  GradCheckResult result;
  std::vector<Matrix> work = params;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix analytic = tape.grad(vars[k]);
    if (analytic.size() == 0) analytic = Matrix::Zero(params[k].rows(), params[k].cols());
    Matrix numeric(params[k].rows(), params[k].cols());
    for (Index i = 0; i < params[k].size(); ++i) {
      const double orig = work[k].data()[i];
      work[k].data()[i] = orig + step;
      const double up = evaluate(work, build);
      work[k].data()[i] = orig - step;
      const double down = evaluate(work, build);
      work[k].data()[i] = orig;
      numeric.data()[i] = (up - down) / (2.0 * step);
    }
    const double denom = std::max({analytic.norm(), numeric.norm(), floor});
    const double rel = (analytic - numeric).norm() / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_param = k;
    }
  }
  return result;
}

std::vector<NamedGradCheck> primitive_gradient_checks(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<NamedGradCheck> out;
  const auto run = [&](std::string name, std::vector<Matrix> params, const LossBuilder& build) {
    out.push_back({std::move(name), check_gradients(params, build)});
  };
  using V = GradTape::Var;
  using Vars = std::vector<V>;
  const Matrix a = random_matrix(3, 4, rng);
  const Matrix b = random_matrix(3, 4, rng);
  const Matrix c = random_matrix(4, 2, rng);
  const Matrix row = random_matrix(1, 4, rng);
  const Matrix col = random_matrix(3, 1, rng);
  const Matrix s11 = random_matrix(1, 1, rng, 0.5, 1.5);

  run("add", {a, b}, [](GradTape& t, const Vars& v) { return contract(t, t.add(v[0], v[1]), 1); });
  run("sub", {a, b}, [](GradTape& t, const Vars& v) { return contract(t, t.sub(v[0], v[1]), 2); });
  run("cwise_mul", {a, b}, [](GradTape& t, const Vars& v) { return contract(t, t.cwise_mul(v[0], v[1]), 3); });
  run("scale", {a}, [](GradTape& t, const Vars& v) { return contract(t, t.scale(v[0], -1.7), 4); });
  run("mul_scalar", {a, s11}, [](GradTape& t, const Vars& v) { return contract(t, t.mul_scalar(v[0], v[1]), 5); });
  run("matmul", {a, c}, [](GradTape& t, const Vars& v) { return contract(t, t.matmul(v[0], v[1]), 6); });
  run("matmul_nt", {a, b}, [](GradTape& t, const Vars& v) { return contract(t, t.matmul_nt(v[0], v[1]), 7); });
  run("transpose", {a}, [](GradTape& t, const Vars& v) { return contract(t, t.transpose(v[0]), 8); });
  run("add_row_broadcast", {a, row},
      [](GradTape& t, const Vars& v) { return contract(t, t.add_row_broadcast(v[0], v[1]), 9); });
  run("add_col_broadcast", {a, col},
      [](GradTape& t, const Vars& v) { return contract(t, t.add_col_broadcast(v[0], v[1]), 10); });
  run("scale_cols", {a, row}, [](GradTape& t, const Vars& v) { return contract(t, t.scale_cols(v[0], v[1]), 11); });
  run("hconcat", {a, col}, [](GradTape& t, const Vars& v) { return contract(t, t.hconcat(v[0], v[1]), 12); });
  run("tanh", {a}, [](GradTape& t, const Vars& v) { return contract(t, t.tanh(v[0]), 13); });
  run("sigmoid", {a}, [](GradTape& t, const Vars& v) { return contract(t, t.sigmoid(v[0]), 14); });
  run("sqrt", {random_matrix(3, 4, rng, 0.2, 2.0)},
      [](GradTape& t, const Vars& v) { return contract(t, t.sqrt(v[0]), 15); });

  const Matrix x = random_matrix(12, 3, rng);
  const Matrix k = random_matrix(12, 3, rng);
  run("vn_relu", {x, k}, [](GradTape& t, const Vars& v) { return contract(t, t.vn_relu(v[0], v[1]), 16); });
  run("group_mean", {x}, [](GradTape& t, const Vars& v) { return contract(t, t.group_mean(v[0], 3, 2), 17); });
  run("tile_rows", {a}, [](GradTape& t, const Vars& v) { return contract(t, t.tile_rows(v[0], 3), 18); });
  run("block_gram", {x, random_matrix(12, 2, rng)},
      [](GradTape& t, const Vars& v) { return contract(t, t.block_gram(v[0], v[1], 3), 19); });
  run("row_sq_norms", {a}, [](GradTape& t, const Vars& v) { return contract(t, t.row_sq_norms(v[0]), 20); });
  run("sum", {a}, [](GradTape& t, const Vars& v) { return t.scale(t.sum(v[0]), 0.7); });
  run("sum_squares", {a}, [](GradTape& t, const Vars& v) { return t.sum_squares(v[0]); });
  run("div", {s11, random_matrix(1, 1, rng, 0.5, 1.5)}, [](GradTape& t, const Vars& v) { return t.div(v[0], v[1]); });

  Matrix labels(6, 1);
  labels << 1, 0, 0, 1, 1, 0;
  run("binary_cross_entropy", {random_matrix(6, 1, rng, 0.1, 0.9)},
      [labels](GradTape& t, const Vars& v) { return t.binary_cross_entropy(v[0], labels); });
  const std::vector<Index> targets{2, -1, 0, 3};
  run("softmax_cross_entropy_rows", {random_matrix(4, 5, rng, -2.0, 2.0)},
      [targets](GradTape& t, const Vars& v) { return t.softmax_cross_entropy_rows(v[0], targets); });

  // Composite graphs on toy configurations.
  ExtractorConfig toy;
  toy.neighbors = 3;
  toy.global_channels = 2;
  toy.feature_channels = 3;
  toy.invariant_channels = 2;
  toy.layers = 2;
  ExtractorWeights w = ExtractorWeights::random(toy, rng);
  const ShapeModel sphere = ShapeModel::sphere(0.8);
  const PointCloud cloud = sample_surface(sphere, 10, rng);
  const auto queries = sample_queries(sphere, 8, rng);
  const OccupancyDecoder dec = OccupancyDecoder::random(toy.global_channels, 4, rng);

  std::vector<Matrix> enc_params;
  for (Matrix* m : extractor_matrices(w)) enc_params.push_back(*m);
  const auto bind_toy = [toy](const Vars& v) {
    ExtractorVars ev;
    for (Index l = 0; l < toy.layers; ++l) {
      ev.linear.push_back(v[static_cast<std::size_t>(2 * l)]);
      ev.direction.push_back(v[static_cast<std::size_t>(2 * l + 1)]);
    }
    const std::size_t base = static_cast<std::size_t>(2 * toy.layers);
    ev.fusion_linear = v[base];
    ev.fusion_direction = v[base + 1];
    ev.head = v[base + 2];
    return ev;
  };
  run("encoder", enc_params, [&](GradTape& t, const Vars& v) {
    const EncoderGraph g = build_encoder(t, bind_toy(v), toy, cloud, true);
    return t.add(contract(t, g.global, 21), contract(t, g.descriptors, 22));
  });

  std::vector<Matrix> occ_params = enc_params;
  for (std::size_t l = 0; l < dec.weights.size(); ++l) {
    occ_params.push_back(dec.weights[l]);
    occ_params.push_back(dec.biases[l]);
  }
  const std::size_t n_enc = enc_params.size();
  run("loss_occ", occ_params, [&](GradTape& t, const Vars& v) {
    const EncoderGraph g = build_encoder(t, bind_toy(v), toy, cloud, false);
    DecoderVars dv;
    for (std::size_t i = n_enc; i < v.size(); i += 2) {
      dv.weights.push_back(v[i]);
      dv.biases.push_back(v[i + 1]);
    }
    return build_loss_occ(t, dv, g.global, g.centroid, queries);
  });

  const RigidTransform gt{axis_angle(Vec3(1, 2, 3).normalized(), 0.7), Vec3(0.1, -0.2, 0.3)};
  run("loss_reg", {random_matrix(3, 3, rng), random_matrix(3, 1, rng)},
      [gt](GradTape& t, const Vars& v) { return build_loss_reg(t, v[0], v[1], gt); });
  run("alignment_residual", {random_matrix(3, 4, rng), random_matrix(3, 4, rng)},
      [gt](GradTape& t, const Vars& v) {
        return build_alignment_residual(t, v[0], Vec3(0.1, 0.2, 0.3), v[1], Vec3(-0.3, 0.0, 0.2), gt);
      });

  const Matrix fs = random_matrix(5, 6, rng);
  const Matrix ft = random_matrix(4, 6, rng);
  const Matrix dist = random_matrix(5, 4, rng, 0.0, 1.0);
  const std::vector<Index> match{1, 0, -1, 3, 2};
  run("matching_loss", {random_matrix(6, 3, rng), s11}, [&](GradTape& t, const Vars& v) {
    MatcherVars mv{v[0], v[1], t.constant(Matrix::Zero(1, 2))};
    return t.softmax_cross_entropy_rows(build_similarity(t, mv, fs, ft, dist), match);
  });
  const Matrix peaks = random_matrix(5, 1, rng, 0.2, 1.0);
  const Matrix residuals = random_matrix(5, 1, rng, 0.0, 0.5);
  run("confidence_surrogate", {random_matrix(1, 2, rng)}, [&](GradTape& t, const Vars& v) {
    MatcherVars mv{t.constant(Matrix::Zero(6, 3)), t.constant(Matrix::Zero(1, 1)), v[0]};
    const V wv = build_confidence(t, mv, peaks);
    return t.div(t.sum(t.cwise_mul(wv, t.constant(residuals))), t.sum(wv));
  });
  Matrix sal_labels(5, 1);
  sal_labels << 1, 0, 1, 0, 0;
  run("saliency_loss", {random_matrix(6, 3, rng), random_matrix(1, 3, rng), random_matrix(3, 1, rng), s11},
      [&](GradTape& t, const Vars& v) {
        const ScorerVars sv{v[0], v[1], v[2], v[3]};
        return t.binary_cross_entropy(t.sigmoid(build_saliency(t, sv, fs)), sal_labels);
      });
  return out;
}

}  // namespace eqreg
