#include "eqreg/grad_tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace eqreg {

namespace {

constexpr double kVnEps = 1e-12;

void require(bool ok, const char* what) {
  if (!ok) throw Error(Errc::ShapeMismatch, what);
}

double sigmoid_scalar(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Matrix vn_relu_forward(const Matrix& x, const Matrix& k) {
  require(x.rows() == k.rows() && x.cols() == k.cols() && x.rows() % 3 == 0, "vn_relu: shape mismatch");
  Matrix out = x;
  const Index rows = x.rows();
  for (Index c = 0; c < x.cols(); ++c) {
    const double* xv = x.col(c).data();
    const double* kv = k.col(c).data();
    double* ov = out.col(c).data();
    for (Index r = 0; r < rows; r += 3) {
      const double dd = kv[r] * kv[r] + kv[r + 1] * kv[r + 1] + kv[r + 2] * kv[r + 2];
      if (dd < kVnEps * kVnEps) continue;
      const double vd = xv[r] * kv[r] + xv[r + 1] * kv[r + 1] + xv[r + 2] * kv[r + 2];
      if (vd >= 0.0) continue;
      const double f = vd / dd;
      ov[r] = xv[r] - f * kv[r];
      ov[r + 1] = xv[r + 1] - f * kv[r + 1];
      ov[r + 2] = xv[r + 2] - f * kv[r + 2];
    }
  }
  return out;
}

Matrix block_gram_forward(const Matrix& f, const Matrix& v, Index block) {
  require(f.rows() == v.rows() && block > 0 && f.rows() % block == 0, "block_gram: shape mismatch");
  const Index points = f.rows() / block;
  const Index cf = f.cols();
  const Index cv = v.cols();
  Matrix out(points, cf * cv);
  Matrix gram(cf, cv);
  for (Index i = 0; i < points; ++i) {
    gram.noalias() = f.middleRows(i * block, block).transpose() * v.middleRows(i * block, block);
    for (Index r = 0; r < cf; ++r) out.row(i).segment(r * cv, cv) = gram.row(r);
  }
  return out;
}

GradTape::Var GradTape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

GradTape::Var GradTape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

GradTape::Var GradTape::parameter(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  Var v = push(std::move(n));
  params_.push_back(v);
  return v;
}

double GradTape::scalar(Var v) const {
  const Matrix& m = value(v);
  require(m.size() == 1, "scalar: node is not 1x1");
  return m(0, 0);
}

GradTape::Var GradTape::add(Var a, Var b) {
  require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add: shape mismatch");
  Node n;
  n.op = Op::Add;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = requires_grad(a) || requires_grad(b);
  n.value = value(a) + value(b);
  return push(std::move(n));
}

GradTape::Var GradTape::sub(Var a, Var b) {
  require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "sub: shape mismatch");
  Node n;
  n.op = Op::Sub;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = requires_grad(a) || requires_grad(b);
  n.value = value(a) - value(b);
  return push(std::move(n));
}

GradTape::Var GradTape::cwise_mul(Var a, Var b) {
  require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "cwise_mul: shape mismatch");
  Node n;
  n.op = Op::CwiseMul;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = requires_grad(a) || requires_grad(b);
  n.value = value(a).cwiseProduct(value(b));
  return push(std::move(n));
}

GradTape::Var GradTape::scale(Var a, double s) {
  Node n;
  n.op = Op::Scale;
  n.a = a.id;
  n.coeff = s;
  n.requires_grad = requires_grad(a);
  n.value = s * value(a);
  return push(std::move(n));
}

GradTape::Var GradTape::mul_scalar(Var a, Var s) {
  require(value(s).size() == 1, "mul_scalar: scalar must be 1x1");
  Node n;
  n.op = Op::MulScalar;
  n.a = a.id;
  n.b = s.id;
  n.requires_grad = requires_grad(a) || requires_grad(s);
  n.value = value(s)(0, 0) * value(a);
  return push(std::move(n));
}

GradTape::Var GradTape::matmul(Var a, Var b) {
  require(value(a).cols() == value(b).rows(), "matmul: inner dimension mismatch");
  Node n;
  n.op = Op::MatMul;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = requires_grad(a) || requires_grad(b);
  n.value.noalias() = value(a) * value(b);
  return push(std::move(n));
}

GradTape::Var GradTape::matmul_nt(Var a, Var b) {
  require(value(a).cols() == value(b).cols(), "matmul_nt: inner dimension mismatch");
  Node n;
  n.op = Op::MatMulNT;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = requires_grad(a) || requires_grad(b);
  n.value.noalias() = value(a) * value(b).transpose();
  return push(std::move(n));
}

GradTape::Var GradTape::transpose(Var a) {
  Node n;
  n.op = Op::Transpose;
  n.a = a.id;
  n.requires_grad = requires_grad(a);
  n.value = value(a).transpose();
  return push(std::move(n));
}

GradTape::Var GradTape::add_row_broadcast(Var a, Var row) {
  require(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "add_row_broadcast: shape mismatch");
  Node n;
  n.op = Op::AddRowBroadcast;
  n.a = a.id;
  n.b = row.id;
  n.requires_grad = requires_grad(a) || requires_grad(row);
  n.value = value(a).rowwise() + value(row).row(0);
  return push(std::move(n));
}

GradTape::Var GradTape::add_col_broadcast(Var a, Var col) {
  require(value(col).cols() == 1 && value(col).rows() == value(a).rows(), "add_col_broadcast: shape mismatch");
  Node n;
  n.op = Op::AddColBroadcast;
  n.a = a.id;
  n.b = col.id;
  n.requires_grad = requires_grad(a) || requires_grad(col);
  n.value = value(a).colwise() + value(col).col(0);
  return push(std::move(n));
}

GradTape::Var GradTape::scale_cols(Var a, Var row) {
  require(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "scale_cols: shape mismatch");
  Node n;
  n.op = Op::ScaleCols;
  n.a = a.id;
  n.b = row.id;
  n.requires_grad = requires_grad(a) || requires_grad(row);
  n.value = value(a) * value(row).row(0).asDiagonal();
  return push(std::move(n));
}

GradTape::Var GradTape::hconcat(Var a, Var b) {
  require(value(a).rows() == value(b).rows(), "hconcat: row mismatch");
  Node n;
  n.op = Op::HConcat;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = requires_grad(a) || requires_grad(b);
  n.value.resize(value(a).rows(), value(a).cols() + value(b).cols());
  n.value << value(a), value(b);
  return push(std::move(n));
}

GradTape::Var GradTape::tanh(Var a) {
  Node n;
  n.op = Op::Tanh;
  n.a = a.id;
  n.requires_grad = requires_grad(a);
  n.value = value(a).array().tanh().matrix();
  return push(std::move(n));
}

GradTape::Var GradTape::sigmoid(Var a) {
  Node n;
  n.op = Op::Sigmoid;
  n.a = a.id;
  n.requires_grad = requires_grad(a);
  n.value = value(a).unaryExpr([](double z) { return sigmoid_scalar(z); });
  return push(std::move(n));
}

GradTape::Var GradTape::sqrt(Var a) {
  require(value(a).minCoeff() > 0.0, "sqrt: input must be positive");
  Node n;
  n.op = Op::Sqrt;
  n.a = a.id;
  n.requires_grad = requires_grad(a);
  n.value = value(a).array().sqrt().matrix();
  return push(std::move(n));
}

GradTape::Var GradTape::vn_relu(Var x, Var k) {
  Node n;
  n.op = Op::VnRelu;
  n.a = x.id;
  n.b = k.id;
  n.requires_grad = requires_grad(x) || requires_grad(k);
  n.value = vn_relu_forward(value(x), value(k));
  return push(std::move(n));
}

GradTape::Var GradTape::group_mean(Var x, Index block, Index group) {
  const Matrix& in = value(x);
  require(block > 0 && group > 0 && in.rows() % (block * group) == 0, "group_mean: rows not divisible");
  const Index groups = in.rows() / (block * group);
  Node n;
  n.op = Op::GroupMean;
  n.a = x.id;
  n.block = block;
  n.group = group;
  n.requires_grad = requires_grad(x);
  n.value = Matrix::Zero(groups * block, in.cols());
  const double inv = 1.0 / static_cast<double>(group);
  for (Index c = 0; c < in.cols(); ++c) {
    const double* src = in.col(c).data();
    double* dst = n.value.col(c).data();
    for (Index g = 0; g < groups; ++g) {
      for (Index m = 0; m < group; ++m) {
        const double* blk = src + (g * group + m) * block;
        for (Index b = 0; b < block; ++b) dst[g * block + b] += blk[b];
      }
      for (Index b = 0; b < block; ++b) dst[g * block + b] *= inv;
    }
  }
  return push(std::move(n));
}

GradTape::Var GradTape::tile_rows(Var x, Index times) {
  require(times > 0, "tile_rows: times must be positive");
  Node n;
  n.op = Op::TileRows;
  n.a = x.id;
  n.group = times;
  n.requires_grad = requires_grad(x);
  n.value = value(x).replicate(times, 1);
  return push(std::move(n));
}

GradTape::Var GradTape::block_gram(Var f, Var v, Index block) {
  const Matrix& fv = value(f);
  const Matrix& vv = value(v);
  require(fv.rows() == vv.rows() && block > 0 && fv.rows() % block == 0, "block_gram: shape mismatch");
  Node n;
  n.op = Op::BlockGram;
  n.a = f.id;
  n.b = v.id;
  n.block = block;
  n.requires_grad = requires_grad(f) || requires_grad(v);
  n.value = block_gram_forward(fv, vv, block);
  return push(std::move(n));
}

GradTape::Var GradTape::row_sq_norms(Var a) {
  Node n;
  n.op = Op::RowSqNorms;
  n.a = a.id;
  n.requires_grad = requires_grad(a);
  n.value = value(a).rowwise().squaredNorm();
  return push(std::move(n));
}

GradTape::Var GradTape::sum(Var a) {
  Node n;
  n.op = Op::Sum;
  n.a = a.id;
  n.requires_grad = requires_grad(a);
  n.value = Matrix::Constant(1, 1, value(a).sum());
  return push(std::move(n));
}

GradTape::Var GradTape::sum_squares(Var a) {
  Node n;
  n.op = Op::SumSquares;
  n.a = a.id;
  n.requires_grad = requires_grad(a);
  n.value = Matrix::Constant(1, 1, value(a).squaredNorm());
  return push(std::move(n));
}

GradTape::Var GradTape::div(Var a, Var b) {
  require(value(a).size() == 1 && value(b).size() == 1, "div: operands must be 1x1");
  Node n;
  n.op = Op::Div;
  n.a = a.id;
  n.b = b.id;
  n.requires_grad = requires_grad(a) || requires_grad(b);
  n.value = Matrix::Constant(1, 1, value(a)(0, 0) / value(b)(0, 0));
  return push(std::move(n));
}

GradTape::Var GradTape::binary_cross_entropy(Var prob, const Matrix& labels, double eps) {
  const Matrix& p = value(prob);
  require(p.rows() == labels.rows() && p.cols() == labels.cols(), "binary_cross_entropy: shape mismatch");
  Node n;
  n.op = Op::BinaryCrossEntropy;
  n.a = prob.id;
  n.coeff = eps;
  n.aux = labels;
  n.requires_grad = requires_grad(prob);
  double total = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p(i), eps, 1.0 - eps);
    const double y = labels(i);
    total -= y * std::log(q) + (1.0 - y) * std::log(1.0 - q);
  }
  n.value = Matrix::Constant(1, 1, total);
  return push(std::move(n));
}

GradTape::Var GradTape::softmax_cross_entropy_rows(Var logits, const std::vector<Index>& targets) {
  const Matrix& s = value(logits);
  require(static_cast<Index>(targets.size()) == s.rows(), "softmax_cross_entropy_rows: one target per row");
  Node n;
  n.op = Op::SoftmaxCrossEntropyRows;
  n.a = logits.id;
  n.targets = targets;
  n.requires_grad = requires_grad(logits);
  n.aux.resize(s.rows(), s.cols());  // softmax probabilities
  double total = 0.0;
  for (Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    const auto e = (s.row(i).array() - mx).exp();
    const double z = e.sum();
    n.aux.row(i) = e / z;
    const Index t = targets[static_cast<std::size_t>(i)];
    if (t < 0) continue;
    require(t < s.cols(), "softmax_cross_entropy_rows: target out of range");
    total -= s(i, t) - mx - std::log(z);
  }
  n.value = Matrix::Constant(1, 1, total);
  return push(std::move(n));
}

void GradTape::accumulate(std::size_t id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void GradTape::backward(Var loss) {
  require(value(loss).size() == 1, "backward: loss must be 1x1");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = Matrix::Ones(1, 1);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (n.op == Op::Leaf || !n.requires_grad || n.grad.size() == 0) continue;
    backprop_node(n);
  }
}

void GradTape::backprop_node(const Node& n) {
  const Matrix& g = n.grad;
  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::Add:
      accumulate(n.a, g);
      accumulate(n.b, g);
      break;
    case Op::Sub:
      accumulate(n.a, g);
      accumulate(n.b, -g);
      break;
    case Op::CwiseMul:
      accumulate(n.a, g.cwiseProduct(nodes_[n.b].value));
      accumulate(n.b, g.cwiseProduct(nodes_[n.a].value));
      break;
    case Op::Scale:
      accumulate(n.a, n.coeff * g);
      break;
    case Op::MulScalar: {
      const double s = nodes_[n.b].value(0, 0);
      accumulate(n.a, s * g);
      accumulate(n.b, Matrix::Constant(1, 1, g.cwiseProduct(nodes_[n.a].value).sum()));
      break;
    }
    case Op::MatMul:
      if (nodes_[n.a].requires_grad) accumulate(n.a, g * nodes_[n.b].value.transpose());
      if (nodes_[n.b].requires_grad) accumulate(n.b, nodes_[n.a].value.transpose() * g);
      break;
    case Op::MatMulNT:
      if (nodes_[n.a].requires_grad) accumulate(n.a, g * nodes_[n.b].value);
      if (nodes_[n.b].requires_grad) accumulate(n.b, g.transpose() * nodes_[n.a].value);
      break;
    case Op::Transpose:
      accumulate(n.a, g.transpose());
      break;
    case Op::AddRowBroadcast:
      accumulate(n.a, g);
      accumulate(n.b, g.colwise().sum());
      break;
    case Op::AddColBroadcast:
      accumulate(n.a, g);
      accumulate(n.b, g.rowwise().sum());
      break;
    case Op::ScaleCols: {
      const Matrix& a = nodes_[n.a].value;
      const Matrix& row = nodes_[n.b].value;
      accumulate(n.a, g * row.row(0).asDiagonal());
      accumulate(n.b, g.cwiseProduct(a).colwise().sum());
      break;
    }
    case Op::HConcat: {
      const Index ca = nodes_[n.a].value.cols();
      accumulate(n.a, g.leftCols(ca));
      accumulate(n.b, g.rightCols(g.cols() - ca));
      break;
    }
    case Op::Tanh:
      accumulate(n.a, g.cwiseProduct((1.0 - n.value.array().square()).matrix()));
      break;
    case Op::Sigmoid:
      accumulate(n.a, g.cwiseProduct((n.value.array() * (1.0 - n.value.array())).matrix()));
      break;
    case Op::Sqrt:
      accumulate(n.a, (0.5 * g.array() / n.value.array()).matrix());
      break;
    case Op::VnRelu: {
      const Matrix& x = nodes_[n.a].value;
      const Matrix& k = nodes_[n.b].value;
      Matrix gx = g;
      Matrix gk = Matrix::Zero(k.rows(), k.cols());
      const Index points = x.rows() / 3;
      for (Index c = 0; c < x.cols(); ++c) {
        for (Index i = 0; i < points; ++i) {
          const Eigen::Vector3d v = x.col(c).segment<3>(3 * i);
          const Eigen::Vector3d d = k.col(c).segment<3>(3 * i);
          const double dd = d.squaredNorm();
          if (dd < kVnEps * kVnEps) continue;
          const double vd = v.dot(d);
          if (vd >= 0.0) continue;
          const Eigen::Vector3d go = g.col(c).segment<3>(3 * i);
          const double gd = go.dot(d);
          gx.col(c).segment<3>(3 * i) = go - (gd / dd) * d;
          gk.col(c).segment<3>(3 * i) = -(gd / dd) * v + (2.0 * vd * gd / (dd * dd)) * d - (vd / dd) * go;
        }
      }
      accumulate(n.a, gx);
      accumulate(n.b, gk);
      break;
    }
    case Op::GroupMean: {
      const Matrix& in = nodes_[n.a].value;
      Matrix gi(in.rows(), in.cols());
      const Index groups = n.value.rows() / n.block;
      const double inv = 1.0 / static_cast<double>(n.group);
      for (Index c = 0; c < in.cols(); ++c) {
        const double* src = g.col(c).data();
        double* dst = gi.col(c).data();
        for (Index grp = 0; grp < groups; ++grp) {
          for (Index m = 0; m < n.group; ++m) {
            double* blk = dst + (grp * n.group + m) * n.block;
            for (Index b = 0; b < n.block; ++b) blk[b] = inv * src[grp * n.block + b];
          }
        }
      }
      accumulate(n.a, gi);
      break;
    }
    case Op::TileRows: {
      const Index rows = nodes_[n.a].value.rows();
      Matrix gi = Matrix::Zero(rows, g.cols());
      for (Index t = 0; t < n.group; ++t) gi += g.middleRows(t * rows, rows);
      accumulate(n.a, gi);
      break;
    }
    case Op::BlockGram: {
      const Matrix& f = nodes_[n.a].value;
      const Matrix& v = nodes_[n.b].value;
      const Index points = f.rows() / n.block;
      const Index cf = f.cols();
      const Index cv = v.cols();
      Matrix gf(f.rows(), cf);
      Matrix gv(v.rows(), cv);
      Matrix gg(cf, cv);
      for (Index i = 0; i < points; ++i) {
        for (Index r = 0; r < cf; ++r) gg.row(r) = g.row(i).segment(r * cv, cv);
        gf.middleRows(i * n.block, n.block).noalias() = v.middleRows(i * n.block, n.block) * gg.transpose();
        gv.middleRows(i * n.block, n.block).noalias() = f.middleRows(i * n.block, n.block) * gg;
      }
      accumulate(n.a, gf);
      accumulate(n.b, gv);
      break;
    }
    case Op::RowSqNorms:
      accumulate(n.a, 2.0 * (nodes_[n.a].value.array().colwise() * g.col(0).array()).matrix());
      break;
    case Op::Sum: {
      const Matrix& a = nodes_[n.a].value;
      accumulate(n.a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
      break;
    }
    case Op::SumSquares:
      accumulate(n.a, 2.0 * g(0, 0) * nodes_[n.a].value);
      break;
    case Op::Div: {
      const double a = nodes_[n.a].value(0, 0);
      const double b = nodes_[n.b].value(0, 0);
      accumulate(n.a, Matrix::Constant(1, 1, g(0, 0) / b));
      accumulate(n.b, Matrix::Constant(1, 1, -g(0, 0) * a / (b * b)));
      break;
    }
    case Op::BinaryCrossEntropy: {
      const Matrix& p = nodes_[n.a].value;
      Matrix gp(p.rows(), p.cols());
      for (Index i = 0; i < p.size(); ++i) {
        const double eps = n.coeff;
        if (p(i) < eps || p(i) > 1.0 - eps) {
          gp(i) = 0.0;  // clamped region
          continue;
        }
        const double y = n.aux(i);
        gp(i) = g(0, 0) * (-y / p(i) + (1.0 - y) / (1.0 - p(i)));
      }
      accumulate(n.a, gp);
      break;
    }
    case Op::SoftmaxCrossEntropyRows: {
      Matrix gs = n.aux;
      for (Index i = 0; i < gs.rows(); ++i) {
        const Index t = n.targets[static_cast<std::size_t>(i)];
        if (t < 0) {
          gs.row(i).setZero();
          continue;
        }
        gs(i, t) -= 1.0;
      }
      accumulate(n.a, g(0, 0) * gs);
      break;
    }
  }
}

}  // namespace eqreg
