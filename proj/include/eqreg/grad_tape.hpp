#pragma once

// Reverse-mode differentiation over dense matrices.
//
// The tape is append-only: every op pushes one node holding its forward
// value, so node order is a topological order and backward() is a single
// reverse sweep. The op set is exactly what the encoders, decoder and
// matcher need.
//
// Vector-neuron features use a "stacked" layout: a feature over N points with
// C channels is an (3N x C) matrix whose rows 3i..3i+2 hold the three
// coordinates of point i. Channel mixing is then a right-multiplication.

#include "eqreg/types.hpp"

#include <cstddef>
#include <limits>
#include <vector>

namespace eqreg {

class GradTape {
 public:
  struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
    bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
  };

  Var constant(Matrix value);
  Var parameter(Matrix value);

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  double scalar(Var v) const;
  /// Gradient of the last backward() loss; zero-sized if the node had none.
  const Matrix& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Var>& parameters() const { return params_; }

  /// Reverse sweep from a 1x1 loss. Visits each node at most once.
  void backward(Var loss);

  // Elementwise and linear algebra.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var cwise_mul(Var a, Var b);
  Var scale(Var a, double s);
  Var mul_scalar(Var a, Var s);  // s is 1x1
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);   // a * b^T
  Var transpose(Var a);
  Var add_row_broadcast(Var a, Var row);  // row is 1 x cols
  Var add_col_broadcast(Var a, Var col);  // col is rows x 1
  Var scale_cols(Var a, Var row);         // a(i,j) * row(j)
  Var hconcat(Var a, Var b);

  // Pointwise nonlinearities.
  Var tanh(Var a);
  Var sigmoid(Var a);
  /// Elementwise square root; inputs must be positive.
  Var sqrt(Var a);
  /// Vector-neuron ReLU on stacked features: each 3-vector column block of x
  /// is kept if it has non-negative inner product with the matching block of
  /// the direction k, otherwise projected onto the plane orthogonal to k.
  Var vn_relu(Var x, Var k);

  // Reductions and reshapes over stacked features.
  /// Input rows form groups of `group` consecutive blocks of `block` rows;
  /// output is the per-group mean block.
  Var group_mean(Var x, Index block, Index group);
  /// Repeats the rows of x vertically `times` times.
  Var tile_rows(Var x, Index times);
  /// Per point i: F_i^T V_i (Cf x Cv) flattened row-major into row i.
  Var block_gram(Var f, Var v, Index block);
  Var row_sq_norms(Var a);  // rows x 1
  Var sum(Var a);
  Var sum_squares(Var a);
  Var div(Var a, Var b);  // 1x1 / 1x1

  // Losses (1x1 outputs, summed over entries/rows).
  /// sum_i -[y log p + (1-y) log(1-p)] with p clamped to [eps, 1-eps].
  Var binary_cross_entropy(Var prob, const Matrix& labels, double eps = 1e-7);
  /// sum_i -log softmax(S_i)[target_i]; rows with negative target are skipped.
  Var softmax_cross_entropy_rows(Var logits, const std::vector<Index>& targets);

 private:
  enum class Op {
    Leaf,
    Add,
    Sub,
    CwiseMul,
    Scale,
    MulScalar,
    MatMul,
    MatMulNT,
    Transpose,
    AddRowBroadcast,
    AddColBroadcast,
    ScaleCols,
    HConcat,
    Tanh,
    Sigmoid,
    Sqrt,
    VnRelu,
    GroupMean,
    TileRows,
    BlockGram,
    RowSqNorms,
    Sum,
    SumSquares,
    Div,
    BinaryCrossEntropy,
    SoftmaxCrossEntropyRows,
  };

  struct Node {
    Op op = Op::Leaf;
    std::size_t a = 0;
    std::size_t b = 0;
    bool requires_grad = false;
    double coeff = 0.0;
    Index block = 0;
    Index group = 0;
    Matrix value;
    Matrix aux;
    std::vector<Index> targets;
    Matrix grad;
  };

  Var push(Node node);
  void accumulate(std::size_t id, const Matrix& g);
  void backprop_node(const Node& node);

  std::vector<Node> nodes_;
  std::vector<Var> params_;
};

/// Vector-neuron ReLU forward kernel, shared with the non-tape layer API.
Matrix vn_relu_forward(const Matrix& x, const Matrix& k);
/// Block Gram forward kernel: row i holds F_i^T V_i flattened row-major.
Matrix block_gram_forward(const Matrix& f, const Matrix& v, Index block);

}  // namespace eqreg
