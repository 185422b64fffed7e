#pragma once

/**
 * Minimal reverse-mode differentiation tape over dense double matrices.
 *
 * A Tape owns the nodes of one forward computation; backward() walks the
 * nodes in reverse creation order and accumulates adjoints. Graphs are
 * rebuilt per training step (dynamic-graph style), so a Tape is cheap,
 * single-use and single-threaded.
 *
 * Leaves come in two flavors: constant() (inputs, frozen parameters) and
 * param() (trainable, gradient is accumulated). stop_gradient() passes the
 * value through and blocks all upstream gradient flow exactly.
 */

#include "cim/types.hpp"

#include <functional>
#include <vector>

namespace cim::graph {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  Var constant(Matrix value);
  Var param(Matrix value);

  // --- elementwise / structural ---
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var hadamard(Var a, Var b);
  Var scalar_mul(Var a, double c);
  Var relu(Var a);
  Var tanh(Var a);
  Var softplus(Var a);
  Var stop_gradient(Var a);

  // --- linear algebra ---
  Var matmul(Var a, Var b);
  /// Adds a 1 x d bias row to every row of a (n x d).
  Var add_rowvec(Var a, Var bias);
  /// Concatenates columns: [a | b], row counts must match.
  Var concat_cols(Var a, Var b);
  /// Views each row of a (n x m*w) as m blocks of width w and averages them -> n x w.
  Var mean_blocks(Var a, int num_blocks);

  // --- reductions / losses ---
  /// Mean over all entries -> 1 x 1.
  Var mean_all(Var a);
  /// Row-wise cosine similarity -> n x 1. Zero rows yield similarity 0 with zero gradient.
  Var rowwise_cosine(Var a, Var b);
  /// Mean over rows of -log softmax(logits)[label] -> 1 x 1. Log-sum-exp stabilized.
  Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);
  /// Coding rate of the rows of z (see infomath::rate_distortion) -> 1 x 1.
  Var rate_distortion(Var z, double eps);

  const Matrix& value(Var v) const { return nodes_[check(v)].value; }
  /// Gradient of the last backward() root w.r.t. v. Zero matrix if v did not participate.
  const Matrix& grad(Var v) const { return nodes_[check(v)].grad; }
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

  /// Seeds root (must be 1 x 1) with d(root)/d(root) = 1 and accumulates adjoints.
  void backward(Var root);

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(Tape&, const Matrix&)> backward_fn;  // receives this node's adjoint
  };

  int check(Var v) const;
  Var make(Matrix value, bool requires_grad, std::function<void(Tape&, const Matrix&)> fn);
  void accumulate(Var v, const Matrix& g);

  std::vector<Node> nodes_;
};

}  // namespace cim::graph
