#pragma once

/**
 * Differentiable-network substrate: dense multilayer perceptrons, seeded
 * initialization, an AdamW-style optimizer with decoupled weight decay and
 * global gradient-norm clipping, a generic minibatch epoch driver, and a
 * central finite-difference gradient validator.
 *
 * All training math is in 64-bit floats and is deterministic given the seed.
 */

#include "cim/graph.hpp"
#include "cim/types.hpp"

#include <functional>
#include <string>
#include <vector>

namespace cim::nn {

enum class Activation { kIdentity, kRelu, kTanh };

struct DenseLayer {
  Matrix w;     // in x out
  Matrix b;     // 1 x out
  Activation act = Activation::kIdentity;
};

/// Ordered dense layers; consecutive dimensions must compose.
struct Mlp {
  std::vector<DenseLayer> layers;

  int input_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().w.rows()); }
  int output_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().w.cols()); }
  int param_count() const;
  bool finite() const;

  /// Scaled-uniform init, bound sqrt(3/fan_in) per layer; biases zero.
  static Mlp make(const std::vector<int>& dims, const std::vector<Activation>& acts, Rng& rng);

  /// Plain forward pass (no gradient tracking). Rows of x are samples.
  Matrix apply(const Matrix& x) const;
};

/// Tape handles for one registration of an Mlp's parameters.
struct MlpVars {
  struct LayerVars {
    graph::Var w, b;
    Activation act;
  };
  std::vector<LayerVars> layers;
};

/// Registers layers as trainable params (or frozen constants) on the tape.
MlpVars register_mlp(graph::Tape& tape, const Mlp& mlp, bool trainable);

/// Row-wise forward pass through registered layers; participates in the graph.
graph::Var mlp_apply(graph::Tape& tape, const MlpVars& vars, graph::Var x);

/// Pointers to every parameter matrix of an Mlp, layer order (w then b).
std::vector<Matrix*> collect_params(Mlp& mlp);
std::vector<Matrix*> collect_params(const std::vector<Mlp*>& mlps);

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 30;
  int batch_size = 64;
  std::uint64_t seed = 1;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;

  void validate() const;
};

/**
 * Adam with decoupled weight decay. step() expects one gradient per
 * registered parameter, clips them jointly to grad_clip_norm, then updates
 * the parameters in place.
 */
class AdamW {
 public:
  AdamW(std::vector<Matrix*> params, const TrainConfig& cfg);
  void step(const std::vector<Matrix>& grads);
  int64_t updated_param_count() const;

 private:
  std::vector<Matrix*> params_;
  std::vector<Matrix> m_, v_;
  TrainConfig cfg_;
  int t_ = 0;
};

/**
 * Builds the loss graph for one batch. `param_vars` holds tape handles for
 * the matrices registered from `params`, in the same order.
 */
using BatchLossFn =
    std::function<graph::Var(graph::Tape&, const std::vector<graph::Var>& param_vars, int batch)>;

/**
 * One pass of minibatch updates over `num_batches` batches. Returns the mean
 * loss. Throws TrainingDivergedError (with the batch index) on a non-finite
 * loss. Deterministic given identical params, loss_fn and optimizer state.
 */
double train_epoch(std::vector<Matrix*>& params, int num_batches, const BatchLossFn& loss_fn,
                   AdamW& opt);

/// Value-preserving gradient blocker (see graph::Tape::stop_gradient).
inline graph::Var stop_gradient(graph::Tape& tape, graph::Var x) { return tape.stop_gradient(x); }

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<double> per_param_max;  // max relative error per parameter matrix
  int worst_param = -1;
  int worst_row = -1, worst_col = -1;
  bool passed(double tol) const { return max_rel_error < tol; }
};

/// Scalar loss built on a fresh tape from registered copies of `params`.
using GraphLossFn = std::function<graph::Var(graph::Tape&, const std::vector<graph::Var>&)>;

/**
 * Compares analytic gradients against central finite differences, entry by
 * entry, at the given step. Relative error uses max(|a|, |b|, 1e-6) as the
 * denominator so exact zeros compare cleanly. Never throws on mismatch.
 */
GradCheckReport grad_check(const GraphLossFn& loss_fn, const std::vector<Matrix>& params,
                           double step = 1e-5);

}  // namespace cim::nn
