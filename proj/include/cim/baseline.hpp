#pragma once

/**
 * The biased reference model: two modality encoders, a fusion stage that
 * emits a short sequence of fused feature vectors (pooled by mean before the
 * answer head), trained with plain cross-entropy so it soaks up whatever
 * shortcuts the dataset offers.
 */

#include "cim/infomath.hpp"
#include "cim/nn.hpp"
#include "cim/synthbias.hpp"

#include <vector>

namespace cim::baseline {

/// Fused sequence length (vectors per sample) and their dimension.
inline constexpr int kNumFused = 4;
inline constexpr int kFusedDim = 32;
inline constexpr int kEncHidden = 64;
inline constexpr int kFusionHidden = 128;

struct BiasedModel {
  nn::Mlp enc_q, enc_v, fusion, head;

  int num_classes() const { return head.output_dim(); }
  int param_count() const;
  std::vector<Matrix*> params();

  /// Fused sequence for a batch: n x (kNumFused * kFusedDim).
  Matrix fused(const Matrix& q, const Matrix& v) const;
  /// Mean over the fused vectors: n x kFusedDim.
  static Matrix pool(const Matrix& fused);
  /// Softmax probabilities per row: n x k.
  Matrix predict_batch(const Matrix& q, const Matrix& v) const;
};

BiasedModel make_model(const synth::BiasSpec& spec, Rng& rng);

struct TrainedBaseline {
  BiasedModel model;
  double train_accuracy = 0.0;
  double id_accuracy = 0.0;
  double ood_accuracy = 0.0;
  std::vector<double> epoch_losses;
};

/// Plain cross-entropy training on bundle.train. Deterministic given cfg.seed.
TrainedBaseline train_biased(const synth::DatasetBundle& bundle, const nn::TrainConfig& cfg);

/// The fused sequence of one sample, one vector per row (kNumFused x kFusedDim).
Matrix extract_features(const BiasedModel& model, const synth::Sample& sample);

/// Softmax distribution over answers for one sample.
infomath::Distribution predict(const BiasedModel& model, const synth::Sample& sample);

/// Row-wise softmax utility shared by the model heads.
Matrix softmax_rows(const Matrix& logits);

/// Argmax predictions for a whole split.
std::vector<int> predict_labels(const BiasedModel& model, const std::vector<synth::Sample>& split);

/// Fraction of correct argmax predictions on a split.
double split_accuracy(const BiasedModel& model, const std::vector<synth::Sample>& split);

}  // namespace cim::baseline
