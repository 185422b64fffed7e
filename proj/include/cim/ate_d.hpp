#pragma once

/**
 * ATE-D: learn substitute confounders with a small autoencoder over the
 * biased model's fused features, cluster them into a dictionary, reweight
 * each fused vector by (one minus) its mean cosine similarity to the
 * dictionary, and fine-tune only the answer head on the recalibrated
 * features. The reweighting instantiates backdoor adjustment: averaging over
 * the confounder dictionary stands in for E_c[P(A|M, c)].
 */

#include "cim/baseline.hpp"
#include "cim/nn.hpp"

#include <string>
#include <vector>

namespace cim::ate {

struct AutoencoderParams {
  nn::Mlp enc, dec;
  int latent_dim = 0;

  Matrix encode(const Matrix& features) const { return enc.apply(features); }
  Matrix reconstruct(const Matrix& features) const { return dec.apply(enc.apply(features)); }
};

struct ConfounderDictionary {
  Matrix centroids;  // K x latent_dim
  int size() const { return static_cast<int>(centroids.rows()); }
};

/// Bottleneck autoencoder: enc = dense tanh to latent_dim, dec = dense back.
/// `linear` swaps tanh for identity (used by capacity tests).
AutoencoderParams make_autoencoder(int feature_dim, int latent_dim, Rng& rng, bool linear = false);

struct AeTrainResult {
  AutoencoderParams ae;
  double initial_loss = 0.0;  // mean squared reconstruction distance before training
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
};

/// Minimizes mean squared Euclidean reconstruction distance over the rows of
/// `features` (all fused vectors of the train split, stacked).
AeTrainResult train_autoencoder(const Matrix& features, int latent_dim, const nn::TrainConfig& cfg,
                                bool linear = false);

/**
 * Seeded k-means over the encoded features: farthest-point initialization,
 * then Lloyd iterations (at most 100, or until centers move < 1e-6).
 * Throws InvalidInputError if K exceeds the number of distinct encoded rows.
 */
ConfounderDictionary build_dictionary(const AutoencoderParams& ae, const Matrix& features, int k,
                                      std::uint64_t seed);

/// w_i = 1 - mean_j cos(enc(r_i), centroid_j), one weight per fused vector. Each w_i in [0, 2].
Vector recalibrate_weights(const Matrix& r_seq, const AutoencoderParams& ae,
                           const ConfounderDictionary& dict);

/// r'_i = w_i * r_i row by row.
Matrix recalibrate(const Matrix& r_seq, const AutoencoderParams& ae,
                   const ConfounderDictionary& dict);

/// The ATE-D predictor: frozen backbone + ae + dictionary, fine-tuned head.
/// `inverted` applies w' = 2 - w (the up-weighting ablation).
struct AteDModel {
  baseline::BiasedModel backbone;
  AutoencoderParams ae;
  ConfounderDictionary dict;
  nn::Mlp head;
  bool inverted = false;

  /// Recalibrated, pooled features for a batch: n x kFusedDim.
  Matrix recalibrated_pooled(const Matrix& q, const Matrix& v) const;
  Matrix predict_batch(const Matrix& q, const Matrix& v) const;
};

infomath::Distribution predict(const AteDModel& model, const synth::Sample& sample);
std::vector<int> predict_labels(const AteDModel& model, const std::vector<synth::Sample>& split);
double split_accuracy(const AteDModel& model, const std::vector<synth::Sample>& split);

struct TrainedAteD {
  AteDModel model;
  double id_accuracy = 0.0;
  double ood_accuracy = 0.0;
  std::vector<double> epoch_losses;
};

/**
 * Freezes the backbone and the autoencoder, fine-tunes only the head (a copy
 * of the biased head) on recalibrated pooled train features.
 */
TrainedAteD finetune_recalibrated(const baseline::BiasedModel& model, const AutoencoderParams& ae,
                                  const ConfounderDictionary& dict,
                                  const synth::DatasetBundle& bundle, const nn::TrainConfig& cfg,
                                  bool inverted = false);

// Flat dictionary file: magic "CIMK", u32 version, u32 K, u32 latent_dim,
// then K * latent_dim doubles row-major. Bit-exact round-trip.
void save_dictionary(const ConfounderDictionary& dict, const std::string& path);
ConfounderDictionary load_dictionary(const std::string& path);

}  // namespace cim::ate
