#include "cim/ate_d.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace cim::ate {

namespace {

constexpr std::uint64_t kStreamAeInit = 201;
constexpr std::uint64_t kStreamAeShuffle = 202;
constexpr std::uint64_t kStreamHeadShuffle = 203;

double mean_sq_reconstruction(const AutoencoderParams& ae, const Matrix& features) {
  const Matrix diff = features - ae.reconstruct(features);
  return diff.squaredNorm() / static_cast<double>(features.rows());
}

}  // namespace

AutoencoderParams make_autoencoder(int feature_dim, int latent_dim, Rng& rng, bool linear) {
  if (latent_dim < 1 || feature_dim < 1)
    throw InvalidInputError("make_autoencoder: dimensions must be positive");
  using nn::Activation;
  const Activation hidden = linear ? Activation::kIdentity : Activation::kTanh;
  AutoencoderParams ae;
  Rng r = rng.derive(kStreamAeInit);
  ae.enc = nn::Mlp::make({feature_dim, latent_dim}, {hidden}, r);
  ae.dec = nn::Mlp::make({latent_dim, feature_dim}, {Activation::kIdentity}, r);
  ae.latent_dim = latent_dim;
  return ae;
}

AeTrainResult train_autoencoder(const Matrix& features, int latent_dim, const nn::TrainConfig& cfg,
                                bool linear) {
  cfg.validate();
  if (features.rows() < 1) throw InvalidInputError("train_autoencoder: empty feature matrix");
  if (!features.allFinite()) throw InvalidInputError("train_autoencoder: non-finite features");

  Rng rng(cfg.seed);
  AeTrainResult result;
  result.ae = make_autoencoder(static_cast<int>(features.cols()), latent_dim, rng, linear);
  result.initial_loss = mean_sq_reconstruction(result.ae, features);

  const int n = static_cast<int>(features.rows());
  const int dim = static_cast<int>(features.cols());
  const int num_batches = (n + cfg.batch_size - 1) / cfg.batch_size;

  std::vector<Matrix*> params = nn::collect_params({&result.ae.enc, &result.ae.dec});
  nn::AdamW opt(params, cfg);
  Rng shuffle_rng = rng.derive(kStreamAeShuffle);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    auto loss_fn = [&](graph::Tape& tape, const std::vector<graph::Var>& vars, int batch) {
      const int lo = batch * cfg.batch_size;
      const int hi = std::min(lo + cfg.batch_size, n);
      Matrix rows(hi - lo, dim);
      for (int i = lo; i < hi; ++i) rows.row(i - lo) = features.row(order[static_cast<std::size_t>(i)]);

      nn::MlpVars v_enc, v_dec;
      std::size_t idx = 0;
      auto take = [&](const nn::Mlp& mlp, nn::MlpVars& out) {
        for (const auto& layer : mlp.layers) {
          out.layers.push_back({vars[idx], vars[idx + 1], layer.act});
          idx += 2;
        }
      };
      take(result.ae.enc, v_enc);
      take(result.ae.dec, v_dec);

      graph::Var x = tape.constant(rows);
      graph::Var recon = nn::mlp_apply(tape, v_dec, nn::mlp_apply(tape, v_enc, x));
      graph::Var diff = tape.sub(x, recon);
      // mean over rows of the squared Euclidean distance
      return tape.scalar_mul(tape.mean_all(tape.hadamard(diff, diff)), static_cast<double>(dim));
    };
    result.epoch_losses.push_back(nn::train_epoch(params, num_batches, loss_fn, opt));
  }
  result.final_loss = mean_sq_reconstruction(result.ae, features);
  return result;
}

ConfounderDictionary build_dictionary(const AutoencoderParams& ae, const Matrix& features, int k,
                                      std::uint64_t seed) {
  if (k < 1) throw InvalidInputError("build_dictionary: K must be >= 1");
  const Matrix encoded = ae.encode(features);
  const Eigen::Index n = encoded.rows();

  // count distinct rows (exact) to validate K
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  auto row_less = [&](int a, int b) {
    for (Eigen::Index j = 0; j < encoded.cols(); ++j) {
      if (encoded(a, j) != encoded(b, j)) return encoded(a, j) < encoded(b, j);
    }
    return false;
  };
  std::sort(idx.begin(), idx.end(), row_less);
  Eigen::Index distinct = n > 0 ? 1 : 0;
  for (Eigen::Index i = 1; i < n; ++i)
    if (row_less(idx[static_cast<std::size_t>(i - 1)], idx[static_cast<std::size_t>(i)])) ++distinct;
  if (k > distinct) {
    std::ostringstream msg;
    msg << "build_dictionary: K=" << k << " exceeds " << distinct << " distinct encoded points";
    throw InvalidInputError(msg.str());
  }

  // farthest-point initialization
  Rng rng(seed);
  Matrix centers(k, encoded.cols());
  centers.row(0) = encoded.row(rng.uniform_int(static_cast<int>(n)));
  Vector min_sq = (encoded.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    Eigen::Index far;
    min_sq.maxCoeff(&far);
    centers.row(c) = encoded.row(far);
    const Vector d = (encoded.rowwise() - centers.row(c)).rowwise().squaredNorm();
    min_sq = min_sq.cwiseMin(d);
  }

  // Lloyd iterations
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < 100; ++iter) {
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (encoded.row(i) - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      assign[static_cast<std::size_t>(i)] = best;
    }
    Matrix next = Matrix::Zero(k, encoded.cols());
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(assign[static_cast<std::size_t>(i)]) += encoded.row(i);
      ++count[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    double movement = 0.0;
    for (int c = 0; c < k; ++c) {
      if (count[static_cast<std::size_t>(c)] == 0) continue;  // keep an empty cluster's center
      next.row(c) /= static_cast<double>(count[static_cast<std::size_t>(c)]);
      movement = std::max(movement, (next.row(c) - centers.row(c)).norm());
      centers.row(c) = next.row(c);
    }
    if (movement < 1e-6) break;
  }

  ConfounderDictionary dict;
  dict.centroids = centers;
  return dict;
}

Vector recalibrate_weights(const Matrix& r_seq, const AutoencoderParams& ae,
                           const ConfounderDictionary& dict) {
  const Matrix encoded = ae.encode(r_seq);
  const int k = dict.size();
  Vector weights(encoded.rows());
  for (Eigen::Index i = 0; i < encoded.rows(); ++i) {
    double mean_sim = 0.0;
    for (int j = 0; j < k; ++j) {
      mean_sim += infomath::cosine_sim(encoded.row(i).transpose(), dict.centroids.row(j).transpose());
    }
    mean_sim /= static_cast<double>(k);
    weights(i) = 1.0 - mean_sim;
  }
  return weights;
}

Matrix recalibrate(const Matrix& r_seq, const AutoencoderParams& ae,
                   const ConfounderDictionary& dict) {
  const Vector w = recalibrate_weights(r_seq, ae, dict);
  return w.asDiagonal() * r_seq;
}

Matrix AteDModel::recalibrated_pooled(const Matrix& q, const Matrix& v) const {
  using baseline::kFusedDim;
  using baseline::kNumFused;
  const Matrix fused = backbone.fused(q, v);
  // reshape to (n * m) x d_f, weight each fused vector, pool back to n x d_f
  Matrix pooled = Matrix::Zero(fused.rows(), kFusedDim);
  for (int j = 0; j < kNumFused; ++j) {
    const Matrix block = fused.middleCols(j * kFusedDim, kFusedDim);
    Vector w = recalibrate_weights(block, ae, dict);
    if (inverted) w = 2.0 - w.array();
    pooled += w.asDiagonal() * block;
  }
  return pooled / static_cast<double>(kNumFused);
}

Matrix AteDModel::predict_batch(const Matrix& q, const Matrix& v) const {
  return baseline::softmax_rows(head.apply(recalibrated_pooled(q, v)));
}

infomath::Distribution predict(const AteDModel& model, const synth::Sample& sample) {
  const Matrix probs = model.predict_batch(sample.q.transpose(), sample.v.transpose());
  infomath::Distribution dist;
  dist.probs = probs.row(0).transpose();
  return dist;
}

std::vector<int> predict_labels(const AteDModel& model, const std::vector<synth::Sample>& split) {
  if (split.empty()) throw InvalidInputError("predict_labels: empty split");
  const Matrix probs = model.predict_batch(synth::stack_q(split), synth::stack_v(split));
  std::vector<int> labels(split.size());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index best;
    probs.row(i).maxCoeff(&best);
    labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return labels;
}

double split_accuracy(const AteDModel& model, const std::vector<synth::Sample>& split) {
  const std::vector<int> preds = predict_labels(model, split);
  const std::vector<int> truth = synth::labels_of(split);
  int correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == truth[i];
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

TrainedAteD finetune_recalibrated(const baseline::BiasedModel& model, const AutoencoderParams& ae,
                                  const ConfounderDictionary& dict,
                                  const synth::DatasetBundle& bundle, const nn::TrainConfig& cfg,
                                  bool inverted) {
  cfg.validate();
  TrainedAteD result;
  result.model.backbone = model;
  result.model.ae = ae;
  result.model.dict = dict;
  result.model.head = model.head;  // fine-tune a copy of the biased head
  result.model.inverted = inverted;

  const Matrix pooled = result.model.recalibrated_pooled(synth::stack_q(bundle.train),
                                                         synth::stack_v(bundle.train));
  const std::vector<int> labels = synth::labels_of(bundle.train);
  const int n = static_cast<int>(labels.size());
  const int num_batches = (n + cfg.batch_size - 1) / cfg.batch_size;

  std::vector<Matrix*> params = nn::collect_params(result.model.head);
  nn::AdamW opt(params, cfg);
  Rng shuffle_rng = Rng(cfg.seed).derive(kStreamHeadShuffle);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    auto loss_fn = [&](graph::Tape& tape, const std::vector<graph::Var>& vars, int batch) {
      const int lo = batch * cfg.batch_size;
      const int hi = std::min(lo + cfg.batch_size, n);
      Matrix rows(hi - lo, pooled.cols());
      std::vector<int> blabels(static_cast<std::size_t>(hi - lo));
      for (int i = lo; i < hi; ++i) {
        const int src = order[static_cast<std::size_t>(i)];
        rows.row(i - lo) = pooled.row(src);
        blabels[static_cast<std::size_t>(i - lo)] = labels[static_cast<std::size_t>(src)];
      }
      nn::MlpVars v_head;
      std::size_t idx = 0;
      for (const auto& layer : result.model.head.layers) {
        v_head.layers.push_back({vars[idx], vars[idx + 1], layer.act});
        idx += 2;
      }
      return tape.softmax_cross_entropy(nn::mlp_apply(tape, v_head, tape.constant(rows)), blabels);
    };
    result.epoch_losses.push_back(nn::train_epoch(params, num_batches, loss_fn, opt));
  }

  result.id_accuracy = split_accuracy(result.model, bundle.id_test);
  result.ood_accuracy = split_accuracy(result.model, bundle.ood_test);
  return result;
}

void save_dictionary(const ConfounderDictionary& dict, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open for writing: " + path);
  const char magic[4] = {'C', 'I', 'M', 'K'};
  const std::uint32_t version = 1;
  const std::uint32_t k = static_cast<std::uint32_t>(dict.centroids.rows());
  const std::uint32_t dim = static_cast<std::uint32_t>(dict.centroids.cols());
  out.write(magic, 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&k), sizeof(k));
  out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  for (std::uint32_t i = 0; i < k; ++i) {
    for (std::uint32_t j = 0; j < dim; ++j) {
      const double v = dict.centroids(i, j);
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
  if (!out) throw FormatError("write failed: " + path);
}

ConfounderDictionary load_dictionary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dictionary file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "CIMK", 4) != 0)
    throw FormatError("not a dictionary file (bad magic): " + path);
  std::uint32_t version = 0, k = 0, dim = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&k), sizeof(k));
  in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  if (!in) throw FormatError("dictionary file truncated: " + path);
  if (version != 1)
    throw FormatError("unsupported dictionary format version " + std::to_string(version));
  ConfounderDictionary dict;
  dict.centroids = Matrix(k, dim);
  for (std::uint32_t i = 0; i < k; ++i) {
    for (std::uint32_t j = 0; j < dim; ++j) {
      double v;
      in.read(reinterpret_cast<char*>(&v), sizeof(v));
      if (!in) throw FormatError("dictionary file truncated: " + path);
      dict.centroids(i, j) = v;
    }
  }
  return dict;
}

}  // namespace cim::ate
