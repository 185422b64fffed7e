#include "cim/baseline.hpp"

#include <cmath>

namespace cim::baseline {

namespace {

constexpr std::uint64_t kStreamInitEncQ = 101;
constexpr std::uint64_t kStreamInitEncV = 102;
constexpr std::uint64_t kStreamInitFusion = 103;
constexpr std::uint64_t kStreamInitHead = 104;
constexpr std::uint64_t kStreamShuffle = 110;

}  // namespace

int BiasedModel::param_count() const {
  return enc_q.param_count() + enc_v.param_count() + fusion.param_count() + head.param_count();
}

std::vector<Matrix*> BiasedModel::params() {
  return nn::collect_params({&enc_q, &enc_v, &fusion, &head});
}

Matrix BiasedModel::fused(const Matrix& q, const Matrix& v) const {
  const Matrix eq = enc_q.apply(q);
  const Matrix ev = enc_v.apply(v);
  Matrix joint(eq.rows(), eq.cols() + ev.cols());
  joint << eq, ev;
  return fusion.apply(joint);
}

Matrix BiasedModel::pool(const Matrix& fused) {
  if (fused.cols() != kNumFused * kFusedDim)
    throw InvalidInputError("pool: fused width does not match kNumFused * kFusedDim");
  Matrix pooled = Matrix::Zero(fused.rows(), kFusedDim);
  for (int j = 0; j < kNumFused; ++j) pooled += fused.middleCols(j * kFusedDim, kFusedDim);
  return pooled / static_cast<double>(kNumFused);
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix probs(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
    probs.row(i) = (e / e.sum()).matrix();
  }
  return probs;
}

Matrix BiasedModel::predict_batch(const Matrix& q, const Matrix& v) const {
  return softmax_rows(head.apply(pool(fused(q, v))));
}

BiasedModel make_model(const synth::BiasSpec& spec, Rng& rng) {
  using nn::Activation;
  BiasedModel m;
  Rng r_eq = rng.derive(kStreamInitEncQ);
  Rng r_ev = rng.derive(kStreamInitEncV);
  Rng r_fu = rng.derive(kStreamInitFusion);
  Rng r_he = rng.derive(kStreamInitHead);
  m.enc_q = nn::Mlp::make({spec.q_dim(), kEncHidden}, {Activation::kRelu}, r_eq);
  m.enc_v = nn::Mlp::make({spec.v_dim(), kEncHidden}, {Activation::kRelu}, r_ev);
  m.fusion = nn::Mlp::make({2 * kEncHidden, kFusionHidden, kNumFused * kFusedDim},
                           {Activation::kRelu, Activation::kIdentity}, r_fu);
  m.head = nn::Mlp::make({kFusedDim, spec.num_classes}, {Activation::kIdentity}, r_he);
  return m;
}

TrainedBaseline train_biased(const synth::DatasetBundle& bundle, const nn::TrainConfig& cfg) {
  cfg.validate();
  if (bundle.train.empty()) throw InvalidInputError("train_biased: empty train split");
  const synth::BiasSpec& spec = bundle.spec;

  Rng rng(cfg.seed);
  TrainedBaseline result;
  result.model = make_model(spec, rng);

  const Matrix train_q = synth::stack_q(bundle.train);
  const Matrix train_v = synth::stack_v(bundle.train);
  const std::vector<int> train_labels = synth::labels_of(bundle.train);
  const int n = static_cast<int>(bundle.train.size());
  const int num_batches = (n + cfg.batch_size - 1) / cfg.batch_size;

  std::vector<Matrix*> params = result.model.params();
  nn::AdamW opt(params, cfg);
  Rng shuffle_rng = rng.derive(kStreamShuffle);

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    auto loss_fn = [&](graph::Tape& tape, const std::vector<graph::Var>& vars, int batch) {
      const int lo = batch * cfg.batch_size;
      const int hi = std::min(lo + cfg.batch_size, n);
      Matrix bq(hi - lo, train_q.cols());
      Matrix bv(hi - lo, train_v.cols());
      std::vector<int> blabels(static_cast<std::size_t>(hi - lo));
      for (int i = lo; i < hi; ++i) {
        const int src = order[static_cast<std::size_t>(i)];
        bq.row(i - lo) = train_q.row(src);
        bv.row(i - lo) = train_v.row(src);
        blabels[static_cast<std::size_t>(i - lo)] = train_labels[static_cast<std::size_t>(src)];
      }

      // vars order mirrors BiasedModel::params(): enc_q, enc_v, fusion, head
      nn::MlpVars v_eq, v_ev, v_fu, v_he;
      std::size_t idx = 0;
      auto take = [&](const nn::Mlp& mlp, nn::MlpVars& out) {
        for (const auto& layer : mlp.layers) {
          out.layers.push_back({vars[idx], vars[idx + 1], layer.act});
          idx += 2;
        }
      };
      take(result.model.enc_q, v_eq);
      take(result.model.enc_v, v_ev);
      take(result.model.fusion, v_fu);
      take(result.model.head, v_he);

      graph::Var xq = tape.constant(bq);
      graph::Var xv = tape.constant(bv);
      graph::Var fused = nn::mlp_apply(
          tape, v_fu, tape.concat_cols(nn::mlp_apply(tape, v_eq, xq), nn::mlp_apply(tape, v_ev, xv)));
      graph::Var pooled = tape.mean_blocks(fused, kNumFused);
      graph::Var logits = nn::mlp_apply(tape, v_he, pooled);
      return tape.softmax_cross_entropy(logits, blabels);
    };
    result.epoch_losses.push_back(nn::train_epoch(params, num_batches, loss_fn, opt));
  }

  result.train_accuracy = split_accuracy(result.model, bundle.train);
  result.id_accuracy = split_accuracy(result.model, bundle.id_test);
  result.ood_accuracy = split_accuracy(result.model, bundle.ood_test);
  return result;
}

Matrix extract_features(const BiasedModel& model, const synth::Sample& sample) {
  const Matrix fused = model.fused(sample.q.transpose(), sample.v.transpose());
  Matrix seq(kNumFused, kFusedDim);
  for (int j = 0; j < kNumFused; ++j) seq.row(j) = fused.block(0, j * kFusedDim, 1, kFusedDim);
  return seq;
}

infomath::Distribution predict(const BiasedModel& model, const synth::Sample& sample) {
  const Matrix probs = model.predict_batch(sample.q.transpose(), sample.v.transpose());
  infomath::Distribution dist;
  dist.probs = probs.row(0).transpose();
  return dist;
}

std::vector<int> predict_labels(const BiasedModel& model,
                                const std::vector<synth::Sample>& split) {
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

double split_accuracy(const BiasedModel& model, const std::vector<synth::Sample>& split) {
  const std::vector<int> preds = predict_labels(model, split);
  const std::vector<int> truth = synth::labels_of(split);
  int correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == truth[i];
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

}  // namespace cim::baseline
