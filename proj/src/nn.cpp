#include "cim/nn.hpp"

#include <cmath>
#include <sstream>

namespace cim::nn {

int Mlp::param_count() const {
  int n = 0;
  for (const auto& layer : layers) n += static_cast<int>(layer.w.size() + layer.b.size());
  return n;
}

bool Mlp::finite() const {
  for (const auto& layer : layers)
    if (!layer.w.allFinite() || !layer.b.allFinite()) return false;
  return true;
}

Mlp Mlp::make(const std::vector<int>& dims, const std::vector<Activation>& acts, Rng& rng) {
  if (dims.size() < 2 || acts.size() != dims.size() - 1)
    throw InvalidInputError("Mlp::make: need n+1 dims for n activations");
  Mlp mlp;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    DenseLayer layer;
    const int fan_in = dims[l], fan_out = dims[l + 1];
    if (fan_in < 1 || fan_out < 1) throw InvalidInputError("Mlp::make: non-positive layer dim");
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    layer.w = Matrix(fan_in, fan_out);
    for (Eigen::Index i = 0; i < layer.w.size(); ++i)
      layer.w.data()[i] = rng.uniform(-bound, bound);
    layer.b = Matrix::Zero(1, fan_out);
    layer.act = acts[l];
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

Matrix Mlp::apply(const Matrix& x) const {
  if (layers.empty()) throw InvalidInputError("Mlp::apply: empty network");
  if (x.cols() != layers.front().w.rows()) {
    std::ostringstream msg;
    msg << "Mlp::apply: input has " << x.cols() << " columns, layer expects "
        << layers.front().w.rows();
    throw InvalidInputError(msg.str());
  }
  Matrix h = x;
  for (const auto& layer : layers) {
    h = (h * layer.w).rowwise() + layer.b.row(0);
    switch (layer.act) {
      case Activation::kIdentity: break;
      case Activation::kRelu: h = h.cwiseMax(0.0); break;
      case Activation::kTanh: h = h.array().tanh().matrix(); break;
    }
  }
  return h;
}

MlpVars register_mlp(graph::Tape& tape, const Mlp& mlp, bool trainable) {
  MlpVars vars;
  for (const auto& layer : mlp.layers) {
    MlpVars::LayerVars lv;
    lv.w = trainable ? tape.param(layer.w) : tape.constant(layer.w);
    lv.b = trainable ? tape.param(layer.b) : tape.constant(layer.b);
    lv.act = layer.act;
    vars.layers.push_back(lv);
  }
  return vars;
}

graph::Var mlp_apply(graph::Tape& tape, const MlpVars& vars, graph::Var x) {
  if (vars.layers.empty()) throw InvalidInputError("mlp_apply: empty network");
  graph::Var h = x;
  for (const auto& lv : vars.layers) {
    h = tape.add_rowvec(tape.matmul(h, lv.w), lv.b);
    switch (lv.act) {
      case Activation::kIdentity: break;
      case Activation::kRelu: h = tape.relu(h); break;
      case Activation::kTanh: h = tape.tanh(h); break;
    }
  }
  return h;
}

std::vector<Matrix*> collect_params(Mlp& mlp) {
  std::vector<Matrix*> out;
  for (auto& layer : mlp.layers) {
    out.push_back(&layer.w);
    out.push_back(&layer.b);
  }
  return out;
}

std::vector<Matrix*> collect_params(const std::vector<Mlp*>& mlps) {
  std::vector<Matrix*> out;
  for (Mlp* mlp : mlps) {
    auto p = collect_params(*mlp);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidInputError("TrainConfig: learning_rate must be > 0");
  if (epochs < 1) throw InvalidInputError("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw InvalidInputError("TrainConfig: batch_size must be >= 1");
  if (weight_decay < 0.0) throw InvalidInputError("TrainConfig: weight_decay must be >= 0");
  if (!(grad_clip_norm > 0.0)) throw InvalidInputError("TrainConfig: grad_clip_norm must be > 0");
}

AdamW::AdamW(std::vector<Matrix*> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  for (const Matrix* p : params_) {
    m_.push_back(Matrix::Zero(p->rows(), p->cols()));
    v_.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
}

int64_t AdamW::updated_param_count() const {
  int64_t n = 0;
  for (const Matrix* p : params_) n += p->size();
  return n;
}

void AdamW::step(const std::vector<Matrix>& grads) {
  if (grads.size() != params_.size())
    throw InvalidInputError("AdamW::step: gradient count mismatch");
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  double sq_norm = 0.0;
  for (const Matrix& g : grads) sq_norm += g.squaredNorm();
  const double norm = std::sqrt(sq_norm);
  const double scale = (norm > cfg_.grad_clip_norm) ? cfg_.grad_clip_norm / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(kBeta1, t_);
  const double bc2 = 1.0 - std::pow(kBeta2, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Matrix g = scale * grads[i];
    m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * g;
    v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * g.cwiseProduct(g);
    const Matrix m_hat = m_[i] / bc1;
    const Matrix v_hat = v_[i] / bc2;
    // decoupled weight decay: not part of the adaptive moments
    *params_[i] -= cfg_.learning_rate *
                   (m_hat.cwiseQuotient((v_hat.cwiseSqrt().array() + kEps).matrix()) +
                    cfg_.weight_decay * (*params_[i]));
  }
}

double train_epoch(std::vector<Matrix*>& params, int num_batches, const BatchLossFn& loss_fn,
                   AdamW& opt) {
  if (num_batches < 1) throw InvalidInputError("train_epoch: need at least one batch");
  double loss_sum = 0.0;
  for (int batch = 0; batch < num_batches; ++batch) {
    graph::Tape tape;
    std::vector<graph::Var> vars;
    vars.reserve(params.size());
    for (Matrix* p : params) vars.push_back(tape.param(*p));

    graph::Var loss = loss_fn(tape, vars, batch);
    const double loss_value = tape.value(loss)(0, 0);
    if (!std::isfinite(loss_value)) {
      std::ostringstream msg;
      msg << "training diverged: non-finite loss at batch " << batch;
      throw TrainingDivergedError(msg.str(), batch);
    }
    loss_sum += loss_value;

    tape.backward(loss);
    std::vector<Matrix> grads;
    grads.reserve(vars.size());
    for (graph::Var v : vars) grads.push_back(tape.grad(v));
    opt.step(grads);
  }
  return loss_sum / static_cast<double>(num_batches);
}

GradCheckReport grad_check(const GraphLossFn& loss_fn, const std::vector<Matrix>& params,
                           double step) {
  if (!(step > 0.0)) throw InvalidInputError("grad_check: step must be > 0");

  auto eval = [&](const std::vector<Matrix>& p) {
    graph::Tape tape;
    std::vector<graph::Var> vars;
    for (const Matrix& m : p) vars.push_back(tape.param(m));
    graph::Var loss = loss_fn(tape, vars);
    return tape.value(loss)(0, 0);
  };

  // analytic pass
  graph::Tape tape;
  std::vector<graph::Var> vars;
  for (const Matrix& m : params) vars.push_back(tape.param(m));
  graph::Var loss = loss_fn(tape, vars);
  tape.backward(loss);

  GradCheckReport report;
  report.per_param_max.assign(params.size(), 0.0);
  std::vector<Matrix> probe = params;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Matrix& analytic = tape.grad(vars[pi]);
    for (Eigen::Index r = 0; r < params[pi].rows(); ++r) {
      for (Eigen::Index c = 0; c < params[pi].cols(); ++c) {
        const double saved = probe[pi](r, c);
        probe[pi](r, c) = saved + step;
        const double f_plus = eval(probe);
        probe[pi](r, c) = saved - step;
        const double f_minus = eval(probe);
        probe[pi](r, c) = saved;

        const double numeric = (f_plus - f_minus) / (2.0 * step);
        const double a = analytic(r, c);
        const double rel =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
        report.per_param_max[pi] = std::max(report.per_param_max[pi], rel);
        if (rel > report.max_rel_error) {
          report.max_rel_error = rel;
          report.worst_param = static_cast<int>(pi);
          report.worst_row = static_cast<int>(r);
          report.worst_col = static_cast<int>(c);
        }
      }
    }
  }
  return report;
}

}  // namespace cim::nn
