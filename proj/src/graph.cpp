#include "cim/graph.hpp"

#include "cim/infomath.hpp"

#include <cmath>
#include <sstream>

namespace cim::graph {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream msg;
    msg << op << ": shape mismatch " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x"
        << b.cols();
    throw InvalidInputError(msg.str());
  }
}

}  // namespace

int Tape::check(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw InvalidInputError("graph: variable does not belong to this tape");
  return v.id;
}

Var Tape::make(Matrix value, bool requires_grad, std::function<void(Tape&, const Matrix&)> fn) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.backward_fn = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& node = nodes_[static_cast<std::size_t>(v.id)];
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  node.grad += g;
}

Var Tape::constant(Matrix value) { return make(std::move(value), false, nullptr); }

Var Tape::param(Matrix value) { return make(std::move(value), true, nullptr); }

Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  const bool rg = requires_grad(a) || requires_grad(b);
  return make(value(a) + value(b), rg, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var Tape::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  const bool rg = requires_grad(a) || requires_grad(b);
  return make(value(a) - value(b), rg, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var Tape::hadamard(Var a, Var b) {
  require_same_shape(value(a), value(b), "hadamard");
  const bool rg = requires_grad(a) || requires_grad(b);
  return make(value(a).cwiseProduct(value(b)), rg, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(t.value(b)));
    t.accumulate(b, g.cwiseProduct(t.value(a)));
  });
}

Var Tape::scalar_mul(Var a, double c) {
  return make(c * value(a), requires_grad(a),
              [a, c](Tape& t, const Matrix& g) { t.accumulate(a, c * g); });
}

Var Tape::relu(Var a) {
  return make(value(a).cwiseMax(0.0), requires_grad(a), [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (t.value(a).array() > 0.0).cast<double>().matrix().cwiseProduct(g));
  });
}

Var Tape::tanh(Var a) {
  Matrix y = value(a).array().tanh().matrix();
  Var out = make(std::move(y), requires_grad(a), nullptr);
  nodes_.back().backward_fn = [a, out](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(out);
    t.accumulate(a, ((1.0 - y.array().square()) * g.array()).matrix());
  };
  return out;
}

Var Tape::softplus(Var a) {
  // softplus(x) = max(x, 0) + log1p(exp(-|x|)); derivative is the logistic sigmoid
  Matrix y = value(a);
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double x = y.data()[i];
    y.data()[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
  return make(std::move(y), requires_grad(a), [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix gx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i)
      gx.data()[i] = g.data()[i] / (1.0 + std::exp(-x.data()[i]));
    t.accumulate(a, gx);
  });
}

Var Tape::stop_gradient(Var a) { return make(value(a), false, nullptr); }

Var Tape::matmul(Var a, Var b) {
  if (value(a).cols() != value(b).rows()) {
    std::ostringstream msg;
    msg << "matmul: inner dimensions " << value(a).cols() << " vs " << value(b).rows();
    throw InvalidInputError(msg.str());
  }
  const bool rg = requires_grad(a) || requires_grad(b);
  return make(value(a) * value(b), rg, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g * t.value(b).transpose());
    t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var Tape::add_rowvec(Var a, Var bias) {
  if (value(bias).rows() != 1 || value(bias).cols() != value(a).cols()) {
    std::ostringstream msg;
    msg << "add_rowvec: bias must be 1x" << value(a).cols() << ", got " << value(bias).rows()
        << "x" << value(bias).cols();
    throw InvalidInputError(msg.str());
  }
  const bool rg = requires_grad(a) || requires_grad(bias);
  Matrix y = value(a);
  y.rowwise() += value(bias).row(0);
  return make(std::move(y), rg, [a, bias](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(bias, g.colwise().sum());
  });
}

Var Tape::concat_cols(Var a, Var b) {
  if (value(a).rows() != value(b).rows())
    throw InvalidInputError("concat_cols: row counts differ");
  const bool rg = requires_grad(a) || requires_grad(b);
  Matrix y(value(a).rows(), value(a).cols() + value(b).cols());
  y << value(a), value(b);
  const Eigen::Index ca = value(a).cols();
  return make(std::move(y), rg, [a, b, ca](Tape& t, const Matrix& g) {
    t.accumulate(a, g.leftCols(ca));
    t.accumulate(b, g.rightCols(g.cols() - ca));
  });
}

Var Tape::mean_blocks(Var a, int num_blocks) {
  const Matrix& x = value(a);
  if (num_blocks < 1 || x.cols() % num_blocks != 0)
    throw InvalidInputError("mean_blocks: column count not divisible by block count");
  const Eigen::Index w = x.cols() / num_blocks;
  Matrix y = Matrix::Zero(x.rows(), w);
  for (int j = 0; j < num_blocks; ++j) y += x.middleCols(j * w, w);
  y /= static_cast<double>(num_blocks);
  return make(std::move(y), requires_grad(a), [a, num_blocks, w](Tape& t, const Matrix& g) {
    Matrix gx(g.rows(), w * num_blocks);
    for (int j = 0; j < num_blocks; ++j)
      gx.middleCols(j * w, w) = g / static_cast<double>(num_blocks);
    t.accumulate(a, gx);
  });
}

Var Tape::mean_all(Var a) {
  const Matrix& x = value(a);
  Matrix y(1, 1);
  y(0, 0) = x.mean();
  const double inv = 1.0 / static_cast<double>(x.size());
  return make(std::move(y), requires_grad(a), [a, inv](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    t.accumulate(a, Matrix::Constant(x.rows(), x.cols(), g(0, 0) * inv));
  });
}

Var Tape::rowwise_cosine(Var a, Var b) {
  require_same_shape(value(a), value(b), "rowwise_cosine");
  const Matrix& xa = value(a);
  const Matrix& xb = value(b);
  Matrix y(xa.rows(), 1);
  for (Eigen::Index i = 0; i < xa.rows(); ++i) {
    const double na = xa.row(i).norm(), nb = xb.row(i).norm();
    y(i, 0) = (na == 0.0 || nb == 0.0) ? 0.0 : xa.row(i).dot(xb.row(i)) / (na * nb);
  }
  const bool rg = requires_grad(a) || requires_grad(b);
  return make(std::move(y), rg, [a, b](Tape& t, const Matrix& g) {
    const Matrix& xa = t.value(a);
    const Matrix& xb = t.value(b);
    Matrix ga = Matrix::Zero(xa.rows(), xa.cols());
    Matrix gb = Matrix::Zero(xb.rows(), xb.cols());
    for (Eigen::Index i = 0; i < xa.rows(); ++i) {
      const double na = xa.row(i).norm(), nb = xb.row(i).norm();
      if (na == 0.0 || nb == 0.0) continue;  // convention: flat zero gradient
      const double dot = xa.row(i).dot(xb.row(i));
      const double s = dot / (na * nb);
      const double gi = g(i, 0);
      ga.row(i) = gi * (xb.row(i) / (na * nb) - s * xa.row(i) / (na * na));
      gb.row(i) = gi * (xa.row(i) / (na * nb) - s * xb.row(i) / (nb * nb));
    }
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

Var Tape::softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  const Matrix& x = value(logits);
  const Eigen::Index n = x.rows(), k = x.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw InvalidInputError("softmax_cross_entropy: one label per row required");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      std::ostringstream msg;
      msg << "softmax_cross_entropy: label " << labels[i] << " out of range [0," << k << ") at row "
          << i;
      throw InvalidInputError(msg.str());
    }
  }

  // log-sum-exp stabilized probabilities, cached for the backward pass
  Matrix probs(n, k);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = x.row(i).maxCoeff();
    const Eigen::ArrayXd e = (x.row(i).array() - m).exp();
    const double z = e.sum();
    probs.row(i) = (e / z).matrix();
    loss -= x(i, labels[static_cast<std::size_t>(i)]) - m - std::log(z);
  }
  Matrix y(1, 1);
  y(0, 0) = loss / static_cast<double>(n);

  return make(std::move(y), requires_grad(logits),
              [logits, probs = std::move(probs), labels](Tape& t, const Matrix& g) {
                Matrix gx = probs;
                const double inv = 1.0 / static_cast<double>(probs.rows());
                for (Eigen::Index i = 0; i < probs.rows(); ++i)
                  gx(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
                t.accumulate(logits, g(0, 0) * inv * gx);
              });
}

Var Tape::rate_distortion(Var z, double eps) {
  Matrix y(1, 1);
  y(0, 0) = infomath::rate_distortion(value(z), eps);
  return make(std::move(y), requires_grad(z), [z, eps](Tape& t, const Matrix& g) {
    t.accumulate(z, g(0, 0) * infomath::rate_distortion_grad(t.value(z), eps));
  });
}

void Tape::backward(Var root) {
  const int rid = check(root);
  Node& r = nodes_[static_cast<std::size_t>(rid)];
  if (r.value.rows() != 1 || r.value.cols() != 1)
    throw InvalidInputError("backward: root must be a 1x1 scalar node");

  for (auto& node : nodes_) {
    node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  }
  r.grad(0, 0) = 1.0;
  if (!r.requires_grad) return;  // nothing upstream is trainable

  for (int i = rid; i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.requires_grad || !node.backward_fn) continue;
    if (node.grad.cwiseAbs().maxCoeff() == 0.0 && i != rid) continue;  // not on a path to root
    node.backward_fn(*this, node.grad);
  }
}

}  // namespace cim::graph
