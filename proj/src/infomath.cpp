#include "cim/infomath.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <sstream>

namespace cim::infomath {

namespace {

constexpr double kLn2 = 0.6931471805599453094;

void require_finite(const Matrix& z, const char* what) {
  if (!z.allFinite()) {
    std::ostringstream msg;
    msg << what << ": input contains non-finite entries";
    throw InvalidInputError(msg.str());
  }
}

// I + c * Gram over the smaller side of Z.
Matrix shifted_gram(const Matrix& z, double c) {
  const Eigen::Index n = z.rows(), d = z.cols();
  if (n <= d) {
    return Matrix::Identity(n, n) + c * (z * z.transpose());
  }
  return Matrix::Identity(d, d) + c * (z.transpose() * z);
}

double condition_estimate(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  const double lo = ev.minCoeff(), hi = ev.maxCoeff();
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

}  // namespace

Distribution Distribution::uniform(int k) {
  Distribution p;
  p.probs = Vector::Constant(k, 1.0 / k);
  return p;
}

Distribution Distribution::one_hot(int k, int index) {
  Distribution p;
  p.probs = Vector::Zero(k);
  p.probs(index) = 1.0;
  return p;
}

void validate_distribution(const Distribution& p, int min_classes) {
  const int k = p.num_classes();
  if (k < min_classes) {
    std::ostringstream msg;
    msg << "distribution has " << k << " classes, need at least " << min_classes;
    throw InvalidInputError(msg.str());
  }
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    const double v = p.probs(i);
    if (!std::isfinite(v) || v < 0.0) {
      std::ostringstream msg;
      msg << "distribution entry " << i << " invalid: " << v;
      throw InvalidInputError(msg.str());
    }
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    std::ostringstream msg;
    msg << "distribution sums to " << sum << ", expected 1 within 1e-9";
    throw InvalidInputError(msg.str());
  }
}

double rate_distortion(const Matrix& z, double eps) {
  if (!(eps > 0.0)) throw InvalidInputError("rate_distortion: eps must be > 0");
  if (z.rows() < 1 || z.cols() < 1) throw InvalidInputError("rate_distortion: empty matrix");
  require_finite(z, "rate_distortion");

  const double n = static_cast<double>(z.rows());
  const double d = static_cast<double>(z.cols());
  const double c = d / (n * eps * eps);
  const Matrix m = shifted_gram(z, c);

  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "rate_distortion: Cholesky factorization failed; condition estimate "
        << condition_estimate(m);
    throw NumericalError(msg.str());
  }
  // log det(M) = 2 * sum log diag(L); rate in bits halves the natural log-det.
  const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double rate = log_det / (2.0 * kLn2);
  return rate < 0.0 ? 0.0 : rate;
}

Matrix rate_distortion_grad(const Matrix& z, double eps) {
  if (!(eps > 0.0)) throw InvalidInputError("rate_distortion_grad: eps must be > 0");
  require_finite(z, "rate_distortion_grad");

  const double n = static_cast<double>(z.rows());
  const double d = static_cast<double>(z.cols());
  const double c = d / (n * eps * eps);
  const Matrix m = shifted_gram(z, c);

  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "rate_distortion_grad: Cholesky factorization failed; condition estimate "
        << condition_estimate(m);
    throw NumericalError(msg.str());
  }
  // dR/dZ = c/ln2 * (I + c Z Z^T)^{-1} Z, or equivalently c/ln2 * Z (I + c Z^T Z)^{-1}.
  if (z.rows() <= z.cols()) {
    return (c / kLn2) * llt.solve(z);
  }
  return (c / kLn2) * llt.solve(z.transpose()).transpose();
}

double kl_from_uniform(const Distribution& p) {
  validate_distribution(p, 2);
  const int k = p.num_classes();
  double kl = 0.0;
  for (int i = 0; i < k; ++i) {
    const double pi = p.probs(i);
    if (pi > 0.0) kl += pi * std::log(pi * k);
  }
  return kl < 0.0 ? 0.0 : kl;
}

double entropy(const Distribution& p) {
  validate_distribution(p, 1);
  double h = 0.0;
  for (int i = 0; i < p.num_classes(); ++i) {
    const double pi = p.probs(i);
    if (pi > 0.0) h -= pi * std::log(pi);
  }
  return h < 0.0 ? 0.0 : h;
}

double cosine_sim(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) {
    std::ostringstream msg;
    msg << "cosine_sim: dimension mismatch " << a.size() << " vs " << b.size();
    throw InvalidInputError(msg.str());
  }
  if (!a.allFinite() || !b.allFinite()) throw InvalidInputError("cosine_sim: non-finite input");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace cim::infomath
