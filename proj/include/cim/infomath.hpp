#pragma once

/**
 * Pure numerical primitives: rate-distortion of a feature matrix,
 * KL-from-uniform, Shannon entropy, cosine similarity.
 *
 * rate_distortion uses base-2 logs (bits); kl_from_uniform and entropy use
 * natural logs (nats). Ratios of KL values are base-independent, so the
 * sufficiency score built on top of these does not depend on this choice.
 */

#include "cim/types.hpp"

namespace cim::infomath {

/// Probability vector over k classes. Entries >= 0, sum to 1 within 1e-9.
struct Distribution {
  Vector probs;

  int num_classes() const { return static_cast<int>(probs.size()); }
  static Distribution uniform(int k);
  static Distribution one_hot(int k, int index);
};

/// Throws InvalidInputError if p is not a valid distribution over >= `min_classes` classes.
void validate_distribution(const Distribution& p, int min_classes = 1);

/**
 * Coding rate of the rows of Z at precision eps:
 *
 *   R(Z, eps) = 1/2 * log2 det(I + d/(n*eps^2) * Z*Z^T)
 *
 * Evaluated through a Cholesky factorization of whichever Gram form (n x n
 * or d x d) is smaller; the two agree by Sylvester's determinant identity.
 * Always >= 0.
 */
double rate_distortion(const Matrix& z, double eps);

/// Gradient of rate_distortion w.r.t. every entry of Z: d/(n*eps^2*ln2) * (I + c*Z*Z^T)^{-1} * Z.
Matrix rate_distortion_grad(const Matrix& z, double eps);

/// KL(p || uniform) in nats: sum_i p_i * log(p_i * k), with 0*log0 = 0. Equals log k - H(p).
double kl_from_uniform(const Distribution& p);

/// Shannon entropy in nats, 0*log0 = 0.
double entropy(const Distribution& p);

/// a.b / (|a||b|); 0 when either norm is 0. Throws on dimension mismatch.
double cosine_sim(const Vector& a, const Vector& b);

}  // namespace cim::infomath
