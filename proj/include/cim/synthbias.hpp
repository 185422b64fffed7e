#pragma once

/**
 * Synthetic two-modality classification task with controllable spurious
 * channels.
 *
 * Sample layout (every block is `block_dim` wide):
 *   q = [ prefix | q_core | q_spur ]
 *   v = [ v_core | v_spur | v_irrelevant | cross_v ]
 *
 * The label is (a_q + a_v) mod k, where a_q and a_v are latent attributes
 * encoded (as class prototypes plus noise) only in q_core and v_core, so
 * solving the task honestly requires fusing both modalities. Three shortcut
 * channels are planted with train-time label agreement rho:
 *   - prefix ("question type", also the group id)        language-only
 *   - v_spur                                             vision-only
 *   - q_spur + cross_v (additively split prototype)      cross-modal
 * The q_spur half carries a high-variance mask vector u and cross_v carries
 * prototype - u, so neither half alone is informative but their sum is.
 * v_irrelevant is pure noise (never label-correlated).
 *
 * In ood_test every shortcut channel's class is drawn independently of the
 * label (agreement exactly 1/k) from a skewed prior, emulating the lopsided
 * answer priors of real OOD VQA splits. cf_test equals id_test except the
 * irrelevant block is resampled with a shifted mean.
 */

#include "cim/types.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace cim::synth {

struct BiasSpec {
  int num_classes = 8;
  int block_dim = 16;
  double rho_q = 0.9;      // prefix channel agreement in train
  double rho_v = 0.9;      // vision-only channel
  double rho_cross = 0.9;  // cross-modal channel
  double noise_sigma = 0.3;
  int n_train = 8000;
  int n_test = 2000;
  std::uint64_t seed = 1;
  bool ood_anticorrelated = false;  // shortcut classes never equal the label in ood
  double ood_class_skew = 0.7;      // ood shortcut-class prior ~ skew^j; 1 = uniform

  int q_dim() const { return 3 * block_dim; }
  int v_dim() const { return 4 * block_dim; }
  void validate() const;  // throws InvalidInputError naming the offending field
};

struct Sample {
  Vector q;
  Vector v;
  int label = 0;
  int group_id = 0;  // prefix attribute value ("question type")
};

struct DatasetBundle {
  std::vector<Sample> train, id_test, ood_test, cf_test;
  BiasSpec spec;
};

/// The five prototype families, k orthonormal rows each. Fixed per seed,
/// shared across splits.
struct Prototypes {
  Matrix prefix, q_core, v_core, v_spur, cross;
};

Prototypes make_prototypes(const BiasSpec& spec);

DatasetBundle make_dataset(const BiasSpec& spec);

/// Replaces only the irrelevant block (mean-shifted resample). Labels, q and
/// all other v blocks are bitwise unchanged.
std::vector<Sample> make_counterfactual(const std::vector<Sample>& split, const BiasSpec& spec);

/// Zeroes q_core and q_spur, retaining only the prefix in q; v unchanged.
Sample mask_to_spurious(const Sample& sample, const BiasSpec& spec);

// Block accessors (read-only segments).
Eigen::VectorBlock<const Vector> q_prefix(const Sample& s, const BiasSpec& spec);
Eigen::VectorBlock<const Vector> q_core(const Sample& s, const BiasSpec& spec);
Eigen::VectorBlock<const Vector> q_spur(const Sample& s, const BiasSpec& spec);
Eigen::VectorBlock<const Vector> v_core(const Sample& s, const BiasSpec& spec);
Eigen::VectorBlock<const Vector> v_spur(const Sample& s, const BiasSpec& spec);
Eigen::VectorBlock<const Vector> v_irrelevant(const Sample& s, const BiasSpec& spec);
Eigen::VectorBlock<const Vector> cross_v(const Sample& s, const BiasSpec& spec);

/// Nearest-prototype decode (cosine) of an encoded block.
int decode_class(const Vector& block, const Matrix& prototypes);

/// Stacks q (or v) rows of a split into a matrix, one row per sample.
Matrix stack_q(const std::vector<Sample>& split);
Matrix stack_v(const std::vector<Sample>& split);
std::vector<int> labels_of(const std::vector<Sample>& split);

// --- serialization (one file per split) ---
// Binary layout: magic "CIMD", u32 version, u32 header length, header text of
// "key=value" lines (spec fields + split name), then u32 count, u32 q_dim,
// u32 v_dim and `count` records (i32 label, i32 group_id, f64 q[], f64 v[]).
// Round-trips bit-exactly.
void save_split(const std::vector<Sample>& split, const BiasSpec& spec,
                const std::string& split_name, const std::string& path);
std::vector<Sample> load_split(const std::string& path, BiasSpec* spec_out = nullptr,
                               std::string* split_name_out = nullptr);

void save_bundle(const DatasetBundle& bundle, const std::string& dir);
DatasetBundle load_bundle(const std::string& dir);

/// Counterfactual irrelevant-block mean shift (every dimension).
inline constexpr double kCfMeanShift = 1.0;
/// Std of the additive mask that splits the cross-modal prototype.
inline constexpr double kCrossMaskStd = 2.0;

}  // namespace cim::synth
