#include "cim/synthbias.hpp"

#include "cim/infomath.hpp"

#include <Eigen/QR>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace cim::synth {

namespace {

// rng stream ids per stage, so splits are independently seeded
constexpr std::uint64_t kStreamProto = 11;
constexpr std::uint64_t kStreamTrain = 21;
constexpr std::uint64_t kStreamIdTest = 22;
constexpr std::uint64_t kStreamOodTest = 23;
constexpr std::uint64_t kStreamCf = 24;

Matrix orthonormal_rows(int k, int dim, Rng& rng) {
  Matrix gauss = rng.normal_matrix(dim, k);
  if (dim >= k) {
    Eigen::HouseholderQR<Matrix> qr(gauss);
    Matrix q = qr.householderQ() * Matrix::Identity(dim, k);
    return q.transpose();  // k x dim, orthonormal rows
  }
  // fewer dims than classes: fall back to normalized rows
  Matrix rows = gauss.transpose();
  for (int i = 0; i < k; ++i) rows.row(i).normalize();
  return rows;
}

Vector noise(int dim, double sigma, Rng& rng) {
  Vector n(dim);
  for (int i = 0; i < dim; ++i) n(i) = rng.normal(0.0, sigma);
  return n;
}

int random_other_class(int label, int k, Rng& rng) {
  const int offset = 1 + rng.uniform_int(k - 1);
  return (label + offset) % k;
}

/// Skewed prior over classes, p(j) proportional to skew^j.
std::vector<double> skew_prior(int k, double skew) {
  std::vector<double> p(static_cast<std::size_t>(k));
  double sum = 0.0, w = 1.0;
  for (int j = 0; j < k; ++j, w *= skew) {
    p[static_cast<std::size_t>(j)] = w;
    sum += w;
  }
  for (double& x : p) x /= sum;
  return p;
}

int sample_categorical(const std::vector<double>& p, Rng& rng) {
  double u = rng.uniform();
  for (std::size_t j = 0; j + 1 < p.size(); ++j) {
    if (u < p[j]) return static_cast<int>(j);
    u -= p[j];
  }
  return static_cast<int>(p.size()) - 1;
}

enum class SplitKind { kBiased, kOod };

std::vector<Sample> generate_split(const BiasSpec& spec, const Prototypes& protos, int count,
                                   SplitKind kind, Rng rng) {
  const int k = spec.num_classes;
  const int bd = spec.block_dim;
  const double sigma = spec.noise_sigma;
  const std::vector<double> ood_prior = skew_prior(k, spec.ood_class_skew);

  auto shortcut_class = [&](int label, double rho) {
    if (kind == SplitKind::kBiased) {
      return rng.uniform() < rho ? label : random_other_class(label, k, rng);
    }
    if (spec.ood_anticorrelated) return random_other_class(label, k, rng);
    return sample_categorical(ood_prior, rng);  // independent of label; agreement 1/k
  };

  std::vector<Sample> split;
  split.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int a_q = rng.uniform_int(k);
    const int a_v = rng.uniform_int(k);
    const int label = (a_q + a_v) % k;
    const int g = shortcut_class(label, spec.rho_q);
    const int c_v = shortcut_class(label, spec.rho_v);
    const int c_x = shortcut_class(label, spec.rho_cross);

    Vector mask(bd);
    for (int d = 0; d < bd; ++d) mask(d) = rng.normal(0.0, kCrossMaskStd);

    Sample s;
    s.label = label;
    s.group_id = g;
    s.q = Vector(spec.q_dim());
    s.q.segment(0, bd) = protos.prefix.row(g).transpose() + noise(bd, sigma, rng);
    s.q.segment(bd, bd) = protos.q_core.row(a_q).transpose() + noise(bd, sigma, rng);
    s.q.segment(2 * bd, bd) = mask + noise(bd, sigma, rng);

    s.v = Vector(spec.v_dim());
    s.v.segment(0, bd) = protos.v_core.row(a_v).transpose() + noise(bd, sigma, rng);
    s.v.segment(bd, bd) = protos.v_spur.row(c_v).transpose() + noise(bd, sigma, rng);
    s.v.segment(2 * bd, bd) = noise(bd, sigma, rng);
    s.v.segment(3 * bd, bd) = protos.cross.row(c_x).transpose() - mask + noise(bd, sigma, rng);
    split.push_back(std::move(s));
  }
  return split;
}

}  // namespace

void BiasSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw InvalidInputError("bias_spec." + field + ": " + why);
  };
  if (num_classes < 2) fail("num_classes", "must be >= 2");
  if (block_dim < 1) fail("block_dim", "must be >= 1");
  const double lo = 1.0 / num_classes;
  auto check_rho = [&](double rho, const char* name) {
    if (!(rho >= lo - 1e-12 && rho <= 1.0))
      fail(name, "must lie in [1/k, 1]");
  };
  check_rho(rho_q, "rho_q");
  check_rho(rho_v, "rho_v");
  check_rho(rho_cross, "rho_cross");
  if (!(noise_sigma > 0.0)) fail("noise_sigma", "must be > 0");
  if (n_train < num_classes) fail("n_train", "must be >= num_classes");
  if (n_test < num_classes) fail("n_test", "must be >= num_classes");
  if (!(ood_class_skew > 0.0 && ood_class_skew <= 1.0)) fail("ood_class_skew", "must be in (0, 1]");
}

Prototypes make_prototypes(const BiasSpec& spec) {
  Rng rng = Rng(spec.seed).derive(kStreamProto);
  Prototypes p;
  p.prefix = orthonormal_rows(spec.num_classes, spec.block_dim, rng);
  p.q_core = orthonormal_rows(spec.num_classes, spec.block_dim, rng);
  p.v_core = orthonormal_rows(spec.num_classes, spec.block_dim, rng);
  p.v_spur = orthonormal_rows(spec.num_classes, spec.block_dim, rng);
  p.cross = orthonormal_rows(spec.num_classes, spec.block_dim, rng);
  return p;
}

DatasetBundle make_dataset(const BiasSpec& spec) {
  spec.validate();
  const Prototypes protos = make_prototypes(spec);
  const Rng base(spec.seed);

  DatasetBundle bundle;
  bundle.spec = spec;
  bundle.train =
      generate_split(spec, protos, spec.n_train, SplitKind::kBiased, base.derive(kStreamTrain));
  bundle.id_test =
      generate_split(spec, protos, spec.n_test, SplitKind::kBiased, base.derive(kStreamIdTest));
  bundle.ood_test =
      generate_split(spec, protos, spec.n_test, SplitKind::kOod, base.derive(kStreamOodTest));
  bundle.cf_test = make_counterfactual(bundle.id_test, spec);
  return bundle;
}

std::vector<Sample> make_counterfactual(const std::vector<Sample>& split, const BiasSpec& spec) {
  Rng rng = Rng(spec.seed).derive(kStreamCf);
  const int bd = spec.block_dim;
  std::vector<Sample> cf = split;
  for (Sample& s : cf) {
    for (int d = 0; d < bd; ++d)
      s.v(2 * bd + d) = rng.normal(kCfMeanShift, spec.noise_sigma);
  }
  return cf;
}

Sample mask_to_spurious(const Sample& sample, const BiasSpec& spec) {
  const int bd = spec.block_dim;
  Sample masked = sample;
  masked.q.segment(bd, 2 * bd).setZero();  // q_core and q_spur
  return masked;
}

Eigen::VectorBlock<const Vector> q_prefix(const Sample& s, const BiasSpec& spec) {
  return s.q.segment(0, spec.block_dim);
}
Eigen::VectorBlock<const Vector> q_core(const Sample& s, const BiasSpec& spec) {
  return s.q.segment(spec.block_dim, spec.block_dim);
}
Eigen::VectorBlock<const Vector> q_spur(const Sample& s, const BiasSpec& spec) {
  return s.q.segment(2 * spec.block_dim, spec.block_dim);
}
Eigen::VectorBlock<const Vector> v_core(const Sample& s, const BiasSpec& spec) {
  return s.v.segment(0, spec.block_dim);
}
Eigen::VectorBlock<const Vector> v_spur(const Sample& s, const BiasSpec& spec) {
  return s.v.segment(spec.block_dim, spec.block_dim);
}
Eigen::VectorBlock<const Vector> v_irrelevant(const Sample& s, const BiasSpec& spec) {
  return s.v.segment(2 * spec.block_dim, spec.block_dim);
}
Eigen::VectorBlock<const Vector> cross_v(const Sample& s, const BiasSpec& spec) {
  return s.v.segment(3 * spec.block_dim, spec.block_dim);
}

int decode_class(const Vector& block, const Matrix& prototypes) {
  int best = 0;
  double best_sim = -2.0;
  for (int j = 0; j < prototypes.rows(); ++j) {
    const double sim = infomath::cosine_sim(block, prototypes.row(j).transpose());
    if (sim > best_sim) {
      best_sim = sim;
      best = j;
    }
  }
  return best;
}

Matrix stack_q(const std::vector<Sample>& split) {
  if (split.empty()) throw InvalidInputError("stack_q: empty split");
  Matrix m(static_cast<Eigen::Index>(split.size()), split.front().q.size());
  for (std::size_t i = 0; i < split.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = split[i].q;
  return m;
}

Matrix stack_v(const std::vector<Sample>& split) {
  if (split.empty()) throw InvalidInputError("stack_v: empty split");
  Matrix m(static_cast<Eigen::Index>(split.size()), split.front().v.size());
  for (std::size_t i = 0; i < split.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = split[i].v;
  return m;
}

std::vector<int> labels_of(const std::vector<Sample>& split) {
  std::vector<int> labels;
  labels.reserve(split.size());
  for (const Sample& s : split) labels.push_back(s.label);
  return labels;
}

// --- serialization ---

namespace {

constexpr char kMagic[4] = {'C', 'I', 'M', 'D'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const char* what) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(std::string("dataset file truncated while reading ") + what);
  return v;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string spec_header(const BiasSpec& spec, const std::string& split_name) {
  std::ostringstream h;
  h << "split=" << split_name << "\n"
    << "num_classes=" << spec.num_classes << "\n"
    << "block_dim=" << spec.block_dim << "\n"
    << "rho_q=" << format_double(spec.rho_q) << "\n"
    << "rho_v=" << format_double(spec.rho_v) << "\n"
    << "rho_cross=" << format_double(spec.rho_cross) << "\n"
    << "noise_sigma=" << format_double(spec.noise_sigma) << "\n"
    << "n_train=" << spec.n_train << "\n"
    << "n_test=" << spec.n_test << "\n"
    << "seed=" << spec.seed << "\n"
    << "ood_anticorrelated=" << (spec.ood_anticorrelated ? 1 : 0) << "\n"
    << "ood_class_skew=" << format_double(spec.ood_class_skew) << "\n";
  return h.str();
}

std::map<std::string, std::string> parse_header(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("dataset header line missing '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

void save_split(const std::vector<Sample>& split, const BiasSpec& spec,
                const std::string& split_name, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open for writing: " + path);
  out.write(kMagic, 4);
  write_raw(out, kVersion);
  const std::string header = spec_header(spec, split_name);
  write_raw(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));

  write_raw(out, static_cast<std::uint32_t>(split.size()));
  write_raw(out, static_cast<std::uint32_t>(spec.q_dim()));
  write_raw(out, static_cast<std::uint32_t>(spec.v_dim()));
  for (const Sample& s : split) {
    write_raw(out, static_cast<std::int32_t>(s.label));
    write_raw(out, static_cast<std::int32_t>(s.group_id));
    out.write(reinterpret_cast<const char*>(s.q.data()),
              static_cast<std::streamsize>(sizeof(double)) * s.q.size());
    out.write(reinterpret_cast<const char*>(s.v.data()),
              static_cast<std::streamsize>(sizeof(double)) * s.v.size());
  }
  if (!out) throw FormatError("write failed: " + path);
}

std::vector<Sample> load_split(const std::string& path, BiasSpec* spec_out,
                               std::string* split_name_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("not a dataset file (bad magic): " + path);
  const auto version = read_raw<std::uint32_t>(in, "version");
  if (version != kVersion)
    throw FormatError("unsupported dataset format version " + std::to_string(version) + ": " + path);

  const auto header_len = read_raw<std::uint32_t>(in, "header length");
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  if (!in) throw FormatError("dataset file truncated while reading header: " + path);
  const auto kv = parse_header(header);

  BiasSpec spec;
  try {
    spec.num_classes = std::stoi(kv.at("num_classes"));
    spec.block_dim = std::stoi(kv.at("block_dim"));
    spec.rho_q = std::stod(kv.at("rho_q"));
    spec.rho_v = std::stod(kv.at("rho_v"));
    spec.rho_cross = std::stod(kv.at("rho_cross"));
    spec.noise_sigma = std::stod(kv.at("noise_sigma"));
    spec.n_train = std::stoi(kv.at("n_train"));
    spec.n_test = std::stoi(kv.at("n_test"));
    spec.seed = std::stoull(kv.at("seed"));
    spec.ood_anticorrelated = kv.at("ood_anticorrelated") == "1";
    spec.ood_class_skew = std::stod(kv.at("ood_class_skew"));
  } catch (const std::out_of_range&) {
    throw FormatError("dataset header missing required key: " + path);
  }

  const auto count = read_raw<std::uint32_t>(in, "sample count");
  const auto q_dim = read_raw<std::uint32_t>(in, "q_dim");
  const auto v_dim = read_raw<std::uint32_t>(in, "v_dim");
  if (static_cast<int>(q_dim) != spec.q_dim() || static_cast<int>(v_dim) != spec.v_dim())
    throw FormatError("dataset dimensions disagree with header spec: " + path);

  std::vector<Sample> split;
  split.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    s.label = read_raw<std::int32_t>(in, "label");
    s.group_id = read_raw<std::int32_t>(in, "group_id");
    s.q = Vector(q_dim);
    in.read(reinterpret_cast<char*>(s.q.data()),
            static_cast<std::streamsize>(sizeof(double)) * q_dim);
    s.v = Vector(v_dim);
    in.read(reinterpret_cast<char*>(s.v.data()),
            static_cast<std::streamsize>(sizeof(double)) * v_dim);
    if (!in) throw FormatError("dataset file truncated in record body: " + path);
    split.push_back(std::move(s));
  }
  if (spec_out) *spec_out = spec;
  if (split_name_out) *split_name_out = kv.count("split") ? kv.at("split") : "";
  return split;
}

void save_bundle(const DatasetBundle& bundle, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_split(bundle.train, bundle.spec, "train", (fs::path(dir) / "train.cimd").string());
  save_split(bundle.id_test, bundle.spec, "id_test", (fs::path(dir) / "id_test.cimd").string());
  save_split(bundle.ood_test, bundle.spec, "ood_test", (fs::path(dir) / "ood_test.cimd").string());
  save_split(bundle.cf_test, bundle.spec, "cf_test", (fs::path(dir) / "cf_test.cimd").string());
}

DatasetBundle load_bundle(const std::string& dir) {
  namespace fs = std::filesystem;
  DatasetBundle bundle;
  bundle.train = load_split((fs::path(dir) / "train.cimd").string(), &bundle.spec);
  bundle.id_test = load_split((fs::path(dir) / "id_test.cimd").string());
  bundle.ood_test = load_split((fs::path(dir) / "ood_test.cimd").string());
  bundle.cf_test = load_split((fs::path(dir) / "cf_test.cimd").string());
  return bundle;
}

}  // namespace cim::synth
