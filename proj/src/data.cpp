#include "tttflow/data.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "tttflow/fileio.hpp"
#include "tttflow/rng.hpp"

namespace tttflow {

namespace {

constexpr std::array<double, 5> kGaussianSigma{0.1, 0.25, 0.5, 0.75, 1.0};
constexpr std::array<double, 5> kUniformHalfWidth{0.2, 0.4, 0.8, 1.2, 1.6};
constexpr std::array<double, 5> kFeatureScale{0.9, 0.75, 0.5, 0.35, 0.2};
constexpr std::array<double, 5> kMeanShift{0.25, 0.5, 1.0, 1.5, 2.0};
constexpr std::array<double, 5> kRotationDegrees{5.0, 10.0, 20.0, 35.0, 50.0};
constexpr std::array<double, 5> kSaltFraction{0.05, 0.10, 0.20, 0.30, 0.40};

// Stream keys keep the draws of different purposes independent.
enum : std::uint64_t { kKeyFamily = 11, kKeySample = 12, kKeyNatural = 13, kKeyCorrupt = 14 };

std::vector<double> random_unit(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  double norm = 0.0;
  while (norm < 1e-12) {
    norm = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

void format_double(std::string& out, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  out.append(buf, res.ptr);
}

}  // namespace

std::string_view corruption_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::uniform_noise: return "uniform_noise";
    case CorruptionKind::feature_scale: return "feature_scale";
    case CorruptionKind::mean_shift: return "mean_shift";
    case CorruptionKind::rotation: return "rotation";
    case CorruptionKind::salt_mask: return "salt_mask";
  }
  return "?";
}

CorruptionKind parse_corruption(std::string_view name) {
  for (CorruptionKind k : kAllCorruptions) {
    if (corruption_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown corruption '" + std::string(name) + "'");
}

void CorruptionSpec::validate() const {
  if (severity < 1 || severity > 5) {
    throw std::invalid_argument("corruption severity must be in 1..5, got " +
                                std::to_string(severity));
  }
}

double CorruptionSpec::parameter() const {
  validate();
  const auto i = static_cast<std::size_t>(severity - 1);
  switch (kind) {
    case CorruptionKind::gaussian_noise: return kGaussianSigma[i];
    case CorruptionKind::uniform_noise: return kUniformHalfWidth[i];
    case CorruptionKind::feature_scale: return kFeatureScale[i];
    case CorruptionKind::mean_shift: return kMeanShift[i];
    case CorruptionKind::rotation: return kRotationDegrees[i];
    case CorruptionKind::salt_mask: return kSaltFraction[i];
  }
  return 0.0;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.inputs = inputs.gather_rows(indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  out.meta = meta;
  return out;
}

LabeledDataset LabeledDataset::slice(std::size_t begin, std::size_t end) const {
  LabeledDataset out;
  out.inputs = inputs.slice_rows(begin, end);
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(end));
  out.meta = meta;
  return out;
}

// ---------------------------------------------------------------------------

MixtureFamily make_family(std::size_t num_classes, std::size_t input_dim, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("mixture needs at least 2 classes");
  if (input_dim < num_classes) {
    throw std::invalid_argument("mixture needs input_dim >= num_classes");
  }
  const auto K = static_cast<Eigen::Index>(num_classes);
  const auto D = static_cast<Eigen::Index>(input_dim);

  // Centered standard basis: pairwise distance sqrt(2) before scaling.
  Eigen::MatrixXd simplex = Eigen::MatrixXd::Zero(K, D);
  simplex.leftCols(K) = Eigen::MatrixXd::Identity(K, K).array() - 1.0 / static_cast<double>(K);
  simplex *= kMeanDistance / std::numbers::sqrt2;

  Rng rng(mix_seed(seed, kKeyFamily));
  Eigen::MatrixXd g(D, D);
  for (Eigen::Index c = 0; c < D; ++c) {
    for (Eigen::Index r = 0; r < D; ++r) g(r, c) = rng.normal();
  }
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  const Eigen::MatrixXd means = simplex * q.transpose();

  MixtureFamily family;
  family.num_classes = num_classes;
  family.input_dim = input_dim;
  family.seed = seed;
  family.means = Tensor(Shape{num_classes, input_dim});
  for (Eigen::Index k = 0; k < K; ++k) {
    for (Eigen::Index j = 0; j < D; ++j) {
      family.means.at(static_cast<std::size_t>(k), static_cast<std::size_t>(j)) = means(k, j);
    }
  }
  const Eigen::RowVectorXd centroid = means.colwise().mean();
  family.spread = std::sqrt((means.rowwise() - centroid).rowwise().squaredNorm().mean());
  return family;
}

LabeledDataset sample_family(const MixtureFamily& family, std::size_t n, std::uint64_t seed,
                             double cov_scale) {
  if (n < family.num_classes) throw std::invalid_argument("sample size must be >= num_classes");
  if (!(cov_scale > 0.0)) throw std::invalid_argument("covariance scale must be positive");
  Rng rng(seed);
  LabeledDataset ds;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = i % family.num_classes;
  rng.shuffle(std::span<std::size_t>(ds.labels));

  const std::size_t d = family.input_dim;
  const double sd = std::sqrt(cov_scale);
  ds.inputs = Tensor(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const auto mean = family.means.row(ds.labels[i]);
    for (std::size_t j = 0; j < d; ++j) ds.inputs.at(i, j) = mean[j] + sd * rng.normal();
  }
  ds.meta.generator = "simplex";
  ds.meta.seed = seed;
  ds.meta.spread = family.spread;
  return ds;
}

LabeledDataset generate_source(std::size_t num_classes, std::size_t input_dim, std::size_t n,
                               std::uint64_t seed, std::uint64_t stream) {
  const MixtureFamily family = make_family(num_classes, input_dim, seed);
  return sample_family(family, n, mix_seed(mix_seed(seed, kKeySample), stream));
}

LabeledDataset natural_shift(const MixtureFamily& family, std::uint64_t seed, std::size_t n) {
  MixtureFamily shifted = family;
  Rng rng(mix_seed(seed, kKeyNatural));
  const double step = 0.1 * family.spread;
  for (std::size_t k = 0; k < family.num_classes; ++k) {
    const auto dir = random_unit(rng, family.input_dim);
    for (std::size_t j = 0; j < family.input_dim; ++j) shifted.means.at(k, j) += step * dir[j];
  }
  LabeledDataset ds = sample_family(shifted, n, rng(), 1.2);
  ds.meta.generator = "simplex_natural";
  ds.meta.seed = seed;
  ds.meta.spread = family.spread;
  return ds;
}

LabeledDataset apply_corruption(const LabeledDataset& ds, const CorruptionSpec& spec) {
  const double p = spec.parameter();
  LabeledDataset out = ds;
  out.meta.corruption = spec;
  Tensor& x = out.inputs;
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  Rng rng(mix_seed(mix_seed(ds.meta.seed, kKeyCorrupt), static_cast<std::uint64_t>(spec.kind)));

  switch (spec.kind) {
    case CorruptionKind::gaussian_noise: {
      const double sigma = p * ds.meta.spread;
      for (double& v : x.data()) v += sigma * rng.normal();
      break;
    }
    case CorruptionKind::uniform_noise:
      for (double& v : x.data()) v += p * rng.uniform(-1.0, 1.0);
      break;
    case CorruptionKind::feature_scale:
      for (double& v : x.data()) v *= p;
      break;
    case CorruptionKind::mean_shift: {
      const auto dir = random_unit(rng, d);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) x.at(i, j) += p * dir[j];
      }
      break;
    }
    case CorruptionKind::rotation: {
      if (d < 2) throw std::invalid_argument("rotation needs input_dim >= 2");
      // Orthonormal pair (u, v) spanning the rotation plane.
      const auto u = random_unit(rng, d);
      std::vector<double> v;
      double uv = 0.0;
      do {
        v = random_unit(rng, d);
        uv = std::inner_product(u.begin(), u.end(), v.begin(), 0.0);
      } while (std::abs(uv) > 0.99);
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        v[j] -= uv * u[j];
        norm += v[j] * v[j];
      }
      norm = std::sqrt(norm);
      for (double& c : v) c /= norm;
      const double theta = p * std::numbers::pi / 180.0;
      const double c = std::cos(theta);
      const double s = std::sin(theta);
      for (std::size_t i = 0; i < n; ++i) {
        auto row = x.row(i);
        const double a = std::inner_product(row.begin(), row.end(), u.begin(), 0.0);
        const double b = std::inner_product(row.begin(), row.end(), v.begin(), 0.0);
        const double da = c * a - s * b - a;
        const double db = s * a + c * b - b;
        for (std::size_t j = 0; j < d; ++j) row[j] += da * u[j] + db * v[j];
      }
      break;
    }
    case CorruptionKind::salt_mask: {
      // Each sample zeroes round(p * d) coordinates, chosen by a per-sample
      // random ranking that is shared across severities.
      const auto k = static_cast<std::size_t>(std::lround(p * static_cast<double>(d)));
      std::vector<std::size_t> order(d);
      for (std::size_t i = 0; i < n; ++i) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t j = 0; j < k; ++j) x.at(i, order[j]) = 0.0;
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void save_csv(const LabeledDataset& ds, const std::filesystem::path& path) {
  const std::size_t d = ds.dim();
  std::string text = "label";
  for (std::size_t j = 0; j < d; ++j) text += ",f" + std::to_string(j);
  text += '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    text += std::to_string(ds.labels[i]);
    for (std::size_t j = 0; j < d; ++j) {
      text += ',';
      format_double(text, ds.inputs.at(i, j));
    }
    text += '\n';
  }
  write_file_atomic(path, text);
}

LabeledDataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line.empty()) {
    throw DataError("'" + path.string() + "' is empty; expected a header row", 1);
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::size_t columns = 1;
  for (char ch : line) columns += ch == ',';
  if (line.rfind("label", 0) != 0 || columns < 2) {
    throw DataError("header must be 'label,f0,...'", 1);
  }
  const std::size_t d = columns - 1;

  std::vector<double> values;
  std::vector<std::size_t> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    std::size_t field = 0;
    while (true) {
      const char* comma = std::find(p, end, ',');
      if (field == 0) {
        std::size_t label = 0;
        auto [ptr, ec] = std::from_chars(p, comma, label);
        if (ec != std::errc() || ptr != comma) {
          throw DataError("label '" + std::string(p, comma) + "' is not a non-negative integer",
                          line_no);
        }
        labels.push_back(label);
      } else {
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(p, comma, v);
        if (ec != std::errc() || ptr != comma || !std::isfinite(v)) {
          throw DataError("field " + std::to_string(field) + " '" + std::string(p, comma) +
                              "' is not a finite number",
                          line_no);
        }
        values.push_back(v);
      }
      ++field;
      if (comma == end) break;
      p = comma + 1;
    }
    if (field != columns) {
      throw DataError("expected " + std::to_string(columns) + " columns, found " +
                          std::to_string(field),
                      line_no);
    }
  }
  if (labels.empty()) throw DataError("'" + path.string() + "' has a header but no rows");

  LabeledDataset ds;
  ds.inputs = Tensor(Shape{labels.size(), d}, std::move(values));
  ds.labels = std::move(labels);
  const std::string stem = path.stem().string();
  ds.meta.generator = "csv";
  const auto underscore = stem.rfind('_');
  if (underscore != std::string::npos) {
    std::uint64_t seed = 0;
    const char* b = stem.data() + underscore + 1;
    const char* e = stem.data() + stem.size();
    auto [ptr, ec] = std::from_chars(b, e, seed);
    if (ec == std::errc() && ptr == e) ds.meta.seed = seed;
  }
  return ds;
}

std::string dataset_filename(std::string_view family, std::string_view kind, int severity,
                             std::uint64_t seed) {
  std::ostringstream os;
  os << family << '_' << kind << "_s" << severity << '_' << seed << ".csv";
  return os.str();
}

}  // namespace tttflow
