#pragma once

// Synthetic source/target data: a K-class Gaussian mixture whose class means
// sit on a regular simplex, six label-preserving corruption families with
// five severity levels, a mild "natural" shift, and CSV interchange.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tttflow/tensor.hpp"

namespace tttflow {

enum class CorruptionKind { gaussian_noise, uniform_noise, feature_scale, mean_shift, rotation, salt_mask };

inline constexpr std::array<CorruptionKind, 6> kAllCorruptions{
    CorruptionKind::gaussian_noise, CorruptionKind::uniform_noise, CorruptionKind::feature_scale,
    CorruptionKind::mean_shift,     CorruptionKind::rotation,      CorruptionKind::salt_mask};

std::string_view corruption_name(CorruptionKind kind);
CorruptionKind parse_corruption(std::string_view name);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;

  // Throws std::invalid_argument unless severity is in 1..5.
  void validate() const;
  // Magnitude for this level: noise sigma in units of the class-mean spread,
  // scale factor, shift length, angle in degrees, masked fraction, or
  // uniform half-width.
  double parameter() const;

  friend bool operator==(const CorruptionSpec&, const CorruptionSpec&) = default;
};

struct DatasetMeta {
  std::string generator;
  std::uint64_t seed = 0;
  // RMS distance of the class means from their centroid; noise corruptions
  // are expressed relative to it.
  double spread = 1.0;
  std::optional<CorruptionSpec> corruption;
};

struct LabeledDataset {
  Tensor inputs;  // [n, input_dim]
  std::vector<std::size_t> labels;
  DatasetMeta meta;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const { return inputs.cols(); }
  LabeledDataset subset(std::span<const std::size_t> indices) const;
  LabeledDataset slice(std::size_t begin, std::size_t end) const;
};

// Class means of a mixture and the parameters needed to resample it.
struct MixtureFamily {
  std::size_t num_classes = 10;
  std::size_t input_dim = 20;
  std::uint64_t seed = 0;
  Tensor means;  // [K, input_dim]
  double spread = 0.0;
};

inline constexpr double kMeanDistance = 4.0;

// Regular simplex with pairwise mean distance 4, centered at the origin and
// rotated by a seeded random orthogonal matrix. Needs K >= 2, input_dim >= K.
MixtureFamily make_family(std::size_t num_classes, std::size_t input_dim, std::uint64_t seed);

// n balanced draws (label i % K, then shuffled) from N(mean_y, cov_scale * I).
LabeledDataset sample_family(const MixtureFamily& family, std::size_t n, std::uint64_t seed,
                             double cov_scale = 1.0);

// Samples of the family seeded by `seed`. `stream` selects an independent
// draw from the same family: 0 for training data, 1 for held-out test data.
LabeledDataset generate_source(std::size_t num_classes, std::size_t input_dim, std::size_t n,
                               std::uint64_t seed, std::uint64_t stream = 0);

// Same family with each mean moved by 10% of the spread in a random direction
// and the covariance scaled by 1.2.
inline constexpr std::size_t kNaturalShiftSize = 2000;
LabeledDataset natural_shift(const MixtureFamily& family, std::uint64_t seed,
                             std::size_t n = kNaturalShiftSize);

// Label-preserving transform; deterministic in (ds.meta.seed, spec.kind) with
// severity only changing the magnitude, so levels are nested.
LabeledDataset apply_corruption(const LabeledDataset& ds, const CorruptionSpec& spec);

// Header `label,f0,...,f{d-1}`, 17 significant digits.
void save_csv(const LabeledDataset& ds, const std::filesystem::path& path);
// Throws DataError with the 1-based line number of the first bad row. The
// seed is recovered from a trailing `_<digits>` in the file stem when present;
// the spread is not stored and reads back as 1.
LabeledDataset load_csv(const std::filesystem::path& path);

// `{family}_{kind}_s{severity}_{seed}.csv`; severity 0 marks an uncorrupted split.
std::string dataset_filename(std::string_view family, std::string_view kind, int severity,
                             std::uint64_t seed);

}  // namespace tttflow
