#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "tttflow/data.hpp"
#include "tttflow/errors.hpp"

using namespace tttflow;
using tttflow::testing::LogisticOracle;

namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::path(::testing::TempDir()) / "tttflow_data";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

double mean_displacement(const LabeledDataset& a, const LabeledDataset& b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.dim(); ++j) {
      const double d = a.inputs.at(i, j) - b.inputs.at(i, j);
      s += d * d;
    }
    total += std::sqrt(s);
  }
  return total / static_cast<double>(a.size());
}

double row_norm(const Tensor& x, std::size_t i) {
  double s = 0.0;
  for (double v : x.row(i)) s += v * v;
  return std::sqrt(s);
}

}  // namespace

// ---- source generation -------------------------------------------------------------

TEST(Source, TwoClassesLinearlySeparableByOracle) {
  const LabeledDataset ds = generate_source(2, 20, 1000, 3);
  LogisticOracle oracle;
  oracle.classes = 2;
  oracle.dim = 20;
  const std::vector<double> x(ds.inputs.data().begin(), ds.inputs.data().end());
  oracle.fit(x, ds.labels, ds.size(), 200, 0.5);
  EXPECT_GE(oracle.accuracy(x, ds.labels, ds.size()), 0.97);
}

TEST(Source, SameSeedBitwiseIdentical) {
  const LabeledDataset a = generate_source(10, 20, 500, 42);
  const LabeledDataset b = generate_source(10, 20, 500, 42);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.labels, b.labels);
  const LabeledDataset c = generate_source(10, 20, 500, 43);
  EXPECT_NE(a.inputs, c.inputs);
  const LabeledDataset held = generate_source(10, 20, 500, 42, 1);
  EXPECT_NE(a.inputs, held.inputs);
}

TEST(Source, LabelsBalancedWithinOne) {
  for (std::size_t n : {1000, 1003, 57}) {
    const LabeledDataset ds = generate_source(10, 20, n, 5);
    std::map<std::size_t, std::size_t> counts;
    for (std::size_t y : ds.labels) {
      ASSERT_LT(y, 10u);
      ++counts[y];
    }
    ASSERT_EQ(counts.size(), 10u);
    std::size_t lo = n, hi = 0;
    for (const auto& [k, c] : counts) {
      lo = std::min(lo, c);
      hi = std::max(hi, c);
    }
    EXPECT_LE(hi - lo, 1u) << "n=" << n;
  }
}

TEST(Source, FamilyIsARegularSimplex) {
  // Regular simplex with edge a: every vertex lies a * sqrt((K - 1) / 2K)
  // from the centroid.
  for (std::size_t k : {2, 3, 10}) {
    const MixtureFamily f = make_family(k, 20, 7);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = i + 1; j < k; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < 20; ++c) {
          const double d = f.means.at(i, c) - f.means.at(j, c);
          s += d * d;
        }
        EXPECT_NEAR(std::sqrt(s), kMeanDistance, 1e-12);
      }
    }
    const double expected =
        kMeanDistance * std::sqrt(static_cast<double>(k - 1) / (2.0 * static_cast<double>(k)));
    EXPECT_NEAR(f.spread, expected, 1e-12);
  }
  EXPECT_THROW(make_family(1, 20, 0), std::invalid_argument);
  EXPECT_THROW(make_family(10, 5, 0), std::invalid_argument);
}

TEST(Source, SampleMomentsMatchFamily) {
  const MixtureFamily f = make_family(3, 4, 9);
  const LabeledDataset ds = sample_family(f, 30000, 1, 2.0);
  std::vector<double> var(3, 0.0);
  std::vector<std::size_t> count(3, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t y = ds.labels[i];
    ++count[y];
    for (std::size_t j = 0; j < 4; ++j) {
      const double d = ds.inputs.at(i, j) - f.means.at(y, j);
      var[y] += d * d;
    }
  }
  for (std::size_t y = 0; y < 3; ++y) {
    EXPECT_NEAR(var[y] / (4.0 * static_cast<double>(count[y])), 2.0, 0.06);
  }
}

// ---- corruptions -------------------------------------------------------------------

TEST(Corruption, SeverityParametersStrictlyMonotone) {
  for (CorruptionKind kind : kAllCorruptions) {
    std::vector<double> p;
    for (int s = 1; s <= 5; ++s) p.push_back(CorruptionSpec{kind, s}.parameter());
    const bool decreasing = kind == CorruptionKind::feature_scale;
    for (std::size_t i = 1; i < p.size(); ++i) {
      if (decreasing) {
        EXPECT_LT(p[i], p[i - 1]) << corruption_name(kind);
      } else {
        EXPECT_GT(p[i], p[i - 1]) << corruption_name(kind);
      }
    }
  }
}

TEST(Corruption, InvalidSeverityRejected) {
  const LabeledDataset ds = generate_source(3, 5, 30, 1);
  for (int s : {0, 6, -1}) {
    EXPECT_THROW(apply_corruption(ds, {CorruptionKind::gaussian_noise, s}), std::invalid_argument);
  }
  EXPECT_THROW(parse_corruption("motion_blur"), std::invalid_argument);
  for (CorruptionKind k : kAllCorruptions) EXPECT_EQ(parse_corruption(corruption_name(k)), k);
}

TEST(Corruption, LabelsUnchangedAndDeterministic) {
  const LabeledDataset ds = generate_source(10, 20, 200, 4);
  for (CorruptionKind kind : kAllCorruptions) {
    for (int s = 1; s <= 5; ++s) {
      const LabeledDataset a = apply_corruption(ds, {kind, s});
      const LabeledDataset b = apply_corruption(ds, {kind, s});
      EXPECT_EQ(a.labels, ds.labels);
      EXPECT_EQ(a.inputs, b.inputs);
      EXPECT_NE(a.inputs, ds.inputs) << corruption_name(kind) << " " << s;
      ASSERT_TRUE(a.meta.corruption.has_value());
      EXPECT_EQ(*a.meta.corruption, (CorruptionSpec{kind, s}));
    }
  }
}

TEST(Corruption, NoiseDisplacementIncreasesWithSeverity) {
  const LabeledDataset ds = generate_source(10, 20, 300, 4);
  for (CorruptionKind kind : {CorruptionKind::gaussian_noise, CorruptionKind::uniform_noise}) {
    double prev = 0.0;
    for (int s = 1; s <= 5; ++s) {
      const double d = mean_displacement(ds, apply_corruption(ds, {kind, s}));
      EXPECT_GT(d, prev) << corruption_name(kind) << " severity " << s;
      prev = d;
    }
  }
}

TEST(Corruption, GaussianNoiseScaleFollowsSpread) {
  const LabeledDataset ds = generate_source(10, 20, 2000, 6);
  const LabeledDataset c = apply_corruption(ds, {CorruptionKind::gaussian_noise, 5});
  double ss = 0.0;
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
    const double d = c.inputs[i] - ds.inputs[i];
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(ds.inputs.size()));
  EXPECT_NEAR(sd, 1.0 * ds.meta.spread, 0.02 * ds.meta.spread);
}

TEST(Corruption, UniformNoiseBoundedByHalfWidth) {
  const LabeledDataset ds = generate_source(3, 5, 500, 6);
  const LabeledDataset c = apply_corruption(ds, {CorruptionKind::uniform_noise, 2});
  double widest = 0.0;
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
    widest = std::max(widest, std::abs(c.inputs[i] - ds.inputs[i]));
  }
  EXPECT_LE(widest, 0.4);
  EXPECT_GT(widest, 0.39);
}

TEST(Corruption, FeatureScaleIsExactMultiplication) {
  const LabeledDataset ds = generate_source(3, 5, 50, 6);
  const LabeledDataset c = apply_corruption(ds, {CorruptionKind::feature_scale, 3});
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) EXPECT_EQ(c.inputs[i], ds.inputs[i] * 0.5);
}

TEST(Corruption, MeanShiftIsOneCommonTranslation) {
  const LabeledDataset ds = generate_source(3, 5, 50, 6);
  const LabeledDataset c = apply_corruption(ds, {CorruptionKind::mean_shift, 4});
  std::vector<double> first(5);
  for (std::size_t j = 0; j < 5; ++j) first[j] = c.inputs.at(0, j) - ds.inputs.at(0, j);
  double norm = 0.0;
  for (double v : first) norm += v * v;
  EXPECT_NEAR(std::sqrt(norm), 1.5, 1e-12);
  for (std::size_t i = 1; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_NEAR(c.inputs.at(i, j) - ds.inputs.at(i, j), first[j], 1e-12);
    }
  }
}

TEST(Corruption, RotationIsAnIsometryAboutTheOrigin) {
  const LabeledDataset ds = generate_source(3, 6, 80, 6);
  for (int s = 1; s <= 5; ++s) {
    const LabeledDataset c = apply_corruption(ds, {CorruptionKind::rotation, s});
    for (std::size_t i = 0; i < ds.size(); ++i) {
      EXPECT_NEAR(row_norm(c.inputs, i), row_norm(ds.inputs, i), 1e-12);
    }
    // Pairwise inner products preserved.
    for (std::size_t i = 0; i + 1 < ds.size(); i += 7) {
      double a = 0.0, b = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        a += ds.inputs.at(i, j) * ds.inputs.at(i + 1, j);
        b += c.inputs.at(i, j) * c.inputs.at(i + 1, j);
      }
      EXPECT_NEAR(a, b, 1e-11);
    }
  }
  LabeledDataset one = ds;
  one.inputs = Tensor(Shape{ds.size(), 1}, 1.0);
  EXPECT_THROW(apply_corruption(one, {CorruptionKind::rotation, 1}), std::invalid_argument);
}

TEST(Corruption, RotationAngleGrowsWithSeverity) {
  // The largest angle between an input and its image equals the rotation
  // angle, reached by vectors lying in the rotation plane.
  const LabeledDataset ds = generate_source(2, 2, 400, 8);
  for (int s = 1; s <= 5; ++s) {
    const CorruptionSpec spec{CorruptionKind::rotation, s};
    const LabeledDataset c = apply_corruption(ds, spec);
    const double expected = spec.parameter() * std::acos(-1.0) / 180.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < 2; ++j) dot += ds.inputs.at(i, j) * c.inputs.at(i, j);
      const double cosine = dot / (row_norm(ds.inputs, i) * row_norm(c.inputs, i));
      EXPECT_NEAR(std::acos(std::min(1.0, cosine)), expected, 1e-6);
    }
  }
}

TEST(Corruption, SaltMaskZeroesNestedCoordinateSets) {
  const LabeledDataset ds = generate_source(10, 20, 100, 6);
  std::vector<std::vector<bool>> prev;
  for (int s = 1; s <= 5; ++s) {
    const CorruptionSpec spec{CorruptionKind::salt_mask, s};
    const LabeledDataset c = apply_corruption(ds, spec);
    const auto k = static_cast<std::size_t>(std::lround(spec.parameter() * 20.0));
    std::vector<std::vector<bool>> zero(ds.size(), std::vector<bool>(20));
    for (std::size_t i = 0; i < ds.size(); ++i) {
      std::size_t zeros = 0;
      for (std::size_t j = 0; j < 20; ++j) {
        zero[i][j] = c.inputs.at(i, j) == 0.0;
        if (zero[i][j]) {
          ++zeros;
        } else {
          EXPECT_EQ(c.inputs.at(i, j), ds.inputs.at(i, j));
        }
        if (!prev.empty() && prev[i][j]) {
          EXPECT_TRUE(zero[i][j]) << "severity " << s;
        }
      }
      EXPECT_EQ(zeros, k);
    }
    prev = zero;
  }
}

// ---- natural shift ---------------------------------------------------------------------

TEST(NaturalShift, DefaultSizeLabelsAndDeterminism) {
  const MixtureFamily f = make_family(10, 20, 3);
  const LabeledDataset a = natural_shift(f, 11);
  const LabeledDataset b = natural_shift(f, 11);
  EXPECT_EQ(a.size(), 2000u);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.labels, b.labels);
  for (std::size_t y : a.labels) EXPECT_LT(y, 10u);
  EXPECT_NE(natural_shift(f, 12).inputs, a.inputs);
}

TEST(NaturalShift, CovarianceScaledAndMeansMovedSlightly) {
  // Within-class variance about the shifted means is 1.2; about the source
  // means it also picks up the squared mean offset (0.1 * spread)^2 / d
  // per coordinate.
  const MixtureFamily f = make_family(4, 6, 3);
  const LabeledDataset ds = natural_shift(f, 5, 40000);
  std::vector<std::vector<double>> mean(4, std::vector<double>(6, 0.0));
  std::vector<double> count(4, 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    count[ds.labels[i]] += 1.0;
    for (std::size_t j = 0; j < 6; ++j) mean[ds.labels[i]][j] += ds.inputs.at(i, j);
  }
  double var = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      const double d = ds.inputs.at(i, j) - mean[ds.labels[i]][j] / count[ds.labels[i]];
      var += d * d;
    }
  }
  EXPECT_NEAR(var / (6.0 * static_cast<double>(ds.size())), 1.2, 0.03);
  for (std::size_t k = 0; k < 4; ++k) {
    double offset = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      const double d = mean[k][j] / count[k] - f.means.at(k, j);
      offset += d * d;
    }
    EXPECT_NEAR(std::sqrt(offset), 0.1 * f.spread, 0.05);
  }
}

// ---- CSV ---------------------------------------------------------------------------

TEST(Csv, RoundTripIsBitwise) {
  LabeledDataset ds = generate_source(10, 20, 64, 21);
  ds.inputs.at(0, 0) = 1e-300;
  ds.inputs.at(1, 1) = -123456789.123456789;
  ds.inputs.at(2, 2) = 0.1 + 0.2;
  const fs::path p = temp_file("simplex_train_s0_21.csv");
  save_csv(ds, p);
  const LabeledDataset back = load_csv(p);
  EXPECT_EQ(back.inputs, ds.inputs);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.meta.seed, 21u);
}

TEST(Csv, EmptyFileIsAnError) {
  const fs::path p = temp_file("empty.csv");
  write_text(p, "");
  try {
    load_csv(p);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
  write_text(p, "label,f0\n");
  EXPECT_THROW(load_csv(p), DataError);
}

TEST(Csv, NonIntegerLabelNamesTheLine) {
  const fs::path p = temp_file("bad_label.csv");
  write_text(p, "label,f0,f1\n0,1.0,2.0\n1.5,3.0,4.0\n");
  try {
    load_csv(p);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("1.5"), std::string::npos) << e.what();
  }
}

TEST(Csv, MalformedRowsNameTheLine) {
  const fs::path p = temp_file("bad_rows.csv");
  write_text(p, "label,f0,f1\n0,1.0,2.0\n1,3.0\n");
  try {
    load_csv(p);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  write_text(p, "label,f0,f1\n0,1.0,abc\n");
  try {
    load_csv(p);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  write_text(p, "label,f0\n-1,1.0\n");
  EXPECT_THROW(load_csv(p), DataError);
  write_text(p, "x,f0\n1,1.0\n");
  EXPECT_THROW(load_csv(p), DataError);
  EXPECT_THROW(load_csv(temp_file("does_not_exist.csv")), DataError);
}

TEST(Csv, AcceptsCrLfLineEndings) {
  const fs::path p = temp_file("crlf.csv");
  write_text(p, "label,f0,f1\r\n2,1.5,-2.5\r\n0,0,1e3\r\n");
  const LabeledDataset ds = load_csv(p);
  EXPECT_EQ(ds.labels, (std::vector<std::size_t>{2, 0}));
  EXPECT_EQ(ds.inputs, Tensor::matrix(2, 2, {1.5, -2.5, 0.0, 1000.0}));
}

TEST(Csv, FilenameConvention) {
  EXPECT_EQ(dataset_filename("simplex", "gaussian_noise", 5, 3), "simplex_gaussian_noise_s5_3.csv");
  EXPECT_EQ(dataset_filename("simplex", "clean", 0, 0), "simplex_clean_s0_0.csv");
}
