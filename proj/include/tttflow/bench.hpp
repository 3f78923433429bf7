#pragma once

// Evaluation harness: corruption x severity accuracy grids with iteration
// sweeps, the joint-vs-separate ablation, accuracy-vs-iteration curves and a
// 2-D PCA projection of extractor features.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tttflow/adapt.hpp"
#include "tttflow/config.hpp"

namespace tttflow {

// ---- pipeline -----------------------------------------------------------------

struct TrainedModels {
  Backbone backbone;
  FlowModel flow;
  TrainHistory source_history;
  TrainHistory flow_history;
};

// Source data of cfg.seed, classifier training, then flow training on the
// frozen extractor.
TrainedModels train_pipeline(const RunConfig& cfg, const EpochCallback& on_epoch = {});

// Held-out draw `eval_seed` of the cfg.seed family (stream 1 + eval_seed),
// optionally corrupted.
LabeledDataset make_target(const RunConfig& cfg, std::uint64_t eval_seed,
                           const std::optional<CorruptionSpec>& corruption);
// Natural-shift split of the cfg.seed family for held-out draw `eval_seed`.
LabeledDataset make_natural(const RunConfig& cfg, std::uint64_t eval_seed);

// ---- one evaluation cell ------------------------------------------------------

struct CellResult {
  std::vector<std::size_t> iterations;  // sorted, unique
  std::vector<double> accuracy;         // per entry of `iterations`
  std::vector<double> shift_post;       // mean batch shift score after adaptation
  double shift_pre = 0.0;
  std::size_t failed_batches = 0;
};

// Adapts every batch once up to the largest requested count and reads off
// predictions at each requested count. With per-batch reset this equals
// separate runs at each count.
CellResult evaluate_cell(const Backbone& backbone, const FlowModel& flow,
                         const LabeledDataset& target, std::vector<std::size_t> iterations,
                         const AdaptConfig& adapt);

// max over the entries with iterations > 0, or the single 0 entry.
double best_accuracy(const CellResult& cell);

// ---- grid -----------------------------------------------------------------------

struct Method {
  std::string name;
  const Backbone* backbone;
  const FlowModel* flow;
};

struct BenchRow {
  std::string method;
  std::string corruption;  // "clean" for the uncorrupted split
  int severity = 0;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double shift_pre = 0.0;
  double shift_post = 0.0;
  std::size_t failed_batches = 0;
};

struct BenchAggregate {
  std::string method;
  std::string corruption;
  int severity = 0;
  std::vector<std::size_t> iterations;
  std::vector<double> mean;  // per iteration count, over seeds
  std::vector<double> stdev;  // sample standard deviation
  std::vector<double> best_per_seed;
  double best_mean = 0.0;
  double best_std = 0.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::vector<BenchAggregate> aggregates;
  nlohmann::json metadata;
};

// Grid over methods x (corruption, severity) x seeds, plus a "clean" cell
// when cfg.bench.include_clean. Seed s evaluates on make_target(cfg, s, .).
// `jobs` worker threads (0: hardware concurrency); the result does not
// depend on it.
BenchReport run_benchmark(const std::vector<Method>& methods, const RunConfig& cfg,
                          std::size_t jobs = 0);

double sample_mean(const std::vector<double>& v);
double sample_std(const std::vector<double>& v);  // n - 1 denominator, 0 for n < 2

void write_report_csv(const BenchReport& report, const std::filesystem::path& path);
std::string report_csv(const BenchReport& report);
// Aligned columns: one line per aggregate with mean +- std per iteration and best.
std::string report_table(const BenchReport& report);

// ---- ablation -------------------------------------------------------------------

struct AblationRow {
  std::string variant;  // "separate" or "joint(beta=...)"
  double beta = 0.0;
  std::vector<double> baseline_per_seed;
  std::vector<double> best_per_seed;
  double baseline_mean = 0.0;
  double best_mean = 0.0;
  double best_std = 0.0;
};

// Post-adaptation accuracy on gaussian_noise severity 5 for separate training
// and each joint beta, one training run per seed in cfg.bench.seeds.
std::vector<AblationRow> ablation_joint_vs_separate(const RunConfig& cfg, std::size_t jobs = 0);
std::string ablation_csv(const std::vector<AblationRow>& rows);

// ---- iteration curve ------------------------------------------------------------

struct CurvePoint {
  int severity;
  std::size_t iteration;
  double accuracy;  // over all samples of all seeds
};

// Accuracy after every iteration 0..max_iters for each severity.
std::vector<CurvePoint> iteration_curve(const Backbone& backbone, const FlowModel& flow,
                                        const RunConfig& cfg, CorruptionKind corruption,
                                        const std::vector<int>& severities, std::size_t max_iters,
                                        std::size_t jobs = 0);
std::string curve_csv(const std::vector<CurvePoint>& points);

// ---- projection -----------------------------------------------------------------

struct Pca2 {
  Eigen::RowVectorXd mean;
  Eigen::MatrixXd components;  // [d, 2], orthonormal columns
  Eigen::Vector2d variance;
};

// Top-2 principal axes of the rows of x. Each axis is sign-fixed so its
// largest-magnitude entry is positive. Throws std::invalid_argument for fewer
// than 2 rows or zero total variance.
Pca2 fit_pca2(const Eigen::MatrixXd& x);

enum class ProjectionMode { pre, post };

struct ProjectionRow {
  double x, y;
  std::size_t label, predicted;
  std::string tag;
};

// Full-depth extractor features of every dataset (adapted per batch in post
// mode), projected on a PCA fit to the pooled features.
std::vector<ProjectionRow> project_features(
    const Backbone& backbone, const FlowModel& flow,
    const std::vector<std::pair<std::string, LabeledDataset>>& datasets, ProjectionMode mode,
    const AdaptConfig& adapt);
std::string projection_csv(const std::vector<ProjectionRow>& rows);

}  // namespace tttflow
