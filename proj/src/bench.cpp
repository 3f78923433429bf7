#include "tttflow/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <iomanip>
#include <sstream>
#include <thread>

#include "tttflow/fileio.hpp"

namespace tttflow {

namespace {

// Runs f(0..n-1) on `jobs` threads. The first exception (by task index) is
// rethrown after all workers finish.
template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& f) {
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min(jobs, n);
  std::vector<std::exception_ptr> errors(n);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            f(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : workers) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct Cell {
  std::optional<CorruptionSpec> spec;
  std::string name() const {
    return spec ? std::string(corruption_name(spec->kind)) : std::string("clean");
  }
  int severity() const { return spec ? spec->severity : 0; }
};

std::vector<Cell> grid_cells(const BenchSection& b) {
  std::vector<Cell> cells;
  if (b.include_clean) cells.push_back({std::nullopt});
  for (CorruptionKind k : b.corruptions) {
    for (int s : b.severities) cells.push_back({CorruptionSpec{k, s}});
  }
  return cells;
}

std::vector<std::size_t> normalized(std::vector<std::size_t> its) {
  std::sort(its.begin(), its.end());
  its.erase(std::unique(its.begin(), its.end()), its.end());
  return its;
}

// Mean and std over seeds per iteration; best is the largest adapted mean.
void fill_aggregate(BenchAggregate& agg, const std::vector<const CellResult*>& per_seed) {
  const std::size_t k = agg.iterations.size();
  agg.mean.assign(k, 0.0);
  agg.stdev.assign(k, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> v;
    for (const CellResult* c : per_seed) v.push_back(c->accuracy[j]);
    agg.mean[j] = sample_mean(v);
    agg.stdev[j] = sample_std(v);
  }
  agg.best_per_seed.clear();
  for (const CellResult* c : per_seed) agg.best_per_seed.push_back(best_accuracy(*c));
  std::size_t best = 0;
  bool any_adapted = false;
  for (std::size_t j = 0; j < k; ++j) {
    if (agg.iterations[j] == 0) continue;
    if (!any_adapted || agg.mean[j] > agg.mean[best]) best = j;
    any_adapted = true;
  }
  agg.best_mean = agg.mean[best];
  agg.best_std = agg.stdev[best];
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string fmt17(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------

TrainedModels train_pipeline(const RunConfig& cfg_in, const EpochCallback& on_epoch) {
  RunConfig cfg = cfg_in;
  cfg.backbone.input_dim = cfg.data.input_dim;
  cfg.backbone.num_classes = cfg.data.num_classes;
  const LabeledDataset train =
      generate_source(cfg.data.num_classes, cfg.data.input_dim, cfg.data.n_train, cfg.seed, 0);
  TrainedModels m{Backbone(cfg.backbone, cfg.backbone_init_seed()),
                  FlowModel(cfg.flow_config_for_backbone(), cfg.flow_init_seed()),
                  {},
                  {}};
  m.source_history = train_source(m.backbone, train, cfg.classifier_config(), on_epoch);
  m.flow_history = train_flow(m.flow, m.backbone, train.inputs, cfg.flow_config(), on_epoch);
  return m;
}

LabeledDataset make_target(const RunConfig& cfg, std::uint64_t eval_seed,
                           const std::optional<CorruptionSpec>& corruption) {
  LabeledDataset ds = generate_source(cfg.data.num_classes, cfg.data.input_dim, cfg.data.n_test,
                                      cfg.seed, 1 + eval_seed);
  return corruption ? apply_corruption(ds, *corruption) : ds;
}

LabeledDataset make_natural(const RunConfig& cfg, std::uint64_t eval_seed) {
  const MixtureFamily family = make_family(cfg.data.num_classes, cfg.data.input_dim, cfg.seed);
  return natural_shift(family, mix_seed(cfg.seed, 1 + eval_seed));
}

CellResult evaluate_cell(const Backbone& backbone, const FlowModel& flow,
                         const LabeledDataset& target, std::vector<std::size_t> iterations,
                         const AdaptConfig& adapt) {
  CellResult out;
  out.iterations = normalized(std::move(iterations));
  if (out.iterations.empty()) throw std::invalid_argument("iteration set is empty");
  const std::size_t k = out.iterations.size();
  const std::size_t max_it = out.iterations.back();
  const std::size_t n = target.size();
  std::vector<std::size_t> hits(k, 0);
  std::vector<double> shift_sum(k, 0.0);
  double pre_sum = 0.0;

  AdaptConfig cfg = adapt;
  cfg.iterations = max_it;
  for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
    const std::size_t end = std::min(n, begin + cfg.batch_size);
    const Tensor batch = target.inputs.slice_rows(begin, end);
    const auto w = static_cast<double>(end - begin);
    const auto count_hits = [&](const std::vector<std::size_t>& pred) {
      std::size_t h = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) h += pred[i] == target.labels[begin + i];
      return h;
    };
    const std::size_t base_hits = count_hits(backbone.predict(batch));
    const double pre = shift_score(flow, backbone, batch);
    pre_sum += pre * w;

    std::vector<bool> recorded(k, false);
    const auto record = [&](std::size_t j, std::size_t h, double score) {
      hits[j] += h;
      shift_sum[j] += score * w;
      recorded[j] = true;
    };
    if (out.iterations.front() == 0) record(0, base_hits, pre);
    if (max_it > 0) {
      const AdaptResult r = adapt_batch(backbone, flow, batch, cfg, [&](std::size_t it,
                                                                        const Backbone& cur) {
        const auto pos = std::lower_bound(out.iterations.begin(), out.iterations.end(), it);
        if (pos == out.iterations.end() || *pos != it) return;
        record(static_cast<std::size_t>(pos - out.iterations.begin()), count_hits(cur.predict(batch)),
               shift_score(flow, cur, batch));
      });
      if (r.failed) {
        ++out.failed_batches;
        for (std::size_t j = 0; j < k; ++j) {
          if (!recorded[j]) record(j, base_hits, pre);
        }
      }
    }
  }
  out.accuracy.resize(k);
  out.shift_post.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    out.accuracy[j] = static_cast<double>(hits[j]) / static_cast<double>(n);
    out.shift_post[j] = shift_sum[j] / static_cast<double>(n);
  }
  out.shift_pre = pre_sum / static_cast<double>(n);
  return out;
}

double best_accuracy(const CellResult& cell) {
  double best = -1.0;
  for (std::size_t j = 0; j < cell.iterations.size(); ++j) {
    if (cell.iterations[j] > 0) best = std::max(best, cell.accuracy[j]);
  }
  return best < 0.0 ? cell.accuracy.front() : best;
}

double sample_mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

BenchReport run_benchmark(const std::vector<Method>& methods, const RunConfig& cfg,
                          std::size_t jobs) {
  if (methods.empty()) throw std::invalid_argument("benchmark needs at least one method");
  for (const Method& m : methods) {
    if (m.backbone == nullptr || m.flow == nullptr) {
      throw std::invalid_argument("method '" + m.name + "' is missing a model");
    }
    cfg.adapt.validate(*m.backbone);
  }
  const auto cells = grid_cells(cfg.bench);
  const auto& seeds = cfg.bench.seeds;
  const auto iterations = normalized(cfg.bench.iterations);
  const std::size_t n_tasks = methods.size() * cells.size() * seeds.size();
  std::vector<CellResult> results(n_tasks);

  parallel_for(n_tasks, jobs, [&](std::size_t t) {
    const std::size_t s = t % seeds.size();
    const std::size_t c = (t / seeds.size()) % cells.size();
    const std::size_t m = t / (seeds.size() * cells.size());
    const LabeledDataset target = make_target(cfg, seeds[s], cells[c].spec);
    results[t] = evaluate_cell(*methods[m].backbone, *methods[m].flow, target, iterations,
                               cfg.adapt);
  });

  BenchReport report;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      BenchAggregate agg{methods[m].name, cells[c].name(), cells[c].severity(), iterations,
                         {}, {}, {}, 0.0, 0.0};
      std::vector<const CellResult*> per_seed;
      for (std::size_t s = 0; s < seeds.size(); ++s) {
        const CellResult& r = results[(m * cells.size() + c) * seeds.size() + s];
        per_seed.push_back(&r);
        for (std::size_t j = 0; j < iterations.size(); ++j) {
          report.rows.push_back({methods[m].name, cells[c].name(), cells[c].severity(),
                                 iterations[j], seeds[s], r.accuracy[j], r.shift_pre,
                                 r.shift_post[j], r.failed_batches});
        }
      }
      fill_aggregate(agg, per_seed);
      report.aggregates.push_back(std::move(agg));
    }
  }
  report.metadata = {{"config", to_json(cfg)}, {"config_sha256", config_hash(cfg)}};
  nlohmann::json names = nlohmann::json::array();
  for (const Method& m : methods) names.push_back(m.name);
  report.metadata["methods"] = names;
  return report;
}

std::string report_csv(const BenchReport& report) {
  std::string out =
      "method,corruption,severity,iterations,seed,accuracy,shift_pre,shift_post,failed_batches\n";
  for (const BenchRow& r : report.rows) {
    out += r.method + ',' + r.corruption + ',' + std::to_string(r.severity) + ',' +
           std::to_string(r.iterations) + ',' + std::to_string(r.seed) + ',' + fmt17(r.accuracy) +
           ',' + fmt17(r.shift_pre) + ',' + fmt17(r.shift_post) + ',' +
           std::to_string(r.failed_batches) + '\n';
  }
  return out;
}

void write_report_csv(const BenchReport& report, const std::filesystem::path& path) {
  write_file_atomic(path, report_csv(report));
}

std::string report_table(const BenchReport& report) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"method", "corruption", "sev"};
  if (!report.aggregates.empty()) {
    for (std::size_t it : report.aggregates.front().iterations) header.push_back("it" + std::to_string(it));
  }
  header.push_back("best");
  cells.push_back(header);
  for (const BenchAggregate& a : report.aggregates) {
    std::vector<std::string> row{a.method, a.corruption, std::to_string(a.severity)};
    for (std::size_t j = 0; j < a.mean.size(); ++j) {
      row.push_back(fmt(100.0 * a.mean[j], 2) + " +- " + fmt(100.0 * a.stdev[j], 2));
    }
    row.push_back(fmt(100.0 * a.best_mean, 2) + " +- " + fmt(100.0 * a.best_std, 2));
    cells.push_back(std::move(row));
  }
  std::vector<std::size_t> widths;
  for (const auto& row : cells) {
    widths.resize(std::max(widths.size(), row.size()), 0);
    for (std::size_t j = 0; j < row.size(); ++j) widths[j] = std::max(widths[j], row[j].size());
  }
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j > 0) os << "  ";
      if (j < 3) {
        os << std::left << std::setw(static_cast<int>(widths[j])) << row[j];
      } else {
        os << std::right << std::setw(static_cast<int>(widths[j])) << row[j];
      }
    }
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------

std::vector<AblationRow> ablation_joint_vs_separate(const RunConfig& cfg, std::size_t jobs) {
  const auto& seeds = cfg.bench.seeds;
  const auto iterations = normalized(cfg.bench.iterations);
  const std::size_t variants = 1 + cfg.joint.betas.size();
  std::vector<CellResult> results(variants * seeds.size());
  const CorruptionSpec spec{CorruptionKind::gaussian_noise, 5};

  parallel_for(results.size(), jobs, [&](std::size_t t) {
    const std::size_t v = t / seeds.size();
    const RunConfig run = cfg.with_seed(seeds[t % seeds.size()]);
    const LabeledDataset target = make_target(run, 0, spec);
    if (v == 0) {
      const TrainedModels m = train_pipeline(run);
      results[t] = evaluate_cell(m.backbone, m.flow, target, iterations, run.adapt);
      return;
    }
    RunConfig jc = run;
    jc.backbone.input_dim = jc.data.input_dim;
    jc.backbone.num_classes = jc.data.num_classes;
    const LabeledDataset train =
        generate_source(jc.data.num_classes, jc.data.input_dim, jc.data.n_train, jc.seed, 0);
    Backbone b(jc.backbone, jc.backbone_init_seed());
    FlowModel f(jc.flow_config_for_backbone(), jc.flow_init_seed());
    TrainConfig cls = jc.classifier_config();
    cls.beta = cfg.joint.betas[v - 1];
    TrainConfig fl = jc.flow_config();
    fl.epochs = cls.epochs;  // one shared loop; the cosine spans the whole run
    train_joint(b, f, train, cls, fl);
    results[t] = evaluate_cell(b, f, target, iterations, jc.adapt);
  });

  std::vector<AblationRow> rows;
  for (std::size_t v = 0; v < variants; ++v) {
    AblationRow row;
    if (v == 0) {
      row.variant = "separate";
    } else {
      row.beta = cfg.joint.betas[v - 1];
      std::ostringstream os;
      os << "joint(beta=" << row.beta << ")";
      row.variant = os.str();
    }
    BenchAggregate agg{row.variant, "gaussian_noise", 5, iterations, {}, {}, {}, 0.0, 0.0};
    std::vector<const CellResult*> per_seed;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const CellResult& r = results[v * seeds.size() + s];
      per_seed.push_back(&r);
      row.baseline_per_seed.push_back(r.accuracy.front());
    }
    fill_aggregate(agg, per_seed);
    row.best_per_seed = agg.best_per_seed;
    row.baseline_mean = sample_mean(row.baseline_per_seed);
    row.best_mean = agg.best_mean;
    row.best_std = agg.best_std;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,beta,baseline_mean,best_mean,best_std\n";
  for (const AblationRow& r : rows) {
    out += r.variant + ',' + fmt17(r.beta) + ',' + fmt17(r.baseline_mean) + ',' +
           fmt17(r.best_mean) + ',' + fmt17(r.best_std) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<CurvePoint> iteration_curve(const Backbone& backbone, const FlowModel& flow,
                                        const RunConfig& cfg, CorruptionKind corruption,
                                        const std::vector<int>& severities, std::size_t max_iters,
                                        std::size_t jobs) {
  if (max_iters < 1) throw std::invalid_argument("iteration curve needs max_iters >= 1");
  std::vector<std::size_t> its(max_iters + 1);
  for (std::size_t i = 0; i <= max_iters; ++i) its[i] = i;
  const auto& seeds = cfg.bench.seeds;
  std::vector<CellResult> results(severities.size() * seeds.size());
  parallel_for(results.size(), jobs, [&](std::size_t t) {
    const int sev = severities[t / seeds.size()];
    const LabeledDataset target =
        make_target(cfg, seeds[t % seeds.size()], CorruptionSpec{corruption, sev});
    results[t] = evaluate_cell(backbone, flow, target, its, cfg.adapt);
  });
  std::vector<CurvePoint> points;
  for (std::size_t v = 0; v < severities.size(); ++v) {
    for (std::size_t i = 0; i <= max_iters; ++i) {
      std::vector<double> acc;
      for (std::size_t s = 0; s < seeds.size(); ++s) acc.push_back(results[v * seeds.size() + s].accuracy[i]);
      points.push_back({severities[v], i, sample_mean(acc)});
    }
  }
  return points;
}

std::string curve_csv(const std::vector<CurvePoint>& points) {
  std::string out = "severity,iteration,accuracy\n";
  for (const CurvePoint& p : points) {
    out += std::to_string(p.severity) + ',' + std::to_string(p.iteration) + ',' +
           fmt17(p.accuracy) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------

Pca2 fit_pca2(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) throw std::invalid_argument("PCA needs at least 2 samples");
  if (x.cols() < 1) throw std::invalid_argument("PCA needs at least 1 feature");
  Pca2 pca;
  pca.mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - pca.mean;
  const Eigen::MatrixXd cov =
      centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  if (!(cov.trace() > 0.0)) throw std::invalid_argument("features have zero variance");
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::Index d = x.cols();
  pca.components = Eigen::MatrixXd::Zero(d, 2);
  pca.variance = Eigen::Vector2d::Zero();
  // Eigenvalues come in increasing order.
  for (Eigen::Index j = 0; j < std::min<Eigen::Index>(2, d); ++j) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - j);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    pca.components.col(j) = v;
    pca.variance(j) = std::max(0.0, eig.eigenvalues()(d - 1 - j));
  }
  return pca;
}

std::vector<ProjectionRow> project_features(
    const Backbone& backbone, const FlowModel& flow,
    const std::vector<std::pair<std::string, LabeledDataset>>& datasets, ProjectionMode mode,
    const AdaptConfig& adapt) {
  constexpr std::size_t kDepth = Backbone::kStages;
  std::vector<Tensor> features;
  std::vector<ProjectionRow> rows;
  for (const auto& [tag, ds] : datasets) {
    for (std::size_t begin = 0; begin < ds.size(); begin += adapt.batch_size) {
      const std::size_t end = std::min(ds.size(), begin + adapt.batch_size);
      const Tensor batch = ds.inputs.slice_rows(begin, end);
      std::vector<std::size_t> pred;
      if (mode == ProjectionMode::post) {
        const AdaptResult r = adapt_batch(backbone, flow, batch, adapt);
        features.push_back(r.backbone.features(batch, kDepth));
        pred = r.backbone.predict(batch);
      } else {
        features.push_back(backbone.features(batch, kDepth));
        pred = backbone.predict(batch);
      }
      for (std::size_t i = begin; i < end; ++i) rows.push_back({0.0, 0.0, ds.labels[i], pred[i - begin], tag});
    }
  }
  if (rows.empty()) throw std::invalid_argument("nothing to project");
  const auto d = static_cast<Eigen::Index>(features.front().cols());
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), d);
  Eigen::Index r = 0;
  for (const Tensor& f : features) {
    for (std::size_t i = 0; i < f.rows(); ++i, ++r) {
      for (Eigen::Index j = 0; j < d; ++j) x(r, j) = f.at(i, static_cast<std::size_t>(j));
    }
  }
  const Pca2 pca = fit_pca2(x);
  const Eigen::MatrixXd proj = (x.rowwise() - pca.mean) * pca.components;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].x = proj(static_cast<Eigen::Index>(i), 0);
    rows[i].y = proj(static_cast<Eigen::Index>(i), 1);
  }
  return rows;
}

std::string projection_csv(const std::vector<ProjectionRow>& rows) {
  std::string out = "x,y,label,predicted,dataset\n";
  for (const ProjectionRow& r : rows) {
    out += fmt17(r.x) + ',' + fmt17(r.y) + ',' + std::to_string(r.label) + ',' +
           std::to_string(r.predicted) + ',' + r.tag + '\n';
  }
  return out;
}

}  // namespace tttflow
