// tttflow command-line driver. Logs go to stderr as JSON lines; metrics go to
// stdout or to the requested files. Exit codes: 0 success, 1 usage or config
// error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "tttflow/bench.hpp"
#include "tttflow/checkpoint.hpp"
#include "tttflow/config.hpp"
#include "tttflow/errors.hpp"
#include "tttflow/fileio.hpp"
#include "tttflow/simd/kernels.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tttflow;
using simd::active_isa;
using simd::isa_name;
using simd::parse_isa;
using simd::select_isa;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

JsonLinesLogger g_log(&std::cerr);

// Thrown for bad flag combinations found after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  bool print_config = false;
  std::string isa;
  std::size_t jobs = 0;
};

struct Context {
  RunConfig cfg;
  std::string config_hash;
  std::size_t jobs = 1;
  json inputs = json::array();
  std::vector<fs::path> input_paths;
};

std::size_t resolve_jobs(std::size_t requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw CheckpointError("missing " + what + " '" + p.string() + "'");
}

void add_input(Context& ctx, const fs::path& p, const std::string& role) {
  require_file(p, role);
  json entry = {{"role", role}, {"path", p.string()}, {"sha256", sha256_hex(read_file(p))}};
  ctx.inputs.push_back(std::move(entry));
  ctx.input_paths.push_back(fs::weakly_canonical(p));
}

void add_checkpoint_input(Context& ctx, const fs::path& p, const std::string& role) {
  add_input(ctx, p, role);
  const CheckpointInfo info = read_checkpoint_info(p);
  ctx.inputs.back()["content_sha256"] = info.content_hash;
  ctx.inputs.back()["format_version"] = info.format_version;
}

// Outputs may never overwrite an input of the same run.
void check_output(const Context& ctx, const fs::path& out) {
  const fs::path c = fs::weakly_canonical(out);
  for (const auto& in : ctx.input_paths) {
    if (c == in) throw UsageError("output '" + out.string() + "' would overwrite an input");
  }
}

void log_start(const Context& ctx, const std::string& command) {
  g_log.info("run_start", {{"command", command},
                           {"config_sha256", ctx.config_hash},
                           {"seed", ctx.cfg.seed},
                           {"isa", std::string(isa_name(active_isa()))},
                           {"jobs", ctx.jobs},
                           {"inputs", ctx.inputs}});
}

void log_epoch(const EpochRecord& r) {
  g_log.info("epoch", {{"phase", r.phase}, {"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.loss}});
}

void log_output(const fs::path& p, const std::string& role, const std::string& hash = {}) {
  json f = {{"role", role}, {"path", p.string()}};
  if (!hash.empty()) f["content_sha256"] = hash;
  g_log.info("wrote", f);
}

json run_metadata(const Context& ctx, const std::string& command) {
  return {{"command", command},
          {"config_sha256", ctx.config_hash},
          {"seed", ctx.cfg.seed},
          {"inputs", ctx.inputs}};
}

// Dataset dims must agree with the configured data section.
void check_dataset(const LabeledDataset& ds, const RunConfig& cfg, const fs::path& p) {
  std::vector<std::string> problems;
  if (ds.dim() != cfg.data.input_dim) {
    problems.push_back(p.string() + ": " + std::to_string(ds.dim()) +
                       " features, data.input_dim is " + std::to_string(cfg.data.input_dim));
  }
  for (const auto y : ds.labels) {
    if (y >= cfg.data.num_classes) {
      problems.push_back(p.string() + ": label " + std::to_string(y) +
                         " outside data.num_classes " + std::to_string(cfg.data.num_classes));
      break;
    }
  }
  if (!problems.empty()) throw ConfigError(problems);
}

void check_backbone(const Backbone& b, const RunConfig& cfg) {
  std::vector<std::string> problems;
  if (b.config().input_dim != cfg.data.input_dim) {
    problems.push_back("backbone input_dim " + std::to_string(b.config().input_dim) +
                       " != data.input_dim " + std::to_string(cfg.data.input_dim));
  }
  if (b.config().num_classes != cfg.data.num_classes) {
    problems.push_back("backbone num_classes " + std::to_string(b.config().num_classes) +
                       " != data.num_classes " + std::to_string(cfg.data.num_classes));
  }
  if (!problems.empty()) throw ConfigError(problems);
}

RunConfig resolved_config(const RunConfig& in) {
  RunConfig cfg = in;
  cfg.backbone.input_dim = cfg.data.input_dim;
  cfg.backbone.num_classes = cfg.data.num_classes;
  return cfg;
}

// ---- commands -------------------------------------------------------------------

struct GenDataArgs {
  std::string out_dir;
};

void cmd_gen_data(Context& ctx, const GenDataArgs& a) {
  log_start(ctx, "gen-data");
  const RunConfig& cfg = ctx.cfg;
  const std::string& fam = cfg.data.family;
  const fs::path dir(a.out_dir);
  auto emit = [&](const LabeledDataset& ds, const std::string& kind, int severity) {
    const fs::path p = dir / dataset_filename(fam, kind, severity, cfg.seed);
    save_csv(ds, p);
    g_log.info("wrote", {{"role", "dataset"},
                         {"path", p.string()},
                         {"rows", ds.size()},
                         {"sha256", sha256_hex(read_file(p))}});
  };
  emit(generate_source(cfg.data.num_classes, cfg.data.input_dim, cfg.data.n_train, cfg.seed, 0),
       "train", 0);
  const LabeledDataset test = make_target(cfg, 0, std::nullopt);
  emit(test, "clean", 0);
  emit(make_natural(cfg, 0), "natural", 0);
  for (const CorruptionKind kind : kAllCorruptions) {
    for (int sev = 1; sev <= 5; ++sev) {
      emit(apply_corruption(test, CorruptionSpec{kind, sev}), std::string(corruption_name(kind)),
           sev);
    }
  }
}

struct TrainSourceArgs {
  std::string data, out;
};

void cmd_train_source(Context& ctx, const TrainSourceArgs& a) {
  add_input(ctx, a.data, "dataset");
  check_output(ctx, a.out);
  log_start(ctx, "train-source");
  const LabeledDataset data = load_csv(a.data);
  check_dataset(data, ctx.cfg, a.data);
  Backbone backbone(ctx.cfg.backbone, ctx.cfg.backbone_init_seed());
  const TrainHistory h = train_source(backbone, data, ctx.cfg.classifier_config(), log_epoch);
  json meta = run_metadata(ctx, "train-source");
  meta["loss"] = h.loss;
  const std::string hash = save_backbone(backbone, a.out, meta);
  log_output(a.out, "backbone", hash);
}

struct TrainFlowArgs {
  std::string backbone, data, out, out_backbone;
};

void cmd_train_flow(Context& ctx, const TrainFlowArgs& a) {
  add_checkpoint_input(ctx, a.backbone, "backbone");
  add_input(ctx, a.data, "dataset");
  const TrainConfig fcfg = ctx.cfg.flow_config();
  if (fcfg.update_bn_stats && a.out_backbone.empty()) {
    throw UsageError("train.flow.update_bn_stats is set; --out-backbone is required");
  }
  check_output(ctx, a.out);
  if (!a.out_backbone.empty()) check_output(ctx, a.out_backbone);
  log_start(ctx, "train-flow");
  Backbone backbone = load_backbone(a.backbone);
  check_backbone(backbone, ctx.cfg);
  const LabeledDataset data = load_csv(a.data);
  check_dataset(data, ctx.cfg, a.data);
  FlowConfig flow_cfg = ctx.cfg.flow;
  flow_cfg.dim = backbone.feature_dim(backbone.split_stage());
  FlowModel flow(flow_cfg, ctx.cfg.flow_init_seed());
  const TrainHistory h = train_flow(flow, backbone, data.inputs, fcfg, log_epoch);

  json meta = run_metadata(ctx, "train-flow");
  meta["loss"] = h.loss;
  if (fcfg.update_bn_stats) {
    json bmeta = run_metadata(ctx, "train-flow");
    bmeta["note"] = "running statistics refreshed during flow training";
    const std::string bhash = save_backbone(backbone, a.out_backbone, bmeta);
    log_output(a.out_backbone, "backbone", bhash);
    meta["backbone_sha256"] = bhash;
  } else {
    meta["backbone_sha256"] = read_checkpoint_info(a.backbone).content_hash;
  }
  const std::string hash = save_flow(flow, a.out, meta);
  log_output(a.out, "flow", hash);
}

struct TrainJointArgs {
  std::string data, out_backbone, out_flow;
  std::optional<double> beta;
};

void cmd_train_joint(Context& ctx, const TrainJointArgs& a) {
  add_input(ctx, a.data, "dataset");
  check_output(ctx, a.out_backbone);
  check_output(ctx, a.out_flow);
  if (fs::weakly_canonical(a.out_backbone) == fs::weakly_canonical(a.out_flow)) {
    throw UsageError("--out-backbone and --out-flow must differ");
  }
  log_start(ctx, "train-joint");
  const LabeledDataset data = load_csv(a.data);
  check_dataset(data, ctx.cfg, a.data);
  TrainConfig cls = ctx.cfg.classifier_config();
  cls.beta = a.beta.value_or(ctx.cfg.joint.betas.at(0));
  TrainConfig fl = ctx.cfg.flow_config();
  fl.epochs = cls.epochs;
  Backbone backbone(ctx.cfg.backbone, ctx.cfg.backbone_init_seed());
  FlowModel flow(ctx.cfg.flow_config_for_backbone(), ctx.cfg.flow_init_seed());
  const JointHistory h = train_joint(backbone, flow, data, cls, fl, log_epoch);

  json meta = run_metadata(ctx, "train-joint");
  meta["beta"] = cls.beta;
  meta["loss_cls"] = h.cls;
  meta["loss_uns"] = h.uns;
  const std::string bhash = save_backbone(backbone, a.out_backbone, meta);
  log_output(a.out_backbone, "backbone", bhash);
  meta["backbone_sha256"] = bhash;
  const std::string fhash = save_flow(flow, a.out_flow, meta);
  log_output(a.out_flow, "flow", fhash);
}

struct Models {
  Backbone backbone;
  FlowModel flow;
  std::string backbone_hash, flow_hash;
};

Models load_models(Context& ctx, const std::string& backbone_path, const std::string& flow_path) {
  add_checkpoint_input(ctx, backbone_path, "backbone");
  add_checkpoint_input(ctx, flow_path, "flow");
  CheckpointInfo bi, fi;
  Models m{load_backbone(backbone_path, &bi), load_flow(flow_path, &fi), bi.content_hash,
           fi.content_hash};
  check_backbone(m.backbone, ctx.cfg);
  const auto expected = fi.metadata.find("backbone_sha256");
  if (expected != fi.metadata.end() && *expected != bi.content_hash) {
    g_log.info("warning", {{"message", "flow was trained against a different backbone"},
                           {"expected_backbone_sha256", *expected},
                           {"backbone_sha256", bi.content_hash}});
  }
  return m;
}

struct AdaptEvalArgs {
  std::string backbone, flow, target, batch_log;
};

void cmd_adapt_eval(Context& ctx, const AdaptEvalArgs& a) {
  Models m = load_models(ctx, a.backbone, a.flow);
  add_input(ctx, a.target, "dataset");
  if (!a.batch_log.empty()) check_output(ctx, a.batch_log);
  log_start(ctx, "adapt-eval");
  const LabeledDataset target = load_csv(a.target);
  check_dataset(target, ctx.cfg, a.target);
  const AdaptConfig& acfg = ctx.cfg.adapt;
  acfg.validate(m.backbone);

  std::ostringstream batch_lines;
  JsonLinesLogger batch_log(a.batch_log.empty() ? &std::cerr : &batch_lines);
  const AdaptedPredictions pred =
      predict_with_adaptation(m.backbone, m.flow, target.inputs, acfg, &batch_log);
  if (!a.batch_log.empty()) {
    write_file_atomic(a.batch_log, batch_lines.str());
    log_output(a.batch_log, "batch_log");
  }
  const std::vector<std::size_t> base = m.backbone.predict(target.inputs);

  double pre = 0.0, post = 0.0;
  for (const auto& b : pred.batches) {
    pre += b.nll_before * static_cast<double>(b.size);
    post += b.nll_after * static_cast<double>(b.size);
  }
  const auto n = static_cast<double>(target.size());
  const json out = {{"samples", target.size()},
                    {"iterations", acfg.iterations},
                    {"baseline_accuracy", accuracy(base, target.labels)},
                    {"accuracy", accuracy(pred.labels, target.labels)},
                    {"shift_score_pre", pre / n},
                    {"shift_score_post", post / n},
                    {"failed_batches", pred.failed_batches}};
  std::cout << out.dump() << '\n';
}

struct BenchArgs {
  std::string backbone, flow, out, table, curve_out, method = "tttflow";
  std::size_t curve_iters = 50;
};

void cmd_bench(Context& ctx, const BenchArgs& a) {
  // Every referenced file is checked before any computation.
  require_file(a.backbone, "backbone checkpoint");
  require_file(a.flow, "flow checkpoint");
  Models m = load_models(ctx, a.backbone, a.flow);
  check_output(ctx, a.out);
  if (!a.table.empty()) check_output(ctx, a.table);
  if (!a.curve_out.empty()) check_output(ctx, a.curve_out);
  log_start(ctx, "bench");

  BenchReport report = run_benchmark({{a.method, &m.backbone, &m.flow}}, ctx.cfg, ctx.jobs);
  report.metadata["checkpoints"] = {{"backbone", m.backbone_hash}, {"flow", m.flow_hash}};
  write_report_csv(report, a.out);
  log_output(a.out, "report");
  const fs::path meta_path = fs::path(a.out).string() + ".meta.json";
  write_file_atomic(meta_path, report.metadata.dump(2) + "\n");
  log_output(meta_path, "report_metadata");
  const std::string table = report_table(report);
  if (!a.table.empty()) {
    write_file_atomic(a.table, table);
    log_output(a.table, "report_table");
  }
  std::cout << table;

  if (!a.curve_out.empty()) {
    const auto points = iteration_curve(m.backbone, m.flow, ctx.cfg, CorruptionKind::gaussian_noise,
                                        ctx.cfg.bench.severities, a.curve_iters, ctx.jobs);
    write_file_atomic(a.curve_out, curve_csv(points));
    log_output(a.curve_out, "iteration_curve");
  }
}

struct AblationArgs {
  std::string out;
};

void cmd_ablation(Context& ctx, const AblationArgs& a) {
  check_output(ctx, a.out);
  log_start(ctx, "ablation");
  const auto rows = ablation_joint_vs_separate(ctx.cfg, ctx.jobs);
  const std::string csv = ablation_csv(rows);
  if (!a.out.empty()) {
    write_file_atomic(a.out, csv);
    log_output(a.out, "ablation");
  }
  std::cout << csv;
}

struct ProjectArgs {
  std::string backbone, flow, out, mode = "pre";
  std::vector<std::string> data;
};

void cmd_project(Context& ctx, const ProjectArgs& a) {
  Models m = load_models(ctx, a.backbone, a.flow);
  for (const auto& d : a.data) add_input(ctx, d, "dataset");
  check_output(ctx, a.out);
  log_start(ctx, "project");
  std::vector<std::pair<std::string, LabeledDataset>> sets;
  for (const auto& d : a.data) {
    LabeledDataset ds = load_csv(d);
    check_dataset(ds, ctx.cfg, d);
    sets.emplace_back(fs::path(d).stem().string(), std::move(ds));
  }
  const ProjectionMode mode = a.mode == "post" ? ProjectionMode::post : ProjectionMode::pre;
  const auto rows = project_features(m.backbone, m.flow, sets, mode, ctx.cfg.adapt);
  write_file_atomic(a.out, projection_csv(rows));
  log_output(a.out, "projection");
}

// ---- error reporting --------------------------------------------------------------

int fail(int code, const std::string& kind, const std::string& message, json extra = json::object()) {
  json rec = {{"level", "error"}, {"error", kind}, {"message", message}, {"exit_code", code}};
  rec.update(extra);
  g_log.log(rec);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tttflow: flow-based shift detection and test-time adaptation"};
  app.set_help_all_flag("--help-all", "Expand all help");
  Globals g;
  app.add_option("-c,--config", g.config_path, "JSON config file (defaults when omitted)");
  app.add_option("--set", g.overrides, "Override a config key, e.g. --set adapt.iterations=20")
      ->type_name("KEY=VALUE");
  app.add_flag("--print-config", g.print_config, "Print the resolved config and exit");
  app.add_option("--isa", g.isa, "Kernel set: scalar, avx2 or neon (default: best available)");
  app.add_option("-j,--jobs", g.jobs, "Worker threads for grid commands (0: all cores)");
  app.require_subcommand(0, 1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write source, test, natural and corrupted CSVs");
  gen_cmd->add_option("-o,--out-dir", gen.out_dir, "Output directory")->required();

  TrainSourceArgs ts;
  auto* ts_cmd = app.add_subcommand("train-source", "Train the classifier on a source CSV");
  ts_cmd->add_option("-d,--data", ts.data, "Training CSV")->required();
  ts_cmd->add_option("-o,--out", ts.out, "Backbone checkpoint to write")->required();

  TrainFlowArgs tf;
  auto* tf_cmd = app.add_subcommand("train-flow", "Train the flow on frozen extractor features");
  tf_cmd->add_option("-b,--backbone", tf.backbone, "Source backbone checkpoint")->required();
  tf_cmd->add_option("-d,--data", tf.data, "Training CSV")->required();
  tf_cmd->add_option("-o,--out", tf.out, "Flow checkpoint to write")->required();
  tf_cmd->add_option("--out-backbone", tf.out_backbone,
                     "Backbone checkpoint with the refreshed BN statistics");

  TrainJointArgs tj;
  auto* tj_cmd = app.add_subcommand("train-joint", "Train classifier and flow jointly");
  tj_cmd->add_option("-d,--data", tj.data, "Training CSV")->required();
  tj_cmd->add_option("--out-backbone", tj.out_backbone, "Backbone checkpoint")->required();
  tj_cmd->add_option("--out-flow", tj.out_flow, "Flow checkpoint")->required();
  tj_cmd->add_option("--beta", tj.beta, "Flow loss weight (default: first of joint.betas)");

  AdaptEvalArgs ae;
  auto* ae_cmd = app.add_subcommand("adapt-eval", "Adapt and classify one target CSV");
  ae_cmd->add_option("-b,--backbone", ae.backbone, "Backbone checkpoint")->required();
  ae_cmd->add_option("-f,--flow", ae.flow, "Flow checkpoint")->required();
  ae_cmd->add_option("-t,--target", ae.target, "Target CSV")->required();
  ae_cmd->add_option("--batch-log", ae.batch_log, "Write per-batch JSON lines here");

  BenchArgs be;
  auto* be_cmd = app.add_subcommand("bench", "Corruption x severity x iteration grid");
  be_cmd->add_option("-b,--backbone", be.backbone, "Backbone checkpoint")->required();
  be_cmd->add_option("-f,--flow", be.flow, "Flow checkpoint")->required();
  be_cmd->add_option("-o,--out", be.out, "Report CSV")->required();
  be_cmd->add_option("--table", be.table, "Also write the aligned table here");
  be_cmd->add_option("--method", be.method, "Method name in the report");
  be_cmd->add_option("--curve-out", be.curve_out, "Gaussian-noise accuracy-vs-iteration CSV");
  be_cmd->add_option("--curve-iters", be.curve_iters, "Iterations of the curve")
      ->check(CLI::PositiveNumber);

  AblationArgs ab;
  auto* ab_cmd = app.add_subcommand("ablation", "Separate vs joint training comparison");
  ab_cmd->add_option("-o,--out", ab.out, "Ablation CSV");

  ProjectArgs pr;
  auto* pr_cmd = app.add_subcommand("project", "2-D PCA projection of extractor features");
  pr_cmd->add_option("-b,--backbone", pr.backbone, "Backbone checkpoint")->required();
  pr_cmd->add_option("-f,--flow", pr.flow, "Flow checkpoint")->required();
  pr_cmd->add_option("-d,--data", pr.data, "Dataset CSVs (repeatable)")->required();
  pr_cmd->add_option("-o,--out", pr.out, "Projection CSV")->required();
  pr_cmd->add_option("--mode", pr.mode, "pre or post adaptation")
      ->check(CLI::IsMember({"pre", "post"}));

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kExitUsage, "usage", e.what());
  }

  try {
    if (!g.isa.empty()) select_isa(parse_isa(g.isa));
    Context ctx;
    ctx.cfg = resolved_config(load_config(g.config_path, g.overrides));
    ctx.config_hash = config_hash(ctx.cfg);
    ctx.jobs = resolve_jobs(g.jobs);
    if (!g.config_path.empty()) add_input(ctx, g.config_path, "config");

    if (g.print_config) {
      std::cout << to_json(ctx.cfg).dump(2) << '\n';
      return 0;
    }
    if (app.get_subcommands().empty()) throw UsageError("no command given; see --help");

    const CLI::App* sub = app.get_subcommands().front();
    if (sub == gen_cmd) cmd_gen_data(ctx, gen);
    else if (sub == ts_cmd) cmd_train_source(ctx, ts);
    else if (sub == tf_cmd) cmd_train_flow(ctx, tf);
    else if (sub == tj_cmd) cmd_train_joint(ctx, tj);
    else if (sub == ae_cmd) cmd_adapt_eval(ctx, ae);
    else if (sub == be_cmd) cmd_bench(ctx, be);
    else if (sub == ab_cmd) cmd_ablation(ctx, ab);
    else if (sub == pr_cmd) cmd_project(ctx, pr);
    g_log.info("run_end", {{"command", sub->get_name()}, {"status", "ok"}});
    return 0;
  } catch (const ConfigError& e) {
    return fail(kExitUsage, "config", e.what(), {{"problems", e.problems()}});
  } catch (const UsageError& e) {
    return fail(kExitUsage, "usage", e.what());
  } catch (const std::invalid_argument& e) {
    return fail(kExitUsage, "invalid_argument", e.what());
  } catch (const CheckpointError& e) {
    return fail(kExitRuntime, "checkpoint", e.what());
  } catch (const DataError& e) {
    json extra = json::object();
    if (e.line()) extra["line"] = *e.line();
    return fail(kExitRuntime, "data", e.what(), extra);
  } catch (const TrainingError& e) {
    return fail(kExitRuntime, "training", e.what(), {{"epoch", e.epoch()}, {"batch", e.batch()}});
  } catch (const std::exception& e) {
    return fail(kExitRuntime, "runtime", e.what());
  }
}
