#include "tttflow/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "tttflow/fileio.hpp"

namespace tttflow {

using nlohmann::json;

std::uint64_t RunConfig::backbone_init_seed() const { return mix_seed(seed, 101); }
std::uint64_t RunConfig::flow_init_seed() const { return mix_seed(seed, 102); }

TrainConfig RunConfig::classifier_config() const {
  TrainConfig c = classifier;
  c.seed = mix_seed(seed, 103);
  return c;
}

TrainConfig RunConfig::flow_config() const {
  TrainConfig c = flow_train;
  c.seed = mix_seed(seed, 104);
  return c;
}

FlowConfig RunConfig::flow_config_for_backbone() const {
  FlowConfig f = flow;
  f.dim = backbone.widths.at(backbone.split_stage - 1);
  return f;
}

RunConfig RunConfig::with_seed(std::uint64_t s) const {
  RunConfig c = *this;
  c.seed = s;
  return c;
}

// ---------------------------------------------------------------------------

namespace {

json train_to_json(const TrainConfig& t, bool flow_phase) {
  json j = {{"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"lr0", t.lr0},
            {"schedule", std::string(schedule_name(t.schedule))},
            {"milestones", t.milestones},
            {"factor", t.factor},
            {"momentum", t.momentum}};
  if (flow_phase) j["update_bn_stats"] = t.update_bn_stats;
  return j;
}

// Reads fields of one JSON object, recording problems instead of throwing and
// remembering which keys were consumed.
class Reader {
 public:
  Reader(const json* obj, std::string path, std::vector<std::string>& problems)
      : obj_(obj), path_(std::move(path)), problems_(problems) {
    if (obj_ != nullptr && !obj_->is_object()) {
      problems_.push_back(where() + ": expected an object");
      obj_ = nullptr;
    }
  }

  ~Reader() {
    if (obj_ == nullptr) return;
    for (const auto& [key, _] : obj_->items()) {
      if (!known_.contains(key)) problems_.push_back("unknown key '" + child(key) + "'");
    }
  }

  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  Reader section(const std::string& key) {
    known_.insert(key);
    const json* sub = nullptr;
    if (obj_ != nullptr && obj_->contains(key)) sub = &(*obj_)[key];
    return Reader(sub, child(key), problems_);
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    known_.insert(key);
    if (obj_ == nullptr || !obj_->contains(key)) return;
    const json& v = (*obj_)[key];
    if (!type_ok<T>(v)) {
      problems_.push_back(child(key) + ": expected " + type_name<T>() + ", got " + v.dump());
      return;
    }
    out = v.get<T>();
  }

  // Enum-like field parsed from a string by `parse`.
  template <typename T, typename Parse>
  void read_enum(const std::string& key, T& out, Parse parse) {
    std::string text;
    known_.insert(key);
    if (obj_ == nullptr || !obj_->contains(key)) return;
    const json& v = (*obj_)[key];
    if (!v.is_string()) {
      problems_.push_back(child(key) + ": expected string, got " + v.dump());
      return;
    }
    try {
      out = parse(v.get<std::string>());
    } catch (const std::invalid_argument& e) {
      problems_.push_back(child(key) + ": " + e.what());
    }
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  template <typename T>
  static bool type_ok(const json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      return v.is_boolean();
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v.is_string();
    } else if constexpr (std::is_floating_point_v<T>) {
      return v.is_number();
    } else if constexpr (std::is_unsigned_v<T>) {
      return v.is_number_unsigned();
    } else if constexpr (std::is_integral_v<T>) {
      return v.is_number_integer();
    } else {
      // std::vector<E> or std::array<E, N>
      if (!v.is_array()) return false;
      for (const auto& e : v) {
        if (!type_ok<typename T::value_type>(e)) return false;
      }
      if constexpr (requires { std::tuple_size<T>::value; }) {
        return v.size() == std::tuple_size<T>::value;
      }
      return true;
    }
  }

  template <typename T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, bool>) {
      return "boolean";
    } else if constexpr (std::is_same_v<T, std::string>) {
      return "string";
    } else if constexpr (std::is_floating_point_v<T>) {
      return "number";
    } else if constexpr (std::is_unsigned_v<T>) {
      return "non-negative integer";
    } else if constexpr (std::is_integral_v<T>) {
      return "integer";
    } else if constexpr (requires { std::tuple_size<T>::value; }) {
      return "array of " + std::to_string(std::tuple_size<T>::value) + " " +
             type_name<typename T::value_type>();
    } else {
      return "array of " + type_name<typename T::value_type>();
    }
  }

  const json* obj_;
  std::string path_;
  std::vector<std::string>& problems_;
  std::set<std::string> known_;
};

void read_train(Reader r, TrainConfig& t, bool flow_phase) {
  r.read("epochs", t.epochs);
  r.read("batch_size", t.batch_size);
  r.read("lr0", t.lr0);
  r.read_enum("schedule", t.schedule, parse_schedule);
  r.read("milestones", t.milestones);
  r.read("factor", t.factor);
  r.read("momentum", t.momentum);
  if (flow_phase) r.read("update_bn_stats", t.update_bn_stats);
}

void check(std::vector<std::string>& problems, bool ok, const std::string& message) {
  if (!ok) problems.push_back(message);
}

void validate(const RunConfig& c, std::vector<std::string>& p) {
  check(p, c.data.num_classes >= 2, "data.num_classes: must be >= 2");
  check(p, c.data.input_dim >= c.data.num_classes, "data.input_dim: must be >= data.num_classes");
  check(p, c.data.n_train >= c.data.num_classes, "data.n_train: must be >= data.num_classes");
  check(p, c.data.n_test >= c.data.num_classes, "data.n_test: must be >= data.num_classes");
  check(p, c.data.family == "simplex", "data.family: only 'simplex' is available");
  for (std::size_t w : c.backbone.widths) check(p, w >= 2, "backbone.widths: every width must be >= 2");
  check(p, c.backbone.split_stage >= 1 && c.backbone.split_stage <= 3,
        "backbone.split_stage: must be in {1, 2, 3}");
  check(p, c.backbone.bn_momentum > 0.0 && c.backbone.bn_momentum < 1.0,
        "backbone.bn_momentum: must be in (0, 1)");
  check(p, c.backbone.bn_epsilon > 0.0, "backbone.bn_epsilon: must be positive");
  check(p, c.flow.layers >= 1, "flow.layers: must be >= 1");
  check(p, c.flow.hidden >= 1, "flow.hidden: must be >= 1");
  check(p, c.flow.scale_clamp > 0.0, "flow.scale_clamp: must be positive");
  for (const auto& [name, t] : {std::pair{"train.classifier", &c.classifier},
                                std::pair{"train.flow", &c.flow_train}}) {
    try {
      t->validate();
    } catch (const std::invalid_argument& e) {
      p.push_back(std::string(name) + ": " + e.what());
    }
  }
  for (double b : c.joint.betas) check(p, b >= 0.0, "joint.betas: every beta must be >= 0");
  check(p, c.adapt.lr > 0.0, "adapt.lr: must be positive");
  check(p, c.adapt.batch_size >= 1, "adapt.batch_size: must be positive");
  check(p, c.adapt.adapt_scope <= c.backbone.split_stage,
        "adapt.adapt_scope: must be <= backbone.split_stage (0 selects the split stage)");
  check(p, !c.bench.corruptions.empty() || c.bench.include_clean,
        "bench.corruptions: must not be empty unless bench.include_clean");
  for (int s : c.bench.severities) check(p, s >= 1 && s <= 5, "bench.severities: must be in 1..5");
  check(p, !c.bench.severities.empty(), "bench.severities: must not be empty");
  check(p, !c.bench.iterations.empty(), "bench.iterations: must not be empty");
  check(p, !c.bench.seeds.empty(), "bench.seeds: must not be empty");
}

}  // namespace

json to_json(const RunConfig& c) {
  json corruptions = json::array();
  for (CorruptionKind k : c.bench.corruptions) corruptions.push_back(std::string(corruption_name(k)));
  return {
      {"seed", c.seed},
      {"data",
       {{"num_classes", c.data.num_classes},
        {"input_dim", c.data.input_dim},
        {"n_train", c.data.n_train},
        {"n_test", c.data.n_test},
        {"family", c.data.family}}},
      {"backbone",
       {{"widths", c.backbone.widths},
        {"split_stage", c.backbone.split_stage},
        {"bn_momentum", c.backbone.bn_momentum},
        {"bn_epsilon", c.backbone.bn_epsilon}}},
      {"flow",
       {{"layers", c.flow.layers},
        {"hidden", c.flow.hidden},
        {"scale_clamp", c.flow.scale_clamp},
        {"mask", std::string(mask_kind_name(c.flow.mask))}}},
      {"train",
       {{"classifier", train_to_json(c.classifier, false)},
        {"flow", train_to_json(c.flow_train, true)}}},
      {"joint", {{"betas", c.joint.betas}}},
      {"adapt",
       {{"iterations", c.adapt.iterations},
        {"lr", c.adapt.lr},
        {"batch_size", c.adapt.batch_size},
        {"reset_per_batch", c.adapt.reset_per_batch},
        {"adapt_scope", c.adapt.adapt_scope},
        {"bn_mode", std::string(bn_mode_name(c.adapt.bn_mode))}}},
      {"bench",
       {{"corruptions", corruptions},
        {"severities", c.bench.severities},
        {"iterations", c.bench.iterations},
        {"seeds", c.bench.seeds},
        {"include_clean", c.bench.include_clean}}},
  };
}

RunConfig config_from_json(const json& doc) {
  RunConfig c;
  std::vector<std::string> problems;
  {
    Reader root(&doc, "", problems);
    root.read("seed", c.seed);
    {
      Reader r = root.section("data");
      r.read("num_classes", c.data.num_classes);
      r.read("input_dim", c.data.input_dim);
      r.read("n_train", c.data.n_train);
      r.read("n_test", c.data.n_test);
      r.read("family", c.data.family);
    }
    {
      Reader r = root.section("backbone");
      r.read("widths", c.backbone.widths);
      r.read("split_stage", c.backbone.split_stage);
      r.read("bn_momentum", c.backbone.bn_momentum);
      r.read("bn_epsilon", c.backbone.bn_epsilon);
    }
    {
      Reader r = root.section("flow");
      r.read("layers", c.flow.layers);
      r.read("hidden", c.flow.hidden);
      r.read("scale_clamp", c.flow.scale_clamp);
      r.read_enum("mask", c.flow.mask, parse_mask_kind);
    }
    {
      Reader r = root.section("train");
      read_train(r.section("classifier"), c.classifier, false);
      read_train(r.section("flow"), c.flow_train, true);
    }
    {
      Reader r = root.section("joint");
      r.read("betas", c.joint.betas);
    }
    {
      Reader r = root.section("adapt");
      r.read("iterations", c.adapt.iterations);
      r.read("lr", c.adapt.lr);
      r.read("batch_size", c.adapt.batch_size);
      r.read("reset_per_batch", c.adapt.reset_per_batch);
      r.read("adapt_scope", c.adapt.adapt_scope);
      r.read_enum("bn_mode", c.adapt.bn_mode, parse_bn_mode);
    }
    {
      Reader r = root.section("bench");
      std::vector<std::string> names;
      bool have_names = doc.contains("bench") && doc["bench"].is_object() &&
                        doc["bench"].contains("corruptions");
      r.read("corruptions", names);
      if (have_names && doc["bench"]["corruptions"].is_array()) {
        c.bench.corruptions.clear();
        for (const auto& n : names) {
          try {
            c.bench.corruptions.push_back(parse_corruption(n));
          } catch (const std::invalid_argument& e) {
            problems.push_back(r.child("corruptions") + ": " + e.what());
          }
        }
      }
      r.read("severities", c.bench.severities);
      r.read("iterations", c.bench.iterations);
      r.read("seeds", c.bench.seeds);
      r.read("include_clean", c.bench.include_clean);
    }
  }
  c.backbone.input_dim = c.data.input_dim;
  c.backbone.num_classes = c.data.num_classes;
  validate(c, problems);
  if (!problems.empty()) throw ConfigError(std::move(problems));
  c.flow = c.flow_config_for_backbone();
  return c;
}

void apply_overrides(json& doc, const std::vector<std::string>& overrides) {
  std::vector<std::string> problems;
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      problems.push_back("override '" + o + "': expected key.path=value");
      continue;
    }
    const std::string key = o.substr(0, eq);
    const std::string text = o.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot - start);
      if (!node->is_object()) *node = json::object();
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      start = dot + 1;
    }
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (!path.empty()) {
    const std::string text = read_file(path);
    doc = json::parse(text, nullptr, false);
    if (doc.is_discarded()) {
      throw ConfigError({"'" + path.string() + "' is not valid JSON"});
    }
  }
  apply_overrides(doc, overrides);
  return config_from_json(doc);
}

std::string config_hash(const RunConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

}  // namespace tttflow
