#include "tttflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include "tttflow/fileio.hpp"

namespace tttflow {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'T', 'T', 'T', 'F', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are stored little-endian");

struct NamedTensor {
  std::string name;
  std::string role;  // "param" or "buffer"
  const Tensor* tensor;
};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw CheckpointError("checkpoint truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::string encode(const std::string& kind, const json& config, const json& metadata,
                   const std::vector<NamedTensor>& tensors) {
  std::string payload;
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    entries.push_back({{"name", t.name},
                       {"role", t.role},
                       {"shape", t.tensor->shape()},
                       {"offset", offset},
                       {"count", t.tensor->size()}});
    payload.append(reinterpret_cast<const char*>(t.tensor->ptr()), t.tensor->size() * sizeof(double));
    offset += t.tensor->size();
  }
  json header = {{"format_version", kCheckpointVersion},
                 {"kind", kind},
                 {"config", config},
                 {"metadata", metadata.is_null() ? json::object() : metadata},
                 {"tensors", entries}};
  header["content_sha256"] = sha256_hex(header.dump() + payload);
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, header_text.size());
  out += header_text;
  put<std::uint64_t>(out, payload.size());
  out += payload;
  return out;
}

struct Decoded {
  CheckpointInfo info;
  json tensors;
  std::string_view payload;
};

Decoded decode(std::string_view bytes, const std::string& expected_kind) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = take<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw CheckpointError("checkpoint truncated");
  json header = json::parse(bytes.substr(pos, header_len), nullptr, false);
  if (header.is_discarded() || !header.is_object()) throw CheckpointError("corrupt header");
  pos += header_len;
  const auto payload_len = take<std::uint64_t>(bytes, pos);
  if (pos + payload_len != bytes.size()) throw CheckpointError("payload length mismatch");

  Decoded d;
  d.payload = bytes.substr(pos, payload_len);
  try {
    d.info.content_hash = header.at("content_sha256").get<std::string>();
    header.erase("content_sha256");
    if (sha256_hex(header.dump() + std::string(d.payload)) != d.info.content_hash) {
      throw CheckpointError("content hash mismatch; refusing to load");
    }
    d.info.format_version = header.at("format_version").get<std::uint32_t>();
    d.info.kind = header.at("kind").get<std::string>();
    d.info.config = header.at("config");
    d.info.metadata = header.at("metadata");
    d.tensors = header.at("tensors");
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt header: ") + e.what());
  }
  if (!expected_kind.empty() && d.info.kind != expected_kind) {
    throw CheckpointError("expected a " + expected_kind + " checkpoint, found " + d.info.kind);
  }
  return d;
}

// Copies every stored tensor into the matching slot; all slots must be filled.
void restore(const Decoded& d, const std::map<std::string, Tensor*>& slots) {
  std::size_t filled = 0;
  const std::size_t total_values = d.payload.size() / sizeof(double);
  for (const auto& e : d.tensors) {
    const auto name = e.at("name").get<std::string>();
    const auto it = slots.find(name);
    if (it == slots.end()) throw CheckpointError("unexpected tensor '" + name + "'");
    Tensor& dst = *it->second;
    const auto shape = e.at("shape").get<Shape>();
    if (shape != dst.shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_to_string(shape) +
                            ", model expects " + shape_to_string(dst.shape()));
    }
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    if (count != dst.size() || offset + count > total_values) {
      throw CheckpointError("tensor '" + name + "' is out of payload bounds");
    }
    std::memcpy(dst.ptr(), d.payload.data() + offset * sizeof(double), count * sizeof(double));
    ++filled;
  }
  if (filled != slots.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(filled) + " tensors, model has " +
                          std::to_string(slots.size()));
  }
}

json backbone_config_json(const BackboneConfig& c) {
  return {{"input_dim", c.input_dim},     {"widths", c.widths},
          {"num_classes", c.num_classes}, {"split_stage", c.split_stage},
          {"bn_momentum", c.bn_momentum}, {"bn_epsilon", c.bn_epsilon}};
}

json flow_config_json(const FlowConfig& c) {
  return {{"dim", c.dim},
          {"layers", c.layers},
          {"hidden", c.hidden},
          {"scale_clamp", c.scale_clamp},
          {"mask", std::string(mask_kind_name(c.mask))}};
}

}  // namespace

std::string encode_backbone(const Backbone& backbone, const json& metadata) {
  std::vector<NamedTensor> tensors;
  for (const Parameter* p : backbone.parameters()) tensors.push_back({p->name, "param", &p->value});
  for (const auto& [name, t] : backbone.buffers()) tensors.push_back({name, "buffer", t});
  return encode("backbone", backbone_config_json(backbone.config()), metadata, tensors);
}

std::string encode_flow(const FlowModel& flow, const json& metadata) {
  std::vector<NamedTensor> tensors;
  for (const Parameter* p : flow.parameters()) tensors.push_back({p->name, "param", &p->value});
  return encode("flow", flow_config_json(flow.config()), metadata, tensors);
}

Backbone decode_backbone(std::string_view bytes, CheckpointInfo* info) {
  const Decoded d = decode(bytes, "backbone");
  BackboneConfig c;
  try {
    c.input_dim = d.info.config.at("input_dim").get<std::size_t>();
    c.widths = d.info.config.at("widths").get<std::array<std::size_t, 3>>();
    c.num_classes = d.info.config.at("num_classes").get<std::size_t>();
    c.split_stage = d.info.config.at("split_stage").get<std::size_t>();
    c.bn_momentum = d.info.config.at("bn_momentum").get<double>();
    c.bn_epsilon = d.info.config.at("bn_epsilon").get<double>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("bad backbone config: ") + e.what());
  }
  Backbone b(c, std::uint64_t{0});
  std::map<std::string, Tensor*> slots;
  for (Parameter* p : b.parameters()) slots[p->name] = &p->value;
  for (auto& [name, t] : b.buffers()) slots[name] = t;
  restore(d, slots);
  for (Parameter* p : b.parameters()) p->zero_grad();
  if (info != nullptr) *info = d.info;
  return b;
}

FlowModel decode_flow(std::string_view bytes, CheckpointInfo* info) {
  const Decoded d = decode(bytes, "flow");
  FlowConfig c;
  try {
    c.dim = d.info.config.at("dim").get<std::size_t>();
    c.layers = d.info.config.at("layers").get<std::size_t>();
    c.hidden = d.info.config.at("hidden").get<std::size_t>();
    c.scale_clamp = d.info.config.at("scale_clamp").get<double>();
    c.mask = parse_mask_kind(d.info.config.at("mask").get<std::string>());
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("bad flow config: ") + e.what());
  }
  FlowModel f(c, std::uint64_t{0});
  std::map<std::string, Tensor*> slots;
  for (Parameter* p : f.parameters()) slots[p->name] = &p->value;
  restore(d, slots);
  if (info != nullptr) *info = d.info;
  return f;
}

std::string save_backbone(const Backbone& backbone, const std::filesystem::path& path,
                          const json& metadata) {
  const std::string bytes = encode_backbone(backbone, metadata);
  write_file_atomic(path, bytes);
  return decode(bytes, "backbone").info.content_hash;
}

std::string save_flow(const FlowModel& flow, const std::filesystem::path& path,
                      const json& metadata) {
  const std::string bytes = encode_flow(flow, metadata);
  write_file_atomic(path, bytes);
  return decode(bytes, "flow").info.content_hash;
}

Backbone load_backbone(const std::filesystem::path& path, CheckpointInfo* info) {
  if (!std::filesystem::exists(path)) throw CheckpointError("missing checkpoint '" + path.string() + "'");
  return decode_backbone(read_file(path), info);
}

FlowModel load_flow(const std::filesystem::path& path, CheckpointInfo* info) {
  if (!std::filesystem::exists(path)) throw CheckpointError("missing checkpoint '" + path.string() + "'");
  return decode_flow(read_file(path), info);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("missing checkpoint '" + path.string() + "'");
  return decode(read_file(path), "").info;
}

}  // namespace tttflow
