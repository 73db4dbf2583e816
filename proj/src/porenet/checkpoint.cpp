#include "ddpore/porenet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <type_traits>

#include "ddpore/error.hpp"
#include "ddpore/io.hpp"
#include "json.hpp"

namespace ddpore::porenet {

namespace {

using json = nlohmann::ordered_json;

constexpr char kMagic[8] = {'D', 'D', 'P', 'C', 'K', 'P', 'T', '\n'};
constexpr std::size_t kHeaderBytes = 16;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float get_f32(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

json shape_json(const Shape& s) { return json::array({s.n, s.c, s.h, s.w}); }

// One named float32 tensor in payload order.
template <typename Value>
struct TensorView {
  std::string name;
  std::string group;
  Shape shape;
  std::span<Value> values;
};

template <typename Model>
auto tensor_views(Model& model) {
  using Value = std::conditional_t<std::is_const_v<Model>, const float, float>;
  std::vector<TensorView<Value>> views;
  for (auto& e : model.params.entries()) {
    std::span<Value> values;
    if constexpr (std::is_const_v<Model>) {
      values = e.value.values();
    } else {
      values = e.value.mutable_values();
    }
    views.push_back({e.name, std::string(ndgrad::to_string(e.group)), e.value.shape(), values});
  }
  for (auto& [prefix, stats] : model.bn) {
    const Shape s{1, static_cast<std::int64_t>(stats.mean.size()), 1, 1};
    views.push_back({prefix + ".running_mean", "bn_running", s, std::span<Value>(stats.mean)});
    views.push_back({prefix + ".running_var", "bn_running", s, std::span<Value>(stats.var)});
  }
  return views;
}

json meta_json(const TrainingMeta& m) {
  return json{{"epoch", m.epoch},          {"iteration", m.iteration},
              {"seed", m.seed},            {"lambda", m.lambda},
              {"learning_rate", m.learning_rate}, {"stage", m.stage}};
}

TrainingMeta meta_from_json(const json& j) {
  TrainingMeta m;
  j.at("epoch").get_to(m.epoch);
  j.at("iteration").get_to(m.iteration);
  j.at("seed").get_to(m.seed);
  j.at("lambda").get_to(m.lambda);
  j.at("learning_rate").get_to(m.learning_rate);
  j.at("stage").get_to(m.stage);
  return m;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  const auto views = tensor_views(ckpt.model);

  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& v : views) {
    const std::uint64_t nbytes = v.values.size() * sizeof(float);
    tensors.push_back(json{{"name", v.name},
                           {"group", v.group},
                           {"dtype", "f32"},
                           {"shape", shape_json(v.shape)},
                           {"offset", offset},
                           {"nbytes", nbytes}});
    offset += nbytes;
  }

  json manifest{{"format", "ddpore-checkpoint"},
                {"version", kCheckpointVersion},
                {"respore", ckpt.model.pore_config},
                {"has_domain_head", ckpt.model.has_head},
                {"domain_head", ckpt.model.head_config},
                {"metadata", meta_json(ckpt.meta)},
                {"tensors", std::move(tensors)},
                {"payload_bytes", offset}};
  const std::string text = manifest.dump(2);

  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + text.size() + offset);
  for (char c : kMagic) out.push_back(static_cast<std::uint8_t>(c));
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& v : views) {
    for (float f : v.values) put_f32(out, f);
  }
  return out;
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw FormatError("checkpoint truncated: missing header");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const std::uint64_t manifest_len = get_u64(bytes.data() + 8);
  if (manifest_len > bytes.size() - kHeaderBytes) {
    throw FormatError("checkpoint truncated: manifest runs past end of file");
  }
  const auto* mbegin = reinterpret_cast<const char*>(bytes.data() + kHeaderBytes);

  json manifest;
  try {
    manifest = json::parse(mbegin, mbegin + manifest_len);
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint manifest: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    if (manifest.at("format").get<std::string>() != "ddpore-checkpoint") {
      throw FormatError("manifest format tag is not ddpore-checkpoint");
    }
    const auto version = manifest.at("version").get<std::int64_t>();
    if (version != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                        " (expected " + std::to_string(kCheckpointVersion) + ")");
    }
    const auto pore_cfg = manifest.at("respore").get<ResPoreConfig>();
    const auto head_cfg = manifest.at("domain_head").get<DomainHeadConfig>();
    const bool has_head = manifest.at("has_domain_head").get<bool>();
    ckpt.model = build_deeprespore<float>(pore_cfg, 0);
    if (has_head) {
      add_domain_head(ckpt.model, head_cfg, 0);
    } else {
      ckpt.model.head_config = head_cfg;
    }
    ckpt.meta = meta_from_json(manifest.at("metadata"));

    const std::uint64_t payload_len = bytes.size() - kHeaderBytes - manifest_len;
    if (manifest.at("payload_bytes").get<std::uint64_t>() != payload_len) {
      throw FormatError("checkpoint payload has " + std::to_string(payload_len) +
                        " bytes, manifest declares " +
                        std::to_string(manifest.at("payload_bytes").get<std::uint64_t>()));
    }
    const std::uint8_t* payload = bytes.data() + kHeaderBytes + manifest_len;

    auto views = tensor_views(ckpt.model);
    const auto& listed = manifest.at("tensors");
    if (listed.size() != views.size()) {
      throw FormatError("checkpoint lists " + std::to_string(listed.size()) +
                        " tensors, configuration expects " + std::to_string(views.size()));
    }
    for (std::size_t i = 0; i < views.size(); ++i) {
      const auto& t = listed[i];
      auto& v = views[i];
      const auto name = t.at("name").get<std::string>();
      if (name != v.name) {
        throw FormatError("tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                          v.name + "'");
      }
      if (t.at("group").get<std::string>() != v.group) {
        throw FormatError("tensor '" + name + "' has group " + t.at("group").get<std::string>() +
                          ", expected " + v.group);
      }
      if (t.at("dtype").get<std::string>() != "f32") {
        throw FormatError("tensor '" + name + "' has unsupported dtype");
      }
      const auto dims = t.at("shape").get<std::vector<std::int64_t>>();
      if (dims != std::vector<std::int64_t>{v.shape.n, v.shape.c, v.shape.h, v.shape.w}) {
        throw ShapeError("tensor '" + name + "' shape does not match configuration " +
                         v.shape.str());
      }
      const auto off = t.at("offset").get<std::uint64_t>();
      const auto nbytes = t.at("nbytes").get<std::uint64_t>();
      if (nbytes != v.values.size() * sizeof(float) || off > payload_len ||
          nbytes > payload_len - off) {
        throw FormatError("tensor '" + name + "' byte range lies outside the payload");
      }
      for (std::size_t k = 0; k < v.values.size(); ++k) {
        v.values[k] = get_f32(payload + off + k * sizeof(float));
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint configuration invalid: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ResPoreConfig& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  if (!(ckpt.model.pore_config == expected)) {
    throw ConfigError("checkpoint " + path.string() +
                      " was built for a different network configuration");
  }
  return ckpt;
}

}  // namespace ddpore::porenet
