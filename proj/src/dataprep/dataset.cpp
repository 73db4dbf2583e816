#include "ddpore/dataprep/dataset.hpp"

#include <string>

#include "ddpore/error.hpp"
#include "ddpore/io.hpp"
#include "json.hpp"

namespace ddpore::dataprep {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : base / p; }

std::string relative_to(const fs::path& base, const fs::path& p) {
  const fs::path rel = fs::absolute(p).lexically_normal().lexically_relative(fs::absolute(base).lexically_normal());
  return rel.empty() ? fs::absolute(p).generic_string() : rel.generic_string();
}

}  // namespace

int assign_domain(Domain origin) { return origin == Domain::source ? 0 : 1; }

std::string_view to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain parse_domain(std::string_view s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw ConfigError("unknown domain '" + std::string(s) + "' (expected source or target)");
}

std::vector<ManifestEntry> load_manifest(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what());
  }
  if (!doc.is_array()) throw FormatError(path.string() + ": manifest must be a JSON array");
  const fs::path base = path.parent_path();
  std::vector<ManifestEntry> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& item = doc[i];
    const std::string where = path.string() + ": entry " + std::to_string(i);
    if (!item.is_object()) throw FormatError(where + " is not an object");
    for (const auto& [key, _] : item.items()) {
      if (key != "image" && key != "pores" && key != "domain") {
        throw ConfigError(where + ": unknown key '" + key + "'");
      }
    }
    try {
      ManifestEntry e;
      e.image = resolve(base, item.at("image").get<std::string>());
      if (item.contains("pores") && !item.at("pores").is_null()) {
        e.pores = resolve(base, item.at("pores").get<std::string>());
      }
      e.domain = parse_domain(item.at("domain").get<std::string>());
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw FormatError(where + ": " + ex.what());
    }
  }
  return out;
}

void save_manifest(const std::vector<ManifestEntry>& entries, const fs::path& path) {
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  json doc = json::array();
  for (const auto& e : entries) {
    json item{{"image", relative_to(base, e.image)}};
    if (e.pores) item["pores"] = relative_to(base, *e.pores);
    item["domain"] = std::string(to_string(e.domain));
    doc.push_back(std::move(item));
  }
  write_file_atomic(path, doc.dump(2) + "\n");
}

std::vector<DatasetImage> load_dataset(const std::vector<ManifestEntry>& entries) {
  std::vector<DatasetImage> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    DatasetImage d;
    d.image = load_image(e.image);
    d.domain = e.domain;
    if (e.pores) {
      d.pores = load_ground_truth(*e.pores, d.image.pixels.rows, d.image.pixels.cols);
    } else if (e.domain == Domain::source) {
      throw ConfigError("source image " + e.image.string() + " has no pores file");
    }
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<DatasetImage> load_dataset(const fs::path& manifest) {
  return load_dataset(load_manifest(manifest));
}

}  // namespace ddpore::dataprep
