#pragma once

#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

#include "ddpore/dataprep/image.hpp"
#include "ddpore/dataprep/pores.hpp"

namespace ddpore::dataprep {

enum class Domain { source, target };

// Domain label: source -> 0, target -> 1.
int assign_domain(Domain origin);
std::string_view to_string(Domain d);
Domain parse_domain(std::string_view s);

struct ManifestEntry {
  std::filesystem::path image;
  std::optional<std::filesystem::path> pores;
  Domain domain = Domain::source;
  bool operator==(const ManifestEntry&) const = default;
};

// JSON array of {"image": ..., "pores": ... (optional), "domain": "source"|"target"}.
// Relative paths are resolved against the manifest's directory on load and
// written relative to it on save.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);

struct DatasetImage {
  FingerprintImage image;
  std::optional<PoreList> pores;  // validated against the image size
  Domain domain = Domain::source;
};

// Source entries must name a pores file (ConfigError otherwise).
std::vector<DatasetImage> load_dataset(const std::vector<ManifestEntry>& entries);
std::vector<DatasetImage> load_dataset(const std::filesystem::path& manifest);

}  // namespace ddpore::dataprep
