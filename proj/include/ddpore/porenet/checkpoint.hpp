#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ddpore/porenet/network.hpp"

namespace ddpore::porenet {

inline constexpr std::int64_t kCheckpointVersion = 1;

struct TrainingMeta {
  std::int64_t epoch = 0;
  std::int64_t iteration = 0;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  double learning_rate = 0.0;
  std::string stage = "init";  // init | train | finetune

  bool operator==(const TrainingMeta&) const = default;
};

struct Checkpoint {
  PoreModel<float> model;
  TrainingMeta meta;
};

// Container layout (see docs/checkpoint_format.md):
//   8 bytes   magic "DDPCKPT\n"
//   8 bytes   manifest length L, unsigned little-endian
//   L bytes   UTF-8 JSON manifest
//   rest      payload: raw little-endian IEEE-754 float32 tensors at the
//             offsets listed in the manifest
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Also rejects checkpoints whose network configuration differs from
// `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ResPoreConfig& expected);

}  // namespace ddpore::porenet
