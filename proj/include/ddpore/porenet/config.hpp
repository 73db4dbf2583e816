#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"

namespace ddpore::porenet {

// DeepResPore layout: a 7x7 stem followed by four stages of residual blocks,
// then a 3x3 single-channel output convolution with BN and ReLU. Nothing
// pools or strides, so every activation keeps the input's spatial size.
struct ResPoreConfig {
  std::int64_t input_rows = 80;
  std::int64_t input_cols = 80;
  // Stem width followed by the four stage widths.
  std::vector<std::int64_t> stage_channels{64, 64, 128, 256, 512};
  std::int64_t blocks_per_stage = 2;
  std::int64_t first_kernel = 7;
  std::int64_t block_kernel = 3;
  // Desk-scale shrink applied to stage_channels; 1 reproduces the full model.
  double width_multiplier = 1.0;

  // stage_channels scaled by width_multiplier, rounded, at least 1.
  std::vector<std::int64_t> channel_plan() const;
  void validate() const;
  bool operator==(const ResPoreConfig&) const = default;
};

struct DomainHeadConfig {
  std::int64_t input_dim = 80 * 80;
  std::vector<std::int64_t> hidden_dims{1024, 100};
  static constexpr std::int64_t kClasses = 2;

  void validate() const;
  bool operator==(const DomainHeadConfig&) const = default;
};

// The head reads the flattened single-channel pore map.
DomainHeadConfig default_head_for(const ResPoreConfig& cfg);

void to_json(nlohmann::ordered_json& j, const ResPoreConfig& cfg);
void from_json(const nlohmann::ordered_json& j, ResPoreConfig& cfg);
void to_json(nlohmann::ordered_json& j, const DomainHeadConfig& cfg);
void from_json(const nlohmann::ordered_json& j, DomainHeadConfig& cfg);

}  // namespace ddpore::porenet
