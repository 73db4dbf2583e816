#include "ddpore/porenet/config.hpp"

#include <cmath>
#include <string>

#include "ddpore/error.hpp"

namespace ddpore::porenet {

std::vector<std::int64_t> ResPoreConfig::channel_plan() const {
  std::vector<std::int64_t> plan;
  plan.reserve(stage_channels.size());
  for (std::int64_t c : stage_channels) {
    const auto scaled = static_cast<std::int64_t>(std::llround(static_cast<double>(c) * width_multiplier));
    plan.push_back(std::max<std::int64_t>(1, scaled));
  }
  return plan;
}

void ResPoreConfig::validate() const {
  if (!(width_multiplier > 0.0) || !std::isfinite(width_multiplier)) {
    throw ConfigError("width_multiplier must be positive, got " + std::to_string(width_multiplier));
  }
  if (input_rows <= 0 || input_cols <= 0) throw ConfigError("input size must be positive");
  if (stage_channels.size() != 5) {
    throw ConfigError("stage_channels needs 5 entries (stem + 4 stages), got " +
                      std::to_string(stage_channels.size()));
  }
  for (std::int64_t c : stage_channels) {
    if (c <= 0) throw ConfigError("stage_channels entries must be positive");
  }
  if (blocks_per_stage <= 0) throw ConfigError("blocks_per_stage must be positive");
  if (first_kernel <= 0 || first_kernel % 2 == 0 || block_kernel <= 0 || block_kernel % 2 == 0) {
    throw ConfigError("kernel sizes must be positive and odd");
  }
}

void DomainHeadConfig::validate() const {
  if (input_dim <= 0) throw ConfigError("domain head input_dim must be positive");
  for (std::int64_t d : hidden_dims) {
    if (d <= 0) throw ConfigError("domain head hidden widths must be positive");
  }
}

DomainHeadConfig default_head_for(const ResPoreConfig& cfg) {
  DomainHeadConfig head;
  head.input_dim = cfg.input_rows * cfg.input_cols;
  return head;
}

void to_json(nlohmann::ordered_json& j, const ResPoreConfig& cfg) {
  j = nlohmann::ordered_json{{"input_rows", cfg.input_rows},
                             {"input_cols", cfg.input_cols},
                             {"stage_channels", cfg.stage_channels},
                             {"blocks_per_stage", cfg.blocks_per_stage},
                             {"first_kernel", cfg.first_kernel},
                             {"block_kernel", cfg.block_kernel},
                             {"width_multiplier", cfg.width_multiplier}};
}

void from_json(const nlohmann::ordered_json& j, ResPoreConfig& cfg) {
  j.at("input_rows").get_to(cfg.input_rows);
  j.at("input_cols").get_to(cfg.input_cols);
  j.at("stage_channels").get_to(cfg.stage_channels);
  j.at("blocks_per_stage").get_to(cfg.blocks_per_stage);
  j.at("first_kernel").get_to(cfg.first_kernel);
  j.at("block_kernel").get_to(cfg.block_kernel);
  j.at("width_multiplier").get_to(cfg.width_multiplier);
}

void to_json(nlohmann::ordered_json& j, const DomainHeadConfig& cfg) {
  j = nlohmann::ordered_json{{"input_dim", cfg.input_dim},
                             {"hidden_dims", cfg.hidden_dims},
                             {"classes", DomainHeadConfig::kClasses}};
}

void from_json(const nlohmann::ordered_json& j, DomainHeadConfig& cfg) {
  j.at("input_dim").get_to(cfg.input_dim);
  j.at("hidden_dims").get_to(cfg.hidden_dims);
  if (j.at("classes").get<std::int64_t>() != DomainHeadConfig::kClasses) {
    throw FormatError("domain head must have exactly 2 classes");
  }
}

}  // namespace ddpore::porenet
