#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>

#include "ddpore/ndgrad/grid4.hpp"
#include "ddpore/ndgrad/ops.hpp"
#include "ddpore/ndgrad/param_set.hpp"
#include "ddpore/ndgrad/tape.hpp"
#include "ddpore/porenet/config.hpp"

namespace ddpore::porenet {

using ndgrad::BatchNormStats;
using ndgrad::BnMode;
using ndgrad::Grid4;
using ndgrad::ParamGroup;
using ndgrad::ParamSet;
using ndgrad::Shape;
using ndgrad::Tape;

template <typename T>
using BnStates = std::map<std::string, BatchNormStats<T>>;

// Parameters, running statistics and configuration of the composite
// network: DeepResPore (group `pore`) plus the domain classifier (group
// `domain`). A model built without a head has no `domain` parameters.
template <typename T>
struct PoreModel {
  ResPoreConfig pore_config;
  DomainHeadConfig head_config;
  bool has_head = false;
  ParamSet<T> params;
  BnStates<T> bn;
};

// Parameter layout:
//   conv1.weight, bn1.{gamma,beta}
//   conv{2..5}.{b}.conv_a.weight / bn_a / conv_b.weight / bn_b
//   conv{3..5}.0.proj.weight / proj_bn           (channel transitions only)
//   conv6.weight, bn6.{gamma,beta}
//   domain.fc{1..}.{weight,bias}, domain.out.{weight,bias}
// Convolutions carry no bias: each feeds a batch norm.
template <typename T>
PoreModel<T> build_deeprespore(const ResPoreConfig& cfg, std::uint64_t seed);

template <typename T>
void add_domain_head(PoreModel<T>& model, const DomainHeadConfig& cfg, std::uint64_t seed);

template <typename T>
PoreModel<T> build_deep_domain_pore(const ResPoreConfig& pore_cfg,
                                    const DomainHeadConfig& head_cfg, std::uint64_t seed);

// Re-draws conv6 and resets bn6 (parameters and running stats).
template <typename T>
void reinit_output_layer(PoreModel<T>& model, std::uint64_t seed);

// Names of the output layer parameters (conv6 and its BN).
std::vector<std::string> output_layer_param_names();

using ActivationObserver = std::function<void(std::string_view layer, const Shape& shape)>;

struct PoreForwardOptions {
  BnMode mode = BnMode::train;
  // Runs everything before conv6 untracked and in eval mode. Used when only
  // the output layer trains.
  bool frozen_backbone = false;
  ActivationObserver observer;
};

// conv-BN-ReLU-conv-BN plus the skip path (1x1 conv + BN when the channel
// count changes), then ReLU. `prefix` is e.g. "conv3.0".
template <typename T>
Grid4<T> forward_residual_block(Tape<T>& tape, PoreModel<T>& model, const Grid4<T>& x,
                                const std::string& prefix, BnMode mode);

// n x 1 x rows x cols patches -> n x 1 x rows x cols nonnegative pore map.
template <typename T>
Grid4<T> forward_pore(Tape<T>& tape, PoreModel<T>& model, const Grid4<T>& x,
                      const PoreForwardOptions& options = {});

// Features entering conv6.
template <typename T>
Grid4<T> forward_backbone(Tape<T>& tape, PoreModel<T>& model, const Grid4<T>& x,
                          const PoreForwardOptions& options = {});

template <typename T>
Grid4<T> forward_output_layer(Tape<T>& tape, PoreModel<T>& model, const Grid4<T>& features,
                              BnMode mode);

// Gradient reversal, flatten, then the linear/ReLU chain and a softmax.
// Returns n x 2 x 1 x 1 class probabilities.
template <typename T>
Grid4<T> forward_domain(Tape<T>& tape, const PoreModel<T>& model, const Grid4<T>& pore_map,
                        T lambda);

// Same head without the reversal layer; used to compare gradients.
template <typename T>
Grid4<T> forward_domain_plain(Tape<T>& tape, const PoreModel<T>& model,
                              const Grid4<T>& pore_map);

}  // namespace ddpore::porenet
