#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddpore/dataprep/dataset.hpp"
#include "ddpore/dataprep/image.hpp"
#include "ddpore/porenet/checkpoint.hpp"
#include "ddpore/porenet/network.hpp"
#include "json.hpp"

namespace ddpore::trainer {

using porenet::Checkpoint;
using porenet::PoreModel;

enum class OptimizerKind { adam, sgd };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view text);

struct TrainConfig {
  double lambda = 0.005;
  double learning_rate = 1e-4;
  std::int64_t batch_size = 8;  // per domain
  std::int64_t epochs = 10;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Extra checkpoint every this many iterations; 0 keeps only the
  // end-of-epoch ones.
  std::int64_t checkpoint_every = 0;
  // Overlapping step for source patches; target patches never overlap.
  std::int64_t source_step = 10;
  porenet::ResPoreConfig network;

  void validate() const;
};

void to_json(nlohmann::ordered_json& j, const TrainConfig& cfg);
void from_json(const nlohmann::ordered_json& j, TrainConfig& cfg);

struct FinetuneConfig {
  double learning_rate = 0.01;
  std::int64_t epochs = 20;
  std::int64_t batch_size = 8;
  std::uint64_t seed = 0;
  std::int64_t patch_step = 10;

  void validate() const;
};

void to_json(nlohmann::ordered_json& j, const FinetuneConfig& cfg);
void from_json(const nlohmann::ordered_json& j, FinetuneConfig& cfg);

struct IterationLog {
  std::int64_t iter = 0;
  std::int64_t epoch = 0;
  double l_pore = 0.0;
  double l_d_src = 0.0;
  double l_d_tgt = 0.0;
  double e = 0.0;  // l_pore - lambda * (l_d_src + l_d_tgt)
  double seconds = 0.0;
};

inline constexpr std::string_view kLogHeader = "iter,epoch,L_pore,L_d_src,L_d_tgt,E,seconds";

std::string format_log(std::span<const IterationLog> rows);

// ---------------------------------------------------------------------------
// Patches

// Top-left corner of a patch inside image `image` of a pool.
struct PatchRef {
  std::int64_t image = 0;
  std::int64_t row = 0;
  std::int64_t col = 0;
  bool operator==(const PatchRef&) const = default;
};

// Images scaled to [0, 1] (reflect-padded for non-overlapping tiling) and,
// for labeled pools, their pore label images.
struct PatchPool {
  std::int64_t size = 80;
  std::vector<dataprep::Plane<float>> images;
  std::vector<dataprep::Plane<float>> labels;  // empty or one per image
  std::vector<PatchRef> refs;

  bool labeled() const { return !labels.empty(); }
  std::int64_t count() const { return static_cast<std::int64_t>(refs.size()); }
};

// Overlapping patches at `step` with label images; every image needs pores.
PatchPool labeled_pool(std::span<const dataprep::DatasetImage> images, std::int64_t step = 10,
                       std::int64_t size = 80);
// Non-overlapping tiles of each image padded up to a multiple of `size`.
PatchPool unlabeled_pool(std::span<const dataprep::DatasetImage> images, std::int64_t size = 80);

struct Batch {
  porenet::Grid4<float> x;
  porenet::Grid4<float> y;  // undefined for unlabeled pools
};

Batch gather(const PatchPool& pool, std::span<const std::int64_t> indices);

// ---------------------------------------------------------------------------
// Optimization

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected ADAM (or plain SGD) over named parameters. Moments are
// kept per name in double precision; a parameter without a gradient buffer
// is stepped with a zero gradient.
class Optimizer {
 public:
  explicit Optimizer(OptimizerSettings settings) : s_(settings) {}

  // Updates every parameter, or only the listed ones.
  void step(porenet::ParamSet<float>& params, const std::vector<std::string>* only = nullptr);
  std::int64_t steps() const { return t_; }
  const OptimizerSettings& settings() const { return s_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  OptimizerSettings s_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

OptimizerSettings optimizer_settings(const TrainConfig& cfg);

// How the domain loss reaches the pore branch.
enum class DomainCoupling {
  reversal,  // through the gradient reversal layer (training)
  plain,     // no reversal; for gradient comparisons
  none,      // domain losses not computed; pore loss only
};

struct StepLosses {
  double l_pore = 0.0;
  double l_d_src = 0.0;
  double l_d_tgt = 0.0;
};

// One joint forward of the source and target batches (shared batch
// statistics) followed by backward. Gradients accumulate into the model's
// parameters; nothing is updated.
StepLosses accumulate_gradients(PoreModel<float>& model, const Batch& source, const Batch& target,
                                double lambda, DomainCoupling coupling);

// Gradients, a NaN/Inf check, one optimizer step over all parameters, then
// zeroed gradients. Throws NumericError before stepping on a non-finite loss.
IterationLog train_step(PoreModel<float>& model, Optimizer& opt, const Batch& source,
                        const Batch& target, double lambda);

// The same update with the domain branch left out entirely.
IterationLog pore_only_step(PoreModel<float>& model, Optimizer& opt, const Batch& source,
                            const Batch& target);

std::int64_t iterations_per_epoch(std::int64_t target_patches, std::int64_t batch_size);

struct TrainOutputs {
  // Empty: nothing is written.
  std::filesystem::path dir;
  std::function<void(const IterationLog&)> on_iteration;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<IterationLog> log;
};

// Epoch = one seeded shuffle pass over the target pool; source batches come
// from an independently shuffled cyclic iterator. Writes train_log.csv,
// epoch_<k>.ckpt and final.ckpt under outputs.dir. On a non-finite loss the
// pre-step model is saved as nan_snapshot.ckpt with the log so far, then
// NumericError propagates.
TrainResult train(PoreModel<float> model, const PatchPool& source, const PatchPool& target,
                  const TrainConfig& cfg, const TrainOutputs& outputs = {});

// Re-initializes conv6 and bn6, then trains only them on MSE with the rest
// of the network frozen in eval mode.
Checkpoint finetune_last_layer(const Checkpoint& ckpt, const PatchPool& labeled,
                               const FinetuneConfig& cfg,
                               std::vector<IterationLog>* log = nullptr);

// Mean squared error of the eval-mode pore map over a labeled pool.
double evaluate_mse(PoreModel<float>& model, const PatchPool& labeled, std::int64_t batch_size = 16);

}  // namespace ddpore::trainer
