#include "ddpore/trainer/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "ddpore/dataprep/labels.hpp"
#include "ddpore/dataprep/patches.hpp"
#include "ddpore/io.hpp"
#include "ddpore/json_fields.hpp"

namespace ddpore::trainer {

using ndgrad::Grid4;
using ndgrad::Shape;
using ndgrad::Tape;

namespace {

void require_field(bool ok, const std::string& context, const std::string& field,
                   const std::string& rule) {
  if (!ok) throw ConfigError(context + ": " + field + " " + rule);
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), 0x7472u};
  return std::mt19937_64(seq);
}

// Seed streams.
constexpr std::uint64_t kTargetOrder = 1;
constexpr std::uint64_t kSourceOrder = 2;
constexpr std::uint64_t kFinetuneOrder = 3;
constexpr std::uint64_t kFinetuneInit = 4;

// Cycles through 0..n-1, reshuffling at the start of every pass.
class CyclicOrder {
 public:
  CyclicOrder(std::int64_t n, std::mt19937_64 rng) : order_(static_cast<std::size_t>(n)), rng_(rng) {
    for (std::int64_t i = 0; i < n; ++i) order_[static_cast<std::size_t>(i)] = i;
    pos_ = order_.size();
  }

  std::int64_t next() {
    if (pos_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::int64_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

bool finite(const StepLosses& l) {
  return std::isfinite(l.l_pore) && std::isfinite(l.l_d_src) && std::isfinite(l.l_d_tgt);
}

Grid4<float> join(const Grid4<float>& a, const Grid4<float>& b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as.c != bs.c || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("source batch " + as.str() + " and target batch " + bs.str() + " differ");
  }
  std::vector<float> v(a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return Grid4<float>(Shape{as.n + bs.n, as.c, as.h, as.w}, std::move(v));
}

IterationLog make_log(const StepLosses& l, double lambda) {
  IterationLog log;
  log.l_pore = l.l_pore;
  log.l_d_src = l.l_d_src;
  log.l_d_tgt = l.l_d_tgt;
  log.e = l.l_pore - lambda * (l.l_d_src + l.l_d_tgt);
  return log;
}

std::optional<std::string> first_nonfinite_grad(const porenet::ParamSet<float>& params) {
  for (const auto& p : params.entries()) {
    for (float g : p.value.grad()) {
      if (!std::isfinite(g)) return p.name;
    }
  }
  return std::nullopt;
}

std::string describe(const StepLosses& l) {
  std::ostringstream os;
  os << "L_pore=" << l.l_pore << " L_d_src=" << l.l_d_src << " L_d_tgt=" << l.l_d_tgt;
  return os.str();
}

}  // namespace

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(std::string_view text) {
  if (text == "adam") return OptimizerKind::adam;
  if (text == "sgd") return OptimizerKind::sgd;
  throw ConfigError("optimizer must be 'adam' or 'sgd', got '" + std::string(text) + "'");
}

void TrainConfig::validate() const {
  const std::string ctx = "train config";
  require_field(std::isfinite(lambda) && lambda >= 0.0, ctx, "lambda", "must be >= 0");
  require_field(learning_rate > 0.0, ctx, "learning_rate", "must be positive");
  require_field(batch_size >= 1, ctx, "batch_size", "must be >= 1");
  require_field(epochs >= 1, ctx, "epochs", "must be >= 1");
  require_field(beta1 >= 0.0 && beta1 < 1.0, ctx, "beta1", "must lie in [0, 1)");
  require_field(beta2 >= 0.0 && beta2 < 1.0, ctx, "beta2", "must lie in [0, 1)");
  require_field(epsilon > 0.0, ctx, "epsilon", "must be positive");
  require_field(checkpoint_every >= 0, ctx, "checkpoint_every", "must be >= 0");
  require_field(source_step >= 1, ctx, "source_step", "must be >= 1");
  network.validate();
}

void to_json(nlohmann::ordered_json& j, const TrainConfig& cfg) {
  j = nlohmann::ordered_json{{"lambda", cfg.lambda},
                             {"learning_rate", cfg.learning_rate},
                             {"batch_size", cfg.batch_size},
                             {"epochs", cfg.epochs},
                             {"seed", cfg.seed},
                             {"optimizer", to_string(cfg.optimizer)},
                             {"beta1", cfg.beta1},
                             {"beta2", cfg.beta2},
                             {"epsilon", cfg.epsilon},
                             {"checkpoint_every", cfg.checkpoint_every},
                             {"source_step", cfg.source_step},
                             {"network", cfg.network}};
}

void from_json(const nlohmann::ordered_json& j, TrainConfig& cfg) {
  JsonFields f(j, "train config");
  std::string optimizer(to_string(cfg.optimizer));
  f.get("lambda", cfg.lambda).get("learning_rate", cfg.learning_rate);
  f.get("batch_size", cfg.batch_size).get("epochs", cfg.epochs).get("seed", cfg.seed);
  f.get("optimizer", optimizer).get("beta1", cfg.beta1).get("beta2", cfg.beta2);
  f.get("epsilon", cfg.epsilon).get("checkpoint_every", cfg.checkpoint_every);
  f.get("source_step", cfg.source_step).get("network", cfg.network);
  f.finish();
  cfg.optimizer = parse_optimizer(optimizer);
}

void FinetuneConfig::validate() const {
  const std::string ctx = "finetune config";
  require_field(learning_rate > 0.0, ctx, "learning_rate", "must be positive");
  require_field(epochs >= 1, ctx, "epochs", "must be >= 1");
  require_field(batch_size >= 1, ctx, "batch_size", "must be >= 1");
  require_field(patch_step >= 1, ctx, "patch_step", "must be >= 1");
}

void to_json(nlohmann::ordered_json& j, const FinetuneConfig& cfg) {
  j = nlohmann::ordered_json{{"learning_rate", cfg.learning_rate},
                             {"epochs", cfg.epochs},
                             {"batch_size", cfg.batch_size},
                             {"seed", cfg.seed},
                             {"patch_step", cfg.patch_step}};
}

void from_json(const nlohmann::ordered_json& j, FinetuneConfig& cfg) {
  JsonFields f(j, "finetune config");
  f.get("learning_rate", cfg.learning_rate).get("epochs", cfg.epochs);
  f.get("batch_size", cfg.batch_size).get("seed", cfg.seed).get("patch_step", cfg.patch_step);
  f.finish();
}

std::string format_log(std::span<const IterationLog> rows) {
  std::string out(kLogHeader);
  out += '\n';
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%lld,%.9g,%.9g,%.9g,%.9g,%.3f\n",
                  static_cast<long long>(r.iter), static_cast<long long>(r.epoch), r.l_pore,
                  r.l_d_src, r.l_d_tgt, r.e, r.seconds);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patches

PatchPool labeled_pool(std::span<const dataprep::DatasetImage> images, std::int64_t step,
                       std::int64_t size) {
  PatchPool pool;
  pool.size = size;
  for (const auto& item : images) {
    if (!item.pores) {
      throw ConfigError("labeled patches need ground truth, image '" + item.image.id + "' has none");
    }
    const auto& px = item.image.pixels;
    const auto index = static_cast<std::int64_t>(pool.images.size());
    for (const auto& o : dataprep::overlapping_offsets(px.rows, px.cols, size, step)) {
      pool.refs.push_back({index, o.row, o.col});
    }
    pool.images.push_back(dataprep::to_unit(px));
    const auto label = dataprep::pore_label_image(*item.pores, px.rows, px.cols);
    dataprep::Plane<float> lf(px.rows, px.cols);
    std::transform(label.data.begin(), label.data.end(), lf.data.begin(),
                   [](double v) { return static_cast<float>(v); });
    pool.labels.push_back(std::move(lf));
  }
  return pool;
}

PatchPool unlabeled_pool(std::span<const dataprep::DatasetImage> images, std::int64_t size) {
  PatchPool pool;
  pool.size = size;
  for (const auto& item : images) {
    const auto& px = item.image.pixels;
    const auto layout = dataprep::tile_layout(px.rows, px.cols, size);
    const auto index = static_cast<std::int64_t>(pool.images.size());
    for (const auto& o : layout.offsets) pool.refs.push_back({index, o.row, o.col});
    pool.images.push_back(
        dataprep::reflect_pad(dataprep::to_unit(px), layout.padded_rows, layout.padded_cols));
  }
  return pool;
}

Batch gather(const PatchPool& pool, std::span<const std::int64_t> indices) {
  const std::int64_t s = pool.size;
  const auto n = static_cast<std::int64_t>(indices.size());
  if (n == 0) throw ShapeError("empty batch");
  Batch b;
  b.x = Grid4<float>(Shape{n, 1, s, s});
  if (pool.labeled()) b.y = Grid4<float>(Shape{n, 1, s, s});
  for (std::int64_t k = 0; k < n; ++k) {
    const auto idx = indices[static_cast<std::size_t>(k)];
    if (idx < 0 || idx >= pool.count()) {
      throw BoundsError("patch index " + std::to_string(idx) + " outside pool of " +
                        std::to_string(pool.count()));
    }
    const PatchRef& r = pool.refs[static_cast<std::size_t>(idx)];
    const auto img = static_cast<std::size_t>(r.image);
    float* xd = b.x.mutable_values().data() + k * s * s;
    float* yd = pool.labeled() ? b.y.mutable_values().data() + k * s * s : nullptr;
    for (std::int64_t i = 0; i < s; ++i) {
      const auto& src = pool.images[img];
      std::copy_n(src.data.begin() + (r.row + i) * src.cols + r.col, s, xd + i * s);
      if (yd != nullptr) {
        const auto& lab = pool.labels[img];
        std::copy_n(lab.data.begin() + (r.row + i) * lab.cols + r.col, s, yd + i * s);
      }
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Optimization

OptimizerSettings optimizer_settings(const TrainConfig& cfg) {
  return {cfg.optimizer, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon};
}

void Optimizer::step(porenet::ParamSet<float>& params, const std::vector<std::string>* only) {
  ++t_;
  const double lr = s_.learning_rate;
  const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
  for (auto& p : params.entries()) {
    if (only != nullptr && std::find(only->begin(), only->end(), p.name) == only->end()) continue;
    auto values = p.value.mutable_values();
    const auto grad = p.value.grad();
    const bool has = !grad.empty();
    if (s_.kind == OptimizerKind::sgd) {
      if (!has) continue;
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = static_cast<float>(values[i] - lr * grad[i]);
      }
      continue;
    }
    auto& mom = moments_[p.name];
    if (mom.m.empty()) {
      mom.m.assign(values.size(), 0.0);
      mom.v.assign(values.size(), 0.0);
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has ? static_cast<double>(grad[i]) : 0.0;
      mom.m[i] = s_.beta1 * mom.m[i] + (1.0 - s_.beta1) * g;
      mom.v[i] = s_.beta2 * mom.v[i] + (1.0 - s_.beta2) * g * g;
      const double mhat = mom.m[i] / c1;
      const double vhat = mom.v[i] / c2;
      values[i] = static_cast<float>(values[i] - lr * mhat / (std::sqrt(vhat) + s_.epsilon));
    }
  }
}

StepLosses accumulate_gradients(PoreModel<float>& model, const Batch& source, const Batch& target,
                                double lambda, DomainCoupling coupling) {
  if (!source.y.defined()) throw ConfigError("source batch carries no pore labels");
  const std::int64_t ns = source.x.shape().n;
  const std::int64_t nt = target.x.shape().n;
  Tape<float> tape;
  const auto x = join(source.x, target.x);
  const auto y = porenet::forward_pore(tape, model, x);
  const auto l_pore = ndgrad::mse_loss(tape, ndgrad::slice_batch(tape, y, 0, ns), source.y);

  StepLosses out;
  out.l_pore = l_pore.item();
  if (coupling == DomainCoupling::none) {
    tape.backward(l_pore);
    return out;
  }
  if (!model.has_head) throw ConfigError("domain coupling requested for a model without a domain head");
  const auto probs = coupling == DomainCoupling::reversal
                         ? porenet::forward_domain(tape, model, y, static_cast<float>(lambda))
                         : porenet::forward_domain_plain(tape, model, y);
  const auto l_src = ndgrad::cross_entropy(tape, ndgrad::slice_batch(tape, probs, 0, ns), 0);
  const auto l_tgt = ndgrad::cross_entropy(tape, ndgrad::slice_batch(tape, probs, ns, nt), 1);
  const auto total =
      ndgrad::residual_add(tape, l_pore, ndgrad::residual_add(tape, l_src, l_tgt));
  tape.backward(total);
  out.l_d_src = l_src.item();
  out.l_d_tgt = l_tgt.item();
  return out;
}

namespace {

IterationLog step_with(PoreModel<float>& model, Optimizer& opt, const Batch& source,
                       const Batch& target, double lambda, DomainCoupling coupling) {
  model.params.zero_grad();
  const StepLosses l = accumulate_gradients(model, source, target, lambda, coupling);
  if (!finite(l)) {
    model.params.zero_grad();
    throw NumericError("non-finite loss at optimizer step " + std::to_string(opt.steps() + 1) +
                       ": " + describe(l));
  }
  // ReLU maps NaN to 0, so a poisoned weight can leave the loss finite.
  if (const auto bad = first_nonfinite_grad(model.params)) {
    model.params.zero_grad();
    throw NumericError("non-finite gradient for " + *bad + " at optimizer step " +
                       std::to_string(opt.steps() + 1) + ": " + describe(l));
  }
  opt.step(model.params);
  model.params.zero_grad();
  return make_log(l, coupling == DomainCoupling::none ? 0.0 : lambda);
}

}  // namespace

IterationLog train_step(PoreModel<float>& model, Optimizer& opt, const Batch& source,
                        const Batch& target, double lambda) {
  return step_with(model, opt, source, target, lambda, DomainCoupling::reversal);
}

IterationLog pore_only_step(PoreModel<float>& model, Optimizer& opt, const Batch& source,
                            const Batch& target) {
  return step_with(model, opt, source, target, 0.0, DomainCoupling::none);
}

std::int64_t iterations_per_epoch(std::int64_t target_patches, std::int64_t batch_size) {
  if (target_patches < 1) throw ConfigError("target patch set is empty");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  return (target_patches + batch_size - 1) / batch_size;
}

TrainResult train(PoreModel<float> model, const PatchPool& source, const PatchPool& target,
                  const TrainConfig& cfg, const TrainOutputs& outputs) {
  cfg.validate();
  if (source.count() == 0) throw ConfigError("source patch set is empty");
  if (target.count() == 0) throw ConfigError("target patch set is empty");
  if (!source.labeled()) throw ConfigError("source patch set has no labels");
  if (!model.has_head) throw ConfigError("training needs a model with a domain head");
  // The caller's handles must not see the updates.
  model.params = model.params.clone();

  const std::int64_t per_epoch = iterations_per_epoch(target.count(), cfg.batch_size);
  Optimizer opt(optimizer_settings(cfg));
  auto target_rng = stream(cfg.seed, kTargetOrder);
  CyclicOrder source_order(source.count(), stream(cfg.seed, kSourceOrder));
  std::vector<std::int64_t> target_order(static_cast<std::size_t>(target.count()));

  TrainResult result;
  auto snapshot = [&](std::int64_t epoch, std::int64_t iter) {
    porenet::TrainingMeta meta;
    meta.epoch = epoch;
    meta.iteration = iter;
    meta.seed = cfg.seed;
    meta.lambda = cfg.lambda;
    meta.learning_rate = cfg.learning_rate;
    meta.stage = "train";
    return Checkpoint{model, meta};
  };
  const bool write = !outputs.dir.empty();
  auto write_log = [&] {
    if (write) write_file_atomic(outputs.dir / "train_log.csv", format_log(result.log));
  };
  if (write) std::filesystem::create_directories(outputs.dir);

  const auto start = std::chrono::steady_clock::now();
  std::int64_t iter = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::int64_t i = 0; i < target.count(); ++i) target_order[static_cast<std::size_t>(i)] = i;
    std::shuffle(target_order.begin(), target_order.end(), target_rng);
    for (std::int64_t b = 0; b < per_epoch; ++b) {
      const std::int64_t lo = b * cfg.batch_size;
      const std::int64_t hi = std::min(target.count(), lo + cfg.batch_size);
      std::vector<std::int64_t> tgt_idx(target_order.begin() + lo, target_order.begin() + hi);
      std::vector<std::int64_t> src_idx(static_cast<std::size_t>(cfg.batch_size));
      for (auto& s : src_idx) s = source_order.next();
      const Batch src = gather(source, src_idx);
      const Batch tgt = gather(target, tgt_idx);

      IterationLog row;
      try {
        row = train_step(model, opt, src, tgt, cfg.lambda);
      } catch (const NumericError&) {
        if (write) {
          porenet::save_checkpoint(snapshot(epoch, iter), outputs.dir / "nan_snapshot.ckpt");
          write_log();
        }
        throw;
      }
      row.iter = iter;
      row.epoch = epoch;
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      result.log.push_back(row);
      if (outputs.on_iteration) outputs.on_iteration(row);
      ++iter;
      if (write && cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0) {
        porenet::save_checkpoint(snapshot(epoch, iter), outputs.dir / ("iter_" + std::to_string(iter) + ".ckpt"));
      }
    }
    if (write) {
      porenet::save_checkpoint(snapshot(epoch + 1, iter),
                               outputs.dir / ("epoch_" + std::to_string(epoch + 1) + ".ckpt"));
      write_log();
    }
  }
  result.checkpoint = snapshot(cfg.epochs, iter);
  if (write) porenet::save_checkpoint(result.checkpoint, outputs.dir / "final.ckpt");
  return result;
}

Checkpoint finetune_last_layer(const Checkpoint& ckpt, const PatchPool& labeled,
                               const FinetuneConfig& cfg, std::vector<IterationLog>* log) {
  cfg.validate();
  if (labeled.count() == 0) throw ConfigError("fine-tuning patch set is empty");
  if (!labeled.labeled()) throw ConfigError("fine-tuning patches need labels");
  if (labeled.size != ckpt.model.pore_config.input_rows ||
      labeled.size != ckpt.model.pore_config.input_cols) {
    throw ConfigError("fine-tuning patches are " + std::to_string(labeled.size) +
                      " px but the checkpoint expects " +
                      std::to_string(ckpt.model.pore_config.input_rows) + "x" +
                      std::to_string(ckpt.model.pore_config.input_cols));
  }
  Checkpoint out{ckpt.model, ckpt.meta};
  out.model.params = ckpt.model.params.clone();
  auto& model = out.model;
  porenet::reinit_output_layer(model, stream(cfg.seed, kFinetuneInit)());

  const auto names = porenet::output_layer_param_names();
  Optimizer opt({OptimizerKind::adam, cfg.learning_rate, 0.9, 0.999, 1e-8});
  auto rng = stream(cfg.seed, kFinetuneOrder);
  std::vector<std::int64_t> order(static_cast<std::size_t>(labeled.count()));
  porenet::PoreForwardOptions fwd;
  fwd.frozen_backbone = true;

  const auto start = std::chrono::steady_clock::now();
  std::int64_t iter = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::int64_t i = 0; i < labeled.count(); ++i) order[static_cast<std::size_t>(i)] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t lo = 0; lo < labeled.count(); lo += cfg.batch_size) {
      const std::int64_t hi = std::min(labeled.count(), lo + cfg.batch_size);
      const Batch b = gather(labeled, std::span(order).subspan(static_cast<std::size_t>(lo),
                                                              static_cast<std::size_t>(hi - lo)));
      model.params.zero_grad();
      Tape<float> tape;
      const auto loss = ndgrad::mse_loss(tape, porenet::forward_pore(tape, model, b.x, fwd), b.y);
      const double l = loss.item();
      if (!std::isfinite(l)) {
        throw NumericError("non-finite fine-tuning loss at step " + std::to_string(iter + 1));
      }
      tape.backward(loss);
      opt.step(model.params, &names);
      model.params.zero_grad();
      if (log != nullptr) {
        IterationLog row;
        row.iter = iter;
        row.epoch = epoch;
        row.l_pore = l;
        row.e = l;
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        log->push_back(row);
      }
      ++iter;
    }
  }
  out.meta.stage = "finetune";
  out.meta.epoch = cfg.epochs;
  out.meta.iteration = iter;
  out.meta.seed = cfg.seed;
  out.meta.learning_rate = cfg.learning_rate;
  return out;
}

double evaluate_mse(PoreModel<float>& model, const PatchPool& labeled, std::int64_t batch_size) {
  if (!labeled.labeled() || labeled.count() == 0) throw ConfigError("evaluation needs labeled patches");
  Tape<float> tape(false);
  porenet::PoreForwardOptions fwd;
  fwd.mode = ndgrad::BnMode::eval;
  double total = 0.0;
  std::vector<std::int64_t> idx;
  for (std::int64_t lo = 0; lo < labeled.count(); lo += batch_size) {
    idx.clear();
    for (std::int64_t i = lo; i < std::min(labeled.count(), lo + batch_size); ++i) idx.push_back(i);
    const Batch b = gather(labeled, idx);
    const auto y = porenet::forward_pore(tape, model, b.x, fwd);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      const double d = static_cast<double>(y.values()[static_cast<std::size_t>(i)]) -
                       static_cast<double>(b.y.values()[static_cast<std::size_t>(i)]);
      total += d * d;
    }
  }
  return total / static_cast<double>(labeled.count() * labeled.size * labeled.size);
}

}  // namespace ddpore::trainer
