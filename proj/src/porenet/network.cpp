#include "ddpore/porenet/network.hpp"

#include <cmath>
#include <random>

#include "ddpore/error.hpp"

namespace ddpore::porenet {

namespace {

std::string stage_name(std::size_t stage) { return "conv" + std::to_string(stage + 2); }

std::string block_prefix(std::size_t stage, std::int64_t block) {
  return stage_name(stage) + "." + std::to_string(block);
}

template <typename T>
class Initializer {
 public:
  Initializer(PoreModel<T>& model, std::uint64_t seed) : model_(model), rng_(seed) {}

  // He-normal: zero mean, variance 2 / fan_in.
  void conv(const std::string& name, std::int64_t cout, std::int64_t cin, std::int64_t k) {
    Grid4<T> w(Shape{cout, cin, k, k});
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(cin * k * k)));
    for (T& v : w.mutable_values()) v = static_cast<T>(dist(rng_));
    model_.params.add(name, ParamGroup::pore, std::move(w));
  }

  void bn(const std::string& prefix, std::int64_t channels) {
    model_.params.add(prefix + ".gamma", ParamGroup::pore,
                      Grid4<T>::filled(Shape{1, channels, 1, 1}, T(1)));
    model_.params.add(prefix + ".beta", ParamGroup::pore, Grid4<T>(Shape{1, channels, 1, 1}));
    model_.bn[prefix] = BatchNormStats<T>(static_cast<std::size_t>(channels));
  }

  // Uniform in +-1/sqrt(fan_in); zero bias.
  void linear(const std::string& prefix, std::int64_t out, std::int64_t in) {
    Grid4<T> w(Shape{out, in, 1, 1});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (T& v : w.mutable_values()) v = static_cast<T>(dist(rng_));
    model_.params.add(prefix + ".weight", ParamGroup::domain, std::move(w));
    model_.params.add(prefix + ".bias", ParamGroup::domain, Grid4<T>(Shape{1, out, 1, 1}));
  }

 private:
  PoreModel<T>& model_;
  std::mt19937_64 rng_;
};

template <typename T>
Grid4<T> conv_bn(Tape<T>& tape, PoreModel<T>& model, const Grid4<T>& x,
                 const std::string& conv, const std::string& bn, BnMode mode) {
  auto y = ndgrad::conv2d_same(tape, x, model.params.get(conv + ".weight"));
  return ndgrad::batch_norm(tape, y, model.params.get(bn + ".gamma"),
                            model.params.get(bn + ".beta"), model.bn.at(bn), mode);
}

template <typename T>
void notify(const PoreForwardOptions& options, std::string_view layer, const Grid4<T>& g) {
  if (options.observer) options.observer(layer, g.shape());
}

}  // namespace

std::vector<std::string> output_layer_param_names() {
  return {"conv6.weight", "bn6.gamma", "bn6.beta"};
}

template <typename T>
PoreModel<T> build_deeprespore(const ResPoreConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PoreModel<T> model;
  model.pore_config = cfg;
  model.head_config = default_head_for(cfg);
  Initializer<T> init(model, seed);

  const auto plan = cfg.channel_plan();
  init.conv("conv1.weight", plan[0], 1, cfg.first_kernel);
  init.bn("bn1", plan[0]);

  std::int64_t in = plan[0];
  for (std::size_t s = 0; s < 4; ++s) {
    const std::int64_t out = plan[s + 1];
    for (std::int64_t b = 0; b < cfg.blocks_per_stage; ++b) {
      const std::string p = block_prefix(s, b);
      init.conv(p + ".conv_a.weight", out, in, cfg.block_kernel);
      init.bn(p + ".bn_a", out);
      init.conv(p + ".conv_b.weight", out, out, cfg.block_kernel);
      init.bn(p + ".bn_b", out);
      if (in != out) {
        init.conv(p + ".proj.weight", out, in, 1);
        init.bn(p + ".proj_bn", out);
      }
      in = out;
    }
  }
  init.conv("conv6.weight", 1, in, cfg.block_kernel);
  init.bn("bn6", 1);
  return model;
}

template <typename T>
void add_domain_head(PoreModel<T>& model, const DomainHeadConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (model.has_head) throw ConfigError("model already has a domain head");
  const ResPoreConfig& pc = model.pore_config;
  if (cfg.input_dim != pc.input_rows * pc.input_cols) {
    throw ConfigError("domain head input_dim " + std::to_string(cfg.input_dim) +
                      " does not match the " + std::to_string(pc.input_rows) + "x" +
                      std::to_string(pc.input_cols) + " pore map");
  }
  Initializer<T> init(model, seed);
  std::int64_t in = cfg.input_dim;
  for (std::size_t i = 0; i < cfg.hidden_dims.size(); ++i) {
    init.linear("domain.fc" + std::to_string(i + 1), cfg.hidden_dims[i], in);
    in = cfg.hidden_dims[i];
  }
  init.linear("domain.out", DomainHeadConfig::kClasses, in);
  model.head_config = cfg;
  model.has_head = true;
}

template <typename T>
PoreModel<T> build_deep_domain_pore(const ResPoreConfig& pore_cfg,
                                    const DomainHeadConfig& head_cfg, std::uint64_t seed) {
  PoreModel<T> model = build_deeprespore<T>(pore_cfg, seed);
  // Separate stream so the backbone initialization does not depend on the head.
  add_domain_head(model, head_cfg, seed ^ 0x9e3779b97f4a7c15ULL);
  return model;
}

template <typename T>
void reinit_output_layer(PoreModel<T>& model, std::uint64_t seed) {
  PoreModel<T> fresh;
  fresh.pore_config = model.pore_config;
  Initializer<T> init(fresh, seed);
  const auto& w = model.params.get("conv6.weight");
  init.conv("conv6.weight", w.shape().n, w.shape().c, w.shape().h);
  init.bn("bn6", 1);
  for (const auto& name : output_layer_param_names()) {
    auto dst = model.params.get(name).mutable_values();
    auto src = fresh.params.get(name).values();
    std::copy(src.begin(), src.end(), dst.begin());
    model.params.get(name).clear_grad();
  }
  model.bn.at("bn6") = fresh.bn.at("bn6");
}

template <typename T>
Grid4<T> forward_residual_block(Tape<T>& tape, PoreModel<T>& model, const Grid4<T>& x,
                                const std::string& prefix, BnMode mode) {
  const std::string& p = prefix;
  auto a = ndgrad::relu(tape, conv_bn(tape, model, x, p + ".conv_a", p + ".bn_a", mode));
  auto r = conv_bn(tape, model, a, p + ".conv_b", p + ".bn_b", mode);
  auto skip = model.params.contains(p + ".proj.weight")
                  ? conv_bn(tape, model, x, p + ".proj", p + ".proj_bn", mode)
                  : x;
  return ndgrad::relu(tape, ndgrad::residual_add(tape, r, skip));
}

template <typename T>
Grid4<T> forward_backbone(Tape<T>& tape, PoreModel<T>& model, const Grid4<T>& x,
                          const PoreForwardOptions& options) {
  const ResPoreConfig& cfg = model.pore_config;
  const Shape xs = x.shape();
  if (xs.c != 1 || xs.h != cfg.input_rows || xs.w != cfg.input_cols) {
    throw ShapeError("pore network expects n x 1 x " + std::to_string(cfg.input_rows) + " x " +
                     std::to_string(cfg.input_cols) + " input, got " + xs.str());
  }
  Tape<T> silent(false);
  Tape<T>& t = options.frozen_backbone ? silent : tape;
  const BnMode mode = options.frozen_backbone ? BnMode::eval : options.mode;

  auto h = ndgrad::relu(t, conv_bn(t, model, x, "conv1", "bn1", mode));
  notify(options, "conv1", h);

  for (std::size_t s = 0; s < 4; ++s) {
    for (std::int64_t b = 0; b < cfg.blocks_per_stage; ++b) {
      const std::string p = block_prefix(s, b);
      h = forward_residual_block(t, model, h, p, mode);
      notify(options, p, h);
    }
  }
  return h;
}

template <typename T>
Grid4<T> forward_output_layer(Tape<T>& tape, PoreModel<T>& model, const Grid4<T>& features,
                              BnMode mode) {
  return ndgrad::relu(tape, conv_bn(tape, model, features, "conv6", "bn6", mode));
}

template <typename T>
Grid4<T> forward_pore(Tape<T>& tape, PoreModel<T>& model, const Grid4<T>& x,
                      const PoreForwardOptions& options) {
  auto features = forward_backbone(tape, model, x, options);
  auto y = forward_output_layer(tape, model, features, options.mode);
  notify(options, "conv6", y);
  return y;
}

template <typename T>
Grid4<T> forward_domain_plain(Tape<T>& tape, const PoreModel<T>& model,
                              const Grid4<T>& pore_map) {
  if (!model.has_head) throw ConfigError("model has no domain head");
  const DomainHeadConfig& cfg = model.head_config;
  if (pore_map.shape().sample() != cfg.input_dim) {
    throw ShapeError("domain head expects " + std::to_string(cfg.input_dim) +
                     " values per sample, got " + pore_map.shape().str());
  }
  auto h = ndgrad::flatten(tape, pore_map);
  for (std::size_t i = 0; i < cfg.hidden_dims.size(); ++i) {
    const std::string p = "domain.fc" + std::to_string(i + 1);
    h = ndgrad::relu(tape, ndgrad::linear(tape, h, model.params.get(p + ".weight"),
                                          model.params.get(p + ".bias")));
  }
  auto logits = ndgrad::linear(tape, h, model.params.get("domain.out.weight"),
                               model.params.get("domain.out.bias"));
  return ndgrad::softmax_rows(tape, logits);
}

template <typename T>
Grid4<T> forward_domain(Tape<T>& tape, const PoreModel<T>& model, const Grid4<T>& pore_map,
                        T lambda) {
  return forward_domain_plain(tape, model, ndgrad::gradient_reversal(tape, pore_map, lambda));
}

#define DDPORE_INSTANTIATE_NETWORK(T)                                                         \
  template PoreModel<T> build_deeprespore<T>(const ResPoreConfig&, std::uint64_t);            \
  template void add_domain_head<T>(PoreModel<T>&, const DomainHeadConfig&, std::uint64_t);    \
  template PoreModel<T> build_deep_domain_pore<T>(const ResPoreConfig&,                       \
                                                  const DomainHeadConfig&, std::uint64_t);    \
  template void reinit_output_layer<T>(PoreModel<T>&, std::uint64_t);                         \
  template Grid4<T> forward_pore<T>(Tape<T>&, PoreModel<T>&, const Grid4<T>&,                 \
                                    const PoreForwardOptions&);                               \
  template Grid4<T> forward_residual_block<T>(Tape<T>&, PoreModel<T>&, const Grid4<T>&,      \
                                              const std::string&, BnMode);                    \
  template Grid4<T> forward_backbone<T>(Tape<T>&, PoreModel<T>&, const Grid4<T>&,             \
                                        const PoreForwardOptions&);                           \
  template Grid4<T> forward_output_layer<T>(Tape<T>&, PoreModel<T>&, const Grid4<T>&, BnMode); \
  template Grid4<T> forward_domain<T>(Tape<T>&, const PoreModel<T>&, const Grid4<T>&, T);     \
  template Grid4<T> forward_domain_plain<T>(Tape<T>&, const PoreModel<T>&, const Grid4<T>&);

DDPORE_INSTANTIATE_NETWORK(float)
DDPORE_INSTANTIATE_NETWORK(double)

#undef DDPORE_INSTANTIATE_NETWORK

}  // namespace ddpore::porenet
