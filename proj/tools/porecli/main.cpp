// porecli: synth, train, finetune, detect, eval and roc over the ddpore
// library. Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ddpore/dataprep/dataset.hpp"
#include "ddpore/dataprep/synth.hpp"
#include "ddpore/detector/detector.hpp"
#include "ddpore/error.hpp"
#include "ddpore/evalkit/evalkit.hpp"
#include "ddpore/io.hpp"
#include "ddpore/porenet/checkpoint.hpp"
#include "ddpore/trainer/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// A required value absent from both the config file and the flags.
struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(const std::string& value, const std::string& key, const std::string& flag_name) {
  if (value.empty()) throw MissingInput(flag_name + " is required (or set \"" + key + "\" in --config)");
}

// Shared by every command.
struct Common {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON file; flags override its values");
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--threads", c.threads, "Worker threads for image inference")->check(CLI::PositiveNumber);
  cmd->add_option("--out", c.out, "Output directory")->required();
}

// Overlays `patch` onto `base`. Keys absent from `base` are rejected;
// nested objects merge recursively.
void overlay(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ddpore::ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where + "." + key;
    if (!base.contains(key)) throw ddpore::ConfigError(where + ": unknown key '" + key + "'");
    if (base[key].is_object() && value.is_object()) {
      overlay(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
}

// defaults <- --config file <- --seed/--threads <- command flags.
json resolve(json defaults, const Common& c, const std::map<std::string, json>& flags) {
  if (c.config) {
    json file;
    try {
      file = json::parse(ddpore::read_text_file(*c.config));
    } catch (const json::parse_error& e) {
      throw ddpore::ConfigError(*c.config + ": " + e.what());
    }
    overlay(defaults, file, "config");
  }
  if (c.seed) defaults["seed"] = *c.seed;
  if (c.threads) defaults["threads"] = *c.threads;
  for (const auto& [path, value] : flags) {
    json* node = &defaults;
    std::size_t start = 0;
    for (std::size_t dot = path.find('.'); dot != std::string::npos; dot = path.find('.', start)) {
      node = &(*node)[path.substr(start, dot - start)];
      start = dot + 1;
    }
    (*node)[path.substr(start)] = value;
  }
  return defaults;
}

template <typename T>
void flag(std::map<std::string, json>& flags, const std::string& key, const std::optional<T>& v) {
  if (v) flags[key] = *v;
}

template <typename T>
T field(const json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ddpore::ConfigError("config." + key + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { ddpore::write_file_atomic(path, j.dump(2) + "\n"); }

void finish(const fs::path& out, const json& resolved, json summary) {
  write_json(out / "resolved_config.json", resolved);
  write_json(out / "summary.json", summary);
}

int threads_of(const json& r) {
  const int t = field<int>(r, "threads");
  if (t < 1) throw ddpore::ConfigError("config.threads must be >= 1");
  return t;
}

std::vector<ddpore::dataprep::DatasetImage> labeled_images(const std::string& manifest) {
  auto data = ddpore::dataprep::load_dataset(fs::path(manifest));
  for (const auto& d : data) {
    if (!d.pores) {
      throw ddpore::ConfigError(manifest + ": image '" + d.image.id + "' has no ground truth pores");
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// synth

struct SynthFlags {
  std::optional<std::int64_t> count, rows, cols;
  std::optional<std::string> format;
};

ddpore::dataprep::SynthConfig default_target() {
  ddpore::dataprep::SynthConfig t;
  t.ridge_period = 14.5;
  t.pore_radius_min = 2.4;
  t.pore_radius_max = 3.1;
  return t;
}

int run_synth(const Common& c, const SynthFlags& f) {
  json defaults{{"seed", 0},
                {"threads", 1},
                {"format", "png"},
                {"source", ddpore::dataprep::SynthConfig{}},
                {"target", default_target()}};
  std::map<std::string, json> flags;
  for (const char* d : {"source", "target"}) {
    flag(flags, std::string(d) + ".count", f.count);
    flag(flags, std::string(d) + ".rows", f.rows);
    flag(flags, std::string(d) + ".cols", f.cols);
  }
  flag(flags, "format", f.format);
  const json r = resolve(defaults, c, flags);

  const auto seed = field<std::uint64_t>(r, "seed");
  threads_of(r);
  const auto format = field<std::string>(r, "format");
  if (format != "png" && format != "pgm") throw ddpore::ConfigError("config.format must be 'png' or 'pgm'");
  const auto src = r.at("source").get<ddpore::dataprep::SynthConfig>();
  const auto tgt = r.at("target").get<ddpore::dataprep::SynthConfig>();
  src.validate();
  tgt.validate();

  const auto pair = ddpore::dataprep::synth_domain_pair(src, tgt, seed);
  const fs::path out(c.out);
  json summary{{"command", "synth"}, {"seed", seed}};
  std::vector<ddpore::dataprep::ManifestEntry> all;
  auto emit = [&](const std::vector<ddpore::dataprep::SynthImage>& imgs, ddpore::dataprep::Domain d) {
    const std::string name(ddpore::dataprep::to_string(d));
    fs::create_directories(out / name);
    std::vector<ddpore::dataprep::ManifestEntry> entries;
    std::int64_t pores = 0;
    for (const auto& s : imgs) {
      const fs::path img = out / name / (s.image.id + "." + format);
      const fs::path gt = out / name / (s.image.id + ".pores");
      ddpore::dataprep::save_image(s.image.pixels, img);
      ddpore::dataprep::save_pores(s.pores, gt);
      entries.push_back({img, gt, d});
      pores += static_cast<std::int64_t>(s.pores.size());
    }
    ddpore::dataprep::save_manifest(entries, out / (name + ".json"));
    all.insert(all.end(), entries.begin(), entries.end());
    summary[name] = {{"images", imgs.size()}, {"pores", pores}, {"manifest", name + ".json"}};
  };
  emit(pair.source, ddpore::dataprep::Domain::source);
  emit(pair.target, ddpore::dataprep::Domain::target);
  ddpore::dataprep::save_manifest(all, out / "manifest.json");
  json resolved = r;
  resolved["source"] = src;
  resolved["target"] = tgt;
  finish(out, resolved, summary);
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainFlags {
  std::optional<std::string> source, target;
  std::optional<double> lambda, lr, width;
  std::optional<std::int64_t> epochs, batch_size;
  std::optional<std::string> optimizer;
};

int run_train(const Common& c, const TrainFlags& f) {
  json defaults{{"seed", 0},
                {"threads", 1},
                {"source", ""},
                {"target", ""},
                {"train", ddpore::trainer::TrainConfig{}}};
  std::map<std::string, json> flags;
  flag(flags, "source", f.source);
  flag(flags, "target", f.target);
  flag(flags, "train.lambda", f.lambda);
  flag(flags, "train.learning_rate", f.lr);
  flag(flags, "train.network.width_multiplier", f.width);
  flag(flags, "train.epochs", f.epochs);
  flag(flags, "train.batch_size", f.batch_size);
  flag(flags, "train.optimizer", f.optimizer);
  json r = resolve(defaults, c, flags);

  const auto seed = field<std::uint64_t>(r, "seed");
  threads_of(r);
  auto cfg = r.at("train").get<ddpore::trainer::TrainConfig>();
  cfg.seed = seed;
  cfg.validate();
  const auto source_manifest = field<std::string>(r, "source");
  const auto target_manifest = field<std::string>(r, "target");
  require(source_manifest, "source", "--source");
  require(target_manifest, "target", "--target");

  const auto source_images = labeled_images(source_manifest);
  const auto target_images = ddpore::dataprep::load_dataset(fs::path(target_manifest));
  const auto source = ddpore::trainer::labeled_pool(source_images, cfg.source_step, cfg.network.input_rows);
  const auto target = ddpore::trainer::unlabeled_pool(target_images, cfg.network.input_rows);
  if (cfg.network.input_rows != cfg.network.input_cols) {
    throw ddpore::ConfigError("config.train.network: patches must be square");
  }

  auto model = ddpore::porenet::build_deep_domain_pore<float>(
      cfg.network, ddpore::porenet::default_head_for(cfg.network), seed);
  const fs::path out(c.out);
  const std::int64_t per_epoch = ddpore::trainer::iterations_per_epoch(target.count(), cfg.batch_size);
  ddpore::trainer::TrainOutputs outputs;
  outputs.dir = out;
  outputs.on_iteration = [&](const ddpore::trainer::IterationLog& row) {
    if ((row.iter + 1) % 10 == 0 || row.iter + 1 == per_epoch * cfg.epochs) {
      std::fprintf(stderr, "iter %lld/%lld epoch %lld L_pore %.6g L_d_src %.4g L_d_tgt %.4g\n",
                   static_cast<long long>(row.iter + 1), static_cast<long long>(per_epoch * cfg.epochs),
                   static_cast<long long>(row.epoch), row.l_pore, row.l_d_src, row.l_d_tgt);
    }
  };
  const auto result = ddpore::trainer::train(std::move(model), source, target, cfg, outputs);

  r["train"] = cfg;
  const auto& last = result.log.back();
  json summary{{"command", "train"},
               {"seed", seed},
               {"source_patches", source.count()},
               {"target_patches", target.count()},
               {"iterations_per_epoch", per_epoch},
               {"iterations", result.log.size()},
               {"final", {{"L_pore", last.l_pore}, {"L_d_src", last.l_d_src}, {"L_d_tgt", last.l_d_tgt}, {"E", last.e}}},
               {"checkpoint", "final.ckpt"},
               {"log", "train_log.csv"}};
  finish(out, r, summary);
  return 0;
}

// ---------------------------------------------------------------------------
// finetune

struct FinetuneFlags {
  std::optional<std::string> checkpoint, manifest;
  std::optional<double> lr;
  std::optional<std::int64_t> epochs, batch_size;
};

int run_finetune(const Common& c, const FinetuneFlags& f) {
  json defaults{{"seed", 0},
                {"threads", 1},
                {"checkpoint", ""},
                {"manifest", ""},
                {"finetune", ddpore::trainer::FinetuneConfig{}}};
  std::map<std::string, json> flags;
  flag(flags, "checkpoint", f.checkpoint);
  flag(flags, "manifest", f.manifest);
  flag(flags, "finetune.learning_rate", f.lr);
  flag(flags, "finetune.epochs", f.epochs);
  flag(flags, "finetune.batch_size", f.batch_size);
  json r = resolve(defaults, c, flags);

  const auto seed = field<std::uint64_t>(r, "seed");
  threads_of(r);
  auto cfg = r.at("finetune").get<ddpore::trainer::FinetuneConfig>();
  cfg.seed = seed;
  cfg.validate();
  const auto ckpt_path = field<std::string>(r, "checkpoint");
  const auto manifest = field<std::string>(r, "manifest");
  require(ckpt_path, "checkpoint", "--checkpoint");
  require(manifest, "manifest", "--manifest");

  const auto ckpt = ddpore::porenet::load_checkpoint(ckpt_path);
  const auto pool = ddpore::trainer::labeled_pool(labeled_images(manifest), cfg.patch_step,
                                                  ckpt.model.pore_config.input_rows);
  std::vector<ddpore::trainer::IterationLog> log;
  const auto tuned = ddpore::trainer::finetune_last_layer(ckpt, pool, cfg, &log);
  const fs::path out(c.out);
  fs::create_directories(out);
  ddpore::porenet::save_checkpoint(tuned, out / "finetuned.ckpt");
  ddpore::write_file_atomic(out / "finetune_log.csv", ddpore::trainer::format_log(log));
  r["finetune"] = cfg;
  finish(out, r,
         {{"command", "finetune"},
          {"seed", seed},
          {"patches", pool.count()},
          {"iterations", log.size()},
          {"final_mse", log.back().l_pore},
          {"checkpoint", "finetuned.ckpt"}});
  return 0;
}

// ---------------------------------------------------------------------------
// detect

struct DetectFlags {
  std::optional<std::string> checkpoint, manifest;
  std::vector<std::string> images;
  std::optional<double> th;
  bool dump_map = false;
};

int run_detect(const Common& c, const DetectFlags& f) {
  json defaults{{"seed", 0},     {"threads", 1}, {"checkpoint", ""},
                {"manifest", ""}, {"images", json::array()}, {"th", 0.5},
                {"dump_map", false}};
  std::map<std::string, json> flags;
  flag(flags, "checkpoint", f.checkpoint);
  flag(flags, "manifest", f.manifest);
  flag(flags, "th", f.th);
  if (!f.images.empty()) flags["images"] = f.images;
  if (f.dump_map) flags["dump_map"] = true;
  const json r = resolve(defaults, c, flags);

  const int threads = threads_of(r);
  const auto ckpt_path = field<std::string>(r, "checkpoint");
  require(ckpt_path, "checkpoint", "--checkpoint");
  const auto th = field<double>(r, "th");
  const auto dump = field<bool>(r, "dump_map");
  std::vector<ddpore::dataprep::FingerprintImage> inputs;
  for (const auto& p : field<std::vector<std::string>>(r, "images")) inputs.push_back(ddpore::dataprep::load_image(p));
  if (const auto m = field<std::string>(r, "manifest"); !m.empty()) {
    for (auto& d : ddpore::dataprep::load_dataset(fs::path(m))) inputs.push_back(std::move(d.image));
  }
  if (inputs.empty()) throw MissingInput("--image or --manifest is required");

  auto ckpt = ddpore::porenet::load_checkpoint(ckpt_path);
  std::vector<ddpore::dataprep::Image8> pixels;
  for (const auto& in : inputs) pixels.push_back(in.pixels);
  const auto maps = ddpore::detector::predict_maps(ckpt.model, pixels, threads);

  const fs::path out(c.out);
  fs::create_directories(out);
  json per = json::array();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto found = ddpore::detector::local_maxima(maps[i], th);
    const std::string stem = inputs[i].id.empty() ? "image" + std::to_string(i) : inputs[i].id;
    ddpore::dataprep::save_pores(ddpore::detector::to_pore_list(found), out / (stem + ".pores"));
    json item{{"image", stem}, {"pores", found.size()}, {"file", stem + ".pores"}};
    if (dump) {
      const double scale = ddpore::detector::save_intensity_map(maps[i], out / (stem + "_map.pgm"));
      item["map"] = stem + "_map.pgm";
      item["map_scale"] = scale;
    }
    per.push_back(item);
  }
  finish(out, r, {{"command", "detect"}, {"th", th}, {"images", per}});
  return 0;
}

// ---------------------------------------------------------------------------
// eval and roc

struct EvalFlags {
  std::optional<std::string> checkpoint, manifest, grid;
  std::optional<double> th, target_rf;
};

struct EvalInputs {
  ddpore::porenet::Checkpoint ckpt;
  std::vector<ddpore::detector::IntensityMap> maps;
  std::vector<ddpore::dataprep::PoreList> gt;
};

EvalInputs eval_inputs(const json& r) {
  const auto ckpt_path = field<std::string>(r, "checkpoint");
  const auto manifest = field<std::string>(r, "manifest");
  require(ckpt_path, "checkpoint", "--checkpoint");
  require(manifest, "manifest", "--manifest");
  EvalInputs in{ddpore::porenet::load_checkpoint(ckpt_path), {}, {}};
  std::vector<ddpore::dataprep::Image8> pixels;
  for (const auto& d : labeled_images(manifest)) {
    pixels.push_back(d.image.pixels);
    in.gt.push_back(*d.pores);
  }
  in.maps = ddpore::detector::predict_maps(in.ckpt.model, pixels, threads_of(r));
  return in;
}

int run_eval(const Common& c, const EvalFlags& f) {
  json defaults{{"seed", 0}, {"threads", 1}, {"checkpoint", ""}, {"manifest", ""}, {"th", 0.5}};
  std::map<std::string, json> flags;
  flag(flags, "checkpoint", f.checkpoint);
  flag(flags, "manifest", f.manifest);
  flag(flags, "th", f.th);
  const json r = resolve(defaults, c, flags);
  const auto th = field<double>(r, "th");
  const auto in = eval_inputs(r);
  const std::vector<double> grid{th};
  const auto curve = ddpore::evalkit::roc_from_maps(in.maps, in.gt, grid);
  const fs::path out(c.out);
  fs::create_directories(out);
  const auto report = ddpore::evalkit::to_json(curve.points.front());
  write_json(out / "report.json", report);
  finish(out, r, {{"command", "eval"}, {"th", th}, {"micro", report["micro"]}, {"macro", report["macro"]}});
  return 0;
}

int run_roc(const Common& c, const EvalFlags& f) {
  json defaults{{"seed", 0},          {"threads", 1},       {"checkpoint", ""},
                {"manifest", ""},     {"grid", "0.01:0.99:0.01"}, {"target_rf", 0.19},
                {"aggregation", "micro"}};
  std::map<std::string, json> flags;
  flag(flags, "checkpoint", f.checkpoint);
  flag(flags, "manifest", f.manifest);
  flag(flags, "grid", f.grid);
  flag(flags, "target_rf", f.target_rf);
  const json r = resolve(defaults, c, flags);
  const auto grid = ddpore::evalkit::parse_grid(field<std::string>(r, "grid"));
  const auto agg_name = field<std::string>(r, "aggregation");
  if (agg_name != "micro" && agg_name != "macro") {
    throw ddpore::ConfigError("config.aggregation must be 'micro' or 'macro'");
  }
  const auto agg = agg_name == "micro" ? ddpore::evalkit::Aggregation::micro : ddpore::evalkit::Aggregation::macro;
  const auto in = eval_inputs(r);
  const auto curve = ddpore::evalkit::roc_from_maps(in.maps, in.gt, grid);
  const auto op = ddpore::evalkit::operating_point(curve, field<double>(r, "target_rf"), agg);

  const fs::path out(c.out);
  fs::create_directories(out);
  ddpore::write_file_atomic(out / "roc.csv", ddpore::evalkit::roc_csv(curve));
  json points = json::array();
  for (const auto& p : curve.points) points.push_back(ddpore::evalkit::to_json(p));
  const json op_json{{"index", op.index}, {"th", op.threshold}, {"R_T", op.rt},
                     {"R_F", op.rf},      {"F", op.f},          {"clamped", op.clamped}};
  write_json(out / "roc.json", {{"operating_point", op_json}, {"points", points}});
  if (op.clamped) std::fprintf(stderr, "warning: target R_F outside the curve; nearest endpoint used\n");
  finish(out, r, {{"command", "roc"}, {"points", curve.points.size()}, {"operating_point", op_json}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pore detection with adversarial domain adaptation"};
  app.require_subcommand(1);

  Common common;
  SynthFlags synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic source/target dataset");
  add_common(synth_cmd, common);
  synth_cmd->add_option("--count", synth.count, "Images per domain");
  synth_cmd->add_option("--rows", synth.rows, "Image height");
  synth_cmd->add_option("--cols", synth.cols, "Image width");
  synth_cmd->add_option("--format", synth.format, "png or pgm");

  TrainFlags train;
  auto* train_cmd = app.add_subcommand("train", "Adversarial training");
  add_common(train_cmd, common);
  train_cmd->add_option("--source", train.source, "Labeled source manifest");
  train_cmd->add_option("--target", train.target, "Target manifest (labels unused)");
  train_cmd->add_option("--lambda", train.lambda, "Domain adaptation factor");
  train_cmd->add_option("--lr", train.lr, "Learning rate");
  train_cmd->add_option("--width", train.width, "Channel width multiplier");
  train_cmd->add_option("--epochs", train.epochs, "Epochs over the target patches");
  train_cmd->add_option("--batch-size", train.batch_size, "Patches per domain per iteration");
  train_cmd->add_option("--optimizer", train.optimizer, "adam or sgd");

  FinetuneFlags ft;
  auto* ft_cmd = app.add_subcommand("finetune", "Retrain the output layer on labeled patches");
  add_common(ft_cmd, common);
  ft_cmd->add_option("--checkpoint", ft.checkpoint, "Trained checkpoint");
  ft_cmd->add_option("--manifest", ft.manifest, "Labeled images of the new domain");
  ft_cmd->add_option("--lr", ft.lr, "Learning rate");
  ft_cmd->add_option("--epochs", ft.epochs, "Epochs");
  ft_cmd->add_option("--batch-size", ft.batch_size, "Patches per iteration");

  DetectFlags det;
  auto* det_cmd = app.add_subcommand("detect", "Detect pores in images");
  add_common(det_cmd, common);
  det_cmd->add_option("--checkpoint", det.checkpoint, "Checkpoint");
  det_cmd->add_option("--image", det.images, "Input image (repeatable)");
  det_cmd->add_option("--manifest", det.manifest, "Manifest of input images");
  det_cmd->add_option("--th", det.th, "Threshold on local maxima");
  det_cmd->add_flag("--dump-map", det.dump_map, "Also write 16-bit PGM intensity maps");

  EvalFlags ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score detections at one threshold");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint");
  eval_cmd->add_option("--manifest", ev.manifest, "Images with ground truth");
  eval_cmd->add_option("--th", ev.th, "Threshold");

  EvalFlags roc;
  auto* roc_cmd = app.add_subcommand("roc", "Sweep the threshold");
  add_common(roc_cmd, common);
  roc_cmd->add_option("--checkpoint", roc.checkpoint, "Checkpoint");
  roc_cmd->add_option("--manifest", roc.manifest, "Images with ground truth");
  roc_cmd->add_option("--grid", roc.grid, "start:stop:step");
  roc_cmd->add_option("--target-rf", roc.target_rf, "R_F of the reported operating point");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "synth") return run_synth(common, synth);
    if (name == "train") return run_train(common, train);
    if (name == "finetune") return run_finetune(common, ft);
    if (name == "detect") return run_detect(common, det);
    if (name == "eval") return run_eval(common, ev);
    return run_roc(common, roc);
  } catch (const MissingInput& e) {
    std::fprintf(stderr, "porecli %s: %s\nRun with --help for more information.\n", name.c_str(), e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "porecli %s: error: %s\n", name.c_str(), e.what());
    return kExitRuntime;
  }
}
