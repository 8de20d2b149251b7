#include "drgrade/pipeline.hpp"

#include <Eigen/Core>
#include <fmt/format.h>
#include <opencv2/core/version.hpp>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "drgrade/checkpoint.hpp"
#include "drgrade/errors.hpp"
#include "drgrade/metrics.hpp"
#include "drgrade/parallel.hpp"
#include "drgrade/random.hpp"
#include "yaml_util.hpp"

namespace drgrade {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using detail::check_keys;
using detail::get;

constexpr const char* kStageNames[] = {"preprocess", "split", "augment", "train", "extract-features",
                                       "blend-train", "predict", "evaluate"};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write " + tmp.string());
    os << text;
    if (!os) throw FormatError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string ranges_canonical(const AugmentRanges& r) {
  return fmt::format("rot={:.17g};shear={:.17g};zoom={:.17g};crop={:.17g}-{:.17g};tx={:.17g};alpha={:.17g}",
                     r.rotation_max, r.shear_max, r.zoom_max, r.crop_min, r.crop_max, r.translate_max, r.alpha_std);
}

std::string schedule_canonical(const Schedule& s) {
  std::string out;
  for (const auto& [e, lr] : s) out += fmt::format("{}:{:.17g},", e, lr);
  return out;
}

// Settings consumed by each stage. Changing one invalidates that stage and,
// through the stage.done chain, everything after it.
std::string stage_settings(const RunConfig& c, Stage s) {
  switch (s) {
    case Stage::preprocess:
      return fmt::format("radius={:.17g};size={};gray={:.17g};clip={:.17g};blur={:.17g}", c.preprocess.target_radius,
                         c.preprocess.output_size, c.preprocess.gray_level, c.preprocess.clip_fraction,
                         c.preprocess.blur_divisor);
    case Stage::split: return fmt::format("vpc={};seed={}", c.validation_per_class, c.seed);
    case Stage::augment:
      return fmt::format("mult={};{};pca={};seed={}", fmt::join(c.multipliers, ","), ranges_canonical(c.augment_ranges),
                         c.pca_samples, c.seed);
    case Stage::train:
      return fmt::format("{}|sched={};m={:.17g};wd={:.17g};bs={};epochs={};mse={};seed={};master={}",
                         c.network.canonical(), schedule_canonical(c.train.schedule), c.train.momentum,
                         c.train.weight_decay, c.train.batch_size, c.train.total_epochs, c.train.track_train_mse,
                         c.train.seed, c.seed);
    case Stage::extract_features:
      return fmt::format("passes={};augment={};ckpt={};{};seed={}", c.feature_passes, c.feature_augment,
                         c.feature_checkpoint, ranges_canonical(c.augment_ranges), c.seed);
    case Stage::blend_train:
      return fmt::format("epochs={};bs={};lr={:.17g};wd={:.17g};seed={};master={}", c.blend.epochs,
                         c.blend.batch_size, c.blend.lr, c.blend.weight_decay, c.blend.seed, c.seed);
    case Stage::predict: return "";
    case Stage::evaluate: return "auc=" + c.auc_binarization;
  }
  return "";
}

// Files whose digests go into stage.done; the next stage's inputs hash this
// record, so these are what downstream stages depend on.
std::vector<std::string> stage_outputs(Stage s, bool has_validation) {
  std::vector<std::string> out;
  switch (s) {
    case Stage::preprocess: out = {"manifest.csv", "rejected.csv"}; break;
    case Stage::split: out = {"train.csv", "validation.csv"}; break;
    case Stage::augment: out = {"train_manifest.csv", "augmented_manifest.csv", "color_pca.json"}; break;
    case Stage::train: out = {"best.ckpt", "final.ckpt", "channel_stats.json"}; break;
    case Stage::extract_features: out = {"train.feat"}; break;
    case Stage::blend_train: out = {"blend.ckpt"}; break;
    case Stage::predict: out = {"train_predictions.csv"}; break;
    case Stage::evaluate: out = {"report_train.json", "report_train.txt"}; break;
  }
  if (has_validation) {
    if (s == Stage::extract_features) out.push_back("validation.feat");
    if (s == Stage::predict) out.push_back("validation_predictions.csv");
    if (s == Stage::evaluate) {
      out.push_back("report_validation.json");
      out.push_back("report_validation.txt");
    }
  }
  return out;
}

// Raw inputs are identified by manifest text plus (path, size) per image;
// hashing every raw photograph would dominate the run.
std::uint64_t raw_input_digest(const RunConfig& c) {
  std::uint64_t h = file_digest(c.manifest);
  const auto m = load_manifest(c.manifest);
  for (const auto& r : m.rows) {
    const auto p = m.resolve(r);
    std::error_code ec;
    const auto size = fs::file_size(p, ec);
    h = fnv1a(fmt::format("{}:{}", r.image_path, ec ? -1 : static_cast<long long>(size)), h);
  }
  return h;
}

struct StageContext {
  const RunConfig& cfg;
  fs::path root;
  fs::path dir(Stage s) const { return root / kStageNames[std::size_t(s)]; }
};

std::uint64_t stage_seed(const RunConfig& c, Stage s) { return derive_seed(c.seed, std::uint64_t(s) + 1); }

void write_predictions(const fs::path& path, const FeatureSet& set, const Network<float>& blend) {
  std::string text = "image_id,score\n";
  if (set.size() > 0) {
    const auto scores = blend.predict(set.matrix());
    for (std::size_t i = 0; i < set.size(); ++i) text += fmt::format("{},{:.9g}\n", csv_field(set.ids[i]), scores[i]);
  }
  write_text(path, text);
}

void write_report(const fs::path& dir, const std::string& name, const EvalReport& report) {
  write_text(dir / ("report_" + name + ".json"), report_to_json(report).dump(2) + "\n");
  write_text(dir / ("report_" + name + ".txt"), report_to_text(report));
}

void run_stage(const StageContext& ctx, Stage stage) {
  const RunConfig& c = ctx.cfg;
  const fs::path out = ctx.dir(stage);
  switch (stage) {
    case Stage::preprocess: {
      const auto res = preprocess_manifest(load_manifest(c.manifest), out, c.preprocess);
      spdlog::info("preprocess: {} images kept, {} rejected", res.manifest.rows.size(), res.rejected.size());
      if (res.manifest.rows.empty()) throw ConfigError("preprocess: every image was rejected");
      break;
    }
    case Stage::split: {
      const auto m = load_manifest(ctx.dir(Stage::preprocess) / "manifest.csv");
      DatasetManifest labeled{m.base_dir, {}};
      for (const auto& r : m.rows)
        if (r.grade >= 0) labeled.rows.push_back(r);
      const auto split = split_dataset(labeled, c.validation_per_class, stage_seed(c, stage));
      save_manifest(split.train, out / "train.csv");
      save_manifest(split.validation, out / "validation.csv");
      spdlog::info("split: {} train, {} validation", split.train.rows.size(), split.validation.rows.size());
      break;
    }
    case Stage::augment: {
      AugmentCorpusOptions opts;
      opts.multipliers = c.multipliers;
      opts.ranges = c.augment_ranges;
      opts.pca_samples = c.pca_samples;
      opts.seed = stage_seed(c, stage);
      const auto corpus = augment_corpus(load_manifest(ctx.dir(Stage::split) / "train.csv"), out, opts);
      spdlog::info("augment: {} training images", corpus.manifest.rows.size());
      break;
    }
    case Stage::train: {
      auto train = load_image_set(load_manifest(ctx.dir(Stage::augment) / "train_manifest.csv"));
      const auto stats = channel_stats(train);
      write_text(out / "channel_stats.json", stats.to_json().dump(2) + "\n");
      standardize(train, stats);
      auto validation = load_image_set(load_manifest(ctx.dir(Stage::split) / "validation.csv"));
      if (validation.size() > 0) standardize(validation, stats);
      auto net = build_main_network(c.network, Init::orthogonal, derive_seed(stage_seed(c, stage), 0));
      TrainOutputs outputs;
      outputs.dir = out;
      outputs.resume = true;
      train_main(net, train, validation.size() > 0 ? &validation : nullptr, c.train, outputs);
      break;
    }
    case Stage::extract_features: {
      const fs::path tdir = ctx.dir(Stage::train);
      const auto net = load_network(c.network, tdir / (c.feature_checkpoint + ".ckpt"));
      const auto stats = ChannelStats::from_json(read_json(tdir / "channel_stats.json"));
      const auto pca = ColorPca::from_json(read_json(ctx.dir(Stage::augment) / "color_pca.json"));
      FeatureOptions opts;
      opts.passes = c.feature_passes;
      opts.augment = c.feature_augment;
      opts.ranges = c.augment_ranges;
      opts.seed = stage_seed(c, stage);
      for (const char* split : {"train", "validation"}) {
        const auto m = load_manifest(ctx.dir(Stage::split) / (std::string(split) + ".csv"));
        if (m.rows.empty()) continue;
        write_feature_file(extract_feature_set(net, m, stats, &pca, opts), out / (std::string(split) + ".feat"));
      }
      break;
    }
    case Stage::blend_train: {
      const fs::path fdir = ctx.dir(Stage::extract_features);
      const auto train = read_feature_file(fdir / "train.feat");
      auto net = build_blend_network(train.dim, Init::orthogonal, derive_seed(stage_seed(c, stage), 0));
      BlendConfig bc = c.blend;
      TrainHistory history;
      if (fs::exists(fdir / "validation.feat")) {
        const auto val = read_feature_file(fdir / "validation.feat");
        const auto vm = val.matrix();
        history = train_blend(net, train.matrix(), train.targets, bc, &vm, val.targets);
      } else {
        history = train_blend(net, train.matrix(), train.targets, bc);
      }
      fs::create_directories(out);
      save_checkpoint(net, out / "blend.ckpt");
      write_history_csv(history, out / "history.csv");
      break;
    }
    case Stage::predict: {
      const fs::path fdir = ctx.dir(Stage::extract_features);
      const auto train = read_feature_file(fdir / "train.feat");
      const auto blend = load_network(blend_config(train.dim), ctx.dir(Stage::blend_train) / "blend.ckpt");
      write_predictions(out / "train_predictions.csv", train, blend);
      if (fs::exists(fdir / "validation.feat"))
        write_predictions(out / "validation_predictions.csv", read_feature_file(fdir / "validation.feat"), blend);
      break;
    }
    case Stage::evaluate: {
      const fs::path pdir = ctx.dir(Stage::predict), sdir = ctx.dir(Stage::split);
      for (const char* split : {"train", "validation"}) {
        const auto preds = pdir / (std::string(split) + "_predictions.csv");
        if (!fs::exists(preds)) continue;
        const auto report = evaluate_files(preds, sdir / (std::string(split) + ".csv"), c.auc_binarization);
        write_report(out, split, report);
        spdlog::info("evaluate {}: kappa {:.4f} over {} images", split, report.kappa, report.count);
      }
      break;
    }
  }
}

json stage_record(const StageContext& ctx, Stage stage, bool has_validation) {
  const RunConfig& c = ctx.cfg;
  json inputs;
  inputs["settings"] = hex_digest(fnv1a(stage_settings(c, stage)));
  if (stage == Stage::preprocess) {
    inputs["raw"] = hex_digest(raw_input_digest(c));
  } else {
    const auto prev = ctx.dir(kStages[std::size_t(stage) - 1]) / "stage.done";
    inputs["upstream"] = fs::exists(prev) ? hex_digest(file_digest(prev)) : "missing";
  }
  return {{"stage", kStageNames[std::size_t(stage)]}, {"inputs", inputs}, {"has_validation", has_validation}};
}

bool outputs_match(const fs::path& dir, const json& done) {
  if (!done.contains("outputs")) return false;
  for (const auto& [name, digest] : done["outputs"].items()) {
    if (!fs::exists(dir / name)) return false;
    if (digest.get<std::string>() != hex_digest(file_digest(dir / name))) return false;
  }
  return true;
}

}  // namespace

std::string_view stage_name(Stage stage) { return kStageNames[std::size_t(stage)]; }

Stage parse_stage(std::string_view name) {
  for (Stage s : kStages)
    if (stage_name(s) == name) return s;
  throw ConfigError(fmt::format("unknown stage '{}'", name));
}

std::uint64_t file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), std::streamsize(buf.size()));
    const auto n = in.gcount();
    if (n > 0) h = fnv1a(std::string_view(buf.data(), std::size_t(n)), h);
  }
  return h;
}

std::string hex_digest(std::uint64_t digest) { return fmt::format("{:016x}", digest); }

void write_run_json(const fs::path& dir, std::uint64_t seed, std::uint64_t config_digest) {
  const json j = {{"seed", seed},
                  {"config_digest", hex_digest(config_digest)},
                  {"versions",
                   {{"drgrade", std::string(kVersion)},
                    {"eigen", fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION, EIGEN_MINOR_VERSION)},
                    {"opencv", CV_VERSION},
                    {"fmt", FMT_VERSION}}}};
  write_text(dir / "run.json", j.dump(2) + "\n");
}

PreprocessSummary preprocess_manifest(const DatasetManifest& input, const fs::path& out_dir,
                                      const PreprocessConfig& cfg) {
  cfg.validate();
  fs::create_directories(out_dir / "images");
  const std::size_t n = input.rows.size();
  std::vector<std::string> errors(n), codes(n);
  std::vector<bool> ok(n, false);
  parallel_chunks(n, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& r = input.rows[i];
      try {
        save_png(normalize_image(load_image(input.resolve(r)), cfg), out_dir / "images" / (r.id() + ".png"));
        ok[i] = true;
      } catch (const UnusableImage& e) {
        codes[i] = "unusable_image";
        errors[i] = e.what();
      } catch (const FormatError& e) {
        codes[i] = "read_error";
        errors[i] = e.what();
      }
    }
  });
  PreprocessSummary res;
  res.manifest.base_dir = out_dir;
  std::string rejected = "image_path,reason,detail\n";
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = input.rows[i];
    if (ok[i]) {
      ImageRecord copy = r;
      copy.image_path = "images/" + r.id() + ".png";
      res.manifest.rows.push_back(copy);
    } else {
      spdlog::warn("rejected {}: {}", r.image_path, errors[i]);
      res.rejected.emplace_back(r.image_path, codes[i]);
      rejected += csv_field(r.image_path) + "," + codes[i] + "," + csv_field(errors[i]) + "\n";
    }
  }
  save_manifest(res.manifest, out_dir / "manifest.csv");
  write_text(out_dir / "rejected.csv", rejected);
  return res;
}

NetworkConfig resolve_network(const std::string& ref, const fs::path& base_dir) {
  if (ref == "full-512") return full_main_config();
  if (ref == "reduced-32") return reduced_main_config();
  const fs::path p = fs::path(ref).is_absolute() ? fs::path(ref) : base_dir / ref;
  if (!fs::exists(p)) throw ConfigError(fmt::format("network '{}' is neither a builtin nor a file", ref));
  return load_network_config(p);
}

AugmentRanges augment_ranges_from_yaml(const YAML::Node& node, AugmentRanges r) {
  r.rotation_max = get(node, "rotation_max", r.rotation_max, "augment");
  r.shear_max = get(node, "shear_max", r.shear_max, "augment");
  r.zoom_max = get(node, "zoom_max", r.zoom_max, "augment");
  r.crop_min = get(node, "crop_min", r.crop_min, "augment");
  r.crop_max = get(node, "crop_max", r.crop_max, "augment");
  r.translate_max = get(node, "translate_max", r.translate_max, "augment");
  r.alpha_std = get(node, "alpha_std", r.alpha_std, "augment");
  if (!(r.zoom_max >= 1.0)) throw ConfigError("augment.zoom_max must be >= 1");
  if (!(r.crop_min > 0.0 && r.crop_min <= r.crop_max && r.crop_max <= 1.0))
    throw ConfigError("augment: need 0 < crop_min <= crop_max <= 1");
  if (r.rotation_max < 0 || r.shear_max < 0 || r.translate_max < 0 || r.alpha_std < 0)
    throw ConfigError("augment: ranges must be non-negative");
  return r;
}

PreprocessConfig preprocess_config_from_yaml(const YAML::Node& node) {
  check_keys(node, {"target_radius", "output_size", "gray_level", "clip_fraction", "blur_divisor"}, "preprocess");
  PreprocessConfig p;
  p.target_radius = get(node, "target_radius", p.target_radius, "preprocess");
  p.output_size = get(node, "output_size", p.output_size, "preprocess");
  p.gray_level = get(node, "gray_level", p.gray_level, "preprocess");
  p.clip_fraction = get(node, "clip_fraction", p.clip_fraction, "preprocess");
  p.blur_divisor = get(node, "blur_divisor", p.blur_divisor, "preprocess");
  p.validate();
  return p;
}

std::string RunConfig::canonical() const {
  std::string s = fmt::format("seed={}\n", seed);
  for (Stage st : kStages) s += fmt::format("{}: {}\n", stage_name(st), stage_settings(*this, st));
  return s;
}

std::uint64_t RunConfig::digest() const { return fnv1a(canonical()); }

RunConfig load_run_config(const fs::path& path, std::optional<std::uint64_t> seed) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError("cannot read run config " + path.string() + ": " + e.what());
  }
  check_keys(root, {"seed", "manifest", "output", "preprocess", "split", "augment", "network", "train", "features",
                    "blend", "evaluate"},
             "run config");
  const fs::path base = fs::absolute(path).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };

  RunConfig c;
  c.seed = seed ? *seed : get(root, "seed", c.seed, "run config");
  if (!root["manifest"]) throw ConfigError("run config: 'manifest' is required");
  c.manifest = resolve(root["manifest"].as<std::string>());
  c.output = resolve(get<std::string>(root, "output", "run", "run config"));
  if (root["preprocess"]) c.preprocess = preprocess_config_from_yaml(root["preprocess"]);
  if (const auto s = root["split"]) {
    check_keys(s, {"validation_per_class"}, "split");
    c.validation_per_class = get(s, "validation_per_class", c.validation_per_class, "split");
  }
  if (const auto a = root["augment"]) {
    check_keys(a, {"multipliers", "pca_samples", "rotation_max", "shear_max", "zoom_max", "crop_min", "crop_max",
                   "translate_max", "alpha_std"},
               "augment");
    if (a["multipliers"]) {
      const auto m = get<std::vector<int>>(a, "multipliers", {}, "augment");
      if (m.size() != 5) throw ConfigError("augment.multipliers: expected 5 entries");
      for (std::size_t i = 0; i < 5; ++i) {
        if (m[i] < 0) throw ConfigError("augment.multipliers: entries must be non-negative");
        c.multipliers[i] = m[i];
      }
    }
    c.pca_samples = get(a, "pca_samples", c.pca_samples, "augment");
    c.augment_ranges = augment_ranges_from_yaml(a);
  }
  if (const auto n = root["network"]) {
    c.network = n.IsScalar() ? resolve_network(n.as<std::string>(), base) : network_config_from_yaml(n);
  }
  const std::uint64_t train_seed = derive_seed(c.seed, std::uint64_t(Stage::train) + 1, 1);
  if (const auto t = root["train"]) {
    c.train = train_config_from_yaml(t);
    if (!t["seed"]) c.train.seed = train_seed;
  } else {
    c.train.seed = train_seed;
  }
  if (const auto f = root["features"]) {
    check_keys(f, {"passes", "augment", "checkpoint"}, "features");
    c.feature_passes = get(f, "passes", c.feature_passes, "features");
    c.feature_augment = get(f, "augment", c.feature_augment, "features");
    c.feature_checkpoint = get(f, "checkpoint", c.feature_checkpoint, "features");
    if (c.feature_checkpoint != "best" && c.feature_checkpoint != "final")
      throw ConfigError("features.checkpoint: expected 'best' or 'final'");
    if (c.feature_passes < 2) throw ConfigError("features.passes must be at least 2");
  }
  const std::uint64_t blend_seed = derive_seed(c.seed, std::uint64_t(Stage::blend_train) + 1, 1);
  if (const auto b = root["blend"]) {
    c.blend = blend_config_from_yaml(b);
    if (!b["seed"]) c.blend.seed = blend_seed;
  } else {
    c.blend.seed = blend_seed;
  }
  if (const auto e = root["evaluate"]) {
    check_keys(e, {"auc_binarization"}, "evaluate");
    c.auc_binarization = get(e, "auc_binarization", c.auc_binarization, "evaluate");
    binarization_by_name(c.auc_binarization);
  }
  if (c.network.input_size != c.preprocess.output_size)
    throw ConfigError(fmt::format("network '{}' expects {} px input but preprocess.output_size is {}", c.network.name,
                                  c.network.input_size, c.preprocess.output_size));
  return c;
}

RunResult run_pipeline(const RunConfig& cfg, const RunOptions& options) {
  StageContext ctx{cfg, cfg.output};
  fs::create_directories(ctx.root);
  write_run_json(ctx.root, cfg.seed, cfg.digest());
  write_text(ctx.root / "config.txt", cfg.canonical());

  RunResult result;
  bool forced = false;
  bool has_validation = true;
  for (Stage stage : kStages) {
    forced = forced || options.force.count(stage) > 0;
    const fs::path dir = ctx.dir(stage);
    json record = stage_record(ctx, stage, has_validation);
    const fs::path done_path = dir / "stage.done";
    bool skip = false;
    if (!forced && fs::exists(done_path)) {
      try {
        const json done = read_json(done_path);
        skip = done.value("inputs", json()) == record["inputs"] && outputs_match(dir, done);
      } catch (const FormatError&) {
        skip = false;
      }
    }
    if (skip) {
      spdlog::info("stage {}: up to date", stage_name(stage));
    } else {
      spdlog::info("stage {}: running", stage_name(stage));
      fs::remove(done_path);
      if (forced && stage == Stage::train) {
        // A forced retrain starts over instead of resuming.
        fs::remove(dir / "resume.ckpt");
        fs::remove(dir / "resume.opt");
        fs::remove(dir / "resume.opt.json");
      }
      fs::create_directories(dir);
      run_stage(ctx, stage);
    }
    if (stage == Stage::split) {
      has_validation = !load_manifest(dir / "validation.csv").rows.empty();
    }
    if (!skip) {
      json outputs = json::object();
      for (const auto& name : stage_outputs(stage, has_validation))
        outputs[name] = hex_digest(file_digest(dir / name));
      record["outputs"] = outputs;
      write_run_json(dir, cfg.seed, cfg.digest());
      write_text(done_path, record.dump(2) + "\n");
    }
    result.stages.push_back({stage, skip});
    if (options.until && *options.until == stage) break;
  }
  result.report_written = fs::exists(ctx.dir(Stage::evaluate) / "report_train.json");
  return result;
}

}  // namespace drgrade
