// drgrade: command-line entry point for every pipeline stage.

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "drgrade/augment.hpp"
#include "drgrade/checkpoint.hpp"
#include "drgrade/errors.hpp"
#include "drgrade/features.hpp"
#include "drgrade/manifest.hpp"
#include "drgrade/metrics.hpp"
#include "drgrade/parallel.hpp"
#include "drgrade/pipeline.hpp"
#include "drgrade/synth.hpp"
#include "drgrade/trainer.hpp"

namespace fs = std::filesystem;
using namespace drgrade;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::string config;
  bool verbose = false;
};

YAML::Node load_yaml(const std::string& path) {
  if (path.empty()) return YAML::Node(YAML::NodeType::Map);
  try {
    return YAML::LoadFile(path);
  } catch (const YAML::Exception& e) {
    throw ConfigError("cannot read config " + path + ": " + e.what());
  }
}

NetworkConfig network_from(const YAML::Node& root, const std::string& config_path, const std::string& fallback) {
  const fs::path base = config_path.empty() ? fs::current_path() : fs::absolute(config_path).parent_path();
  if (const auto n = root["network"])
    return n.IsScalar() ? resolve_network(n.as<std::string>(), base) : network_config_from_yaml(n);
  return resolve_network(fallback, base);
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os << text;
}

ImageSet load_standardized(const std::string& manifest, const ChannelStats& stats) {
  auto set = load_image_set(load_manifest(manifest, true));
  if (set.size() > 0) standardize(set, stats);
  return set;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diabetic retinopathy grading pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--workers", g.workers, "Worker threads for batch-parallel kernels")->check(CLI::PositiveNumber);
  app.add_option("--config", g.config, "YAML config (run config for `run`, network/train sections otherwise)");
  app.add_flag("-v,--verbose", g.verbose, "Debug logging");

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "Normalize fundus photographs");
  std::string pre_manifest, pre_out;
  std::optional<std::size_t> pre_size;
  std::optional<double> pre_radius;
  pre->add_option("--manifest", pre_manifest)->required();
  pre->add_option("--out-dir", pre_out)->required();
  pre->add_option("--size", pre_size, "Output side in pixels");
  pre->add_option("--radius", pre_radius, "Target fundus radius in pixels");

  // split
  auto* spl = app.add_subcommand("split", "Hold out a fixed number of images per grade");
  std::string spl_manifest, spl_out;
  std::size_t spl_vpc = 200;
  spl->add_option("--manifest", spl_manifest)->required();
  spl->add_option("--out-dir", spl_out)->required();
  spl->add_option("--validation-per-class", spl_vpc);

  // augment
  auto* aug = app.add_subcommand("augment", "Generate the augmented training corpus");
  std::string aug_manifest, aug_out;
  bool aug_default = false;
  std::vector<int> aug_mult;
  std::size_t aug_pca = 20000;
  aug->add_option("--manifest", aug_manifest)->required();
  aug->add_option("--out-dir", aug_out)->required();
  aug->add_flag("--plan-default", aug_default, "Per-grade multipliers 0, 11, 4, 27, 35");
  aug->add_option("--multipliers", aug_mult, "Five per-grade copy counts")->expected(5)->excludes("--plan-default");
  aug->add_option("--pca-samples", aug_pca);

  // train
  auto* trn = app.add_subcommand("train", "Train the main network");
  std::string trn_manifest, trn_val, trn_out;
  bool trn_resume = false;
  std::optional<std::size_t> trn_stop;
  trn->add_option("--manifest", trn_manifest, "Training manifest")->required();
  trn->add_option("--validation", trn_val, "Validation manifest");
  trn->add_option("--out", trn_out)->required();
  trn->add_flag("--resume", trn_resume, "Continue from resume.ckpt in the output directory");
  trn->add_option("--stop-after", trn_stop, "Stop after this epoch (resumable)");

  // extract-features
  auto* ext = app.add_subcommand("extract-features", "Per-image descriptors from the last pooling layer");
  std::string ext_manifest, ext_ckpt, ext_stats, ext_pca, ext_out;
  std::size_t ext_passes = 40;
  bool ext_plain = false;
  ext->add_option("--manifest", ext_manifest)->required();
  ext->add_option("--checkpoint", ext_ckpt)->required();
  ext->add_option("--stats", ext_stats, "channel_stats.json (default: next to the checkpoint)");
  ext->add_option("--pca", ext_pca, "color_pca.json from the augment stage");
  ext->add_option("--passes", ext_passes);
  ext->add_flag("--no-augment", ext_plain, "Use the image unaugmented for every pass");
  ext->add_option("--out", ext_out)->required();

  // blend-train
  auto* bln = app.add_subcommand("blend-train", "Train the blending network on feature files");
  std::string bln_features, bln_val, bln_out;
  bln->add_option("--features", bln_features)->required();
  bln->add_option("--validation-features", bln_val);
  bln->add_option("--out", bln_out)->required();

  // predict
  auto* prd = app.add_subcommand("predict", "Score feature files with a blending network");
  std::string prd_features, prd_ckpt, prd_out;
  prd->add_option("--features", prd_features)->required();
  prd->add_option("--checkpoint", prd_ckpt)->required();
  prd->add_option("--out", prd_out, "Predictions CSV")->required();

  // evaluate
  auto* evl = app.add_subcommand("evaluate", "Metrics for a predictions file");
  std::string evl_preds, evl_manifest, evl_out, evl_auc = "healthy_vs_sick";
  evl->add_option("--predictions", evl_preds)->required();
  evl->add_option("--manifest", evl_manifest)->required();
  evl->add_option("--out", evl_out, "Write the JSON report here");
  evl->add_option("--auc-binarization", evl_auc)->check(CLI::IsMember({"healthy_vs_sick", "low_vs_high"}));

  // stats
  auto* sts = app.add_subcommand("stats", "Grade distribution of a manifest");
  std::string sts_manifest;
  bool sts_plan = false;
  std::size_t sts_vpc = 200;
  sts->add_option("--manifest", sts_manifest)->required();
  sts->add_flag("--plan", sts_plan, "Also print the default augmentation plan");
  sts->add_option("--validation-per-class", sts_vpc);

  // run
  auto* run = app.add_subcommand("run", "Run every stage from a run config");
  std::vector<std::string> run_force;
  std::string run_until, run_out;
  run->add_option("--force", run_force, "Rerun this stage and everything after it");
  run->add_option("--until", run_until, "Stop after this stage");
  run->add_option("--out", run_out, "Override the output root");

  // synth
  auto* syn = app.add_subcommand("synth", "Write a synthetic fundus dataset");
  std::string syn_out, syn_kind = "fundus";
  SynthOptions syn_opts;
  syn->add_option("--out-dir", syn_out)->required();
  syn->add_option("--count", syn_opts.count);
  syn->add_option("--size", syn_opts.size);
  syn->add_option("--kind", syn_kind)->check(CLI::IsMember({"fundus", "brightness"}));

  // describe
  auto* dsc = app.add_subcommand("describe", "Print a network's layer shapes and parameter count");
  std::string dsc_name = "full-512";
  dsc->add_option("--network", dsc_name, "Builtin name or network config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  spdlog::set_level(g.verbose ? spdlog::level::debug : spdlog::level::info);
  set_worker_count(g.workers);
  const std::uint64_t seed = g.seed.value_or(0);

  try {
    if (*pre) {
      const auto root = load_yaml(g.config);
      PreprocessConfig cfg = root["preprocess"] ? preprocess_config_from_yaml(root["preprocess"]) : PreprocessConfig{};
      if (pre_size) cfg.output_size = *pre_size;
      if (pre_radius) cfg.target_radius = *pre_radius;
      const auto res = preprocess_manifest(load_manifest(pre_manifest), pre_out, cfg);
      write_run_json(pre_out, seed, fnv1a(fmt::format("preprocess {} {}", cfg.output_size, cfg.target_radius)));
      fmt::print("{} images written, {} rejected\n", res.manifest.rows.size(), res.rejected.size());
    } else if (*spl) {
      const auto split = split_dataset(load_manifest(spl_manifest), spl_vpc, seed);
      save_manifest(split.train, fs::path(spl_out) / "train.csv");
      save_manifest(split.validation, fs::path(spl_out) / "validation.csv");
      write_run_json(spl_out, seed, fnv1a(fmt::format("split {}", spl_vpc)));
      fmt::print("{} train, {} validation\n", split.train.rows.size(), split.validation.rows.size());
    } else if (*aug) {
      const auto root = load_yaml(g.config);
      AugmentCorpusOptions opts;
      opts.seed = seed;
      opts.pca_samples = aug_pca;
      if (root["augment"]) opts.ranges = augment_ranges_from_yaml(root["augment"]);
      if (!aug_mult.empty()) {
        for (std::size_t i = 0; i < 5; ++i) {
          if (aug_mult[i] < 0) throw ConfigError("--multipliers: entries must be non-negative");
          opts.multipliers[i] = aug_mult[i];
        }
      }
      const auto corpus = augment_corpus(load_manifest(aug_manifest), aug_out, opts);
      write_run_json(aug_out, seed, fnv1a(fmt::format("augment {}", fmt::join(opts.multipliers, ","))));
      fmt::print("{} images in the augmented corpus\n", corpus.manifest.rows.size());
    } else if (*trn) {
      const auto root = load_yaml(g.config);
      const auto net_cfg = network_from(root, g.config, "full-512");
      TrainConfig cfg = root["train"] ? train_config_from_yaml(root["train"]) : TrainConfig{};
      if (g.seed) cfg.seed = *g.seed;
      auto train = load_image_set(load_manifest(trn_manifest, true));
      const auto stats = channel_stats(train);
      fs::create_directories(trn_out);
      write_file(fs::path(trn_out) / "channel_stats.json", stats.to_json().dump(2) + "\n");
      standardize(train, stats);
      std::optional<ImageSet> val;
      if (!trn_val.empty()) val = load_standardized(trn_val, stats);
      auto net = build_main_network(net_cfg, Init::orthogonal, derive_seed(cfg.seed, 0));
      TrainOutputs outputs{fs::path(trn_out), trn_resume, trn_stop};
      const auto history = train_main(net, train, val && val->size() > 0 ? &*val : nullptr, cfg, outputs);
      write_run_json(trn_out, cfg.seed, fnv1a(net_cfg.canonical()));
      if (!history.epochs.empty()) {
        const auto& last = history.epochs.back();
        fmt::print("epoch {}: train loss {:.5f}, train mse {:.5f}\n", last.epoch, last.train_loss, last.train_mse);
      }
    } else if (*ext) {
      const auto root = load_yaml(g.config);
      const auto net = load_network(network_from(root, g.config, "full-512"), ext_ckpt);
      const fs::path stats_path = ext_stats.empty() ? fs::path(ext_ckpt).parent_path() / "channel_stats.json" : fs::path(ext_stats);
      std::ifstream sin(stats_path);
      if (!sin) throw FormatError("cannot open " + stats_path.string());
      const auto stats = ChannelStats::from_json(nlohmann::json::parse(sin));
      std::optional<ColorPca> pca;
      if (!ext_pca.empty()) {
        std::ifstream pin(ext_pca);
        if (!pin) throw FormatError("cannot open " + ext_pca);
        pca = ColorPca::from_json(nlohmann::json::parse(pin));
      }
      FeatureOptions opts;
      opts.passes = ext_passes;
      opts.augment = !ext_plain;
      opts.seed = seed;
      if (root["augment"]) opts.ranges = augment_ranges_from_yaml(root["augment"]);
      const auto set = extract_feature_set(net, load_manifest(ext_manifest, true), stats, pca ? &*pca : nullptr, opts);
      write_feature_file(set, ext_out);
      fmt::print("{} descriptors of length {}\n", set.size(), set.dim);
    } else if (*bln) {
      const auto root = load_yaml(g.config);
      BlendConfig cfg = root["blend"] ? blend_config_from_yaml(root["blend"]) : BlendConfig{};
      if (g.seed) cfg.seed = *g.seed;
      const auto train = read_feature_file(bln_features);
      auto net = build_blend_network(train.dim, Init::orthogonal, derive_seed(cfg.seed, 0));
      TrainHistory history;
      if (!bln_val.empty()) {
        const auto val = read_feature_file(bln_val);
        const auto vm = val.matrix();
        history = train_blend(net, train.matrix(), train.targets, cfg, &vm, val.targets);
      } else {
        history = train_blend(net, train.matrix(), train.targets, cfg);
      }
      fs::create_directories(bln_out);
      save_checkpoint(net, fs::path(bln_out) / "blend.ckpt");
      write_history_csv(history, fs::path(bln_out) / "history.csv");
      write_run_json(bln_out, cfg.seed, fnv1a(blend_config(train.dim).canonical()));
      fmt::print("blend net trained for {} epochs\n", history.epochs.size());
    } else if (*prd) {
      const auto set = read_feature_file(prd_features);
      const auto net = load_network(blend_config(set.dim), prd_ckpt);
      std::string text = "image_id,score\n";
      if (set.size() > 0) {
        const auto scores = net.predict(set.matrix());
        for (std::size_t i = 0; i < set.size(); ++i) text += fmt::format("{},{:.9g}\n", csv_field(set.ids[i]), scores[i]);
      }
      write_file(prd_out, text);
      fmt::print("{} predictions written\n", set.size());
    } else if (*evl) {
      const auto report = evaluate_files(evl_preds, evl_manifest, evl_auc);
      if (!evl_out.empty()) write_file(evl_out, report_to_json(report).dump(2) + "\n");
      std::cout << report_to_text(report);
    } else if (*sts) {
      const auto m = load_manifest(sts_manifest);
      std::cout << format_grade_stats(grade_stats(m));
      if (sts_plan) {
        const auto plan = build_plan(m, sts_vpc);
        fmt::print("grade  raw  validation  train  multiplier  total\n");
        for (int k = 0; k < 5; ++k)
          fmt::print("{:>5} {:>4} {:>11} {:>6} {:>11} {:>6}\n", k, plan.raw[k], plan.validation[k], plan.train[k],
                     plan.multipliers[k], plan.totals[k]);
      }
    } else if (*run) {
      if (g.config.empty()) throw ConfigError("run: --config is required");
      auto cfg = load_run_config(g.config, g.seed);
      if (!run_out.empty()) cfg.output = fs::absolute(run_out);
      RunOptions opts;
      for (const auto& s : run_force) opts.force.insert(parse_stage(s));
      if (!run_until.empty()) opts.until = parse_stage(run_until);
      const auto result = run_pipeline(cfg, opts);
      for (const auto& s : result.stages)
        fmt::print("{:<17} {}\n", stage_name(s.stage), s.skipped ? "up to date" : "done");
      if (!opts.until && !result.report_written) {
        spdlog::error("no report was written");
        return 1;
      }
    } else if (*syn) {
      syn_opts.seed = seed;
      if (syn_kind == "fundus") {
        const auto m = write_synth_dataset(syn_out, syn_opts);
        fmt::print("{} images written to {}\n", m.rows.size(), syn_out);
      } else {
        const auto m = write_brightness_dataset(syn_out, syn_opts);
        fmt::print("{} images written to {}\n", m.rows.size(), syn_out);
      }
    } else if (*dsc) {
      const auto cfg = resolve_network(dsc_name, fs::current_path());
      const Network<float> net(cfg);
      fmt::print("{}: input {}\n", cfg.name, shape_str(cfg.input_shape()));
      std::size_t i = 0;
      for (const auto& s : net.table_shapes()) fmt::print("{:>3}  {}\n", ++i, shape_str(s));
      fmt::print("parameters: {}\n", net.parameter_count());
    }
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
