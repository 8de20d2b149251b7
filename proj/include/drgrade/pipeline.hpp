#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "drgrade/augment.hpp"
#include "drgrade/features.hpp"
#include "drgrade/manifest.hpp"
#include "drgrade/network.hpp"
#include "drgrade/preprocess.hpp"
#include "drgrade/trainer.hpp"

namespace YAML {
class Node;
}

namespace drgrade {

inline constexpr std::string_view kVersion = "0.1.0";

enum class Stage { preprocess, split, augment, train, extract_features, blend_train, predict, evaluate };

inline constexpr std::array<Stage, 8> kStages{Stage::preprocess,       Stage::split,       Stage::augment,
                                              Stage::train,            Stage::extract_features, Stage::blend_train,
                                              Stage::predict,          Stage::evaluate};

std::string_view stage_name(Stage stage);
Stage parse_stage(std::string_view name);

// Preprocessing over a manifest: `<out>/images/<id>.png`, `<out>/manifest.csv`
// and `<out>/rejected.csv` (image_path, reason, detail) for inputs that could
// not be used. Reason codes: unusable_image, read_error.
struct PreprocessSummary {
  DatasetManifest manifest;
  std::vector<std::pair<std::string, std::string>> rejected;
};
PreprocessSummary preprocess_manifest(const DatasetManifest& input, const std::filesystem::path& out_dir,
                                      const PreprocessConfig& cfg);

// Network named "full-512" / "reduced-32", or a config file path.
NetworkConfig resolve_network(const std::string& ref, const std::filesystem::path& base_dir);

AugmentRanges augment_ranges_from_yaml(const YAML::Node& node, AugmentRanges defaults = {});
PreprocessConfig preprocess_config_from_yaml(const YAML::Node& node);

struct RunConfig {
  std::filesystem::path manifest;
  std::filesystem::path output;
  std::uint64_t seed = 0;

  PreprocessConfig preprocess;
  std::size_t validation_per_class = 200;
  std::array<int, 5> multipliers = kDefaultMultipliers;
  AugmentRanges augment_ranges;
  std::size_t pca_samples = 20000;
  NetworkConfig network = full_main_config();
  TrainConfig train;
  std::size_t feature_passes = 40;
  bool feature_augment = true;
  std::string feature_checkpoint = "best";  // or "final"
  BlendConfig blend;
  std::string auc_binarization = "healthy_vs_sick";

  // Canonical text of every setting that affects outputs, minus paths.
  std::string canonical() const;
  std::uint64_t digest() const;
};

// Paths inside the file are relative to the file's directory. A seed
// override replaces the file's master seed before stage seeds are derived.
RunConfig load_run_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed = std::nullopt);

struct RunOptions {
  std::set<Stage> force;            // rerun these and everything downstream
  std::optional<Stage> until;       // stop after this stage
};

struct StageOutcome {
  Stage stage;
  bool skipped = false;
};

struct RunResult {
  std::vector<StageOutcome> stages;
  bool report_written = false;
};

// Runs preprocess -> split -> augment -> train -> extract-features ->
// blend-train -> predict -> evaluate under `cfg.output/<stage>/`. A stage
// whose stage.done records the same input digests is skipped.
RunResult run_pipeline(const RunConfig& cfg, const RunOptions& options = {});

// FNV-1a over the file's bytes.
std::uint64_t file_digest(const std::filesystem::path& path);
std::string hex_digest(std::uint64_t digest);

// `{seed, config_digest, versions}` written to every output directory.
void write_run_json(const std::filesystem::path& dir, std::uint64_t seed, std::uint64_t config_digest);

}  // namespace drgrade
