#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "drgrade/image.hpp"
#include "drgrade/manifest.hpp"
#include "drgrade/random.hpp"
#include "drgrade/tensor.hpp"

namespace drgrade {

struct AugmentParams {
  double rotation_deg = 0.0;
  double shear_deg = 0.0;
  bool flip_h = false;
  bool flip_v = false;
  double zoom = 1.0;
  double crop_fraction = 1.0;
  double translate_x = 0.0;
  double translate_y = 0.0;
  std::array<double, 3> color_alpha{};

  static AugmentParams identity() { return {}; }

  // Round-trippable `key=value;...` form (17 significant digits).
  std::string serialize() const;
  static AugmentParams parse(const std::string& text);

  friend bool operator==(const AugmentParams&, const AugmentParams&) = default;
};

// Sampling ranges. Defaults suit 512 px images; translation is in
// pixels, so small desk-scale images usually want a smaller bound.
struct AugmentRanges {
  double rotation_max = 360.0;
  double shear_max = 20.0;
  double zoom_max = 1.3;  // zoom in [1 / zoom_max, zoom_max]
  double crop_min = 0.85;
  double crop_max = 0.95;
  double translate_max = 25.0;
  double alpha_std = 0.1;
};

AugmentParams sample_params(Rng& rng, const AugmentRanges& ranges = {});

// Principal components of RGB colour, computed on the 0..1 scale.
struct ColorPca {
  std::array<std::array<double, 3>, 3> eigenvectors{};  // eigenvectors[k] is component k
  std::array<double, 3> eigenvalues{};                   // descending
  bool singular = false;                                 // jitter is disabled when set

  nlohmann::json to_json() const;
  static ColorPca from_json(const nlohmann::json& j);
};

inline constexpr std::size_t kMinPcaPixels = 10000;

// `pixels` are RGB triples on the 0..255 scale.
ColorPca color_pca(std::span<const std::array<float, 3>> pixels);

// One bilinear pass through the composed affine map (rotation, shear, zoom,
// flips, translation about the image center), a centered crop resized back
// to the input size, then the PCA colour shift. Output is clamped to 0..255.
Image apply_augment(const Image& image, const AugmentParams& params, const ColorPca* pca = nullptr);

inline constexpr std::array<int, 5> kDefaultMultipliers{0, 11, 4, 27, 35};

struct AugmentPlan {
  std::array<int, 5> multipliers{};
  std::array<std::size_t, 5> raw{};
  std::array<std::size_t, 5> validation{};
  std::array<std::size_t, 5> train{};
  std::array<std::size_t, 5> totals{};  // train * (multiplier + 1)
};

AugmentPlan build_plan(const std::array<std::size_t, 5>& raw_counts, std::size_t validation_per_class = 200,
                       const std::array<int, 5>& multipliers = kDefaultMultipliers);
AugmentPlan build_plan(const DatasetManifest& manifest, std::size_t validation_per_class = 200,
                       const std::array<int, 5>& multipliers = kDefaultMultipliers);

struct ChannelStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  nlohmann::json to_json() const;
  static ChannelStats from_json(const nlohmann::json& j);
};

// Streaming per-channel moments over a set of images.
class ChannelStatsAccumulator {
 public:
  void add(const Image& image);
  ChannelStats finish() const;

 private:
  std::array<double, 3> sum_{}, sum_sq_{};
  std::size_t count_ = 0;
};

ChannelStats compute_channel_stats(std::span<const Image> images);

// In place on (3, H, W) or (N, 3, H, W): (x - mean_c) / std_c.
void standardize(Tensor<float>& t, const ChannelStats& stats);
void unstandardize(Tensor<float>& t, const ChannelStats& stats);

// Pre-generated augmented corpus.
struct AugmentCorpusOptions {
  std::array<int, 5> multipliers = kDefaultMultipliers;
  std::uint64_t seed = 0;
  AugmentRanges ranges{};
  std::size_t pca_samples = 20000;
};

struct AugmentCorpus {
  DatasetManifest manifest;  // originals (copy 0) plus augmented copies
  ColorPca pca;
};

// Writes `<out>/images/<id>_aug<k>.png`, `<out>/augmented_manifest.csv`
// (augmented_path, source_path, grade, copy_index, params),
// `<out>/train_manifest.csv` (standard manifest) and `<out>/color_pca.json`.
AugmentCorpus augment_corpus(const DatasetManifest& train, const std::filesystem::path& out_dir,
                             const AugmentCorpusOptions& options);

// Per-image colour sample for PCA; seeded, fundus pixels only.
std::vector<std::array<float, 3>> sample_pixels(const DatasetManifest& manifest, std::size_t count, std::uint64_t seed);

}  // namespace drgrade
