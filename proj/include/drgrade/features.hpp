#pragma once

// Feature file, little-endian:
//   magic "FDFT" | u32 version | u32 descriptor length | u64 record count
//   per record: u32 id length | id bytes | f32 descriptor[length] | f32 target
// Unlabeled images carry target -1.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "drgrade/augment.hpp"
#include "drgrade/manifest.hpp"
#include "drgrade/network.hpp"

namespace drgrade {

inline constexpr std::uint32_t kFeatureFileVersion = 1;

struct FeatureOptions {
  std::size_t passes = 40;
  bool augment = true;
  AugmentRanges ranges{};
  std::uint64_t seed = 0;
};

// concat(mean, population std) over `passes` augmented copies of the
// flattened last-max-pool activations. Pass p of image `id` draws its
// augmentation from derive_seed(seed, id, p).
std::vector<float> extract_features(const Network<float>& net, const Image& image, std::string_view id,
                                    const ChannelStats& stats, const ColorPca* pca, const FeatureOptions& options);

struct FeatureSet {
  std::size_t dim = 0;
  std::vector<std::string> ids;
  std::vector<float> values;  // ids.size() * dim
  std::vector<float> targets;

  std::size_t size() const { return ids.size(); }
  Tensor<float> matrix() const;
};

FeatureSet extract_feature_set(const Network<float>& net, const DatasetManifest& manifest, const ChannelStats& stats,
                               const ColorPca* pca, const FeatureOptions& options);

void write_feature_file(const FeatureSet& set, const std::filesystem::path& path);
FeatureSet read_feature_file(const std::filesystem::path& path);

}  // namespace drgrade
