#include "drgrade/features.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "drgrade/errors.hpp"
#include "drgrade/image.hpp"

namespace drgrade {
namespace {

static_assert(std::endian::native == std::endian::little, "feature I/O assumes a little-endian host");

constexpr char kMagic[4] = {'F', 'D', 'F', 'T'};
constexpr std::size_t kPassChunk = 8;

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is, const std::filesystem::path& path) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw FormatError("truncated feature file " + path.string());
  return v;
}

}  // namespace

std::vector<float> extract_features(const Network<float>& net, const Image& image, std::string_view id,
                                    const ChannelStats& stats, const ColorPca* pca, const FeatureOptions& options) {
  if (options.passes < 2) throw UsageError("extract_features: passes must be >= 2");
  const std::size_t width = net.feature_width();
  std::vector<std::vector<float>> per_pass;
  per_pass.reserve(options.passes);

  for (std::size_t p0 = 0; p0 < options.passes; p0 += kPassChunk) {
    const std::size_t n = std::min(kPassChunk, options.passes - p0);
    std::vector<Tensor<float>> copies;
    for (std::size_t k = 0; k < n; ++k) {
      Image view = image;
      if (options.augment) {
        Rng rng(derive_seed(options.seed, id, p0 + k));
        view = apply_augment(image, sample_params(rng, options.ranges), pca);
      }
      copies.push_back(to_tensor(view));
      standardize(copies.back(), stats);
    }
    std::vector<const Tensor<float>*> ptrs;
    for (const auto& t : copies) ptrs.push_back(&t);
    const Tensor<float> f = net.features(stack<float>(ptrs));
    for (std::size_t k = 0; k < n; ++k) per_pass.emplace_back(f.data() + k * width, f.data() + (k + 1) * width);
  }

  std::vector<float> out(2 * width);
  const double P = double(options.passes);
  for (std::size_t j = 0; j < width; ++j) {
    double mean = 0.0;
    for (const auto& v : per_pass) mean += v[j];
    mean /= P;
    double var = 0.0;
    for (const auto& v : per_pass) var += (v[j] - mean) * (v[j] - mean);
    out[j] = float(mean);
    out[width + j] = float(std::sqrt(var / P));
  }
  return out;
}

Tensor<float> FeatureSet::matrix() const { return Tensor<float>({ids.size(), dim}, values); }

FeatureSet extract_feature_set(const Network<float>& net, const DatasetManifest& manifest, const ChannelStats& stats,
                               const ColorPca* pca, const FeatureOptions& options) {
  FeatureSet set;
  set.dim = 2 * net.feature_width();
  bool degenerate = true;
  for (const auto& row : manifest.rows) {
    const auto d = extract_features(net, load_image(manifest.resolve(row)), row.id(), stats, pca, options);
    degenerate = degenerate && std::all_of(d.begin(), d.end(), [](float v) { return v == 0.0f; });
    set.ids.push_back(row.id());
    set.values.insert(set.values.end(), d.begin(), d.end());
    set.targets.push_back(float(row.grade));
  }
  if (degenerate && !set.ids.empty())
    spdlog::warn("all feature descriptors are zero; is the network trained?");
  return set;
}

void write_feature_file(const FeatureSet& set, const std::filesystem::path& path) {
  if (set.values.size() != set.ids.size() * set.dim || set.targets.size() != set.ids.size())
    throw UsageError("feature set sizes are inconsistent");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write " + tmp.string());
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kFeatureFileVersion);
    put<std::uint32_t>(os, std::uint32_t(set.dim));
    put<std::uint64_t>(os, std::uint64_t(set.ids.size()));
    for (std::size_t i = 0; i < set.ids.size(); ++i) {
      put<std::uint32_t>(os, std::uint32_t(set.ids[i].size()));
      os.write(set.ids[i].data(), std::streamsize(set.ids[i].size()));
      os.write(reinterpret_cast<const char*>(set.values.data() + i * set.dim),
               std::streamsize(set.dim * sizeof(float)));
      put<float>(os, set.targets[i]);
    }
    if (!os) throw FormatError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

FeatureSet read_feature_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open feature file " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(path.string() + " is not a feature file (bad magic)");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kFeatureFileVersion)
    throw FormatError(fmt::format("{}: unsupported feature file version {}", path.string(), version));
  FeatureSet set;
  set.dim = get<std::uint32_t>(is, path);
  const auto count = get<std::uint64_t>(is, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is, path);
    std::string id(len, '\0');
    if (!is.read(id.data(), len)) throw FormatError("truncated feature file " + path.string());
    set.ids.push_back(std::move(id));
    const std::size_t off = set.values.size();
    set.values.resize(off + set.dim);
    if (!is.read(reinterpret_cast<char*>(set.values.data() + off), std::streamsize(set.dim * sizeof(float))))
      throw FormatError("truncated feature file " + path.string());
    set.targets.push_back(get<float>(is, path));
  }
  return set;
}

}  // namespace drgrade
