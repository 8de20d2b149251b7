#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "drgrade/errors.hpp"
#include "drgrade/features.hpp"
#include "drgrade/image.hpp"
#include "drgrade/synth.hpp"

using namespace drgrade;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("drgrade_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const ChannelStats kStats{{60.0, 40.0, 20.0}, {30.0, 25.0, 15.0}};

// Descriptor computed one pass at a time, accumulated in double.
std::vector<double> one_pass_at_a_time(const Network<float>& net, const Image& img, const std::string& id,
                                       const FeatureOptions& o) {
  const std::size_t W = net.feature_width();
  std::vector<std::vector<double>> passes;
  for (std::size_t p = 0; p < o.passes; ++p) {
    Rng rng(derive_seed(o.seed, id, p));
    auto t = to_tensor(o.augment ? apply_augment(img, sample_params(rng, o.ranges)) : img);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t k = 0; k < 32 * 32; ++k)
        t[c * 1024 + k] = float((t[c * 1024 + k] - kStats.mean[c]) / kStats.stddev[c]);
    const auto f = net.features(t.reshaped({1, 3, 32, 32}));
    passes.emplace_back(f.values().begin(), f.values().end());
  }
  std::vector<double> out(2 * W);
  for (std::size_t j = 0; j < W; ++j) {
    double m = 0, v = 0;
    for (const auto& p : passes) m += p[j];
    m /= double(o.passes);
    for (const auto& p : passes) v += (p[j] - m) * (p[j] - m);
    out[j] = m;
    out[W + j] = std::sqrt(v / double(o.passes));
  }
  return out;
}

}  // namespace

TEST_CASE("descriptor is mean and population std over passes") {
  const auto net = build_main_network(reduced_main_config(), Init::orthogonal, 4);
  Rng rng(1);
  const auto img = synth_fundus(32, 2, false, rng);
  FeatureOptions o;
  o.passes = 11;  // crosses a batching boundary
  o.seed = 9;
  const auto got = extract_features(net, img, "x1", kStats, nullptr, o);
  const auto want = one_pass_at_a_time(net, img, "x1", o);
  REQUIRE(got.size() == 2 * net.feature_width());
  REQUIRE(got.size() == 512);
  double scale = 0;
  for (double v : want) scale = std::max(scale, std::abs(v));
  for (std::size_t j = 0; j < got.size(); ++j) CHECK(std::abs(got[j] - want[j]) <= 1e-5 * scale + 1e-6);
}

TEST_CASE("without augmentation the std half is zero") {
  const auto net = build_main_network(reduced_main_config(), Init::orthogonal, 4);
  Rng rng(2);
  const auto img = synth_fundus(32, 3, true, rng);
  FeatureOptions o;
  o.passes = 3;
  o.augment = false;
  const auto d = extract_features(net, img, "y", kStats, nullptr, o);
  const std::size_t W = net.feature_width();
  for (std::size_t j = W; j < 2 * W; ++j) CHECK(d[j] == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
}

TEST_CASE("passes below two are refused") {
  const auto net = build_main_network(reduced_main_config(), Init::orthogonal, 4);
  FeatureOptions o;
  o.passes = 1;
  CHECK_THROWS_AS(extract_features(net, Image(32, 32, 50.0f), "z", kStats, nullptr, o), UsageError);
}

TEST_CASE("feature sets are deterministic and survive a file round trip") {
  const auto dir = temp_dir("features");
  SynthOptions so;
  so.count = 6;
  so.size = 32;
  so.seed = 5;
  const auto manifest = write_synth_dataset(dir / "data", so);
  const auto net = build_main_network(reduced_main_config(), Init::orthogonal, 4);
  FeatureOptions o;
  o.passes = 3;
  o.seed = 12;
  const auto a = extract_feature_set(net, manifest, kStats, nullptr, o);
  const auto b = extract_feature_set(net, manifest, kStats, nullptr, o);
  CHECK(a.values == b.values);
  CHECK(a.dim == 512);
  CHECK(a.size() == 6);
  CHECK(a.matrix().shape() == Shape{6, 512});
  write_feature_file(a, dir / "f.feat");
  const auto back = read_feature_file(dir / "f.feat");
  CHECK(back.ids == a.ids);
  CHECK(back.values == a.values);
  CHECK(back.targets == a.targets);
  o.seed = 13;
  CHECK(extract_feature_set(net, manifest, kStats, nullptr, o).values != a.values);
}

TEST_CASE("corrupt feature files are format errors") {
  const auto dir = temp_dir("features_bad");
  FeatureSet s;
  s.dim = 4;
  s.ids = {"a", "b"};
  s.values = {1, 2, 3, 4, 5, 6, 7, 8};
  s.targets = {0, 4};
  write_feature_file(s, dir / "ok.feat");
  fs::resize_file(dir / "ok.feat", fs::file_size(dir / "ok.feat") - 3);
  CHECK_THROWS_AS(read_feature_file(dir / "ok.feat"), FormatError);
  std::ofstream(dir / "junk.feat") << "JUNKJUNKJUNK";
  CHECK_THROWS_AS(read_feature_file(dir / "junk.feat"), FormatError);
  s.targets.pop_back();
  CHECK_THROWS_AS(write_feature_file(s, dir / "bad.feat"), UsageError);
}
