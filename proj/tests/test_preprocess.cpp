#include <doctest.h>

#include <cmath>

#include "drgrade/errors.hpp"
#include "drgrade/preprocess.hpp"
#include "drgrade/random.hpp"
#include "drgrade/synth.hpp"

using namespace drgrade;

namespace {

Image disk(std::size_t w, std::size_t h, double r, std::array<float, 3> rgb) {
  Image img(w, h);
  const double cx = (double(w) - 1) / 2, cy = (double(h) - 1) / 2;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (std::hypot(double(x) - cx, double(y) - cy) <= r)
        for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = rgb[c];
  return img;
}

double dist_from_center(const Image& img, std::size_t x, std::size_t y) {
  return std::hypot(double(x) - (double(img.width) - 1) / 2, double(y) - (double(img.height) - 1) / 2);
}

}  // namespace

TEST_CASE("radius estimate on a disk") {
  CHECK(estimate_radius(disk(400, 300, 120, {100, 60, 30})) == doctest::Approx(120).epsilon(0.01));
}

TEST_CASE("blank and tiny frames are unusable") {
  CHECK_THROWS_AS(estimate_radius(Image(200, 200)), UnusableImage);
  CHECK_THROWS_AS(estimate_radius(Image(20, 20, 100.0f)), UnusableImage);
  CHECK_THROWS_AS(normalize_image(Image(300, 300), PreprocessConfig{}), UnusableImage);
}

TEST_CASE("gaussian blur matches a direct separable sum and keeps constants") {
  Image impulse(41, 41);
  impulse.at(20, 20, 1) = 1000.0f;
  const double sigma = 2.5;
  const auto out = gaussian_blur(impulse, sigma);
  const int half = int(std::ceil(3 * sigma));
  double norm = 0;
  for (int t = -half; t <= half; ++t) norm += std::exp(-t * t / (2 * sigma * sigma));
  for (int dy = -4; dy <= 4; ++dy)
    for (int dx = -4; dx <= 4; ++dx) {
      const double want = 1000.0 * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) / (norm * norm);
      CHECK(out.at(std::size_t(20 + dx), std::size_t(20 + dy), 1) == doctest::Approx(want).epsilon(1e-4));
    }
  const auto flat = gaussian_blur(Image(30, 20, 77.0f), 3.0);
  for (float v : flat.px) CHECK(v == doctest::Approx(77.0).epsilon(1e-5));
}

TEST_CASE("constant disk maps to mid gray inside and zero beyond the clip radius") {
  PreprocessConfig cfg;  // radius 300, 512 output, clip 0.9
  const auto out = normalize_image(disk(900, 700, 280, {140, 70, 20}), cfg);
  REQUIRE(out.width == 512);
  REQUIRE(out.height == 512);
  const double R = 256.0, clip = 0.9 * R;
  // Blur reach at output scale: 3 sigma = 3 * 300/30 px at the working scale.
  const double reach = 3.0 * 10.0 * 512.0 / 600.0;
  std::size_t interior = 0;
  for (std::size_t y = 0; y < 512; ++y)
    for (std::size_t x = 0; x < 512; ++x) {
      const double d = dist_from_center(out, x, y);
      if (d > clip + 1.0) {
        for (std::size_t c = 0; c < 3; ++c) REQUIRE(out.at(x, y, c) == 0.0f);
      } else if (d < clip - 1.0) {
        CHECK((out.at(x, y, 0) + out.at(x, y, 1) + out.at(x, y, 2)) > 0.0f);
      }
      if (d < R - reach - 2.0) {
        ++interior;
        for (std::size_t c = 0; c < 3; ++c) REQUIRE(std::abs(out.at(x, y, c) - 128.0f) <= 1.0f);
      }
    }
  CHECK(interior > 100000);
}

TEST_CASE("output is always square at the configured size") {
  Rng rng(3);
  for (auto [w, h, size] : {std::tuple<std::size_t, std::size_t, std::size_t>{640, 480, 512}, {480, 640, 448}, {300, 300, 64}}) {
    PreprocessConfig cfg;
    cfg.output_size = size;
    const auto out = normalize_image(disk(w, h, 0.45 * double(std::min(w, h)), {90, 50, 20}), cfg);
    CHECK(out.width == size);
    CHECK(out.height == size);
    CHECK(out.px.size() == size * size * 3);
  }
  const auto fundus = synth_fundus(256, 3, true, rng);
  PreprocessConfig small;
  small.target_radius = 110;
  small.output_size = 32;
  CHECK(normalize_image(fundus, small).width == 32);
}

TEST_CASE("output values are bytes") {
  Rng rng(4);
  const auto out = normalize_image(synth_fundus(300, 4, false, rng), PreprocessConfig{});
  for (float v : out.px) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 255.0f);
    REQUIRE(v == std::round(v));
  }
}

TEST_CASE("invalid preprocessing options") {
  PreprocessConfig c;
  c.clip_fraction = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.clip_fraction = 1.2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.output_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.blur_divisor = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
