#include "drgrade/synth.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "drgrade/errors.hpp"

namespace drgrade {
namespace {

void add_blob(Image& img, double cx, double cy, double radius, const std::array<double, 3>& color, double strength) {
  const auto x0 = std::size_t(std::max(0.0, std::floor(cx - 3 * radius)));
  const auto x1 = std::min(img.width - 1, std::size_t(std::max(0.0, std::ceil(cx + 3 * radius))));
  const auto y0 = std::size_t(std::max(0.0, std::floor(cy - 3 * radius)));
  const auto y1 = std::min(img.height - 1, std::size_t(std::max(0.0, std::ceil(cy + 3 * radius))));
  for (std::size_t y = y0; y <= y1; ++y)
    for (std::size_t x = x0; x <= x1; ++x) {
      const double dx = double(x) - cx, dy = double(y) - cy;
      const double w = strength * std::exp(-(dx * dx + dy * dy) / (2 * radius * radius));
      for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = float((1 - w) * img.at(x, y, c) + w * color[c]);
    }
}

}  // namespace

Image synth_fundus(std::size_t size, int grade, bool right, Rng& rng) {
  if (size < 32) throw ConfigError("synth: image size must be >= 32");
  if (grade < 0 || grade > 4) throw ConfigError("synth: grade must be in 0..4");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 2.0);
  const double S = double(size);
  const double cx = S / 2 + (u(rng) - 0.5) * 4, cy = S / 2 + (u(rng) - 0.5) * 4;
  const double r = 0.42 * S * (0.97 + 0.06 * u(rng));
  const std::array<double, 3> base{150 + 40 * u(rng), 70 + 30 * u(rng), 25 + 20 * u(rng)};

  Image img(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = double(x) - cx, dy = double(y) - cy;
      const double d2 = (dx * dx + dy * dy) / (r * r);
      if (d2 > 1.0) continue;
      const double shade = 1.0 - 0.35 * d2;
      for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = float(base[c] * shade + noise(rng));
    }

  const double disc_x = cx + (right ? 0.45 : -0.45) * r;
  add_blob(img, disc_x, cy + (u(rng) - 0.5) * 0.1 * r, 0.07 * S, {245, 210, 150}, 0.9);

  const int lesions = 4 * grade;
  for (int k = 0; k < lesions; ++k) {
    const double ang = 2 * 3.141592653589793 * u(rng);
    const double rad = 0.75 * r * std::sqrt(u(rng));
    add_blob(img, cx + rad * std::cos(ang), cy + rad * std::sin(ang), 0.02 * S * (0.8 + 0.4 * u(rng)), {255, 240, 140},
             1.0);
  }
  round_to_bytes(img);
  return img;
}

Image synth_brightness_image(std::size_t size, int grade, Rng& rng) {
  std::normal_distribution<double> noise(0.0, 3.0);
  const double level = 40.0 + 45.0 * grade;
  const double c = (double(size) - 1) / 2, r = 0.45 * double(size);
  Image img(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = double(x) - c, dy = double(y) - c;
      if (dx * dx + dy * dy > r * r) continue;
      for (std::size_t ch = 0; ch < 3; ++ch)
        img.at(x, y, ch) = float(std::clamp(level * (ch == 0 ? 1.0 : ch == 1 ? 0.6 : 0.3) + noise(rng), 0.0, 255.0));
    }
  return img;
}

DatasetManifest write_synth_dataset(const std::filesystem::path& dir, const SynthOptions& options) {
  const std::size_t patients = options.count / 2;
  if (patients == 0) throw ConfigError("synth: count must be >= 2");
  std::filesystem::create_directories(dir / "images");
  DatasetManifest m;
  m.base_dir = dir;
  for (std::size_t p = 0; p < patients; ++p) {
    const int grade = int(p % 5);
    for (int eye = 0; eye < 2; ++eye) {
      Rng rng(derive_seed(options.seed, p, std::uint64_t(eye)));
      const bool right = eye == 1;
      const std::string rel = fmt::format("images/p{:03}_{}.png", p, right ? "right" : "left");
      save_png(synth_fundus(options.size, grade, right, rng), dir / rel);
      m.rows.push_back({rel, fmt::format("p{:03}", p), right ? Eye::right : Eye::left, grade});
    }
  }
  save_manifest(m, dir / "manifest.csv");
  return m;
}

DatasetManifest write_brightness_dataset(const std::filesystem::path& dir, const SynthOptions& options) {
  if (options.count == 0) throw ConfigError("synth: count must be positive");
  std::filesystem::create_directories(dir / "images");
  DatasetManifest m;
  m.base_dir = dir;
  for (std::size_t i = 0; i < options.count; ++i) {
    const int grade = int(i % 5);
    Rng rng(derive_seed(options.seed, i));
    const std::string rel = fmt::format("images/b{:03}.png", i);
    save_png(synth_brightness_image(options.size, grade, rng), dir / rel);
    m.rows.push_back({rel, fmt::format("b{:03}", i), Eye::unknown, grade});
  }
  save_manifest(m, dir / "manifest.csv");
  return m;
}

}  // namespace drgrade
