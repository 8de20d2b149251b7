#include "drgrade/preprocess.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "drgrade/errors.hpp"

namespace drgrade {
namespace {

std::vector<float> gaussian_kernel(double sigma) {
  const auto half = std::size_t(std::ceil(3.0 * sigma));
  std::vector<float> k(2 * half + 1);
  double total = 0.0;
  std::vector<double> raw(k.size());
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double x = double(i) - double(half);
    raw[i] = std::exp(-x * x / (2.0 * sigma * sigma));
    total += raw[i];
  }
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = float(raw[i] / total);
  return k;
}

void apply_circular_mask(Image& image, double radius) {
  const double cx = (double(image.width) - 1.0) / 2.0;
  const double cy = (double(image.height) - 1.0) / 2.0;
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      const double dx = double(x) - cx, dy = double(y) - cy;
      if (dx * dx + dy * dy > radius * radius)
        for (std::size_t c = 0; c < 3; ++c) image.at(x, y, c) = 0.0f;
    }
}

}  // namespace

void PreprocessConfig::validate() const {
  if (!(target_radius >= kMinUsableRadius)) throw ConfigError("preprocess: target_radius must be >= 16");
  if (output_size == 0) throw ConfigError("preprocess: output_size must be positive");
  if (!(clip_fraction > 0.0 && clip_fraction <= 1.0)) throw ConfigError("preprocess: clip_fraction must be in (0, 1]");
  if (!(blur_divisor > 0.0)) throw ConfigError("preprocess: blur_divisor must be positive");
  if (!(gray_level >= 0.0 && gray_level <= 255.0)) throw ConfigError("preprocess: gray_level must be in [0, 255]");
}

double estimate_radius(const Image& image) {
  if (image.width < kMinImageSide || image.height < kMinImageSide)
    throw UnusableImage(fmt::format("image is {}x{}, smaller than {} px", image.width, image.height, kMinImageSide));
  const std::size_t y = image.height / 2;
  std::vector<double> sums(image.width);
  double mean = 0.0;
  for (std::size_t x = 0; x < image.width; ++x) {
    sums[x] = double(image.at(x, y, 0)) + image.at(x, y, 1) + image.at(x, y, 2);
    mean += sums[x];
  }
  mean /= double(image.width);
  const double threshold = mean / 10.0;
  const auto bright = std::count_if(sums.begin(), sums.end(), [&](double s) { return s > threshold; });
  const double radius = double(bright) / 2.0;
  if (radius < kMinUsableRadius)
    throw UnusableImage(fmt::format("estimated fundus radius {:.1f} px is below {} px", radius, kMinUsableRadius));
  return radius;
}

Image gaussian_blur(const Image& image, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("gaussian_blur: sigma must be positive");
  const auto k = gaussian_kernel(sigma);
  const auto half = std::ptrdiff_t(k.size() / 2);
  const auto W = std::ptrdiff_t(image.width), H = std::ptrdiff_t(image.height);
  Image tmp(image.width, image.height), out(image.width, image.height);
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      float acc[3] = {0, 0, 0};
      for (std::ptrdiff_t t = -half; t <= half; ++t) {
        const auto sx = std::size_t(std::clamp<std::ptrdiff_t>(x + t, 0, W - 1));
        const float w = k[std::size_t(t + half)];
        for (std::size_t c = 0; c < 3; ++c) acc[c] += w * image.at(sx, std::size_t(y), c);
      }
      for (std::size_t c = 0; c < 3; ++c) tmp.at(std::size_t(x), std::size_t(y), c) = acc[c];
    }
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      float acc[3] = {0, 0, 0};
      for (std::ptrdiff_t t = -half; t <= half; ++t) {
        const auto sy = std::size_t(std::clamp<std::ptrdiff_t>(y + t, 0, H - 1));
        const float w = k[std::size_t(t + half)];
        for (std::size_t c = 0; c < 3; ++c) acc[c] += w * tmp.at(std::size_t(x), sy, c);
      }
      for (std::size_t c = 0; c < 3; ++c) out.at(std::size_t(x), std::size_t(y), c) = acc[c];
    }
  return out;
}

Image normalize_image(const Image& image, const PreprocessConfig& cfg) {
  cfg.validate();
  const double radius = estimate_radius(image);
  const double scale = cfg.target_radius / radius;
  const auto sw = std::max<std::size_t>(1, std::size_t(std::lround(double(image.width) * scale)));
  const auto sh = std::max<std::size_t>(1, std::size_t(std::lround(double(image.height) * scale)));
  Image scaled = resize(image, sw, sh);

  const Image blurred = gaussian_blur(scaled, cfg.target_radius / cfg.blur_divisor);
  for (std::size_t i = 0; i < scaled.px.size(); ++i)
    scaled.px[i] = std::clamp(4.0f * scaled.px[i] - 4.0f * blurred.px[i] + float(cfg.gray_level), 0.0f, 255.0f);

  // Square of side 2R around the image center.
  const auto side = std::size_t(std::lround(2.0 * cfg.target_radius));
  const auto x0 = std::ptrdiff_t(std::lround(double(sw) / 2.0 - cfg.target_radius));
  const auto y0 = std::ptrdiff_t(std::lround(double(sh) / 2.0 - cfg.target_radius));
  Image out = resize(crop(scaled, x0, y0, side, side), cfg.output_size, cfg.output_size);

  // The fundus radius is output_size / 2 after the crop; the boundary ring is
  // cut at output resolution so the mask edge is exact.
  apply_circular_mask(out, cfg.clip_fraction * double(cfg.output_size) / 2.0);
  round_to_bytes(out);
  return out;
}

}  // namespace drgrade
