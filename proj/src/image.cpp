#include "drgrade/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>

#include "drgrade/errors.hpp"

namespace drgrade {
namespace {

struct Tap {
  std::size_t index;
  float weight;
};

// Contributions of source samples to each destination sample along one axis.
std::vector<std::vector<Tap>> resample_taps(std::size_t src, std::size_t dst) {
  std::vector<std::vector<Tap>> taps(dst);
  const double scale = double(dst) / double(src);
  const double support = std::max(1.0, 1.0 / scale);
  for (std::size_t i = 0; i < dst; ++i) {
    const double center = (double(i) + 0.5) / scale - 0.5;
    const auto lo = std::ptrdiff_t(std::floor(center - support));
    const auto hi = std::ptrdiff_t(std::ceil(center + support));
    double total = 0.0;
    std::vector<std::pair<std::ptrdiff_t, double>> raw;
    for (std::ptrdiff_t s = lo; s <= hi; ++s) {
      const double w = 1.0 - std::abs(double(s) - center) / support;
      if (w <= 0.0) continue;
      raw.emplace_back(s, w);
      total += w;
    }
    for (auto [s, w] : raw) {
      const auto clamped = std::size_t(std::clamp<std::ptrdiff_t>(s, 0, std::ptrdiff_t(src) - 1));
      taps[i].push_back({clamped, float(w / total)});
    }
  }
  return taps;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw FormatError("cannot decode image " + path.string());
  Image img(std::size_t(bgr.cols), std::size_t(bgr.rows));
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x)
      for (int c = 0; c < 3; ++c) img.at(std::size_t(x), std::size_t(y), std::size_t(c)) = float(row[x][2 - c]);
  }
  return img;
}

void save_png(const Image& image, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  cv::Mat bgr(int(image.height), int(image.width), CV_8UC3);
  for (std::size_t y = 0; y < image.height; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(int(y));
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        row[x][2 - c] = static_cast<unsigned char>(std::clamp(std::lround(image.at(x, y, c)), 0L, 255L));
  }
  if (!cv::imwrite(path.string(), bgr)) throw FormatError("cannot write image " + path.string());
}

void clamp_to_byte_range(Image& image) {
  for (auto& v : image.px) v = std::clamp(v, 0.0f, 255.0f);
}

void round_to_bytes(Image& image) {
  for (auto& v : image.px) v = float(std::clamp(std::lround(v), 0L, 255L));
}

Image resize(const Image& image, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw ConfigError("resize: target size must be positive");
  if (width == image.width && height == image.height) return image;
  const auto tx = resample_taps(image.width, width);
  const auto ty = resample_taps(image.height, height);
  Image horiz(width, image.height);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        float s = 0.0f;
        for (const auto& t : tx[x]) s += t.weight * image.at(t.index, y, c);
        horiz.at(x, y, c) = s;
      }
  Image out(width, height);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        float s = 0.0f;
        for (const auto& t : ty[y]) s += t.weight * horiz.at(x, t.index, c);
        out.at(x, y, c) = s;
      }
  return out;
}

Image crop(const Image& image, std::ptrdiff_t x0, std::ptrdiff_t y0, std::size_t width, std::size_t height) {
  Image out(width, height);
  for (std::size_t y = 0; y < height; ++y) {
    const std::ptrdiff_t sy = y0 + std::ptrdiff_t(y);
    if (sy < 0 || sy >= std::ptrdiff_t(image.height)) continue;
    for (std::size_t x = 0; x < width; ++x) {
      const std::ptrdiff_t sx = x0 + std::ptrdiff_t(x);
      if (sx < 0 || sx >= std::ptrdiff_t(image.width)) continue;
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = image.at(std::size_t(sx), std::size_t(sy), c);
    }
  }
  return out;
}

float sample_bilinear(const Image& image, double x, double y, std::size_t channel) {
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  const auto x0 = std::ptrdiff_t(fx), y0 = std::ptrdiff_t(fy);
  auto px = [&](std::ptrdiff_t xi, std::ptrdiff_t yi) -> double {
    if (xi < 0 || yi < 0 || xi >= std::ptrdiff_t(image.width) || yi >= std::ptrdiff_t(image.height)) return 0.0;
    return image.at(std::size_t(xi), std::size_t(yi), channel);
  };
  // Exact pixel centers skip the zero-weight neighbours so edges stay intact.
  if (ax == 0.0 && ay == 0.0) return float(px(x0, y0));
  const double top = (1.0 - ax) * px(x0, y0) + ax * px(x0 + 1, y0);
  const double bottom = (1.0 - ax) * px(x0, y0 + 1) + ax * px(x0 + 1, y0 + 1);
  return float((1.0 - ay) * top + ay * bottom);
}

Tensor<float> to_tensor(const Image& image) {
  Tensor<float> t({3, image.height, image.width});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x) t[(c * image.height + y) * image.width + x] = image.at(x, y, c);
  return t;
}

}  // namespace drgrade
