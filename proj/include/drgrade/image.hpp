#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "drgrade/tensor.hpp"

namespace drgrade {

// Interleaved RGB, row-major, float samples on the 0..255 scale.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> px;

  Image() = default;
  Image(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), px(w * h * 3, fill) {}

  float& at(std::size_t x, std::size_t y, std::size_t c) { return px[(y * width + x) * 3 + c]; }
  float at(std::size_t x, std::size_t y, std::size_t c) const { return px[(y * width + x) * 3 + c]; }
  bool empty() const { return px.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

// PNG/JPEG/anything OpenCV decodes, converted to RGB.
Image load_image(const std::filesystem::path& path);
// Rounds and clamps to 8-bit.
void save_png(const Image& image, const std::filesystem::path& path);

void clamp_to_byte_range(Image& image);
void round_to_bytes(Image& image);

// Separable triangle-filter resampling; bilinear when enlarging, area-like
// averaging when shrinking. Edge samples clamp.
Image resize(const Image& image, std::size_t width, std::size_t height);

// Window of `image` with top-left corner (x0, y0); outside pixels are 0.
Image crop(const Image& image, std::ptrdiff_t x0, std::ptrdiff_t y0, std::size_t width, std::size_t height);

// Bilinear sample at continuous pixel coordinates (pixel centers at
// integers); 0 outside the image.
float sample_bilinear(const Image& image, double x, double y, std::size_t channel);

// (3, H, W) planar tensor.
Tensor<float> to_tensor(const Image& image);

}  // namespace drgrade
