#pragma once

#include "drgrade/image.hpp"

namespace drgrade {

struct PreprocessConfig {
  double target_radius = 300.0;
  std::size_t output_size = 512;
  double gray_level = 128.0;
  double clip_fraction = 0.9;
  double blur_divisor = 30.0;

  void validate() const;
};

inline constexpr double kMinUsableRadius = 16.0;
inline constexpr std::size_t kMinImageSide = 32;

// Half the number of center-row pixels whose channel sum exceeds a tenth of
// the row's mean channel sum. Throws UnusableImage below kMinUsableRadius.
double estimate_radius(const Image& image);

// Separable Gaussian, half-width ceil(3 sigma), clamp-to-edge borders.
Image gaussian_blur(const Image& image, double sigma);

// Rescale to the target radius, subtract the local average colour
// (4 I - 4 blur(I) + gray), clamp, crop the square around the fundus, resize
// to output_size and zero everything beyond clip_fraction of the radius.
Image normalize_image(const Image& image, const PreprocessConfig& cfg);

}  // namespace drgrade
