#pragma once

#include <cstdint>
#include <filesystem>

#include "drgrade/image.hpp"
#include "drgrade/manifest.hpp"
#include "drgrade/random.hpp"

namespace drgrade {

// Fundus-like disk on black with an optic disc and 4 * grade small bright
// lesions; `right` mirrors the optic disc position.
Image synth_fundus(std::size_t size, int grade, bool right, Rng& rng);

// Flat disk whose mean brightness is a linear function of the grade.
Image synth_brightness_image(std::size_t size, int grade, Rng& rng);

struct SynthOptions {
  std::size_t count = 64;  // rounded down to an even number (two eyes per patient)
  std::size_t size = 128;
  std::uint64_t seed = 0;
};

// Writes `<dir>/images/p<k>_<eye>.png` and `<dir>/manifest.csv`. Patient k
// has grade k mod 5 in both eyes.
DatasetManifest write_synth_dataset(const std::filesystem::path& dir, const SynthOptions& options);

// `<dir>/images/b<k>.png` brightness images, image k of grade k mod 5.
DatasetManifest write_brightness_dataset(const std::filesystem::path& dir, const SynthOptions& options);

}  // namespace drgrade
