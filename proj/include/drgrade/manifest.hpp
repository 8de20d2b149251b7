#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace drgrade {

enum class Eye { left, right, unknown };

struct ImageRecord {
  std::string image_path;  // as written in the manifest
  std::string patient_id;
  Eye eye = Eye::unknown;
  int grade = -1;  // 0..4, or -1 when unlabeled

  // File stem of image_path; unique within a manifest.
  std::string id() const;
};

// CSV with header `image_path,patient_id,eye,grade`. Relative paths are
// resolved against the manifest's directory.
struct DatasetManifest {
  std::filesystem::path base_dir;
  std::vector<ImageRecord> rows;

  std::filesystem::path resolve(const ImageRecord& r) const;
  std::array<std::size_t, 5> grade_counts() const;
};

DatasetManifest load_manifest(const std::filesystem::path& path, bool require_files = false);
// Paths are rewritten relative to the destination directory.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct DatasetSplit {
  DatasetManifest train;
  DatasetManifest validation;
};

// Holds out exactly `validation_per_class` images per grade, keeping both
// eyes of a patient on the same side.
DatasetSplit split_dataset(const DatasetManifest& manifest, std::size_t validation_per_class, std::uint64_t seed);

struct GradeStats {
  std::array<std::size_t, 5> counts{};
  std::size_t unlabeled = 0;
  std::size_t total = 0;
  std::array<double, 5> percent{};  // of labeled images
};

GradeStats grade_stats(const std::array<std::size_t, 5>& counts, std::size_t unlabeled = 0);
GradeStats grade_stats(const DatasetManifest& manifest);
std::string format_grade_stats(const GradeStats& stats);

// Minimal RFC-4180 style field splitting (double quotes, doubled quotes).
std::vector<std::string> split_csv_line(const std::string& line);
std::string csv_field(const std::string& value);

}  // namespace drgrade
