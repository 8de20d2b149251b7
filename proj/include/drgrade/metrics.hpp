#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace drgrade {

inline constexpr int kGrades = 5;
inline constexpr std::array<double, 4> kGradeThresholds{0.5, 1.5, 2.5, 3.5};

using ConfusionMatrix = std::array<std::array<std::int64_t, kGrades>, kGrades>;  // [truth][pred]

// A two-way split of the five grades; `positive` marks grades counted as
// disease-positive.
struct Binarization {
  std::string name;
  std::array<bool, kGrades> positive{};

  bool is_positive(int grade) const { return positive.at(std::size_t(grade)); }
};

Binarization healthy_vs_sick();  // {0} vs {1,2,3,4}
Binarization low_vs_high();      // {0,1} vs {2,3,4}
Binarization binarization_by_name(const std::string& name);

// Number of thresholds <= score; boundaries map upward.
int discretize(double score);

double quadratic_weighted_kappa(std::span<const int> y_true, std::span<const int> y_pred);
double quadratic_weighted_kappa(const ConfusionMatrix& observed);

// Mann-Whitney form with tie correction: P(pos > neg) + P(tie) / 2.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct SensSpec {
  double sensitivity;
  double specificity;
  std::int64_t tp, fn, tn, fp;
};

SensSpec sensitivity_specificity(std::span<const int> y_true, std::span<const int> y_pred, const Binarization& split);
SensSpec sensitivity_specificity(const ConfusionMatrix& cm, const Binarization& split);

// Macro F1 over the grades present in truth or prediction.
double f_score(std::span<const int> y_true, std::span<const int> y_pred);

ConfusionMatrix confusion_matrix(std::span<const int> y_true, std::span<const int> y_pred);

struct BinaryReport {
  std::optional<SensSpec> rates;  // empty when a class is absent from truth
  std::optional<double> auc;
  std::string note;
};

struct EvalReport {
  std::size_t count = 0;
  ConfusionMatrix confusion{};
  double kappa = 0.0;
  double f_score = 0.0;
  std::string auc_binarization = "healthy_vs_sick";
  std::optional<double> auc;
  std::map<std::string, BinaryReport> binarizations;
  std::vector<std::string> warnings;
};

// Scores are clamped to [0, 4] before discretization.
EvalReport evaluate_scores(std::span<const double> scores, std::span<const int> truth,
                           const std::string& auc_binarization = "healthy_vs_sick");

inline constexpr const char* kEvalReportSchema = "drgrade.eval_report/1";
nlohmann::json report_to_json(const EvalReport& report);
std::string report_to_text(const EvalReport& report);
// Throws FormatError naming the first missing or mistyped field.
void validate_report_json(const nlohmann::json& j);

// Predictions CSV `image_id,score` against a manifest; ids are the manifest
// image ids (file stems). Every labeled row needs a prediction and every
// prediction a manifest row.
EvalReport evaluate_files(const std::filesystem::path& predictions, const std::filesystem::path& manifest,
                          const std::string& auc_binarization = "healthy_vs_sick");

}  // namespace drgrade
