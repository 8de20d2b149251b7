#include "drgrade/metrics.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "drgrade/errors.hpp"
#include "drgrade/manifest.hpp"

namespace drgrade {
namespace {

void check_grades(std::span<const int> y_true, std::span<const int> y_pred) {
  if (y_true.size() != y_pred.size())
    throw UsageError(fmt::format("truth has {} entries, predictions {}", y_true.size(), y_pred.size()));
  auto bad = [](int g) { return g < 0 || g >= kGrades; };
  if (std::any_of(y_true.begin(), y_true.end(), bad) || std::any_of(y_pred.begin(), y_pred.end(), bad))
    throw UsageError("grades must lie in 0..4");
}

std::int64_t total(const ConfusionMatrix& cm) {
  std::int64_t n = 0;
  for (const auto& row : cm)
    for (auto v : row) n += v;
  return n;
}

}  // namespace

Binarization healthy_vs_sick() { return {"healthy_vs_sick", {false, true, true, true, true}}; }
Binarization low_vs_high() { return {"low_vs_high", {false, false, true, true, true}}; }

Binarization binarization_by_name(const std::string& name) {
  if (name == "healthy_vs_sick") return healthy_vs_sick();
  if (name == "low_vs_high") return low_vs_high();
  throw ConfigError("unknown binarization '" + name + "' (healthy_vs_sick or low_vs_high)");
}

int discretize(double score) {
  if (std::isnan(score)) throw UsageError("discretize: score is NaN");
  int grade = 0;
  for (double t : kGradeThresholds)
    if (score >= t) ++grade;
  return grade;
}

ConfusionMatrix confusion_matrix(std::span<const int> y_true, std::span<const int> y_pred) {
  check_grades(y_true, y_pred);
  ConfusionMatrix cm{};
  for (std::size_t i = 0; i < y_true.size(); ++i) ++cm[std::size_t(y_true[i])][std::size_t(y_pred[i])];
  return cm;
}

double quadratic_weighted_kappa(const ConfusionMatrix& observed) {
  const std::int64_t n = total(observed);
  if (n < 2) throw UndefinedMetric("quadratic weighted kappa needs at least two samples");
  std::array<double, kGrades> rows{}, cols{};
  for (int i = 0; i < kGrades; ++i)
    for (int j = 0; j < kGrades; ++j) {
      rows[i] += double(observed[i][j]);
      cols[j] += double(observed[i][j]);
    }
  double num = 0.0, den = 0.0;
  const double scale = double((kGrades - 1) * (kGrades - 1));
  for (int i = 0; i < kGrades; ++i)
    for (int j = 0; j < kGrades; ++j) {
      const double w = double((i - j) * (i - j)) / scale;
      num += w * double(observed[i][j]);
      den += w * rows[i] * cols[j] / double(n);
    }
  if (den == 0.0) {
    spdlog::warn("quadratic weighted kappa: no expected disagreement (single identical label on both sides); "
                 "reporting 1.0");
    return 1.0;
  }
  return 1.0 - num / den;
}

double quadratic_weighted_kappa(std::span<const int> y_true, std::span<const int> y_pred) {
  return quadratic_weighted_kappa(confusion_matrix(y_true, y_pred));
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw UsageError("roc_auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * double(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetric("roc_auc: both classes must be present");
  const double u = pos_rank_sum - 0.5 * double(n_pos) * double(n_pos + 1);
  return u / (double(n_pos) * double(n_neg));
}

SensSpec sensitivity_specificity(const ConfusionMatrix& cm, const Binarization& split) {
  SensSpec s{0, 0, 0, 0, 0, 0};
  for (int t = 0; t < kGrades; ++t)
    for (int p = 0; p < kGrades; ++p) {
      const bool tp = split.is_positive(t), pp = split.is_positive(p);
      if (tp && pp) s.tp += cm[t][p];
      else if (tp) s.fn += cm[t][p];
      else if (pp) s.fp += cm[t][p];
      else s.tn += cm[t][p];
    }
  if (s.tp + s.fn == 0) throw UndefinedMetric(split.name + ": no positive cases in truth; sensitivity undefined");
  if (s.tn + s.fp == 0) throw UndefinedMetric(split.name + ": no negative cases in truth; specificity undefined");
  s.sensitivity = double(s.tp) / double(s.tp + s.fn);
  s.specificity = double(s.tn) / double(s.tn + s.fp);
  return s;
}

SensSpec sensitivity_specificity(std::span<const int> y_true, std::span<const int> y_pred, const Binarization& split) {
  return sensitivity_specificity(confusion_matrix(y_true, y_pred), split);
}

double f_score(std::span<const int> y_true, std::span<const int> y_pred) {
  const ConfusionMatrix cm = confusion_matrix(y_true, y_pred);
  double sum = 0.0;
  int classes = 0;
  for (int c = 0; c < kGrades; ++c) {
    std::int64_t tp = cm[c][c], fn = 0, fp = 0;
    for (int o = 0; o < kGrades; ++o)
      if (o != c) {
        fn += cm[c][o];
        fp += cm[o][c];
      }
    if (tp + fn + fp == 0) continue;  // absent from truth and prediction
    ++classes;
    const double precision = tp + fp ? double(tp) / double(tp + fp) : 0.0;
    const double recall = tp + fn ? double(tp) / double(tp + fn) : 0.0;
    sum += precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  return classes ? sum / classes : 0.0;
}

EvalReport evaluate_scores(std::span<const double> scores, std::span<const int> truth,
                           const std::string& auc_binarization) {
  if (scores.size() != truth.size()) throw UsageError("evaluate: scores and truth differ in length");
  EvalReport r;
  r.count = scores.size();
  r.auc_binarization = auc_binarization;
  std::vector<double> clamped(scores.size());
  std::vector<int> pred(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw UsageError(fmt::format("evaluate: score {} is not finite", i));
    clamped[i] = std::clamp(scores[i], 0.0, 4.0);
    pred[i] = discretize(clamped[i]);
  }
  r.confusion = confusion_matrix(truth, pred);
  try {
    r.kappa = quadratic_weighted_kappa(r.confusion);
  } catch (const UndefinedMetric& e) {
    r.kappa = std::nan("");
    r.warnings.push_back(e.what());
  }
  r.f_score = f_score(truth, pred);
  for (const auto& split : {healthy_vs_sick(), low_vs_high()}) {
    BinaryReport b;
    try {
      b.rates = sensitivity_specificity(r.confusion, split);
      std::vector<int> labels(truth.size());
      for (std::size_t i = 0; i < truth.size(); ++i) labels[i] = split.is_positive(truth[i]) ? 1 : 0;
      b.auc = roc_auc(clamped, labels);
    } catch (const UndefinedMetric& e) {
      b.note = e.what();
      r.warnings.push_back(e.what());
    }
    r.binarizations[split.name] = b;
  }
  binarization_by_name(auc_binarization);
  r.auc = r.binarizations.at(auc_binarization).auc;
  return r;
}

nlohmann::json report_to_json(const EvalReport& r) {
  using nlohmann::json;
  json cm = json::array();
  for (const auto& row : r.confusion) cm.push_back(json(std::vector<std::int64_t>(row.begin(), row.end())));
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json bins = json::object();
  for (const auto& [name, b] : r.binarizations) {
    json e{{"auc", opt(b.auc)}, {"note", b.note}};
    if (b.rates) {
      e["sensitivity"] = b.rates->sensitivity;
      e["specificity"] = b.rates->specificity;
      e["tp"] = b.rates->tp;
      e["fn"] = b.rates->fn;
      e["tn"] = b.rates->tn;
      e["fp"] = b.rates->fp;
    } else {
      e["sensitivity"] = nullptr;
      e["specificity"] = nullptr;
    }
    bins[name] = e;
  }
  return json{{"schema", kEvalReportSchema},
              {"count", r.count},
              {"thresholds", std::vector<double>(kGradeThresholds.begin(), kGradeThresholds.end())},
              {"confusion_matrix", cm},
              {"quadratic_weighted_kappa", std::isnan(r.kappa) ? json(nullptr) : json(r.kappa)},
              {"f_score_macro", r.f_score},
              {"auc", {{"binarization", r.auc_binarization}, {"value", opt(r.auc)}}},
              {"binarizations", bins},
              {"warnings", r.warnings}};
}

void validate_report_json(const nlohmann::json& j) {
  auto need = [&](const nlohmann::json& obj, const char* key, auto pred, const char* what) {
    if (!obj.contains(key) || !pred(obj.at(key)))
      throw FormatError(fmt::format("eval report: field '{}' missing or not {}", key, what));
  };
  auto is_num_or_null = [](const nlohmann::json& v) { return v.is_number() || v.is_null(); };
  need(j, "schema", [](const auto& v) { return v.is_string() && v == kEvalReportSchema; }, "the expected schema id");
  need(j, "count", [](const auto& v) { return v.is_number_unsigned(); }, "an unsigned count");
  need(j, "confusion_matrix", [](const auto& v) { return v.is_array() && v.size() == kGrades; }, "a 5x5 matrix");
  std::int64_t sum = 0;
  for (const auto& row : j.at("confusion_matrix")) {
    if (!row.is_array() || row.size() != kGrades) throw FormatError("eval report: confusion_matrix rows must have 5 entries");
    for (const auto& v : row) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
        throw FormatError("eval report: confusion_matrix entries must be non-negative integers");
      sum += v.get<std::int64_t>();
    }
  }
  if (sum != j.at("count").get<std::int64_t>()) throw FormatError("eval report: confusion_matrix does not sum to count");
  need(j, "quadratic_weighted_kappa", is_num_or_null, "a number");
  if (j.at("quadratic_weighted_kappa").is_number()) {
    const double k = j.at("quadratic_weighted_kappa");
    if (k < -1.0 - 1e-12 || k > 1.0 + 1e-12) throw FormatError("eval report: kappa outside [-1, 1]");
  }
  need(j, "f_score_macro", [](const auto& v) { return v.is_number(); }, "a number");
  need(j, "auc", [](const auto& v) { return v.is_object(); }, "an object");
  need(j.at("auc"), "binarization", [](const auto& v) { return v.is_string(); }, "a string");
  need(j.at("auc"), "value", is_num_or_null, "a number");
  need(j, "binarizations", [](const auto& v) { return v.is_object(); }, "an object");
  for (const char* name : {"healthy_vs_sick", "low_vs_high"}) {
    if (!j.at("binarizations").contains(name)) throw FormatError(fmt::format("eval report: binarization {} missing", name));
    const auto& b = j.at("binarizations").at(name);
    for (const char* key : {"sensitivity", "specificity", "auc"}) {
      need(b, key, is_num_or_null, "a number");
      if (b.at(key).is_number() && (b.at(key).get<double>() < 0.0 || b.at(key).get<double>() > 1.0))
        throw FormatError(fmt::format("eval report: {}.{} outside [0, 1]", name, key));
    }
  }
}

std::string report_to_text(const EvalReport& r) {
  auto num = [](const std::optional<double>& v) { return v ? fmt::format("{:.4f}", *v) : std::string("n/a"); };
  std::string out = fmt::format("images: {}\n", r.count);
  out += "confusion matrix (rows = truth, cols = predicted grade)\n";
  for (int t = 0; t < kGrades; ++t) {
    out += fmt::format("  {}:", t);
    for (int p = 0; p < kGrades; ++p) out += fmt::format(" {:>7}", r.confusion[t][p]);
    out += '\n';
  }
  out += fmt::format("quadratic weighted kappa: {}\n", std::isnan(r.kappa) ? std::string("n/a") : fmt::format("{:.4f}", r.kappa));
  out += fmt::format("macro F1:                 {:.4f}\n", r.f_score);
  out += fmt::format("AUC ({}): {}\n", r.auc_binarization, num(r.auc));
  for (const auto& [name, b] : r.binarizations) {
    if (b.rates)
      out += fmt::format("{}: sensitivity {:.4f} specificity {:.4f} auc {}\n", name, b.rates->sensitivity,
                         b.rates->specificity, num(b.auc));
    else
      out += fmt::format("{}: {}\n", name, b.note);
  }
  for (const auto& w : r.warnings) out += "warning: " + w + '\n';
  return out;
}

EvalReport evaluate_files(const std::filesystem::path& predictions, const std::filesystem::path& manifest_path,
                          const std::string& auc_binarization) {
  const DatasetManifest manifest = load_manifest(manifest_path);
  std::ifstream in(predictions);
  if (!in) throw FormatError("cannot open predictions " + predictions.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("image_id,score", 0) != 0)
    throw FormatError(predictions.string() + ": expected header 'image_id,score'");
  std::unordered_map<std::string, double> by_id;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() != 2) throw FormatError(fmt::format("{} line {}: expected 2 fields", predictions.string(), lineno));
    try {
      by_id[f[0]] = std::stod(f[1]);
    } catch (const std::exception&) {
      throw FormatError(fmt::format("{} line {}: bad score '{}'", predictions.string(), lineno, f[1]));
    }
  }
  std::vector<double> scores;
  std::vector<int> truth;
  std::vector<std::string> missing;
  std::size_t matched = 0;
  for (const auto& r : manifest.rows) {
    if (r.grade < 0) continue;
    auto it = by_id.find(r.id());
    if (it == by_id.end()) {
      missing.push_back(r.id());
      continue;
    }
    ++matched;
    scores.push_back(it->second);
    truth.push_back(r.grade);
  }
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
    throw FormatError(fmt::format("{} manifest images have no prediction: {}{}", missing.size(), list,
                                  missing.size() > 20 ? ", ..." : ""));
  }
  if (by_id.size() != matched) {
    std::unordered_map<std::string, bool> known;
    for (const auto& r : manifest.rows) known[r.id()] = true;
    for (const auto& [id, _] : by_id)
      if (!known.count(id)) throw FormatError("prediction for unknown image id '" + id + "'");
  }
  return evaluate_scores(scores, truth, auc_binarization);
}

}  // namespace drgrade
