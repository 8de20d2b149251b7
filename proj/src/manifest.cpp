#include "drgrade/manifest.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <unordered_set>

#include "drgrade/errors.hpp"
#include "drgrade/random.hpp"

namespace drgrade {
namespace {

const char* kHeader = "image_path,patient_id,eye,grade";

Eye parse_eye(const std::string& s, std::size_t line) {
  if (s == "left") return Eye::left;
  if (s == "right") return Eye::right;
  if (s.empty() || s == "unknown") return Eye::unknown;
  throw FormatError(fmt::format("manifest line {}: eye must be left, right or unknown, got '{}'", line, s));
}

const char* eye_name(Eye e) {
  switch (e) {
    case Eye::left: return "left";
    case Eye::right: return "right";
    default: return "unknown";
  }
}

std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c); };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

}  // namespace

std::string ImageRecord::id() const { return std::filesystem::path(image_path).stem().string(); }

std::filesystem::path DatasetManifest::resolve(const ImageRecord& r) const {
  std::filesystem::path p(r.image_path);
  return p.is_absolute() ? p : base_dir / p;
}

std::array<std::size_t, 5> DatasetManifest::grade_counts() const {
  std::array<std::size_t, 5> c{};
  for (const auto& r : rows)
    if (r.grade >= 0) ++c[std::size_t(r.grade)];
  return c;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string csv_field(const std::string& value) {
  if (value.find_first_of(",\"\n") == std::string::npos) return value;
  std::string q = "\"";
  for (char c : value) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

DatasetManifest load_manifest(const std::filesystem::path& path, bool require_files) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  std::string line;
  if (!std::getline(in, line) || trim(line) != kHeader)
    throw FormatError(path.string() + ": expected header '" + kHeader + "'");
  std::unordered_set<std::string> paths, ids;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 4)
      throw FormatError(fmt::format("{} line {}: expected 4 fields, got {}", path.string(), lineno, f.size()));
    ImageRecord r;
    r.image_path = trim(f[0]);
    r.patient_id = trim(f[1]);
    r.eye = parse_eye(trim(f[2]), lineno);
    const std::string g = trim(f[3]);
    try {
      std::size_t used = 0;
      r.grade = std::stoi(g, &used);
      if (used != g.size()) throw std::invalid_argument(g);
    } catch (const std::exception&) {
      throw FormatError(fmt::format("{} line {}: grade '{}' is not an integer", path.string(), lineno, g));
    }
    if (r.grade < -1 || r.grade > 4)
      throw FormatError(fmt::format("{} line {}: grade {} outside 0..4 (or -1 for unlabeled)", path.string(),
                                    lineno, r.grade));
    if (r.image_path.empty()) throw FormatError(fmt::format("{} line {}: empty image_path", path.string(), lineno));
    if (!paths.insert(r.image_path).second)
      throw FormatError(fmt::format("{} line {}: duplicate image_path '{}'", path.string(), lineno, r.image_path));
    if (!ids.insert(r.id()).second)
      throw FormatError(fmt::format("{} line {}: duplicate image id '{}'", path.string(), lineno, r.id()));
    if (require_files && !std::filesystem::exists(m.resolve(r)))
      throw FormatError(fmt::format("{} line {}: file not found: {}", path.string(), lineno, m.resolve(r).string()));
    m.rows.push_back(std::move(r));
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  std::filesystem::create_directories(dir);
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write manifest " + path.string());
  out << kHeader << '\n';
  for (const auto& r : manifest.rows) {
    auto resolved = manifest.resolve(r);
    std::string p = std::filesystem::path(r.image_path).is_absolute()
                        ? r.image_path
                        : std::filesystem::proximate(resolved, dir).generic_string();
    out << csv_field(p) << ',' << csv_field(r.patient_id) << ',' << eye_name(r.eye) << ',' << r.grade << '\n';
  }
}

DatasetSplit split_dataset(const DatasetManifest& manifest, std::size_t validation_per_class, std::uint64_t seed) {
  const auto counts = manifest.grade_counts();
  for (int g = 0; g < 5; ++g)
    if (counts[g] <= validation_per_class)
      throw ConfigError(fmt::format("grade {} has {} images; need more than {} to hold out a validation set", g,
                                    counts[g], validation_per_class));

  // Group rows by patient; rows without a patient id form their own group.
  std::map<std::string, std::vector<std::size_t>> by_patient;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
    const auto& r = manifest.rows[i];
    if (r.grade < 0) throw ConfigError("cannot split unlabeled image " + r.image_path);
    if (r.patient_id.empty())
      groups.push_back({i});
    else
      by_patient[r.patient_id].push_back(i);
  }
  for (auto& [_, rows] : by_patient) groups.push_back(std::move(rows));

  Rng rng(seed);
  std::shuffle(groups.begin(), groups.end(), rng);

  std::array<std::size_t, 5> taken{};
  std::vector<bool> in_val(manifest.rows.size(), false);
  for (const auto& grp : groups) {
    std::array<std::size_t, 5> need{};
    for (auto i : grp) ++need[std::size_t(manifest.rows[i].grade)];
    bool fits = true;
    bool useful = false;
    for (int g = 0; g < 5; ++g) {
      if (taken[g] + need[g] > validation_per_class) fits = false;
      if (need[g] > 0 && taken[g] < validation_per_class) useful = true;
    }
    if (!fits || !useful) continue;
    for (int g = 0; g < 5; ++g) taken[g] += need[g];
    for (auto i : grp) in_val[i] = true;
  }
  for (int g = 0; g < 5; ++g)
    if (taken[g] != validation_per_class)
      throw ConfigError(fmt::format(
          "cannot hold out exactly {} patient-disjoint validation images for grade {} (reached {})",
          validation_per_class, g, taken[g]));

  DatasetSplit split{{manifest.base_dir, {}}, {manifest.base_dir, {}}};
  for (std::size_t i = 0; i < manifest.rows.size(); ++i)
    (in_val[i] ? split.validation : split.train).rows.push_back(manifest.rows[i]);
  return split;
}

GradeStats grade_stats(const std::array<std::size_t, 5>& counts, std::size_t unlabeled) {
  GradeStats s;
  s.counts = counts;
  s.unlabeled = unlabeled;
  const std::size_t labeled = std::accumulate(counts.begin(), counts.end(), std::size_t(0));
  s.total = labeled + unlabeled;
  for (int g = 0; g < 5; ++g) s.percent[g] = labeled ? 100.0 * double(counts[g]) / double(labeled) : 0.0;
  return s;
}

GradeStats grade_stats(const DatasetManifest& manifest) {
  std::size_t unlabeled = 0;
  for (const auto& r : manifest.rows)
    if (r.grade < 0) ++unlabeled;
  return grade_stats(manifest.grade_counts(), unlabeled);
}

std::string format_grade_stats(const GradeStats& s) {
  static const char* names[5] = {"Normal", "Mild NPDR", "Moderate NPDR", "Severe NPDR", "Proliferative DR"};
  std::string out = fmt::format("{:<6}{:<18}{:>10}{:>10}\n", "grade", "name", "images", "percent");
  for (int g = 0; g < 5; ++g)
    out += fmt::format("{:<6}{:<18}{:>10}{:>9.2f}%\n", g, names[g], s.counts[g], s.percent[g]);
  if (s.unlabeled) out += fmt::format("{:<24}{:>10}\n", "unlabeled", s.unlabeled);
  out += fmt::format("{:<24}{:>10}\n", "total", s.total);
  return out;
}

}  // namespace drgrade
