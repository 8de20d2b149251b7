#include "drgrade/augment.hpp"

#include <Eigen/Dense>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "drgrade/errors.hpp"

namespace drgrade {
namespace {

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || !std::isfinite(v))
    throw FormatError(fmt::format("augment params: bad value '{}' for '{}'", value, key));
  return v;
}

// Row-major 2x2.
struct Mat2 {
  double a, b, c, d;
  Mat2 operator*(const Mat2& o) const {
    return {a * o.a + b * o.c, a * o.b + b * o.d, c * o.a + d * o.c, c * o.b + d * o.d};
  }
};

}  // namespace

std::string AugmentParams::serialize() const {
  return fmt::format("rot={:.17g};shear={:.17g};fh={};fv={};zoom={:.17g};crop={:.17g};tx={:.17g};ty={:.17g};"
                     "alpha={:.17g}|{:.17g}|{:.17g}",
                     rotation_deg, shear_deg, int(flip_h), int(flip_v), zoom, crop_fraction, translate_x, translate_y,
                     color_alpha[0], color_alpha[1], color_alpha[2]);
}

AugmentParams AugmentParams::parse(const std::string& text) {
  AugmentParams p;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw FormatError("augment params: missing '=' in '" + item + "'");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    if (key == "rot") p.rotation_deg = parse_double(key, value);
    else if (key == "shear") p.shear_deg = parse_double(key, value);
    else if (key == "fh") p.flip_h = parse_double(key, value) != 0.0;
    else if (key == "fv") p.flip_v = parse_double(key, value) != 0.0;
    else if (key == "zoom") p.zoom = parse_double(key, value);
    else if (key == "crop") p.crop_fraction = parse_double(key, value);
    else if (key == "tx") p.translate_x = parse_double(key, value);
    else if (key == "ty") p.translate_y = parse_double(key, value);
    else if (key == "alpha") {
      std::stringstream as(value);
      std::string part;
      std::size_t i = 0;
      while (std::getline(as, part, '|')) {
        if (i >= 3) throw FormatError("augment params: alpha needs 3 values");
        p.color_alpha[i++] = parse_double(key, part);
      }
      if (i != 3) throw FormatError("augment params: alpha needs 3 values");
    } else {
      throw FormatError("augment params: unknown key '" + key + "'");
    }
  }
  if (!(p.zoom > 0.0)) throw FormatError("augment params: zoom must be positive");
  if (!(p.crop_fraction > 0.0 && p.crop_fraction <= 1.0)) throw FormatError("augment params: crop must be in (0, 1]");
  return p;
}

AugmentParams sample_params(Rng& rng, const AugmentRanges& r) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> alpha(0.0, r.alpha_std);
  std::bernoulli_distribution coin(0.5);
  AugmentParams p;
  p.rotation_deg = unit(rng) * r.rotation_max;
  p.shear_deg = (2.0 * unit(rng) - 1.0) * r.shear_max;
  p.flip_h = coin(rng);
  p.flip_v = coin(rng);
  const double zmin = 1.0 / r.zoom_max;
  p.zoom = zmin + unit(rng) * (r.zoom_max - zmin);
  p.crop_fraction = r.crop_min + unit(rng) * (r.crop_max - r.crop_min);
  p.translate_x = (2.0 * unit(rng) - 1.0) * r.translate_max;
  p.translate_y = (2.0 * unit(rng) - 1.0) * r.translate_max;
  for (auto& a : p.color_alpha) a = r.alpha_std > 0.0 ? alpha(rng) : 0.0;
  return p;
}

nlohmann::json ColorPca::to_json() const {
  return {{"eigenvectors", eigenvectors}, {"eigenvalues", eigenvalues}, {"singular", singular}};
}

ColorPca ColorPca::from_json(const nlohmann::json& j) {
  ColorPca p;
  try {
    p.eigenvectors = j.at("eigenvectors").get<decltype(p.eigenvectors)>();
    p.eigenvalues = j.at("eigenvalues").get<decltype(p.eigenvalues)>();
    p.singular = j.at("singular").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("color pca: ") + e.what());
  }
  return p;
}

ColorPca color_pca(std::span<const std::array<float, 3>> pixels) {
  if (pixels.size() < kMinPcaPixels)
    throw ConfigError(fmt::format("color pca needs at least {} pixels, got {}", kMinPcaPixels, pixels.size()));
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : pixels) mean += Eigen::Vector3d(p[0], p[1], p[2]) / 255.0;
  mean /= double(pixels.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : pixels) {
    const Eigen::Vector3d d = Eigen::Vector3d(p[0], p[1], p[2]) / 255.0 - mean;
    cov += d * d.transpose();
  }
  cov /= double(pixels.size() - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov);
  ColorPca out;
  for (int k = 0; k < 3; ++k) {
    const int src = 2 - k;  // solver sorts ascending
    out.eigenvalues[std::size_t(k)] = std::max(0.0, solver.eigenvalues()[src]);
    Eigen::Vector3d v = solver.eigenvectors().col(src);
    // Deterministic sign: largest-magnitude entry positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    for (int c = 0; c < 3; ++c) out.eigenvectors[std::size_t(k)][std::size_t(c)] = v[c];
  }
  const double top = out.eigenvalues[0];
  out.singular = !(top > 0.0) || out.eigenvalues[2] <= 1e-9 * top;
  return out;
}

Image apply_augment(const Image& image, const AugmentParams& p, const ColorPca* pca) {
  if (image.empty()) throw UsageError("apply_augment: empty image");
  if (!(p.zoom > 0.0)) throw UsageError("apply_augment: zoom must be positive");
  if (!(p.crop_fraction > 0.0 && p.crop_fraction <= 1.0)) throw UsageError("apply_augment: crop must be in (0, 1]");

  const double deg = std::numbers::pi / 180.0;
  const double th = p.rotation_deg * deg;
  const double cs = p.rotation_deg == 0.0 ? 1.0 : std::cos(th);
  const double sn = p.rotation_deg == 0.0 ? 0.0 : std::sin(th);
  const Mat2 rot{cs, -sn, sn, cs};
  const Mat2 shear{1.0, p.shear_deg == 0.0 ? 0.0 : std::tan(p.shear_deg * deg), 0.0, 1.0};
  const Mat2 scale{p.zoom, 0.0, 0.0, p.zoom};
  const Mat2 flip{p.flip_h ? -1.0 : 1.0, 0.0, 0.0, p.flip_v ? -1.0 : 1.0};
  const Mat2 fwd = rot * shear * scale * flip;
  const double det = fwd.a * fwd.d - fwd.b * fwd.c;
  if (!(std::abs(det) > 1e-12)) throw UsageError("apply_augment: degenerate transform");
  const Mat2 inv{fwd.d / det, -fwd.b / det, -fwd.c / det, fwd.a / det};

  const double cx = (double(image.width) - 1.0) / 2.0;
  const double cy = (double(image.height) - 1.0) / 2.0;
  Image warped(image.width, image.height);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      const double u = double(x) - cx - p.translate_x;
      const double v = double(y) - cy - p.translate_y;
      const double sx = inv.a * u + inv.b * v + cx;
      const double sy = inv.c * u + inv.d * v + cy;
      for (std::size_t c = 0; c < 3; ++c) warped.at(x, y, c) = sample_bilinear(image, sx, sy, c);
    }

  Image out;
  if (p.crop_fraction < 1.0) {
    const auto cw = std::max<std::size_t>(1, std::size_t(std::lround(double(image.width) * p.crop_fraction)));
    const auto ch = std::max<std::size_t>(1, std::size_t(std::lround(double(image.height) * p.crop_fraction)));
    const auto x0 = std::ptrdiff_t((image.width - cw) / 2);
    const auto y0 = std::ptrdiff_t((image.height - ch) / 2);
    out = resize(crop(warped, x0, y0, cw, ch), image.width, image.height);
  } else {
    out = std::move(warped);
  }

  if (pca && !pca->singular) {
    std::array<float, 3> shift{};
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += pca->eigenvectors[k][c] * p.color_alpha[k] * pca->eigenvalues[k];
      shift[c] = float(s * 255.0);
    }
    if (shift != std::array<float, 3>{})
      for (std::size_t i = 0; i < out.px.size(); ++i) out.px[i] += shift[i % 3];
  }
  clamp_to_byte_range(out);
  return out;
}

AugmentPlan build_plan(const std::array<std::size_t, 5>& raw_counts, std::size_t validation_per_class,
                       const std::array<int, 5>& multipliers) {
  AugmentPlan plan;
  plan.multipliers = multipliers;
  plan.raw = raw_counts;
  for (std::size_t g = 0; g < 5; ++g) {
    if (multipliers[g] < 0) throw ConfigError(fmt::format("augment plan: multiplier for grade {} is negative", g));
    if (raw_counts[g] <= validation_per_class)
      throw ConfigError(fmt::format("augment plan: grade {} has {} images, not enough to hold out {}", g, raw_counts[g],
                                    validation_per_class));
    plan.validation[g] = validation_per_class;
    plan.train[g] = raw_counts[g] - validation_per_class;
    plan.totals[g] = plan.train[g] * std::size_t(multipliers[g] + 1);
  }
  return plan;
}

AugmentPlan build_plan(const DatasetManifest& manifest, std::size_t validation_per_class,
                       const std::array<int, 5>& multipliers) {
  return build_plan(manifest.grade_counts(), validation_per_class, multipliers);
}

nlohmann::json ChannelStats::to_json() const { return {{"mean", mean}, {"std", stddev}}; }

ChannelStats ChannelStats::from_json(const nlohmann::json& j) {
  ChannelStats s;
  try {
    s.mean = j.at("mean").get<std::array<double, 3>>();
    s.stddev = j.at("std").get<std::array<double, 3>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("channel stats: ") + e.what());
  }
  for (double v : s.stddev)
    if (!(v > 0.0)) throw FormatError("channel stats: std must be positive");
  return s;
}

void ChannelStatsAccumulator::add(const Image& image) {
  for (std::size_t i = 0; i < image.px.size(); ++i) {
    const double v = image.px[i];
    sum_[i % 3] += v;
    sum_sq_[i % 3] += v * v;
  }
  count_ += image.width * image.height;
}

ChannelStats ChannelStatsAccumulator::finish() const {
  if (count_ == 0) throw ConfigError("channel stats: no pixels");
  ChannelStats s;
  for (std::size_t c = 0; c < 3; ++c) {
    s.mean[c] = sum_[c] / double(count_);
    const double var = std::max(0.0, sum_sq_[c] / double(count_) - s.mean[c] * s.mean[c]);
    s.stddev[c] = std::sqrt(var);
    if (!(s.stddev[c] > 1e-6)) throw ConfigError(fmt::format("channel stats: channel {} is constant", c));
  }
  return s;
}

ChannelStats compute_channel_stats(std::span<const Image> images) {
  ChannelStatsAccumulator acc;
  for (const auto& img : images) acc.add(img);
  return acc.finish();
}

namespace {

template <bool Forward>
void apply_channel_affine(Tensor<float>& t, const ChannelStats& stats) {
  std::size_t channel_axis = 0;
  if (t.rank() == 4) channel_axis = 1;
  else if (t.rank() != 3) throw UsageError("standardize: expected (3,H,W) or (N,3,H,W), got " + shape_str(t.shape()));
  if (t.dim(channel_axis) != 3) throw UsageError("standardize: expected 3 channels, got " + shape_str(t.shape()));
  const std::size_t plane = t.dim(channel_axis + 1) * t.dim(channel_axis + 2);
  const std::size_t groups = t.size() / (3 * plane);
  float* d = t.data();
  for (std::size_t n = 0; n < groups; ++n)
    for (std::size_t c = 0; c < 3; ++c) {
      float* p = d + (n * 3 + c) * plane;
      const auto m = float(stats.mean[c]), s = float(stats.stddev[c]);
      for (std::size_t i = 0; i < plane; ++i) p[i] = Forward ? (p[i] - m) / s : p[i] * s + m;
    }
}

}  // namespace

void standardize(Tensor<float>& t, const ChannelStats& stats) { apply_channel_affine<true>(t, stats); }
void unstandardize(Tensor<float>& t, const ChannelStats& stats) { apply_channel_affine<false>(t, stats); }

std::vector<std::array<float, 3>> sample_pixels(const DatasetManifest& manifest, std::size_t count,
                                                std::uint64_t seed) {
  std::vector<std::array<float, 3>> out;
  if (manifest.rows.empty()) return out;
  const std::size_t per_image = (count + manifest.rows.size() - 1) / manifest.rows.size();
  for (const auto& row : manifest.rows) {
    const Image img = load_image(manifest.resolve(row));
    std::vector<std::size_t> fundus;
    for (std::size_t i = 0; i < img.width * img.height; ++i)
      if (img.px[3 * i] + img.px[3 * i + 1] + img.px[3 * i + 2] > 0.0f) fundus.push_back(i);
    if (fundus.empty()) continue;
    Rng rng(derive_seed(seed, row.id(), 0));
    std::uniform_int_distribution<std::size_t> pick(0, fundus.size() - 1);
    for (std::size_t k = 0; k < per_image; ++k) {
      const std::size_t i = fundus[pick(rng)];
      out.push_back({img.px[3 * i], img.px[3 * i + 1], img.px[3 * i + 2]});
    }
  }
  return out;
}

AugmentCorpus augment_corpus(const DatasetManifest& train, const std::filesystem::path& out_dir,
                             const AugmentCorpusOptions& options) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "images");

  AugmentCorpus corpus;
  const auto pixels = sample_pixels(train, std::max(options.pca_samples, kMinPcaPixels), derive_seed(options.seed, 1));
  corpus.pca = color_pca(pixels);
  {
    std::ofstream pj(out_dir / "color_pca.json");
    pj << corpus.pca.to_json().dump(2) << "\n";
  }

  corpus.manifest.base_dir = out_dir;
  std::ofstream aug(out_dir / "augmented_manifest.csv");
  if (!aug) throw FormatError("cannot write " + (out_dir / "augmented_manifest.csv").string());
  aug << "augmented_path,source_path,grade,copy_index,params\n";
  for (const auto& row : train.rows) {
    if (row.grade < 0 || row.grade > 4)
      throw ConfigError("augment: training image '" + row.image_path + "' has no grade");
    const fs::path src = train.resolve(row);
    // Paths relative to out_dir so two runs in different places match byte for byte.
    const std::string src_rel = fs::proximate(src, out_dir).generic_string();
    ImageRecord orig = row;
    orig.image_path = src_rel;
    corpus.manifest.rows.push_back(orig);
    aug << csv_field(src_rel) << "," << csv_field(src_rel) << "," << row.grade << ",0,"
        << csv_field(AugmentParams::identity().serialize()) << "\n";

    const int copies = options.multipliers[std::size_t(row.grade)];
    if (copies == 0) continue;
    const Image img = load_image(src);
    for (int k = 1; k <= copies; ++k) {
      Rng rng(derive_seed(options.seed, row.id(), std::uint64_t(k)));
      const AugmentParams params = sample_params(rng, options.ranges);
      const std::string rel = fmt::format("images/{}_aug{}.png", row.id(), k);
      save_png(apply_augment(img, params, &corpus.pca), out_dir / rel);
      ImageRecord rec = row;
      rec.image_path = rel;
      corpus.manifest.rows.push_back(rec);
      aug << csv_field(rel) << "," << csv_field(src_rel) << "," << row.grade << "," << k << ","
          << csv_field(params.serialize()) << "\n";
    }
  }
  aug.close();
  if (!aug) throw FormatError("failed writing augmented manifest");
  save_manifest(corpus.manifest, out_dir / "train_manifest.csv");
  return corpus;
}

}  // namespace drgrade
