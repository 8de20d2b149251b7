// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "drgrade/augment.hpp"
#include "drgrade/metrics.hpp"
#include "drgrade/network.hpp"
#include "drgrade/ops.hpp"
#include "drgrade/parallel.hpp"
#include "drgrade/pipeline.hpp"
#include "drgrade/preprocess.hpp"
#include "drgrade/synth.hpp"
#include "drgrade/trainer.hpp"
#include "oracles.hpp"

using namespace drgrade;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

int failures = 0;

void criterion(const std::string& name, double budget_seconds, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.ok = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs >= budget_seconds) {
    o.ok = false;
    o.detail += fmt::format("{}took {:.1f} s, budget {:.0f} s", o.detail.empty() ? "" : "; ", secs, budget_seconds);
  }
  if (!o.ok) ++failures;
  std::cout << (o.ok ? "PASS " : "FAIL ") << name << fmt::format(" ({:.2f} s)", secs);
  if (!o.detail.empty()) std::cout << ": " << o.detail;
  std::cout << std::endl;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("drgrade_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

Tensor<double> randn(Shape shape, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = d(rng);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double check_all(Tensor<double>& t, const Tensor<double>& analytic, const std::function<double()>& loss,
                 double eps = 1e-5) {
  double worst = 0;
  for (std::size_t i = 0; i < t.size(); ++i)
    worst = std::max(worst, oracle::rel_error(analytic[i], oracle::central_difference(loss, t[i], eps)));
  return worst;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  Outcome o;
  Rng rng(101);
  double worst = 0;
  auto note = [&](const std::string& what, double err) {
    worst = std::max(worst, err);
    o.require(err < 1e-4, fmt::format("{} rel error {:.2e}", what, err));
  };
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}, {2, 2}}) {
    auto x = randn({2, 3, 8, 8}, rng), w = randn({4, 3, 4, 4}, rng, 0.3), b = randn({4}, rng);
    const auto r = randn(conv2d_forward(x, w, b, stride, pad).shape(), rng);
    const auto g = conv2d_backward(r, x, w, stride, pad);
    auto loss = [&] { return dot(r, conv2d_forward(x, w, b, stride, pad)); };
    note("conv input", check_all(x, g.input, loss));
    note("conv weight", check_all(w, g.weight, loss));
    note("conv bias", check_all(b, g.bias, loss));
  }
  {
    auto x = randn({3, 6}, rng), w = randn({5, 6}, rng), b = randn({5}, rng);
    const auto r = randn({3, 5}, rng);
    const auto g = dense_backward(r, x, w);
    auto loss = [&] { return dot(r, dense_forward(x, w, b)); };
    note("dense input", check_all(x, g.input, loss));
    note("dense weight", check_all(w, g.weight, loss));
    note("dense bias", check_all(b, g.bias, loss));
  }
  for (std::size_t pad : {0, 1}) {
    auto x = randn({2, 2, 7, 7}, rng);
    const auto fwd = maxpool_forward(x, 3, 2, pad);
    const auto r = randn(fwd.output.shape(), rng);
    const auto gx = maxpool_backward(r, fwd.argmax, x.shape());
    note("maxpool", check_all(x, gx, [&] { return dot(r, maxpool_forward(x, 3, 2, pad).output); }, 1e-7));
  }
  for (double slope : {0.01, 0.0}) {
    auto x = randn({4, 6}, rng);
    for (auto& v : x.values())
      if (std::abs(v) < 1e-3) v = 0.5;
    const auto r = randn(x.shape(), rng);
    note("leaky relu", check_all(x, leaky_relu_backward(r, x, slope), [&] { return dot(r, leaky_relu(x, slope)); }));
  }
  {
    auto x = randn({3, 8}, rng);
    const auto r = randn(x.shape(), rng);
    Rng m(9);
    const auto fwd = dropout(x, 0.5, Mode::train, m);
    note("dropout", check_all(x, dropout_backward(r, fwd.mask), [&] {
           Rng again(9);
           return dot(r, dropout(x, 0.5, Mode::train, again).output);
         }));
  }
  {
    auto x = randn({3, 8}, rng);
    const auto fwd = maxout(x, 2);
    const auto r = randn(fwd.output.shape(), rng);
    note("maxout", check_all(x, maxout_backward(r, fwd.argmax, x.shape()), [&] { return dot(r, maxout(x, 2).output); },
                             1e-7));
  }
  {
    auto p = randn({5, 1}, rng);
    const auto t = randn({5, 1}, rng);
    note("mse", check_all(p, mse_loss(p, t).grad, [&] { return double(mse_loss(p, t).loss); }));
  }
  {
    Network<double> net(reduced_main_config());
    net.initialize(Init::orthogonal, 11);
    for (auto& l : net.layers())
      for (auto& v : l.bias.values()) v = std::normal_distribution<double>(0.0, 0.05)(rng);
    const auto x = randn({2, 3, 32, 32}, rng);
    Tensor<double> y({2, 1}, std::vector<double>{1.0, 3.0});
    const auto res = oracle::check_network_gradients(net, x, y, 24, 1e-3, 13);
    o.require(res.checked > 200, fmt::format("only {} network coordinates checked", res.checked));
    note("reduced network " + res.worst, res.max_rel_error);
  }
  {
    Network<double> net(blend_config(24));
    net.initialize(Init::orthogonal, 21);
    const auto x = randn({4, 24}, rng);
    Tensor<double> y({4, 1}, std::vector<double>{0, 1, 2, 3});
    const auto res = oracle::check_network_gradients(net, x, y, 1000, 1e-3, 23);
    note("blend network " + res.worst, res.max_rel_error);
  }
  if (o.ok) o.detail = fmt::format("max rel error {:.2e}", worst);
  return o;
}

Outcome architecture() {
  Outcome o;
  const std::vector<Shape> table = {
      {32, 256, 256}, {32, 255, 255}, {32, 127, 127}, {64, 62, 62}, {64, 63, 63}, {64, 31, 31},
      {128, 32, 32},  {128, 33, 33},  {128, 16, 16},  {256, 17, 17}, {256, 8, 8},  {384, 9, 9},
      {384, 4, 4},    {512, 5, 5},    {512, 2, 2},    {1024},       {1024},       {1}};
  const Network<float> net(full_main_config());
  o.require(net.table_shapes() == table, "main network shapes differ from the expected ones");
  o.require(net.parameter_count() == 8902721, fmt::format("parameter count {}", net.parameter_count()));
  const Network<float> blend(blend_config());
  std::vector<std::size_t> widths{blend.config().input_shape().at(0)};
  for (const auto& l : blend.layers())
    if (l.kind == LayerKind::dense || l.kind == LayerKind::maxout) widths.push_back(l.out_shape.at(0));
  o.require(widths == std::vector<std::size_t>{4096, 32, 16, 32, 16, 1}, "blend widths differ");
  if (o.ok) o.detail = "18 shapes, 8902721 parameters, blend 4096-32-16-32-16-1";
  return o;
}

Outcome plan_arithmetic() {
  Outcome o;
  const auto plan = build_plan(std::array<std::size_t, 5>{25810, 2443, 5292, 873, 708});
  // (raw - 200) * (multiplier + 1)
  const std::array<std::size_t, 4> want{(2443 - 200) * 12, (5292 - 200) * 5, (873 - 200) * 28, (708 - 200) * 36};
  for (int g = 1; g <= 4; ++g)
    o.require(plan.totals[std::size_t(g)] == want[std::size_t(g - 1)],
              fmt::format("grade {} total {}", g, plan.totals[std::size_t(g)]));
  if (o.ok) o.detail = fmt::format("{} / {} / {} / {}", plan.totals[1], plan.totals[2], plan.totals[3], plan.totals[4]);
  return o;
}

Outcome metric_oracles() {
  Outcome o;
  Rng rng(7);
  std::uniform_int_distribution<int> grade(0, 4), bit(0, 1), level(0, 20);
  std::uniform_int_distribution<std::size_t> len(2, 300);
  double kworst = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<int> a(len(rng)), b;
    for (auto& v : a) v = grade(rng);
    for (std::size_t i = 0; i < a.size(); ++i) b.push_back(grade(rng));
    kworst = std::max(kworst, std::abs(quadratic_weighted_kappa(a, b) - oracle::qwk(a, b)));
  }
  o.require(kworst < 1e-10, fmt::format("kappa deviates by {:.2e}", kworst));
  const std::vector<int> a{0, 4}, b{4, 0};
  o.require(std::abs(quadratic_weighted_kappa(a, b) + 1.0) < 1e-12, "kappa([0,4],[4,0]) != -1");
  double aworst = 0;
  for (int t = 0; t < 500;) {
    std::vector<double> s(len(rng));
    std::vector<int> y(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = level(rng) / 5.0;
      y[i] = bit(rng);
    }
    if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;
    aworst = std::max(aworst, std::abs(roc_auc(s, y) - oracle::auc_pairwise(s, y)));
    ++t;
  }
  o.require(aworst < 1e-12, fmt::format("AUC deviates by {:.2e}", aworst));
  for (int k = 0; k <= 400; ++k) {
    const int want = int(k >= 50) + int(k >= 150) + int(k >= 250) + int(k >= 350);
    if (discretize(k / 100.0) != want) o.require(false, fmt::format("discretize({}) wrong", k / 100.0));
  }
  if (o.ok) o.detail = fmt::format("kappa max dev {:.1e}, AUC max dev {:.1e}", kworst, aworst);
  return o;
}

Outcome preprocess_invariants() {
  Outcome o;
  Rng rng(5);
  std::uniform_int_distribution<int> side(500, 1100);
  std::uniform_real_distribution<double> frac(0.3, 0.48), col(20, 200);
  const PreprocessConfig cfg;  // radius 300, 512 output, clip 0.9
  const double R = double(cfg.output_size) / 2, clip = cfg.clip_fraction * R;
  const double reach = 3.0 * (cfg.target_radius / cfg.blur_divisor) * double(cfg.output_size) / (2 * cfg.target_radius);
  double worst_interior = 0;
  std::size_t bad_mask = 0;
  for (int n = 0; n < 20; ++n) {
    const std::size_t w = std::size_t(side(rng)), h = std::size_t(side(rng));
    const double r = frac(rng) * double(std::min(w, h));
    const std::array<float, 3> c{float(col(rng)), float(col(rng)), float(col(rng))};
    Image img(w, h);
    const double cx = (double(w) - 1) / 2, cy = (double(h) - 1) / 2;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (std::hypot(double(x) - cx, double(y) - cy) <= r)
          for (std::size_t k = 0; k < 3; ++k) img.at(x, y, k) = c[k];
    const auto out = normalize_image(img, cfg);
    if (out.width != 512 || out.height != 512 || out.px.size() != 512 * 512 * 3) {
      o.require(false, fmt::format("image {} is {}x{}", n, out.width, out.height));
      continue;
    }
    for (std::size_t y = 0; y < 512; ++y)
      for (std::size_t x = 0; x < 512; ++x) {
        const double d = std::hypot(double(x) - 255.5, double(y) - 255.5);
        const float s = out.at(x, y, 0) + out.at(x, y, 1) + out.at(x, y, 2);
        if ((d > clip + 1.0 && s != 0.0f) || (d < clip - 1.0 && s == 0.0f)) ++bad_mask;
        if (d < R - reach - 2.0)
          for (std::size_t k = 0; k < 3; ++k) worst_interior = std::max(worst_interior, std::abs(out.at(x, y, k) - 128.0));
      }
  }
  o.require(worst_interior <= 1.0, fmt::format("interior deviates from 128 by {}", worst_interior));
  o.require(bad_mask == 0, fmt::format("{} pixels violate the mask annulus", bad_mask));
  if (o.ok) o.detail = fmt::format("20 images, interior max |v - 128| = {}", worst_interior);
  return o;
}

Outcome memorization() {
  Outcome o;
  const auto dir = scratch("memorize");
  SynthOptions so;
  so.count = 32;
  so.size = 32;
  so.seed = 1;
  auto set = load_image_set(write_brightness_dataset(dir, so));
  standardize(set, channel_stats(set));
  const auto cfg_yaml = YAML::LoadFile(fs::path(DRGRADE_SOURCE_DIR) / "configs" / "reduced-32.cfg");
  auto net = build_main_network(network_config_from_yaml(cfg_yaml["network"]), Init::orthogonal, 1);
  auto cfg = train_config_from_yaml(cfg_yaml["train"]);
  cfg.seed = 1;
  o.require(cfg.total_epochs <= 200, fmt::format("schedule has {} epochs", cfg.total_epochs));
  const auto history = train_main(net, set, nullptr, cfg);
  const double final_mse = history.epochs.back().train_mse;
  o.require(final_mse < 0.05, fmt::format("final training MSE {:.4f}", final_mse));
  const auto ma = moving_average(history, 20);
  std::size_t rises = 0;
  double worst = 0;
  for (std::size_t i = 1; i < ma.size(); ++i)
    if (ma[i] > ma[i - 1]) {
      ++rises;
      worst = std::max(worst, ma[i] - ma[i - 1]);
    }
  o.require(rises == 0, fmt::format("20-epoch moving average rises {} times (largest +{:.4f}), from {:.3f} to {:.4f}",
                                    rises, worst, ma.front(), ma.back()));
  if (o.ok) o.detail = fmt::format("final training MSE {:.4f}", final_mse);
  else o.detail += fmt::format("; final training MSE {:.4f}", final_mse);
  return o;
}

RunConfig smoke_config(const fs::path& data, const fs::path& out) {
  auto cfg = load_run_config(fs::path(DRGRADE_SOURCE_DIR) / "configs" / "smoke.yaml");
  cfg.manifest = data / "manifest.csv";
  cfg.output = out;
  return cfg;
}

fs::path smoke_data() {
  static const fs::path data = [] {
    const auto d = scratch("smoke_data");
    SynthOptions so;
    so.count = 64;
    so.size = 128;
    so.seed = 1;
    write_synth_dataset(d, so);
    return d;
  }();
  return data;
}

Outcome smoke() {
  Outcome o;
  const auto out = scratch("smoke_a");
  const auto result = run_pipeline(smoke_config(smoke_data(), out));
  o.require(result.stages.size() == kStages.size(), "not every stage ran");
  o.require(result.report_written, "no report written");
  const auto report = nlohmann::json::parse(read_bytes(out / "evaluate" / "report_train.json"));
  validate_report_json(report);
  const double kappa = report.at("quadratic_weighted_kappa").get<double>();
  o.require(kappa > 0.6, fmt::format("training kappa {:.4f}", kappa));
  o.detail += fmt::format("{}training kappa {:.4f} over {} images", o.detail.empty() ? "" : "; ", kappa,
                          report.at("count").get<std::size_t>());
  return o;
}

Outcome determinism() {
  Outcome o;
  const auto a = fs::temp_directory_path() / "drgrade_acceptance_smoke_a";
  if (!fs::exists(a / "evaluate" / "report_train.json")) run_pipeline(smoke_config(smoke_data(), a));
  const auto b = scratch("smoke_b");
  run_pipeline(smoke_config(smoke_data(), b));
  std::size_t compared = 0;
  for (const char* f : {"train/best.ckpt", "train/final.ckpt", "blend-train/blend.ckpt", "extract-features/train.feat",
                        "predict/train_predictions.csv", "predict/validation_predictions.csv",
                        "evaluate/report_train.json", "evaluate/report_validation.json"}) {
    o.require(read_bytes(a / f) == read_bytes(b / f), std::string(f) + " differs");
    ++compared;
  }
  if (o.ok) o.detail = fmt::format("{} files bit-identical", compared);
  return o;
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  set_worker_count(1);
  criterion("gradient suite", 120, gradient_suite);
  criterion("architecture conformance", 1, architecture);
  criterion("augmentation plan arithmetic", 1, plan_arithmetic);
  criterion("metric oracles", 60, metric_oracles);
  criterion("preprocessing invariants", 30, preprocess_invariants);
  criterion("memorization run", 600, memorization);
  criterion("end-to-end smoke", 900, smoke);
  criterion("determinism", 900, determinism);
  std::cout << (failures ? fmt::format("{} criteria failed", failures) : std::string("all criteria passed"))
            << std::endl;
  return failures ? 1 : 0;
}
