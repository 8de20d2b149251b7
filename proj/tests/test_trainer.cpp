#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <yaml-cpp/yaml.h>

#include "drgrade/errors.hpp"
#include "drgrade/optim.hpp"
#include "drgrade/trainer.hpp"

using namespace drgrade;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("drgrade_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Random 32 px images whose targets follow mean brightness.
ImageSet tiny_set(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.3f);
  ImageSet s;
  s.images = Tensor<float>({n, 3, 32, 32});
  const std::size_t per = 3 * 32 * 32;
  for (std::size_t i = 0; i < n; ++i) {
    const int g = int(i % 5);
    s.ids.push_back("img" + std::to_string(i));
    s.targets.push_back(float(g));
    for (std::size_t k = 0; k < per; ++k) s.images[i * per + k] = 0.4f * float(g) - 0.8f + noise(rng);
  }
  return s;
}

TrainConfig short_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.schedule = {{epochs, 1e-3}};
  cfg.total_epochs = epochs;
  cfg.batch_size = 4;
  cfg.seed = 17;
  cfg.checkpoint_every = 0;
  return cfg;
}

}  // namespace

TEST_CASE("default schedule boundaries") {
  const auto s = default_schedule();
  CHECK(schedule_epochs(s) == 300);
  CHECK(lr_at_epoch(s, 0) == 1e-4);
  CHECK(lr_at_epoch(s, 79) == 1e-4);
  CHECK(lr_at_epoch(s, 80) == 1e-5);
  CHECK(lr_at_epoch(s, 149) == 1e-5);
  CHECK(lr_at_epoch(s, 150) == 5e-5);
  CHECK(lr_at_epoch(s, 189) == 5e-5);
  CHECK(lr_at_epoch(s, 190) == 1e-6);
  CHECK(lr_at_epoch(s, 299) == 1e-6);
  CHECK_THROWS_AS(lr_at_epoch(s, 300), UsageError);
}

TEST_CASE("weight decay shrinks every parameter when the loss gradient is zero") {
  auto net = build_blend_network(32, Init::orthogonal, 4);
  std::vector<Tensor<float>> before;
  for (auto* p : net.parameters()) before.push_back(*p);
  SgdNesterov<float> opt(0.9, 0.0005);
  std::vector<Tensor<float>> zero;
  for (auto* p : net.parameters()) zero.emplace_back(p->shape(), 0.0f);
  opt.step(net.parameters(), zero, 0.1);
  const auto after = net.parameters();
  for (std::size_t i = 0; i < after.size(); ++i)
    for (std::size_t k = 0; k < after[i]->size(); ++k) {
      const float b = before[i][k], a = (*after[i])[k];
      if (b != 0.0f) REQUIRE(std::abs(a) < std::abs(b));
      else REQUIRE(a == 0.0f);
    }
}

TEST_CASE("resuming reproduces an uninterrupted run bit for bit") {
  const auto train = tiny_set(12, 1), val = tiny_set(5, 2);
  const auto cfg = short_config(10);
  const auto whole = temp_dir("resume_whole"), split = temp_dir("resume_split");

  auto a = build_main_network(reduced_main_config(), Init::orthogonal, 3);
  train_main(a, train, &val, cfg, {whole, false, std::nullopt});

  auto b = build_main_network(reduced_main_config(), Init::orthogonal, 3);
  train_main(b, train, &val, cfg, {split, false, 5});
  CHECK_FALSE(fs::exists(split / "final.ckpt"));
  auto c = build_main_network(reduced_main_config(), Init::orthogonal, 99);  // state comes from resume files
  const auto hist = train_main(c, train, &val, cfg, {split, true, std::nullopt});

  CHECK(bytes(whole / "final.ckpt") == bytes(split / "final.ckpt"));
  CHECK(bytes(whole / "best.ckpt") == bytes(split / "best.ckpt"));
  REQUIRE(hist.epochs.size() == 10);
  const auto full = read_history_csv(whole / "history.csv");
  for (std::size_t e = 0; e < 10; ++e) {
    CHECK(hist.epochs[e].epoch == e);
    CHECK(hist.epochs[e].train_loss == full.epochs[e].train_loss);
    CHECK(hist.epochs[e].val_kappa == full.epochs[e].val_kappa);
  }
}

TEST_CASE("identical seeds give identical checkpoints") {
  const auto train = tiny_set(8, 5);
  const auto d1 = temp_dir("same_seed_1"), d2 = temp_dir("same_seed_2");
  for (const auto& d : {d1, d2}) {
    auto net = build_main_network(reduced_main_config(), Init::orthogonal, 8);
    train_main(net, train, nullptr, short_config(2), {d, false, std::nullopt});
  }
  CHECK(bytes(d1 / "final.ckpt") == bytes(d2 / "final.ckpt"));
}

TEST_CASE("non-finite inputs stop training") {
  auto train = tiny_set(4, 6);
  train.images[7] = std::nanf("");
  auto net = build_main_network(reduced_main_config(), Init::orthogonal, 1);
  CHECK_THROWS_AS(train_main(net, train, nullptr, short_config(1)), TrainingError);
}

TEST_CASE("mismatched image size is a config error") {
  ImageSet s;
  s.ids = {"a"};
  s.targets = {1.0f};
  s.images = Tensor<float>({1, 3, 64, 64});
  auto net = build_main_network(reduced_main_config(), Init::orthogonal, 1);
  CHECK_THROWS_AS(train_main(net, s, nullptr, short_config(1)), ConfigError);
}

TEST_CASE("history CSV round trip") {
  const auto dir = temp_dir("history");
  TrainHistory h;
  for (std::size_t e = 0; e < 4; ++e)
    h.epochs.push_back({e, 1.0 / double(e + 1), 0.5 / double(e + 1), e % 2 ? 0.25 : std::nan(""), 0.125 * double(e),
                        1e-4, 0.5});
  write_history_csv(h, dir / "h.csv");
  const auto back = read_history_csv(dir / "h.csv");
  REQUIRE(back.epochs.size() == 4);
  for (std::size_t e = 0; e < 4; ++e) {
    CHECK(back.epochs[e].epoch == e);
    CHECK(back.epochs[e].train_loss == h.epochs[e].train_loss);
    CHECK(back.epochs[e].train_mse == h.epochs[e].train_mse);
    CHECK(std::isnan(back.epochs[e].val_loss) == std::isnan(h.epochs[e].val_loss));
  }
  const auto ma = moving_average(h, 2);  // full windows only
  REQUIRE(ma.size() == 3);
  CHECK(ma[2] == doctest::Approx((0.5 / 3 + 0.5 / 4) / 2));
  CHECK(moving_average(h, 5).empty());
}

TEST_CASE("train and blend YAML") {
  const auto t = train_config_from_yaml(YAML::Load(
      "schedule: [[10, 0.001], [5, 0.0001]]\nmomentum: 0.8\nbatch_size: 8\n"));
  CHECK(t.total_epochs == 15);
  CHECK(lr_at_epoch(t.schedule, 12) == 1e-4);
  CHECK(t.batch_size == 8);
  CHECK(train_config_from_yaml(YAML::Load("schedule: default")).total_epochs == 300);
  CHECK_THROWS_AS(train_config_from_yaml(YAML::Load("schedule: default\nlearning_rate: 1")), ConfigError);
  CHECK_THROWS_AS(train_config_from_yaml(YAML::Load("schedule: [[10, 0.001]]\ntotal_epochs: 11")), ConfigError);
  CHECK_THROWS_AS(train_config_from_yaml(YAML::Load("schedule: default\nbatch_size: 0")), ConfigError);
  CHECK(blend_config_from_yaml(YAML::Load("epochs: 7")).epochs == 7);
  CHECK_THROWS_AS(blend_config_from_yaml(YAML::Load("epoch: 7")), ConfigError);
}

TEST_CASE("blend network learns descriptors that encode the grade linearly") {
  const std::size_t D = 4096;
  Rng rng(21);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> slope(D), offset(D);
  for (std::size_t j = 0; j < D; ++j) {
    slope[j] = 0.5f * n(rng);
    offset[j] = n(rng);
  }
  auto make = [&](std::size_t count, Tensor<float>& x, std::vector<float>& y) {
    x = Tensor<float>({count, D});
    y.clear();
    for (std::size_t i = 0; i < count; ++i) {
      const int g = int(i % 5);
      y.push_back(float(g));
      for (std::size_t j = 0; j < D; ++j) x[i * D + j] = slope[j] * float(g) + offset[j] + 0.3f * n(rng);
    }
  };
  Tensor<float> xt, xv;
  std::vector<float> yt, yv;
  make(400, xt, yt);
  make(100, xv, yv);
  auto net = build_blend_network(D, Init::orthogonal, 2);
  BlendConfig cfg;  // 100 epochs, batch 32, Adam
  cfg.seed = 3;
  const auto h = train_blend(net, xt, yt, cfg, &xv, yv);
  CHECK(h.epochs.size() == 100);
  const auto ev = evaluate_network(net, xv, yv);
  CHECK(ev.mse < 0.1);
  CHECK(h.epochs.back().val_loss == doctest::Approx(ev.mse));
}
