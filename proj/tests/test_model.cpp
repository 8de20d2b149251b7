#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <utility>

#include <yaml-cpp/yaml.h>

#include "drgrade/checkpoint.hpp"
#include "drgrade/errors.hpp"
#include "drgrade/network.hpp"
#include "drgrade/optim.hpp"

using namespace drgrade;
namespace fs = std::filesystem;

namespace {

// Expected output shape of each layer, channels first.
const std::vector<Shape> kExpectedShapes = {
    {32, 256, 256}, {32, 255, 255}, {32, 127, 127}, {64, 62, 62}, {64, 63, 63}, {64, 31, 31},
    {128, 32, 32},  {128, 33, 33},  {128, 16, 16},  {256, 17, 17}, {256, 8, 8},  {384, 9, 9},
    {384, 4, 4},    {512, 5, 5},    {512, 2, 2},    {1024},       {1024},       {1}};

// Closed-form count: conv F*(C*k*k + 1), dense U*(D + 1).
std::size_t closed_form_params() {
  const std::size_t convs[][2] = {{3, 32}, {32, 32}, {32, 64}, {64, 64}, {64, 128}, {128, 128}, {128, 256}, {256, 384}, {384, 512}};
  std::size_t n = 0;
  for (auto [c, f] : convs) n += f * (c * 16 + 1);
  n += 1024 * (2048 + 1) + 1024 * (1024 + 1) + 1 * (1024 + 1);
  return n;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("drgrade_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("default network reproduces the expected shapes and parameter count") {
  const Network<float> net(full_main_config());
  CHECK(net.table_shapes() == kExpectedShapes);
  CHECK(closed_form_params() == 8902721);
  CHECK(net.parameter_count() == 8902721);
  CHECK(net.feature_width() == 2048);
}

TEST_CASE("blend network widths") {
  const Network<float> net(blend_config());
  const std::vector<Shape> expected = {{32}, {16}, {32}, {16}, {1}};
  std::vector<Shape> got;
  for (const auto& l : net.layers())
    if (l.kind == LayerKind::dense || l.kind == LayerKind::maxout) got.push_back(l.out_shape);
  CHECK(got == expected);
  CHECK(net.config().input_shape() == Shape{4096});
  CHECK(net.parameter_count() == (4096 * 32 + 32) + (16 * 32 + 32) + (16 + 1));
}

TEST_CASE("reduced network keeps the topology at 32 px") {
  const Network<float> big(full_main_config()), small(reduced_main_config());
  CHECK(big.table_shapes().size() == small.table_shapes().size());
  CHECK(small.table_shapes().front() == Shape{4, 16, 16});
  CHECK(small.table_shapes().back() == Shape{1});
  REQUIRE(big.layers().size() == small.layers().size());
  for (std::size_t i = 0; i < big.layers().size(); ++i) CHECK(big.layers()[i].kind == small.layers()[i].kind);
}

TEST_CASE("composed shape chain: each layer consumes its predecessor's output") {
  const Network<float> net(full_main_config());
  Shape cur = net.config().input_shape();
  for (const auto& l : net.layers()) {
    CHECK(l.in_shape == cur);
    cur = l.out_shape;
  }
}

TEST_CASE("inference output is clamped to [0, 4]") {
  auto net = build_main_network(reduced_main_config(), Init::orthogonal, 3);
  Tensor<float> x({3, 3, 32, 32});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = float((i % 17) * 40.0 - 300.0);
  for (float b : {100.0f, -100.0f}) {
    for (auto& v : net.layers().back().bias.values()) v = b;
    const auto out = net.predict(x);
    for (float v : out.values()) CHECK((v >= 0.0f && v <= 4.0f));
  }
}

TEST_CASE("inconsistent architectures are rejected") {
  auto cfg = reduced_main_config();
  cfg.input_size = 4;  // too small for the shape chain
  CHECK_THROWS_AS(Network<float>{cfg}, ConfigError);
  auto no_layers = reduced_main_config();
  no_layers.layers.clear();
  CHECK_THROWS_AS(Network<float>{no_layers}, ConfigError);
  Network<float> net(reduced_main_config());
  Tensor<float> wrong({1, 3, 64, 64});
  CHECK_THROWS_AS(net.predict(wrong), UsageError);
}

TEST_CASE("network config survives a YAML round trip") {
  for (const auto& cfg : {full_main_config(), reduced_main_config(), blend_config(512)}) {
    std::ostringstream os;
    network_config_to_yaml(cfg, os);
    const auto back = network_config_from_yaml(YAML::Load(os.str())["network"]);
    CHECK(back.canonical() == cfg.canonical());
    CHECK(back.digest() == cfg.digest());
  }
}

TEST_CASE("initialization is seeded") {
  const auto a = build_main_network(reduced_main_config(), Init::orthogonal, 5);
  const auto b = build_main_network(reduced_main_config(), Init::orthogonal, 5);
  const auto c = build_main_network(reduced_main_config(), Init::orthogonal, 6);
  CHECK(*a.parameters()[0] == *b.parameters()[0]);
  CHECK_FALSE(*a.parameters()[0] == *c.parameters()[0]);
}

TEST_CASE("checkpoint round trip is exact") {
  const auto dir = temp_dir("ckpt");
  const auto a = build_main_network(reduced_main_config(), Init::orthogonal, 9);
  save_checkpoint(a, dir / "a.ckpt");
  auto b = build_main_network(reduced_main_config(), Init::orthogonal, 10);
  load_checkpoint(b, dir / "a.ckpt");
  const auto pa = a.parameters();
  const auto pb = std::as_const(b).parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);
}

TEST_CASE("checkpoint for a different config is refused") {
  const auto dir = temp_dir("ckpt_mismatch");
  save_checkpoint(build_blend_network(64), dir / "blend.ckpt");
  auto other = build_blend_network(128);
  CHECK_THROWS_AS(load_checkpoint(other, dir / "blend.ckpt"), ConfigError);
}

TEST_CASE("truncated or foreign checkpoint files are format errors") {
  const auto dir = temp_dir("ckpt_corrupt");
  save_checkpoint(build_blend_network(64), dir / "b.ckpt");
  const auto size = fs::file_size(dir / "b.ckpt");
  fs::resize_file(dir / "b.ckpt", size / 2);
  auto net = build_blend_network(64);
  CHECK_THROWS_AS(load_checkpoint(net, dir / "b.ckpt"), FormatError);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(net, dir / "junk.ckpt"), FormatError);
}

TEST_CASE("optimizer state round trip") {
  const auto dir = temp_dir("sgd_state");
  auto net = build_blend_network(16, Init::orthogonal, 1);
  SgdNesterov<float> opt(0.9, 0.0005);
  std::vector<Tensor<float>> grads;
  for (auto* p : net.parameters()) grads.emplace_back(p->shape(), 0.25f);
  opt.step(net.parameters(), grads, 0.01);
  save_sgd_state(net, opt, 7, 0.42, dir / "r.opt");
  const auto st = load_sgd_state(net, dir / "r.opt");
  CHECK(st.next_epoch == 7);
  CHECK(st.best_kappa == doctest::Approx(0.42));
  REQUIRE(st.velocity.size() == opt.velocity().size());
  for (std::size_t i = 0; i < st.velocity.size(); ++i) CHECK(st.velocity[i] == opt.velocity()[i]);
}
