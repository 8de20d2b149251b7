#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "drgrade/ops.hpp"
#include "drgrade/random.hpp"
#include "drgrade/tensor.hpp"

namespace YAML {
class Node;
}

namespace drgrade {

enum class LayerKind { conv, dense, maxpool, leaky_relu, relu, dropout, maxout, flatten };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

// One entry of a declarative architecture. Unused fields are ignored for a
// given kind. `activation` on conv/dense expands into a separate layer.
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::size_t filters = 0;  // conv filters or dense units
  std::size_t kernel = 0;   // conv kernel or pooling window
  std::size_t stride = 1;
  std::size_t padding = 0;
  double slope = -1.0;  // leaky_relu; negative means "network default"
  double drop = 0.5;
  std::size_t group = 2;
  std::string activation;  // "", "leaky_relu" or "relu"
};

struct NetworkConfig {
  std::string name;
  std::size_t input_size = 0;  // square spatial input; 0 for vector input
  std::size_t input_channels = 3;
  std::size_t input_features = 0;  // vector input width when input_size == 0
  double leaky_slope = 0.01;
  std::vector<LayerSpec> layers;

  Shape input_shape() const;
  // Stable textual form; its FNV-1a hash is the config digest.
  std::string canonical() const;
  std::uint64_t digest() const;
};

// The 18-layer grading network at 512 x 512 input with the padding schedule
// that gives the reference output shapes.
NetworkConfig full_main_config();

// Same topology at 32 x 32 input with widths divided by 8; pools use padding
// 1 so the shape chain stays valid at that size.
NetworkConfig reduced_main_config();

// 4096 -> 32 -> maxout 16 -> 32 -> maxout 16 -> 1.
NetworkConfig blend_config(std::size_t input_features = 4096);

NetworkConfig network_config_from_yaml(const YAML::Node& node);
void network_config_to_yaml(const NetworkConfig& cfg, std::ostream& out);
NetworkConfig load_network_config(const std::filesystem::path& path);

template <typename T>
struct LayerState {
  LayerKind kind = LayerKind::conv;
  std::string name;
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t kernel = 0, stride = 1, padding = 0, group = 0;
  T slope = T(0);
  double drop = 0.0;
  Shape in_shape, out_shape;  // per sample, without the batch axis
};

template <typename T>
struct LayerCache {
  Tensor<T> input;
  Tensor<T> mask;
  std::vector<std::size_t> argmax;
};

enum class Init { zeros, orthogonal };

template <typename T>
class Network {
 public:
  static constexpr std::size_t all_layers = std::numeric_limits<std::size_t>::max();

  struct Tape {
    std::vector<LayerCache<T>> caches;
  };

  // Validates the shape chain and allocates zero parameters.
  explicit Network(NetworkConfig cfg);

  const NetworkConfig& config() const { return cfg_; }
  const std::vector<LayerState<T>>& layers() const { return layers_; }
  std::vector<LayerState<T>>& layers() { return layers_; }

  // Orthogonal weights and zero biases; layer i draws from derive_seed(seed, i).
  void initialize(Init init, std::uint64_t seed);

  std::size_t parameter_count() const;
  std::vector<Tensor<T>*> parameters();
  std::vector<const Tensor<T>*> parameters() const;
  std::vector<std::string> parameter_names() const;

  // Output shapes of the conv / maxpool / dense layers, in order.
  std::vector<Shape> table_shapes() const;

  // Runs layers [0, last] (inclusive). `rng` is required for train-mode
  // dropout; `tape` records what backward needs.
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng* rng = nullptr, Tape* tape = nullptr,
                    std::size_t last = all_layers) const;

  // Parameter gradients aligned with parameters(); the tape must come from a
  // full forward pass.
  std::vector<Tensor<T>> backward(const Tensor<T>& grad_out, const Tape& tape) const;

  // Inference-mode scores clamped to [0, 4], shape (N, 1).
  Tensor<T> predict(const Tensor<T>& x) const;

  // Flattened output of the last max-pool, shape (N, feature_width()).
  Tensor<T> features(const Tensor<T>& x) const;
  std::size_t feature_width() const;

  template <typename U>
  Network<U> cast() const {
    Network<U> out(cfg_);
    auto src = parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<U>();
    return out;
  }

 private:
  void check_input(const Tensor<T>& x) const;

  NetworkConfig cfg_;
  std::vector<LayerState<T>> layers_;
  std::size_t last_pool_ = all_layers;
};

// Network builders with parameter initialization.
Network<float> build_main_network(const NetworkConfig& cfg, Init init = Init::orthogonal, std::uint64_t seed = 0);
Network<float> build_blend_network(std::size_t input_features = 4096, Init init = Init::orthogonal,
                                   std::uint64_t seed = 0);

}  // namespace drgrade
