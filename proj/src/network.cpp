#include "drgrade/network.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>

#include "drgrade/errors.hpp"

namespace drgrade {
namespace {

LayerSpec conv(std::size_t filters, std::size_t stride, std::size_t padding) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.filters = filters;
  s.kernel = 4;
  s.stride = stride;
  s.padding = padding;
  s.activation = "leaky_relu";
  return s;
}

LayerSpec pool(std::size_t padding) {
  LayerSpec s;
  s.kind = LayerKind::maxpool;
  s.kernel = 3;
  s.stride = 2;
  s.padding = padding;
  return s;
}

LayerSpec dense(std::size_t units, std::string activation = "") {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.filters = units;
  s.activation = std::move(activation);
  return s;
}

LayerSpec simple(LayerKind kind) {
  LayerSpec s;
  s.kind = kind;
  return s;
}

// conv/pool sequence of the grading network, shared by the full and reduced
// variants. `pads` are the nine conv paddings in layer order.
NetworkConfig grading_config(std::string name, std::size_t input, std::size_t divisor,
                             const std::array<std::size_t, 9>& pads, std::size_t pool_pad) {
  NetworkConfig cfg;
  cfg.name = std::move(name);
  cfg.input_size = input;
  cfg.input_channels = 3;
  auto w = [divisor](std::size_t n) { return n / divisor; };
  auto& L = cfg.layers;
  L.push_back(conv(w(32), 2, pads[0]));
  L.push_back(conv(w(32), 1, pads[1]));
  L.push_back(pool(pool_pad));
  L.push_back(conv(w(64), 2, pads[2]));
  L.push_back(conv(w(64), 1, pads[3]));
  L.push_back(pool(pool_pad));
  L.push_back(conv(w(128), 1, pads[4]));
  L.push_back(conv(w(128), 1, pads[5]));
  L.push_back(pool(pool_pad));
  L.push_back(conv(w(256), 1, pads[6]));
  L.push_back(pool(pool_pad));
  L.push_back(conv(w(384), 1, pads[7]));
  L.push_back(pool(pool_pad));
  L.push_back(conv(w(512), 1, pads[8]));
  L.push_back(pool(pool_pad));
  L.push_back(dense(w(1024)));
  LayerSpec drop = simple(LayerKind::dropout);
  drop.drop = 0.5;
  L.push_back(drop);
  L.push_back(dense(w(1024)));
  L.push_back(drop);
  L.push_back(dense(1));
  return cfg;
}

std::string layer_label(std::size_t index, const LayerSpec& spec) {
  return "layer " + std::to_string(index) + " (" + std::string(to_string(spec.kind)) + ")";
}

template <typename T>
bool has_params(const LayerState<T>& l) {
  return l.kind == LayerKind::conv || l.kind == LayerKind::dense;
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::dense: return "dense";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::leaky_relu: return "leaky_relu";
    case LayerKind::relu: return "relu";
    case LayerKind::dropout: return "dropout";
    case LayerKind::maxout: return "maxout";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (auto k : {LayerKind::conv, LayerKind::dense, LayerKind::maxpool, LayerKind::leaky_relu, LayerKind::relu,
                 LayerKind::dropout, LayerKind::maxout, LayerKind::flatten})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

Shape NetworkConfig::input_shape() const {
  if (input_size > 0) return {input_channels, input_size, input_size};
  if (input_features > 0) return {input_features};
  throw ConfigError("network '" + name + "' has neither input_size nor input_features");
}

std::string NetworkConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "net:" << input_size << ',' << input_channels << ',' << input_features << ',' << leaky_slope << ';';
  for (const auto& l : layers)
    os << to_string(l.kind) << ',' << l.filters << ',' << l.kernel << ',' << l.stride << ',' << l.padding << ','
       << l.slope << ',' << l.drop << ',' << l.group << ',' << l.activation << ';';
  return os.str();
}

std::uint64_t NetworkConfig::digest() const { return fnv1a(canonical()); }

NetworkConfig full_main_config() { return grading_config("full-512", 512, 1, {1, 1, 0, 2, 2, 2, 2, 2, 2}, 0); }

NetworkConfig reduced_main_config() { return grading_config("reduced-32", 32, 8, {1, 1, 1, 2, 2, 2, 2, 2, 2}, 1); }

NetworkConfig blend_config(std::size_t input_features) {
  NetworkConfig cfg;
  cfg.name = "blend";
  cfg.input_size = 0;
  cfg.input_features = input_features;
  LayerSpec mo = simple(LayerKind::maxout);
  mo.group = 2;
  cfg.layers = {dense(32, "relu"), mo, dense(32, "relu"), mo, dense(1)};
  return cfg;
}

NetworkConfig network_config_from_yaml(const YAML::Node& node) {
  if (!node || !node.IsMap()) throw ConfigError("network config: expected a 'network' map");
  NetworkConfig cfg;
  cfg.name = node["name"].as<std::string>("unnamed");
  if (auto in = node["input"]) {
    cfg.input_size = in["size"].as<std::size_t>(0);
    cfg.input_channels = in["channels"].as<std::size_t>(3);
    cfg.input_features = in["features"].as<std::size_t>(0);
  }
  cfg.leaky_slope = node["leaky_slope"].as<double>(0.01);
  const auto layers = node["layers"];
  if (!layers || !layers.IsSequence()) throw ConfigError("network config: 'layers' must be a list");
  for (const auto& l : layers) {
    LayerSpec s;
    s.kind = parse_layer_kind(l["kind"].as<std::string>());
    s.filters = l["filters"].as<std::size_t>(l["units"].as<std::size_t>(0));
    s.kernel = l["kernel"].as<std::size_t>(l["window"].as<std::size_t>(0));
    s.stride = l["stride"].as<std::size_t>(s.kind == LayerKind::maxpool ? 2 : 1);
    s.padding = l["padding"].as<std::size_t>(0);
    s.slope = l["slope"].as<double>(-1.0);
    s.drop = l["p"].as<double>(0.5);
    s.group = l["group"].as<std::size_t>(2);
    s.activation = l["activation"].as<std::string>("");
    cfg.layers.push_back(s);
  }
  return cfg;
}

void network_config_to_yaml(const NetworkConfig& cfg, std::ostream& out) {
  YAML::Emitter e;
  e << YAML::BeginMap << YAML::Key << "network" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "name" << YAML::Value << cfg.name;
  e << YAML::Key << "input" << YAML::Value << YAML::Flow << YAML::BeginMap;
  if (cfg.input_size > 0) {
    e << YAML::Key << "size" << YAML::Value << cfg.input_size;
    e << YAML::Key << "channels" << YAML::Value << cfg.input_channels;
  } else {
    e << YAML::Key << "features" << YAML::Value << cfg.input_features;
  }
  e << YAML::EndMap;
  e << YAML::Key << "leaky_slope" << YAML::Value << cfg.leaky_slope;
  e << YAML::Key << "layers" << YAML::Value << YAML::BeginSeq;
  for (const auto& l : cfg.layers) {
    e << YAML::Flow << YAML::BeginMap << YAML::Key << "kind" << YAML::Value << std::string(to_string(l.kind));
    switch (l.kind) {
      case LayerKind::conv:
        e << YAML::Key << "filters" << YAML::Value << l.filters << YAML::Key << "kernel" << YAML::Value << l.kernel
          << YAML::Key << "stride" << YAML::Value << l.stride << YAML::Key << "padding" << YAML::Value << l.padding;
        break;
      case LayerKind::dense: e << YAML::Key << "units" << YAML::Value << l.filters; break;
      case LayerKind::maxpool:
        e << YAML::Key << "window" << YAML::Value << l.kernel << YAML::Key << "stride" << YAML::Value << l.stride
          << YAML::Key << "padding" << YAML::Value << l.padding;
        break;
      case LayerKind::leaky_relu:
        if (l.slope >= 0) e << YAML::Key << "slope" << YAML::Value << l.slope;
        break;
      case LayerKind::dropout: e << YAML::Key << "p" << YAML::Value << l.drop; break;
      case LayerKind::maxout: e << YAML::Key << "group" << YAML::Value << l.group; break;
      default: break;
    }
    if (!l.activation.empty()) e << YAML::Key << "activation" << YAML::Value << l.activation;
    e << YAML::EndMap;
  }
  e << YAML::EndSeq << YAML::EndMap << YAML::EndMap;
  out << e.c_str() << '\n';
}

NetworkConfig load_network_config(const std::filesystem::path& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError("cannot read network config " + path.string() + ": " + e.what());
  }
  return network_config_from_yaml(root["network"]);
}

template <typename T>
Network<T>::Network(NetworkConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.layers.empty()) throw ConfigError("network '" + cfg_.name + "' has no layers");
  if (!(cfg_.leaky_slope >= 0.0 && cfg_.leaky_slope < 1.0)) throw ConfigError("leaky_slope must be in [0, 1)");
  Shape cur = cfg_.input_shape();
  std::size_t n_conv = 0, n_pool = 0, n_dense = 0, n_other = 0;

  auto push_activation = [&](const std::string& act) {
    if (act.empty()) return;
    LayerState<T> a;
    if (act == "leaky_relu") {
      a.kind = LayerKind::leaky_relu;
      a.slope = T(cfg_.leaky_slope);
    } else if (act == "relu") {
      a.kind = LayerKind::relu;
    } else {
      throw ConfigError("unknown activation '" + act + "'");
    }
    a.name = std::string(to_string(a.kind)) + std::to_string(++n_other);
    a.in_shape = a.out_shape = cur;
    layers_.push_back(std::move(a));
  };

  for (std::size_t i = 0; i < cfg_.layers.size(); ++i) {
    const LayerSpec& spec = cfg_.layers[i];
    try {
      LayerState<T> l;
      l.kind = spec.kind;
      switch (spec.kind) {
        case LayerKind::conv: {
          if (cur.size() != 3) throw ConfigError("conv needs a spatial input, got " + shape_str(cur));
          if (spec.filters == 0 || spec.kernel == 0) throw ConfigError("conv needs filters and kernel");
          l.name = "conv" + std::to_string(++n_conv);
          l.kernel = spec.kernel;
          l.stride = spec.stride;
          l.padding = spec.padding;
          l.weight = Tensor<T>({spec.filters, cur[0], spec.kernel, spec.kernel});
          l.bias = Tensor<T>({spec.filters});
          l.in_shape = cur;
          cur = {spec.filters, window_out_extent(cur[1], spec.kernel, spec.stride, spec.padding),
                 window_out_extent(cur[2], spec.kernel, spec.stride, spec.padding)};
          break;
        }
        case LayerKind::maxpool: {
          if (cur.size() != 3) throw ConfigError("maxpool needs a spatial input, got " + shape_str(cur));
          if (spec.padding >= spec.kernel) throw ConfigError("maxpool padding must be smaller than the window");
          l.name = "pool" + std::to_string(++n_pool);
          l.kernel = spec.kernel;
          l.stride = spec.stride;
          l.padding = spec.padding;
          l.in_shape = cur;
          cur = {cur[0], window_out_extent(cur[1], spec.kernel, spec.stride, spec.padding),
                 window_out_extent(cur[2], spec.kernel, spec.stride, spec.padding)};
          break;
        }
        case LayerKind::dense: {
          if (cur.size() != 1) {
            LayerState<T> f;
            f.kind = LayerKind::flatten;
            f.name = "flatten" + std::to_string(++n_other);
            f.in_shape = cur;
            cur = {shape_product(cur)};
            f.out_shape = cur;
            layers_.push_back(std::move(f));
          }
          if (spec.filters == 0) throw ConfigError("dense needs units");
          l.name = "dense" + std::to_string(++n_dense);
          l.weight = Tensor<T>({spec.filters, cur[0]});
          l.bias = Tensor<T>({spec.filters});
          l.in_shape = cur;
          cur = {spec.filters};
          break;
        }
        case LayerKind::leaky_relu:
        case LayerKind::relu: {
          const double slope =
              spec.kind == LayerKind::relu ? 0.0 : (spec.slope >= 0 ? spec.slope : cfg_.leaky_slope);
          if (!(slope >= 0.0 && slope < 1.0)) throw ConfigError("slope must be in [0, 1)");
          l.slope = T(slope);
          l.name = std::string(to_string(spec.kind)) + std::to_string(++n_other);
          l.in_shape = cur;
          break;
        }
        case LayerKind::dropout: {
          if (!(spec.drop >= 0.0 && spec.drop < 1.0)) throw ConfigError("dropout p must be in [0, 1)");
          l.drop = spec.drop;
          l.name = "dropout" + std::to_string(++n_other);
          l.in_shape = cur;
          break;
        }
        case LayerKind::maxout: {
          if (cur.size() != 1) throw ConfigError("maxout needs a vector input, got " + shape_str(cur));
          if (spec.group == 0 || cur[0] % spec.group != 0)
            throw ConfigError("maxout width " + std::to_string(cur[0]) + " not divisible by group " +
                              std::to_string(spec.group));
          l.group = spec.group;
          l.name = "maxout" + std::to_string(++n_other);
          l.in_shape = cur;
          cur = {cur[0] / spec.group};
          break;
        }
        case LayerKind::flatten: {
          l.name = "flatten" + std::to_string(++n_other);
          l.in_shape = cur;
          cur = {shape_product(cur)};
          break;
        }
      }
      l.out_shape = cur;
      if (l.kind == LayerKind::maxpool) last_pool_ = layers_.size();
      layers_.push_back(std::move(l));
      if (spec.kind == LayerKind::conv || spec.kind == LayerKind::dense) push_activation(spec.activation);
    } catch (const ConfigError& e) {
      throw ConfigError("network '" + cfg_.name + "', " + layer_label(i, spec) + ": " + e.what());
    }
  }
  if (cur != Shape{1}) throw ConfigError("network '" + cfg_.name + "' must end in a single regression unit, ends in " +
                                         shape_str(cur));
}

template <typename T>
void Network<T>::initialize(Init init, std::uint64_t seed) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    if (!has_params(l)) continue;
    l.bias.fill(T(0));
    if (init == Init::zeros) {
      l.weight.fill(T(0));
    } else {
      Rng rng(derive_seed(seed, i));
      l.weight = orthogonal_init<T>(l.weight.shape(), rng);
    }
  }
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

template <typename T>
std::vector<Tensor<T>*> Network<T>::parameters() {
  std::vector<Tensor<T>*> out;
  for (auto& l : layers_)
    if (has_params(l)) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> Network<T>::parameters() const {
  std::vector<const Tensor<T>*> out;
  for (const auto& l : layers_)
    if (has_params(l)) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
  return out;
}

template <typename T>
std::vector<std::string> Network<T>::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& l : layers_)
    if (has_params(l)) {
      out.push_back(l.name + ".weight");
      out.push_back(l.name + ".bias");
    }
  return out;
}

template <typename T>
std::vector<Shape> Network<T>::table_shapes() const {
  std::vector<Shape> out;
  for (const auto& l : layers_)
    if (l.kind == LayerKind::conv || l.kind == LayerKind::maxpool || l.kind == LayerKind::dense)
      out.push_back(l.out_shape);
  return out;
}

template <typename T>
void Network<T>::check_input(const Tensor<T>& x) const {
  const Shape want = cfg_.input_shape();
  if (x.rank() != want.size() + 1 || !std::equal(want.begin(), want.end(), x.shape().begin() + 1))
    throw UsageError("network '" + cfg_.name + "' expects samples of shape " + shape_str(want) + ", got batch " +
                     shape_str(x.shape()));
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x, Mode mode, Rng* rng, Tape* tape, std::size_t last) const {
  check_input(x);
  const std::size_t end = last == all_layers ? layers_.size() : std::min(last + 1, layers_.size());
  if (tape) tape->caches.assign(end, {});
  Tensor<T> cur = x;
  const std::size_t N = x.dim(0);
  for (std::size_t i = 0; i < end; ++i) {
    const auto& l = layers_[i];
    LayerCache<T>* cache = tape ? &tape->caches[i] : nullptr;
    Tensor<T> next;
    switch (l.kind) {
      case LayerKind::conv:
        next = conv2d_forward(cur, l.weight, l.bias, l.stride, l.padding);
        if (cache) cache->input = std::move(cur);
        break;
      case LayerKind::dense:
        next = dense_forward(cur, l.weight, l.bias);
        if (cache) cache->input = std::move(cur);
        break;
      case LayerKind::maxpool: {
        auto r = maxpool_forward(cur, l.kernel, l.stride, l.padding);
        next = std::move(r.output);
        if (cache) cache->argmax = std::move(r.argmax);
        break;
      }
      case LayerKind::leaky_relu:
      case LayerKind::relu:
        next = leaky_relu(cur, l.slope);
        if (cache) cache->input = std::move(cur);
        break;
      case LayerKind::dropout: {
        if (mode == Mode::train && l.drop > 0.0 && !rng)
          throw UsageError("train-mode dropout in '" + l.name + "' needs an RNG");
        Rng unused;
        auto r = dropout(cur, l.drop, mode, rng ? *rng : unused);
        next = std::move(r.output);
        if (cache) cache->mask = std::move(r.mask);
        break;
      }
      case LayerKind::maxout: {
        auto r = maxout(cur, l.group);
        next = std::move(r.output);
        if (cache) cache->argmax = std::move(r.argmax);
        break;
      }
      case LayerKind::flatten: next = std::move(cur).reshaped({N, shape_product(l.in_shape)}); break;
    }
    cur = std::move(next);
  }
  return cur;
}

template <typename T>
std::vector<Tensor<T>> Network<T>::backward(const Tensor<T>& grad_out, const Tape& tape) const {
  if (tape.caches.size() != layers_.size()) throw UsageError("backward: tape does not cover the full network");
  std::vector<Tensor<T>> grads;
  std::vector<std::size_t> slot(layers_.size(), 0);
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (has_params(layers_[i])) {
      slot[i] = grads.size();
      grads.emplace_back();
      grads.emplace_back();
    }
  const std::size_t N = grad_out.dim(0);
  Tensor<T> g = grad_out;
  for (std::size_t ri = layers_.size(); ri-- > 0;) {
    const auto& l = layers_[ri];
    const auto& cache = tape.caches[ri];
    Shape batch_in{N};
    batch_in.insert(batch_in.end(), l.in_shape.begin(), l.in_shape.end());
    switch (l.kind) {
      case LayerKind::conv: {
        auto cg = conv2d_backward(g, cache.input, l.weight, l.stride, l.padding);
        grads[slot[ri]] = std::move(cg.weight);
        grads[slot[ri] + 1] = std::move(cg.bias);
        g = std::move(cg.input);
        break;
      }
      case LayerKind::dense: {
        auto dg = dense_backward(g, cache.input, l.weight);
        grads[slot[ri]] = std::move(dg.weight);
        grads[slot[ri] + 1] = std::move(dg.bias);
        g = std::move(dg.input);
        break;
      }
      case LayerKind::maxpool: g = maxpool_backward(g, cache.argmax, batch_in); break;
      case LayerKind::leaky_relu:
      case LayerKind::relu: g = leaky_relu_backward(g, cache.input, l.slope); break;
      case LayerKind::dropout: g = dropout_backward(g, cache.mask); break;
      case LayerKind::maxout: g = maxout_backward(g, cache.argmax, batch_in); break;
      case LayerKind::flatten: g = std::move(g).reshaped(batch_in); break;
    }
  }
  return grads;
}

template <typename T>
Tensor<T> Network<T>::predict(const Tensor<T>& x) const {
  Tensor<T> out = forward(x, Mode::infer);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], T(0), T(4));
  return out;
}

template <typename T>
Tensor<T> Network<T>::features(const Tensor<T>& x) const {
  if (last_pool_ == all_layers) throw UsageError("network '" + cfg_.name + "' has no max-pool feature layer");
  Tensor<T> f = forward(x, Mode::infer, nullptr, nullptr, last_pool_);
  const std::size_t N = f.dim(0);
  return std::move(f).reshaped({N, feature_width()});
}

template <typename T>
std::size_t Network<T>::feature_width() const {
  if (last_pool_ == all_layers) throw UsageError("network '" + cfg_.name + "' has no max-pool feature layer");
  return shape_product(layers_[last_pool_].out_shape);
}

template class Network<float>;
template class Network<double>;

Network<float> build_main_network(const NetworkConfig& cfg, Init init, std::uint64_t seed) {
  Network<float> net(cfg);
  net.initialize(init, seed);
  return net;
}

Network<float> build_blend_network(std::size_t input_features, Init init, std::uint64_t seed) {
  Network<float> net(blend_config(input_features));
  net.initialize(init, seed);
  return net;
}

}  // namespace drgrade
