#include "drgrade/trainer.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include "drgrade/checkpoint.hpp"
#include "drgrade/errors.hpp"
#include "drgrade/image.hpp"
#include "drgrade/metrics.hpp"
#include "drgrade/optim.hpp"
#include "yaml_util.hpp"

namespace drgrade {
namespace {

using detail::check_keys;
using detail::get;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Tensor<float> gather(const Tensor<float>& all, std::span<const std::size_t> rows) {
  Shape shape = all.shape();
  const std::size_t stride = all.size() / shape[0];
  shape[0] = rows.size();
  Tensor<float> out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(all.data() + rows[i] * stride, stride, out.data() + i * stride);
  return out;
}

Tensor<float> column(std::span<const float> values, std::span<const std::size_t> rows) {
  Tensor<float> out({rows.size(), 1});
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = values[rows[i]];
  return out;
}

struct Paths {
  std::filesystem::path best, final, history, resume_ckpt, resume_opt;
  explicit Paths(const std::filesystem::path& d)
      : best(d / "best.ckpt"),
        final(d / "final.ckpt"),
        history(d / "history.csv"),
        resume_ckpt(d / "resume.ckpt"),
        resume_opt(d / "resume.opt") {}
};

}  // namespace

ImageSet load_image_set(const DatasetManifest& manifest) {
  ImageSet set;
  std::vector<Tensor<float>> tensors;
  for (const auto& row : manifest.rows) {
    if (row.grade < 0) continue;
    tensors.push_back(to_tensor(load_image(manifest.resolve(row))));
    if (tensors.back().shape() != tensors.front().shape())
      throw ConfigError(fmt::format("image '{}' is {}, expected {}", row.image_path, shape_str(tensors.back().shape()),
                                    shape_str(tensors.front().shape())));
    set.ids.push_back(row.id());
    set.targets.push_back(float(row.grade));
  }
  if (tensors.empty()) throw ConfigError("manifest has no labeled images");
  std::vector<const Tensor<float>*> ptrs;
  for (const auto& t : tensors) ptrs.push_back(&t);
  set.images = stack<float>(ptrs);
  return set;
}

ChannelStats channel_stats(const ImageSet& set) {
  const std::size_t N = set.images.dim(0), plane = set.images.dim(2) * set.images.dim(3);
  std::array<double, 3> sum{}, sq{};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < 3; ++c) {
      const float* p = set.images.data() + (n * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum[c] += p[i];
        sq[c] += double(p[i]) * p[i];
      }
    }
  ChannelStats s;
  const double count = double(N * plane);
  for (std::size_t c = 0; c < 3; ++c) {
    s.mean[c] = sum[c] / count;
    s.stddev[c] = std::sqrt(std::max(0.0, sq[c] / count - s.mean[c] * s.mean[c]));
    if (!(s.stddev[c] > 1e-6)) throw ConfigError(fmt::format("channel stats: channel {} is constant", c));
  }
  return s;
}

void standardize(ImageSet& set, const ChannelStats& stats) { standardize(set.images, stats); }

Schedule default_schedule() { return {{80, 1e-4}, {70, 1e-5}, {40, 5e-5}, {110, 1e-6}}; }

std::size_t schedule_epochs(const Schedule& schedule) {
  std::size_t total = 0;
  for (const auto& [n, lr] : schedule) total += n;
  return total;
}

double lr_at_epoch(const Schedule& schedule, std::size_t epoch) {
  std::size_t end = 0;
  for (const auto& [n, lr] : schedule) {
    end += n;
    if (epoch < end) return lr;
  }
  throw UsageError(fmt::format("epoch {} is outside the {}-epoch schedule", epoch, end));
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
  if (schedule.empty()) throw ConfigError("train: schedule is empty");
  for (const auto& [n, lr] : schedule)
    if (n == 0 || !(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: schedule entries need epochs > 0, lr > 0");
  if (schedule_epochs(schedule) != total_epochs)
    throw ConfigError(fmt::format("train: schedule covers {} epochs but total_epochs is {}", schedule_epochs(schedule),
                                  total_epochs));
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
}

TrainConfig train_config_from_yaml(const YAML::Node& node) {
  check_keys(node, {"schedule", "momentum", "weight_decay", "batch_size", "total_epochs", "seed", "checkpoint_every",
                    "track_train_mse"},
             "train");
  TrainConfig cfg;
  if (node["schedule"]) {
    const auto& s = node["schedule"];
    if (s.IsScalar() && s.as<std::string>() == "default") {
      cfg.schedule = default_schedule();
    } else if (s.IsSequence()) {
      cfg.schedule.clear();
      for (const auto& row : s) {
        if (!row.IsSequence() || row.size() != 2) throw ConfigError("train.schedule: entries are [epochs, lr]");
        try {
          cfg.schedule.emplace_back(row[0].as<std::size_t>(), row[1].as<double>());
        } catch (const YAML::Exception& e) {
          throw ConfigError(std::string("train.schedule: ") + e.what());
        }
      }
    } else {
      throw ConfigError("train.schedule: expected 'default' or a list of [epochs, lr]");
    }
  }
  cfg.momentum = get(node, "momentum", cfg.momentum, "train");
  cfg.weight_decay = get(node, "weight_decay", cfg.weight_decay, "train");
  cfg.batch_size = get(node, "batch_size", cfg.batch_size, "train");
  cfg.total_epochs = get(node, "total_epochs", schedule_epochs(cfg.schedule), "train");
  cfg.seed = get(node, "seed", cfg.seed, "train");
  cfg.checkpoint_every = get(node, "checkpoint_every", cfg.checkpoint_every, "train");
  cfg.track_train_mse = get(node, "track_train_mse", cfg.track_train_mse, "train");
  cfg.validate();
  return cfg;
}

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "epoch,train_loss,train_mse,val_loss,val_kappa,lr,wall_seconds\n";
  for (const auto& e : history.epochs)
    out << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.3f}\n", e.epoch, e.train_loss, e.train_mse, e.val_loss,
                       e.val_kappa, e.lr, e.wall_seconds);
}

TrainHistory read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  TrainHistory h;
  std::string line;
  std::getline(in, line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 7) throw FormatError(fmt::format("{} line {}: expected 7 fields", path.string(), lineno));
    try {
      h.epochs.push_back({std::stoul(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                          std::stod(f[5]), std::stod(f[6])});
    } catch (const std::exception&) {
      throw FormatError(fmt::format("{} line {}: bad number", path.string(), lineno));
    }
  }
  return h;
}

std::vector<double> moving_average(const TrainHistory& history, std::size_t window) {
  std::vector<double> out;
  if (window == 0 || history.epochs.size() < window) return out;
  const bool mse = std::all_of(history.epochs.begin(), history.epochs.end(),
                               [](const EpochRecord& e) { return std::isfinite(e.train_mse); });
  auto value = [&](std::size_t i) { return mse ? history.epochs[i].train_mse : history.epochs[i].train_loss; };
  double sum = 0.0;
  for (std::size_t i = 0; i < history.epochs.size(); ++i) {
    sum += value(i);
    if (i >= window) sum -= value(i - window);
    if (i + 1 >= window) out.push_back(sum / double(window));
  }
  return out;
}

Evaluation evaluate_network(const Network<float>& net, const Tensor<float>& inputs, std::span<const float> targets,
                            std::size_t batch_size) {
  const std::size_t N = inputs.dim(0);
  if (targets.size() != N) throw UsageError("evaluate_network: target count differs from input count");
  Evaluation ev;
  std::vector<int> truth, pred;
  double se = 0.0;
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < N; b += batch_size) {
    rows.resize(std::min(batch_size, N - b));
    std::iota(rows.begin(), rows.end(), b);
    const Tensor<float> out = net.forward(gather(inputs, rows), Mode::infer);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double raw = out[i], t = targets[b + i];
      if (!std::isfinite(raw)) throw TrainingError("network produced a non-finite output");
      se += (raw - t) * (raw - t);
      const double s = std::clamp(raw, 0.0, 4.0);
      ev.scores.push_back(s);
      pred.push_back(discretize(s));
      truth.push_back(int(std::lround(t)));
    }
  }
  ev.mse = N ? se / double(N) : kNaN;
  try {
    ev.kappa = quadratic_weighted_kappa(truth, pred);
  } catch (const UndefinedMetric&) {
    ev.kappa = kNaN;
  }
  return ev;
}

TrainHistory train_main(Network<float>& net, const ImageSet& train, const ImageSet* validation,
                        const TrainConfig& cfg, const TrainOutputs& outputs) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("train: empty training set");
  if (train.images.rank() != 4 || Shape(train.images.shape().begin() + 1, train.images.shape().end()) !=
                                      net.config().input_shape())
    throw ConfigError(fmt::format("train: images are {}, network '{}' expects {} per sample",
                                  shape_str(train.images.shape()), net.config().name,
                                  shape_str(net.config().input_shape())));

  SgdNesterov<float> opt(cfg.momentum, cfg.weight_decay);
  TrainHistory history;
  std::size_t start = 0;
  double best = -std::numeric_limits<double>::infinity();

  std::optional<Paths> paths;
  if (outputs.dir) {
    std::filesystem::create_directories(*outputs.dir);
    paths.emplace(*outputs.dir);
    if (outputs.resume && std::filesystem::exists(paths->resume_ckpt)) {
      load_checkpoint(net, paths->resume_ckpt);
      auto state = load_sgd_state(net, paths->resume_opt);
      opt.velocity() = std::move(state.velocity);
      start = state.next_epoch;
      best = state.best_kappa;
      if (std::filesystem::exists(paths->history)) {
        history = read_history_csv(paths->history);
        std::erase_if(history.epochs, [&](const EpochRecord& e) { return e.epoch >= start; });
      }
      spdlog::info("resuming '{}' at epoch {}", net.config().name, start);
    }
  }

  const std::size_t N = train.size();
  const std::size_t stop = std::min(cfg.total_epochs, outputs.stop_after_epoch.value_or(cfg.total_epochs));
  std::vector<std::size_t> order(N);
  auto params = net.parameters();

  for (std::size_t epoch = start; epoch < stop; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(cfg.schedule, epoch);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t b = 0; b < N; b += cfg.batch_size, ++batch_index) {
      const std::span<const std::size_t> rows(order.data() + b, std::min(cfg.batch_size, N - b));
      Tensor<float> x = gather(train.images, rows);
      Rng rng(derive_seed(cfg.seed, epoch, batch_index));
      if (cfg.online_augment) cfg.online_augment(x, rng);
      Network<float>::Tape tape;
      const Tensor<float> out = net.forward(x, Mode::train, &rng, &tape);
      const auto loss = mse_loss(out, column(train.targets, rows));
      if (!std::isfinite(loss.loss))
        throw TrainingError(fmt::format("non-finite training loss at epoch {}, batch {}", epoch, batch_index));
      const auto grads = net.backward(loss.grad, tape);
      opt.step(params, grads, lr);
      loss_sum += double(loss.loss) * double(rows.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / double(N);
    rec.train_mse = cfg.track_train_mse ? evaluate_network(net, train.images, train.targets).mse : kNaN;
    rec.val_loss = rec.val_kappa = kNaN;
    if (validation && validation->size() > 0) {
      const auto ev = evaluate_network(net, validation->images, validation->targets);
      rec.val_loss = ev.mse;
      rec.val_kappa = ev.kappa;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);

    const double score = validation && validation->size() > 0 ? rec.val_kappa
                         : cfg.track_train_mse                   ? -rec.train_mse
                                                                 : -rec.train_loss;
    if (paths) {
      if (std::isfinite(score) && score > best) {
        best = score;
        save_checkpoint(net, paths->best);
      }
      write_history_csv(history, paths->history);
      const bool last = epoch + 1 == stop;
      if (last || (cfg.checkpoint_every && (epoch + 1) % cfg.checkpoint_every == 0)) {
        save_checkpoint(net, paths->resume_ckpt);
        save_sgd_state(net, opt, epoch + 1, best, paths->resume_opt);
      }
    } else if (std::isfinite(score) && score > best) {
      best = score;
    }
    spdlog::debug("epoch {} lr {:g} train {:.5f} val {:.5f} kappa {:.4f}", epoch, lr, rec.train_loss, rec.val_loss,
                  rec.val_kappa);
  }

  if (paths && stop == cfg.total_epochs) {
    save_checkpoint(net, paths->final);
    if (!std::filesystem::exists(paths->best)) save_checkpoint(net, paths->best);
  }
  return history;
}

void BlendConfig::validate() const {
  if (epochs == 0) throw ConfigError("blend: epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("blend: batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("blend: lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("blend: weight_decay must be >= 0");
}

BlendConfig blend_config_from_yaml(const YAML::Node& node) {
  check_keys(node, {"epochs", "batch_size", "lr", "weight_decay", "seed"}, "blend");
  BlendConfig cfg;
  cfg.epochs = get(node, "epochs", cfg.epochs, "blend");
  cfg.batch_size = get(node, "batch_size", cfg.batch_size, "blend");
  cfg.lr = get(node, "lr", cfg.lr, "blend");
  cfg.weight_decay = get(node, "weight_decay", cfg.weight_decay, "blend");
  cfg.seed = get(node, "seed", cfg.seed, "blend");
  cfg.validate();
  return cfg;
}

TrainHistory train_blend(Network<float>& net, const Tensor<float>& descriptors, std::span<const float> targets,
                         const BlendConfig& cfg, const Tensor<float>* val_descriptors,
                         std::span<const float> val_targets) {
  cfg.validate();
  const Shape expected = net.config().input_shape();
  auto check = [&](const Tensor<float>& d, std::size_t n, const char* what) {
    if (d.rank() != 2 || Shape{d.dim(1)} != expected)
      throw ConfigError(fmt::format("blend: {} descriptors are {}, network expects length {}", what,
                                    shape_str(d.shape()), shape_str(expected)));
    if (d.dim(0) != n) throw ConfigError(fmt::format("blend: {} has {} descriptors but {} targets", what, d.dim(0), n));
  };
  check(descriptors, targets.size(), "training set");
  if (val_descriptors) check(*val_descriptors, val_targets.size(), "validation set");
  if (targets.empty()) throw ConfigError("blend: empty training set");

  Adam<float> opt({.weight_decay = cfg.weight_decay});
  TrainHistory history;
  const std::size_t N = targets.size();
  std::vector<std::size_t> order(N);
  auto params = net.parameters();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t b = 0; b < N; b += cfg.batch_size, ++batch_index) {
      const std::span<const std::size_t> rows(order.data() + b, std::min(cfg.batch_size, N - b));
      Rng rng(derive_seed(cfg.seed, epoch, batch_index));
      Network<float>::Tape tape;
      const Tensor<float> out = net.forward(gather(descriptors, rows), Mode::train, &rng, &tape);
      const auto loss = mse_loss(out, column(targets, rows));
      if (!std::isfinite(loss.loss)) throw TrainingError(fmt::format("non-finite blend loss at epoch {}", epoch));
      opt.step(params, net.backward(loss.grad, tape), cfg.lr);
      loss_sum += double(loss.loss) * double(rows.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cfg.lr;
    rec.train_loss = loss_sum / double(N);
    rec.train_mse = evaluate_network(net, descriptors, targets).mse;
    rec.val_loss = rec.val_kappa = kNaN;
    if (val_descriptors && !val_targets.empty()) {
      const auto ev = evaluate_network(net, *val_descriptors, val_targets);
      rec.val_loss = ev.mse;
      rec.val_kappa = ev.kappa;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);
  }
  return history;
}

}  // namespace drgrade
