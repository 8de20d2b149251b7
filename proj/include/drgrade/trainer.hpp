#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "drgrade/augment.hpp"
#include "drgrade/manifest.hpp"
#include "drgrade/network.hpp"

namespace YAML {
class Node;
}

namespace drgrade {

// Images held in memory as one (N, 3, H, W) tensor with real-valued targets.
struct ImageSet {
  std::vector<std::string> ids;
  Tensor<float> images;
  std::vector<float> targets;

  std::size_t size() const { return ids.size(); }
};

// Loads every labeled row of the manifest (unlabeled rows are skipped) at
// its stored resolution; all images must share one size.
ImageSet load_image_set(const DatasetManifest& manifest);

ChannelStats channel_stats(const ImageSet& set);
void standardize(ImageSet& set, const ChannelStats& stats);

using Schedule = std::vector<std::pair<std::size_t, double>>;  // (epoch count, lr)

// 1e-4 for 80 epochs, 1e-5 for 70, 5e-5 for 40, 1e-6 for 110.
Schedule default_schedule();
std::size_t schedule_epochs(const Schedule& schedule);
double lr_at_epoch(const Schedule& schedule, std::size_t epoch);

// Called on each standardized training batch before the forward pass.
using BatchHook = std::function<void(Tensor<float>& batch, Rng& rng)>;

struct TrainConfig {
  Schedule schedule = default_schedule();
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t batch_size = 16;
  std::size_t total_epochs = 300;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 10;  // resume-state period; 0 disables
  bool track_train_mse = true;
  BatchHook online_augment;

  void validate() const;
};

TrainConfig train_config_from_yaml(const YAML::Node& node);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean minibatch loss, dropout active
  double train_mse = 0.0;   // inference-mode MSE over the training set; NaN when not tracked
  double val_loss = 0.0;   // NaN without a validation set
  double val_kappa = 0.0;  // NaN without a validation set
  double lr = 0.0;
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path);
TrainHistory read_history_csv(const std::filesystem::path& path);

// Trailing moving average over `window` epochs of train_mse, or of
// train_loss when train_mse was not tracked.
std::vector<double> moving_average(const TrainHistory& history, std::size_t window);

struct TrainOutputs {
  // When set: best.ckpt, final.ckpt, history.csv, resume.ckpt/resume.opt.
  std::optional<std::filesystem::path> dir;
  bool resume = false;  // continue from resume.ckpt/resume.opt when present
  // Stop after this many epochs of the schedule (for resumable chunks).
  std::optional<std::size_t> stop_after_epoch;
};

// SGD with Nesterov momentum on unclamped MSE. The best model is chosen by
// validation kappa, or by training loss without a validation set.
TrainHistory train_main(Network<float>& net, const ImageSet& train, const ImageSet* validation,
                        const TrainConfig& cfg, const TrainOutputs& outputs = {});

struct BlendConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.001;
  std::uint64_t seed = 0;

  void validate() const;
};

BlendConfig blend_config_from_yaml(const YAML::Node& node);

// Adam on MSE; descriptors are (N, D) with D matching the network input.
TrainHistory train_blend(Network<float>& net, const Tensor<float>& descriptors, std::span<const float> targets,
                         const BlendConfig& cfg, const Tensor<float>* val_descriptors = nullptr,
                         std::span<const float> val_targets = {});

// Mean squared error of raw (unclamped) inference outputs, and kappa of the
// discretized clamped outputs.
struct Evaluation {
  double mse = 0.0;
  double kappa = 0.0;
  std::vector<double> scores;  // clamped
};
Evaluation evaluate_network(const Network<float>& net, const Tensor<float>& inputs, std::span<const float> targets,
                            std::size_t batch_size = 64);

}  // namespace drgrade
