#pragma once

// Checkpoint files, little-endian:
//   magic "FDLE" | u32 format version | u64 config digest | u32 record count
//   per record: u32 name length | name bytes | u32 rank | u32 dims[rank]
//               | f32 payload, row-major
// The same container also stores optimizer state for resuming training.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "drgrade/network.hpp"
#include "drgrade/optim.hpp"

namespace drgrade {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Record {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct RecordFile {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t digest = 0;
  std::vector<Record> records;

  const Record& find(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void write_record_file(const std::filesystem::path& path, const RecordFile& file);
RecordFile read_record_file(const std::filesystem::path& path);

void save_checkpoint(const Network<float>& net, const std::filesystem::path& path);
// Fails with ConfigError when the file was written for a different config.
void load_checkpoint(Network<float>& net, const std::filesystem::path& path);
Network<float> load_network(const NetworkConfig& cfg, const std::filesystem::path& path);

// Optimizer slots plus scalar bookkeeping (next epoch, best kappa...).
struct SgdResumeState {
  std::vector<Tensor<float>> velocity;
  std::size_t next_epoch = 0;
  double best_kappa = -2.0;
};

void save_sgd_state(const Network<float>& net, const SgdNesterov<float>& opt, std::size_t next_epoch,
                    double best_kappa, const std::filesystem::path& path);
SgdResumeState load_sgd_state(const Network<float>& net, const std::filesystem::path& path);

}  // namespace drgrade
