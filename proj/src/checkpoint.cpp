#include "drgrade/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "drgrade/errors.hpp"

namespace drgrade {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'F', 'D', 'L', 'E'};

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is, const std::filesystem::path& path) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw FormatError("truncated checkpoint " + path.string());
  return v;
}

std::filesystem::path meta_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

}  // namespace

const Record& RecordFile::find(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return r;
  throw FormatError("checkpoint has no record '" + name + "'");
}

bool RecordFile::contains(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return true;
  return false;
}

void write_record_file(const std::filesystem::path& path, const RecordFile& file) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write " + tmp.string());
    os.write(kMagic, 4);
    put<std::uint32_t>(os, file.version);
    put<std::uint64_t>(os, file.digest);
    put<std::uint32_t>(os, std::uint32_t(file.records.size()));
    for (const auto& r : file.records) {
      if (shape_product(r.shape) != r.values.size())
        throw UsageError("record '" + r.name + "' shape does not match payload");
      put<std::uint32_t>(os, std::uint32_t(r.name.size()));
      os.write(r.name.data(), std::streamsize(r.name.size()));
      put<std::uint32_t>(os, std::uint32_t(r.shape.size()));
      for (auto d : r.shape) put<std::uint32_t>(os, std::uint32_t(d));
      os.write(reinterpret_cast<const char*>(r.values.data()), std::streamsize(r.values.size() * sizeof(float)));
    }
    if (!os) throw FormatError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

RecordFile read_record_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(path.string() + " is not a checkpoint (bad magic)");
  RecordFile f;
  f.version = get<std::uint32_t>(is, path);
  if (f.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(f.version) + " in " + path.string());
  f.digest = get<std::uint64_t>(is, path);
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    Record r;
    const auto len = get<std::uint32_t>(is, path);
    r.name.resize(len);
    if (!is.read(r.name.data(), len)) throw FormatError("truncated checkpoint " + path.string());
    const auto rank = get<std::uint32_t>(is, path);
    for (std::uint32_t d = 0; d < rank; ++d) r.shape.push_back(get<std::uint32_t>(is, path));
    r.values.resize(shape_product(r.shape));
    if (!is.read(reinterpret_cast<char*>(r.values.data()), std::streamsize(r.values.size() * sizeof(float))))
      throw FormatError("truncated checkpoint " + path.string());
    f.records.push_back(std::move(r));
  }
  return f;
}

void save_checkpoint(const Network<float>& net, const std::filesystem::path& path) {
  RecordFile f;
  f.digest = net.config().digest();
  const auto names = net.parameter_names();
  const auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    f.records.push_back({names[i], params[i]->shape(), {params[i]->values().begin(), params[i]->values().end()}});
  write_record_file(path, f);
}

void load_checkpoint(Network<float>& net, const std::filesystem::path& path) {
  const RecordFile f = read_record_file(path);
  if (f.digest != net.config().digest())
    throw ConfigError("checkpoint " + path.string() + " was written for a different network config");
  const auto names = net.parameter_names();
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Record& r = f.find(names[i]);
    if (r.shape != params[i]->shape())
      throw FormatError("record '" + r.name + "' has shape " + shape_str(r.shape) + ", network expects " +
                        shape_str(params[i]->shape()));
    *params[i] = Tensor<float>(r.shape, r.values);
  }
}

Network<float> load_network(const NetworkConfig& cfg, const std::filesystem::path& path) {
  Network<float> net(cfg);
  load_checkpoint(net, path);
  return net;
}

void save_sgd_state(const Network<float>& net, const SgdNesterov<float>& opt, std::size_t next_epoch,
                    double best_kappa, const std::filesystem::path& path) {
  RecordFile f;
  f.digest = net.config().digest();
  const auto names = net.parameter_names();
  for (std::size_t i = 0; i < opt.velocity().size(); ++i) {
    const auto& v = opt.velocity()[i];
    f.records.push_back({"velocity." + names[i], v.shape(), {v.values().begin(), v.values().end()}});
  }
  write_record_file(path, f);
  nlohmann::json meta{{"next_epoch", next_epoch}, {"best_kappa", best_kappa}};
  std::ofstream(meta_path(path)) << meta.dump(2) << '\n';
}

SgdResumeState load_sgd_state(const Network<float>& net, const std::filesystem::path& path) {
  const RecordFile f = read_record_file(path);
  if (f.digest != net.config().digest())
    throw ConfigError("optimizer state " + path.string() + " belongs to a different network config");
  SgdResumeState s;
  const auto names = net.parameter_names();
  if (f.contains("velocity." + names.front()))
    for (const auto& n : names) {
      const Record& r = f.find("velocity." + n);
      s.velocity.emplace_back(r.shape, r.values);
    }
  std::ifstream in(meta_path(path));
  if (!in) throw FormatError("missing optimizer metadata " + meta_path(path).string());
  const auto meta = nlohmann::json::parse(in);
  s.next_epoch = meta.at("next_epoch").get<std::size_t>();
  s.best_kappa = meta.at("best_kappa").get<double>();
  return s;
}

}  // namespace drgrade
