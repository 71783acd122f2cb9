#include "moco/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace moco {

namespace {

constexpr char kMagic[4] = {'D', 'L', 'C', 'K'};

template <typename T>
void write_le(std::ostream& out, T v) {
  // host is little-endian on every supported target
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::string& path) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw IoError("truncated checkpoint: " + path);
  }
  return v;
}

}  // namespace

void checkpoint_save(const std::string& path, const CheckpointData& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create checkpoint " + path);
  out.write(kMagic, 4);
  write_le<std::uint32_t>(out, kCheckpointVersion);
  write_le<std::uint64_t>(out, data.step);
  write_le<std::uint64_t>(out, data.rng_seed);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.config_json.size()));
  out.write(data.config_json.data(),
            static_cast<std::streamsize>(data.config_json.size()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.tensors.size()));
  for (const auto& [name, tensor] : data.tensors) {
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) {
      write_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    }
    for (double v : tensor.values()) {
      write_le<float>(out, static_cast<float>(v));
    }
  }
  if (!out) throw IoError("failed writing checkpoint " + path);
}

CheckpointData checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[4];
  if (!in.read(magic, 4)) throw IoError("truncated checkpoint: " + path);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic in " + path);
  }
  const auto version = read_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint " + path + " has format version " +
                      std::to_string(version) + "; this build reads version " +
                      std::to_string(kCheckpointVersion) +
                      " — re-train or convert the checkpoint");
  }
  CheckpointData data;
  data.step = read_le<std::uint64_t>(in, path);
  data.rng_seed = read_le<std::uint64_t>(in, path);
  const auto cfg_len = read_le<std::uint32_t>(in, path);
  data.config_json.resize(cfg_len);
  if (cfg_len > 0 &&
      !in.read(data.config_json.data(), static_cast<std::streamsize>(cfg_len))) {
    throw IoError("truncated checkpoint: " + path);
  }
  const auto count = read_le<std::uint32_t>(in, path);
  data.tensors.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = read_le<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name_len))) {
      throw IoError("truncated checkpoint: " + path);
    }
    const auto rank = read_le<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& d : shape) {
      d = static_cast<std::size_t>(read_le<std::uint64_t>(in, path));
    }
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) {
      v = static_cast<double>(read_le<float>(in, path));
    }
    data.tensors.emplace_back(std::move(name),
                              Tensor::from_values(shape, std::move(values)));
  }
  return data;
}

}  // namespace moco
