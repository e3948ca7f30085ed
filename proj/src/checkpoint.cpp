#include "modeforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

namespace modeforge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes host doubles directly and assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'F', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

}  // namespace

Tensor ParamStore::add(const std::string& name, Tensor t, bool trainable) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name " + name);
  t.set_requires_grad(trainable);
  entries_.push_back({name, t, trainable});
  return t;
}

Tensor ParamStore::normal(const std::string& name, Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, std);
  Eigen::ArrayXd v(shape_numel(shape));
  for (auto& x : v) x = nd(rng);
  return add(name, Tensor::from(std::move(shape), std::move(v)), true);
}

Tensor ParamStore::constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value), true);
}

Tensor ParamStore::from(const std::string& name, Shape shape, Eigen::ArrayXd values) {
  return add(name, Tensor::from(std::move(shape), std::move(values)), true);
}

Tensor ParamStore::buffer(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value), false);
}

std::vector<Tensor> ParamStore::trainable() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) {
    if (e.trainable) out.push_back(e.tensor);
  }
  return out;
}

Tensor ParamStore::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw std::out_of_range("no parameter named " + name);
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

Eigen::Index ParamStore::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.tensor.numel();
  }
  return n;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.entries_.size() != entries_.size()) throw std::invalid_argument("parameter layouts differ");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name ||
        entries_[i].tensor.shape() != other.entries_[i].tensor.shape()) {
      throw std::invalid_argument("parameter layouts differ at " + entries_[i].name);
    }
    entries_[i].tensor.value() = other.entries_[i].tensor.value();
  }
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store) {
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& e : store.entries()) {
    const auto count = static_cast<std::uint64_t>(e.tensor.numel());
    index.push_back({{"name", e.name},
                     {"shape", e.tensor.shape()},
                     {"offset", offset},
                     {"count", count},
                     {"trainable", e.trainable}});
    offset += count;
  }
  const std::string header = index.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  const auto header_len = static_cast<std::uint32_t>(header.size());
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
  out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& e : store.entries()) {
    out.write(reinterpret_cast<const char*>(e.tensor.value().data()),
              static_cast<std::streamsize>(e.tensor.numel() * sizeof(double)));
  }
  if (!out) throw CheckpointError("write failed for " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, ParamStore& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  std::uint16_t version = 0;
  std::uint32_t header_len = 0;
  std::memcpy(&version, bytes.data() + 4, 2);
  std::memcpy(&header_len, bytes.data() + 6, 4);
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::size_t data_start = 10 + static_cast<std::size_t>(header_len);
  if (bytes.size() < data_start) throw CheckpointError("checkpoint index truncated");
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(bytes.begin() + 10, bytes.begin() + static_cast<std::ptrdiff_t>(data_start));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint index is not valid JSON: ") + e.what());
  }
  const auto& entries = store.entries();
  if (!index.is_array() || index.size() != entries.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(index.size()) + " tensors, model expects " +
                          std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& item = index[i];
    const Tensor& t = entries[i].tensor;
    const auto name = item.at("name").get<std::string>();
    const auto shape = item.at("shape").get<Shape>();
    if (name != entries[i].name || shape != t.shape()) {
      throw CheckpointError("checkpoint tensor " + name + shape_string(shape) + " does not match model tensor " +
                            entries[i].name + shape_string(t.shape()));
    }
    const auto offset = item.at("offset").get<std::uint64_t>();
    const auto count = item.at("count").get<std::uint64_t>();
    const std::size_t begin = data_start + offset * sizeof(double);
    if (count != static_cast<std::uint64_t>(t.numel()) || bytes.size() < begin + count * sizeof(double)) {
      throw CheckpointError("checkpoint data for " + name + " truncated at byte " + std::to_string(bytes.size()));
    }
    Tensor dst = t;
    std::memcpy(dst.value().data(), bytes.data() + begin, count * sizeof(double));
  }
}

}  // namespace modeforge
