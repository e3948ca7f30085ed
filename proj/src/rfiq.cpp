#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "modeforge/data.hpp"

namespace modeforge {

static_assert(std::endian::native == std::endian::little, "RFIQ I/O copies little-endian words directly");

namespace {

constexpr char kMagic[4] = {'R', 'F', 'I', 'Q'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kPrefix = 10;  // magic + version + header length

using Kind = RfiqError::Kind;

}  // namespace

void save_iq(const std::filesystem::path& path, const Dataset& d) {
  validate(d);
  if (d.n_classes() > 65536) throw RfiqError(Kind::Unsupported, "RFIQ labels are u16; too many classes");
  const nlohmann::ordered_json header = {
      {"frame_len", d.frame_len()},   {"n_frames", d.size()},           {"n_classes", d.n_classes()},
      {"channels", d.channels()},     {"sample_rate", d.sample_rate},   {"symbol_rate", d.symbol_rate},
      {"layout", to_string(d.layout)}, {"class_names", d.class_names}};
  const std::string text = header.dump();
  const auto header_len = static_cast<std::uint32_t>(text.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RfiqError(Kind::Io, "cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(&kVersion), 2);
  out.write(reinterpret_cast<const char*>(&header_len), 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (int y : d.labels) {
    const auto v = static_cast<std::uint16_t>(y);
    out.write(reinterpret_cast<const char*>(&v), 2);
  }
  std::vector<float> buf;
  for (const RowMatrixXd& f : d.frames) {
    buf.resize(static_cast<std::size_t>(f.size()));
    // Row-major storage is already sample-major with channels interleaved.
    for (Eigen::Index i = 0; i < f.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(f.data()[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw RfiqError(Kind::Io, "write failed for " + path.string());
}

Dataset load_iq(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RfiqError(Kind::Io, "cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw RfiqError(Kind::BadMagic, path.string() + ": bad magic, not an RFIQ file");
  }
  if (bytes.size() < kPrefix) {
    throw RfiqError(Kind::Truncated, path.string() + ": truncated header at byte offset " + std::to_string(bytes.size()));
  }
  std::uint16_t version = 0;
  std::uint32_t header_len = 0;
  std::memcpy(&version, bytes.data() + 4, 2);
  std::memcpy(&header_len, bytes.data() + 6, 4);
  if (version != kVersion) {
    throw RfiqError(Kind::BadVersion, path.string() + ": unsupported RFIQ version " + std::to_string(version));
  }
  const std::size_t labels_at = kPrefix + header_len;
  if (bytes.size() < labels_at) {
    throw RfiqError(Kind::Truncated, path.string() + ": truncated header at byte offset " + std::to_string(bytes.size()));
  }
  Dataset d;
  Eigen::Index len = 0, n = 0, ch = 0;
  try {
    const auto h = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(kPrefix),
                                         bytes.begin() + static_cast<std::ptrdiff_t>(labels_at));
    len = h.at("frame_len").get<Eigen::Index>();
    n = h.at("n_frames").get<Eigen::Index>();
    ch = h.at("channels").get<Eigen::Index>();
    d.sample_rate = h.at("sample_rate").get<double>();
    d.symbol_rate = h.at("symbol_rate").get<double>();
    d.layout = parse_layout(h.at("layout").get<std::string>());
    d.class_names = h.at("class_names").get<std::vector<std::string>>();
    if (h.at("n_classes").get<int>() != d.n_classes()) throw std::invalid_argument("n_classes disagrees with class_names");
  } catch (const std::exception& e) {
    throw RfiqError(Kind::BadHeader, path.string() + ": malformed header: " + e.what());
  }
  if (len < 0 || n < 0 || ch < 0 || (n > 0 && (len < 1 || ch < 1))) {
    throw RfiqError(Kind::BadHeader, path.string() + ": header sizes are inconsistent");
  }
  const std::size_t samples_at = labels_at + 2 * static_cast<std::size_t>(n);
  const std::size_t end = samples_at + sizeof(float) * static_cast<std::size_t>(n * len * ch);
  if (bytes.size() < end) {
    throw RfiqError(Kind::Truncated, path.string() + ": truncated payload, file ends at byte offset " +
                                         std::to_string(bytes.size()) + " but " + std::to_string(end) +
                                         " bytes are declared");
  }
  if (bytes.size() > end) {
    throw RfiqError(Kind::BadHeader, path.string() + ": " + std::to_string(bytes.size() - end) +
                                         " unexpected trailing bytes after byte offset " + std::to_string(end));
  }
  d.labels.resize(static_cast<std::size_t>(n));
  d.frames.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::uint16_t y = 0;
    std::memcpy(&y, bytes.data() + labels_at + 2 * static_cast<std::size_t>(i), 2);
    if (y >= d.n_classes()) {
      throw RfiqError(Kind::LabelRange, path.string() + ": label " + std::to_string(y) + " of frame " +
                                            std::to_string(i) + " is out of range for " +
                                            std::to_string(d.n_classes()) + " classes");
    }
    d.labels[static_cast<std::size_t>(i)] = y;
  }
  std::vector<float> buf(static_cast<std::size_t>(len * ch));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::memcpy(buf.data(), bytes.data() + samples_at + sizeof(float) * static_cast<std::size_t>(i * len * ch),
                buf.size() * sizeof(float));
    RowMatrixXd f(len, ch);
    for (Eigen::Index j = 0; j < f.size(); ++j) f.data()[j] = buf[static_cast<std::size_t>(j)];
    d.frames.push_back(std::move(f));
  }
  try {
    validate(d);
  } catch (const std::invalid_argument& e) {
    throw RfiqError(Kind::BadHeader, path.string() + ": " + e.what());
  }
  return d;
}

}  // namespace modeforge
