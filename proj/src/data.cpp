#include "modeforge/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>

namespace modeforge {

std::string to_string(Layout layout) { return layout == Layout::RawIq ? "raw_iq" : "vmd"; }

Layout parse_layout(const std::string& s) {
  if (s == "raw_iq") return Layout::RawIq;
  if (s == "vmd") return Layout::Vmd;
  throw std::invalid_argument("unknown layout '" + s + "' (expected raw_iq or vmd)");
}

Dataset Dataset::subset(const std::vector<Eigen::Index>& indices) const {
  Dataset out;
  out.class_names = class_names;
  out.layout = layout;
  out.sample_rate = sample_rate;
  out.symbol_rate = symbol_rate;
  out.frames.reserve(indices.size());
  out.labels.reserve(indices.size());
  for (Eigen::Index i : indices) {
    if (i < 0 || i >= size()) throw std::out_of_range("subset index " + std::to_string(i) + " out of range");
    out.frames.push_back(frames[static_cast<std::size_t>(i)]);
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

void Dataset::append(const Dataset& other) {
  if (other.class_names != class_names || other.layout != layout) {
    throw std::invalid_argument("cannot append datasets with different class spaces or layouts");
  }
  frames.insert(frames.end(), other.frames.begin(), other.frames.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

void validate(const Dataset& d) {
  if (d.frames.size() != d.labels.size()) {
    throw std::invalid_argument("dataset has " + std::to_string(d.frames.size()) + " frames but " +
                                std::to_string(d.labels.size()) + " labels");
  }
  if (!(d.sample_rate > d.symbol_rate && d.symbol_rate > 0)) {
    throw std::invalid_argument("dataset rates must satisfy sample_rate > symbol_rate > 0");
  }
  const Eigen::Index len = d.frame_len(), ch = d.channels();
  if (!d.empty()) {
    if (d.layout == Layout::RawIq && ch != 2) throw std::invalid_argument("raw IQ frames need 2 channels");
    if (d.layout == Layout::Vmd && (ch < 2 || ch % 2 != 0)) {
      throw std::invalid_argument("mode frames need an even channel count");
    }
  }
  for (std::size_t i = 0; i < d.frames.size(); ++i) {
    if (d.frames[i].rows() != len || d.frames[i].cols() != ch) {
      throw std::invalid_argument("frame " + std::to_string(i) + " is " + std::to_string(d.frames[i].rows()) + "x" +
                                  std::to_string(d.frames[i].cols()) + ", expected " + std::to_string(len) + "x" +
                                  std::to_string(ch));
    }
    if (!d.frames[i].allFinite()) throw std::invalid_argument("frame " + std::to_string(i) + " is not finite");
    if (d.labels[i] < 0 || d.labels[i] >= d.n_classes()) {
      throw std::invalid_argument("label " + std::to_string(d.labels[i]) + " of frame " + std::to_string(i) +
                                  " outside [0, " + std::to_string(d.n_classes()) + ")");
    }
  }
}

RowMatrixXd iq_channels(const ComplexVector<double>& samples) {
  RowMatrixXd out(samples.size(), 2);
  out.col(0) = samples.real();
  out.col(1) = samples.imag();
  return out;
}

ComplexVector<double> iq_samples(const RowMatrixXd& channels) {
  if (channels.cols() != 2) throw std::invalid_argument("expected an L x 2 (re, im) frame");
  ComplexVector<double> out(channels.rows());
  for (Eigen::Index n = 0; n < channels.rows(); ++n) out[n] = {channels(n, 0), channels(n, 1)};
  return out;
}

// ---- synthetic fleet ----------------------------------------------------------

void validate(const ImpairmentCaps& c) {
  const double caps[] = {c.gain_imbalance_db, c.phase_imbalance_rad, c.dc_offset_fraction,
                         c.carrier_offset_fraction, c.phase_noise_std, c.nonlinearity};
  bool any = false;
  for (double v : caps) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("impairment caps must be finite and >= 0");
    any = any || v > 0.0;
  }
  if (!any) {
    throw std::invalid_argument("all impairment caps are zero: every device would transmit the same waveform");
  }
}

SynthDeviceProfile draw_profile(const ImpairmentCaps& caps, double signal_rms, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto sym = [&](double cap) { return std::uniform_real_distribution<double>(-cap, cap)(rng); };
  auto pos = [&](double cap) { return std::uniform_real_distribution<double>(0.0, cap)(rng); };
  SynthDeviceProfile p;
  p.seed = seed;
  p.gain_imbalance_db = sym(caps.gain_imbalance_db);
  p.phase_imbalance_rad = sym(caps.phase_imbalance_rad);
  const double mag = pos(caps.dc_offset_fraction * signal_rms);
  const double ang = pos(2.0 * std::numbers::pi);
  p.dc_offset = std::polar(mag, ang);
  p.carrier_offset = sym(caps.carrier_offset_fraction);
  p.phase_noise_std = pos(caps.phase_noise_std);
  p.nonlinearity = sym(caps.nonlinearity);
  return p;
}

const std::vector<std::complex<double>>& preamble_symbols() {
  // Quadrant indices q, symbol exp(j pi (2q + 1) / 4).
  static const int quadrants[32] = {0, 3, 1, 2, 2, 0, 3, 1, 1, 1, 0, 3, 2, 3, 0, 2,
                                    3, 1, 2, 0, 0, 2, 1, 3, 3, 0, 1, 2, 1, 3, 2, 0};
  static const std::vector<std::complex<double>> symbols = [] {
    std::vector<std::complex<double>> s;
    for (int q : quadrants) s.push_back(std::polar(1.0, std::numbers::pi * (2 * q + 1) / 4.0));
    return s;
  }();
  return symbols;
}

namespace {

double raised_cosine(double t, double beta) {
  const double x = 2.0 * beta * t;
  if (std::abs(std::abs(x) - 1.0) < 1e-12) {
    const double u = 1.0 / (2.0 * beta);
    return std::numbers::pi / 4.0 * std::sin(std::numbers::pi * u) / (std::numbers::pi * u);
  }
  const double sinc = t == 0.0 ? 1.0 : std::sin(std::numbers::pi * t) / (std::numbers::pi * t);
  return sinc * std::cos(std::numbers::pi * beta * t) / (1.0 - x * x);
}

}  // namespace

ComplexVector<double> shaped_preamble(Eigen::Index frame_len, double oversample, double rolloff) {
  if (frame_len < 1) throw std::invalid_argument("frame length must be positive");
  if (!(oversample > 1.0)) throw std::invalid_argument("oversample factor must exceed 1");
  if (!(rolloff > 0.0 && rolloff <= 1.0)) throw std::invalid_argument("roll-off must lie in (0, 1]");
  const auto& sym = preamble_symbols();
  const long period = static_cast<long>(sym.size());
  constexpr long span = 8;  // symbols on each side of the pulse peak
  ComplexVector<double> out(frame_len);
  for (Eigen::Index n = 0; n < frame_len; ++n) {
    const double t = static_cast<double>(n) / oversample;
    const long m0 = static_cast<long>(std::floor(t));
    std::complex<double> acc = 0.0;
    for (long m = m0 - span; m <= m0 + span; ++m) {
      acc += sym[static_cast<std::size_t>(((m % period) + period) % period)] * raised_cosine(t - m, rolloff);
    }
    out[n] = acc;
  }
  return out;
}

ComplexVector<double> apply_profile(const ComplexVector<double>& clean, const SynthDeviceProfile& p,
                                    double oversample, std::mt19937_64& rng) {
  const double g = std::pow(10.0, p.gain_imbalance_db / 20.0);
  const double sphi = std::sin(p.phase_imbalance_rad), cphi = std::cos(p.phase_imbalance_rad);
  const double step = 2.0 * std::numbers::pi * p.carrier_offset / oversample;
  std::normal_distribution<double> walk(0.0, 1.0);
  ComplexVector<double> out(clean.size());
  double theta = 0.0;
  for (Eigen::Index n = 0; n < clean.size(); ++n) {
    const double i = clean[n].real(), q = clean[n].imag();
    std::complex<double> y(i, g * (q * cphi + i * sphi));
    y += p.dc_offset;
    if (p.phase_noise_std > 0.0) theta += p.phase_noise_std * walk(rng);
    y *= std::polar(1.0, step * static_cast<double>(n) + theta);
    y += p.nonlinearity * y * std::norm(y);
    out[n] = y;
  }
  return out;
}

void add_awgn(ComplexVector<double>& frame, double snr_db, std::mt19937_64& rng) {
  if (std::isinf(snr_db) && snr_db > 0) return;
  if (!std::isfinite(snr_db)) throw std::invalid_argument("SNR must be finite or +inf");
  if (frame.size() == 0) return;
  const double power = frame.squaredNorm() / static_cast<double>(frame.size());
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0) / 2.0);
  std::normal_distribution<double> nd(0.0, sigma);
  for (auto& v : frame) {
    const double re = nd(rng);
    const double im = nd(rng);
    v += std::complex<double>(re, im);
  }
}

void validate(const FleetConfig& c) {
  if (c.n_devices < 2) throw std::invalid_argument("a fleet needs at least 2 devices");
  if (c.frames_per_device < 1) throw std::invalid_argument("frames per device must be positive");
  if (c.frame_len < 64) throw std::invalid_argument("frame length must be at least 64 samples");
  if (std::isnan(c.snr_db) || c.snr_db == -std::numeric_limits<double>::infinity()) {
    throw std::invalid_argument("SNR must be a number or +inf");
  }
  if (!(c.sample_rate > c.symbol_rate && c.symbol_rate > 0)) {
    throw std::invalid_argument("fleet rates must satisfy sample_rate > symbol_rate > 0");
  }
  validate(c.caps);
}

Fleet gen_fleet_with_profiles(const FleetConfig& c) {
  validate(c);
  const double os = c.sample_rate / c.symbol_rate;
  const ComplexVector<double> clean = shaped_preamble(c.frame_len, os);
  const double rms = std::sqrt(clean.squaredNorm() / static_cast<double>(clean.size()));
  Fleet fleet;
  Dataset& d = fleet.data;
  d.sample_rate = c.sample_rate;
  d.symbol_rate = c.symbol_rate;
  d.layout = Layout::RawIq;
  d.frames.reserve(static_cast<std::size_t>(c.n_devices) * static_cast<std::size_t>(c.frames_per_device));
  for (int dev = 0; dev < c.n_devices; ++dev) {
    std::seed_seq seq{static_cast<std::uint32_t>(c.seed), static_cast<std::uint32_t>(c.seed >> 32),
                      static_cast<std::uint32_t>(dev)};
    std::uint64_t words[2];
    std::uint32_t raw[4];
    seq.generate(raw, raw + 4);
    words[0] = (std::uint64_t{raw[0]} << 32) | raw[1];
    words[1] = (std::uint64_t{raw[2]} << 32) | raw[3];
    const SynthDeviceProfile p = draw_profile(c.caps, rms, words[0]);
    std::mt19937_64 frame_rng(words[1]);
    fleet.profiles.push_back(p);
    char name[32];
    std::snprintf(name, sizeof name, "dev%02d", dev);
    d.class_names.emplace_back(name);
    for (int f = 0; f < c.frames_per_device; ++f) {
      ComplexVector<double> x = apply_profile(clean, p, os, frame_rng);
      add_awgn(x, c.snr_db, frame_rng);
      d.frames.push_back(iq_channels(x));
      d.labels.push_back(dev);
    }
  }
  return fleet;
}

Dataset gen_fleet(int n_devices, int frames_per_device, Eigen::Index frame_len, double snr_db, std::uint64_t seed) {
  FleetConfig c;
  c.n_devices = n_devices;
  c.frames_per_device = frames_per_device;
  c.frame_len = frame_len;
  c.snr_db = snr_db;
  c.seed = seed;
  return gen_fleet_with_profiles(c).data;
}

// ---- splits and partitions ----------------------------------------------------

std::array<Eigen::Index, 3> split_counts(Eigen::Index n, const SplitSpec& s) {
  const double r[3] = {s.train, s.val, s.test};
  for (double v : r) {
    if (!(v > 0.0)) throw std::invalid_argument("split ratios must be positive");
  }
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
  std::array<Eigen::Index, 3> out{};
  double frac[3];
  Eigen::Index used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = r[i] * static_cast<double>(n);
    // Guard against 8.3000000001-style representation error.
    const double fl = std::floor(exact + 1e-9);
    out[static_cast<std::size_t>(i)] = static_cast<Eigen::Index>(fl);
    frac[i] = std::max(0.0, exact - fl);
    used += out[static_cast<std::size_t>(i)];
  }
  Eigen::Index left = n - used;
  int order[2] = {2, 1};
  if (frac[1] > frac[2] + 1e-9) std::swap(order[0], order[1]);
  for (int i = 0; left > 0; i = (i + 1) % 3, --left) {
    const int target = i < 2 ? order[i] : 0;
    ++out[static_cast<std::size_t>(target)];
  }
  return out;
}

Splits stratified_split(const Dataset& d, const SplitSpec& spec) {
  validate(d);
  std::mt19937_64 rng(spec.seed);
  std::vector<Eigen::Index> parts[3];
  auto cut = [&](std::vector<Eigen::Index>& idx, const std::string& what) {
    const auto counts = split_counts(static_cast<Eigen::Index>(idx.size()), spec);
    if (counts[0] < 1 || counts[1] < 1 || counts[2] < 1) {
      throw std::invalid_argument(what + " has " + std::to_string(idx.size()) +
                                  " samples; every partition needs at least one (use >= 10 per class)");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t at = 0;
    for (int p = 0; p < 3; ++p) {
      for (Eigen::Index j = 0; j < counts[static_cast<std::size_t>(p)]; ++j) parts[p].push_back(idx[at++]);
    }
  };
  if (spec.stratified) {
    std::vector<std::vector<Eigen::Index>> by_class(static_cast<std::size_t>(d.n_classes()));
    for (Eigen::Index i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.labels[static_cast<std::size_t>(i)])].push_back(i);
    for (int c = 0; c < d.n_classes(); ++c) {
      auto& idx = by_class[static_cast<std::size_t>(c)];
      if (idx.size() < 10) {
        throw std::invalid_argument("class " + d.class_names[static_cast<std::size_t>(c)] + " has " +
                                    std::to_string(idx.size()) + " samples; a stratified split needs at least 10");
      }
      cut(idx, "class " + d.class_names[static_cast<std::size_t>(c)]);
    }
  } else {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(d.size()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    cut(idx, "dataset");
  }
  return {d.subset(parts[0]), d.subset(parts[1]), d.subset(parts[2])};
}

LegalPartition legal_illegal_partition(const Dataset& d, int n_illegal, std::uint64_t seed) {
  validate(d);
  const int k = d.n_classes();
  if (n_illegal < 0 || n_illegal >= k) {
    throw std::invalid_argument("n_illegal must lie in [0, " + std::to_string(k) + "), got " +
                                std::to_string(n_illegal));
  }
  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  LegalPartition out;
  out.illegal_classes.assign(perm.begin(), perm.begin() + n_illegal);
  out.legal_classes.assign(perm.begin() + n_illegal, perm.end());
  std::sort(out.illegal_classes.begin(), out.illegal_classes.end());
  std::sort(out.legal_classes.begin(), out.legal_classes.end());

  std::vector<int> remap(static_cast<std::size_t>(k), -1);
  for (std::size_t i = 0; i < out.legal_classes.size(); ++i) remap[static_cast<std::size_t>(out.legal_classes[i])] = static_cast<int>(i);
  for (Dataset* p : {&out.legal, &out.illegal}) {
    p->layout = d.layout;
    p->sample_rate = d.sample_rate;
    p->symbol_rate = d.symbol_rate;
  }
  for (int c : out.legal_classes) out.legal.class_names.push_back(d.class_names[static_cast<std::size_t>(c)]);
  out.illegal.class_names = d.class_names;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const int y = d.labels[static_cast<std::size_t>(i)];
    const int m = remap[static_cast<std::size_t>(y)];
    Dataset& dst = m >= 0 ? out.legal : out.illegal;
    dst.frames.push_back(d.frames[static_cast<std::size_t>(i)]);
    dst.labels.push_back(m >= 0 ? m : y);
  }
  return out;
}

Eigen::VectorXd class_weights(const std::vector<int>& labels, int n_classes) {
  if (n_classes < 1) throw std::invalid_argument("class_weights needs at least one class");
  Eigen::VectorXd count = Eigen::VectorXd::Zero(n_classes);
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw std::invalid_argument("label " + std::to_string(y) + " out of range");
    count[y] += 1.0;
  }
  for (int c = 0; c < n_classes; ++c) {
    if (count[c] == 0.0) throw std::invalid_argument("class " + std::to_string(c) + " has no training samples");
  }
  const double n = static_cast<double>(labels.size());
  return (n / (n_classes * count.array())).matrix();
}

Dataset vmd_preprocess(const Dataset& d, const CenterSet& centers) {
  if (d.layout != Layout::RawIq) throw std::invalid_argument("vmd_preprocess expects raw IQ frames");
  validate(d);
  Dataset out;
  out.class_names = d.class_names;
  out.labels = d.labels;
  out.layout = Layout::Vmd;
  out.sample_rate = d.sample_rate;
  out.symbol_rate = d.symbol_rate;
  if (d.empty()) return out;
  const Eigen::Index len = d.frame_len();
  const LosslessVmd vmd(centers, len);
  const Eigen::Index k = centers.mode_count();
  ModeSet modes;
  out.frames.reserve(d.frames.size());
  for (const RowMatrixXd& f : d.frames) {
    vmd.compute(IQFrame{iq_samples(f), d.sample_rate, d.symbol_rate}, modes);
    RowMatrixXd m(len, 2 * k);
    for (Eigen::Index i = 0; i < k; ++i) {
      m.col(2 * i) = modes.frames.row(i).real().transpose();
      m.col(2 * i + 1) = modes.frames.row(i).imag().transpose();
    }
    out.frames.push_back(std::move(m));
  }
  return out;
}

Dataset vmd_collapse(const Dataset& d) {
  if (d.layout != Layout::Vmd) throw std::invalid_argument("vmd_collapse expects mode frames");
  Dataset out = d;
  out.layout = Layout::RawIq;
  for (RowMatrixXd& f : out.frames) {
    RowMatrixXd s = RowMatrixXd::Zero(f.rows(), 2);
    for (Eigen::Index c = 0; c < f.cols(); c += 2) {
      s.col(0) += f.col(c);
      s.col(1) += f.col(c + 1);
    }
    f = std::move(s);
  }
  return out;
}

}  // namespace modeforge
