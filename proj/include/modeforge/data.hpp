#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "modeforge/signal.hpp"
#include "modeforge/vmd.hpp"

namespace modeforge {

enum class Layout { RawIq, Vmd };

std::string to_string(Layout layout);
Layout parse_layout(const std::string& s);

/// Labeled frames. Every frame is L x c, one row per sample: (re, im) for raw
/// IQ, and (re_0, im_0, re_1, im_1, ...) mode by mode for decomposed data.
struct Dataset {
  std::vector<RowMatrixXd> frames;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  Layout layout = Layout::RawIq;
  double sample_rate = kDefaultSampleRate;
  double symbol_rate = kDefaultSymbolRate;

  Eigen::Index size() const { return static_cast<Eigen::Index>(frames.size()); }
  bool empty() const { return frames.empty(); }
  int n_classes() const { return static_cast<int>(class_names.size()); }
  Eigen::Index frame_len() const { return frames.empty() ? 0 : frames.front().rows(); }
  Eigen::Index channels() const { return frames.empty() ? (layout == Layout::RawIq ? 2 : 0) : frames.front().cols(); }

  /// Copy holding only the listed frames, same class space.
  Dataset subset(const std::vector<Eigen::Index>& indices) const;
  void append(const Dataset& other);
};

void validate(const Dataset& d);

/// L x 2 (re, im) view of complex samples and back.
RowMatrixXd iq_channels(const ComplexVector<double>& samples);
ComplexVector<double> iq_samples(const RowMatrixXd& channels);

// ---- synthetic fleet ----------------------------------------------------------

/// Bounds on the per-device impairments.
struct ImpairmentCaps {
  double gain_imbalance_db = 1.0;
  double phase_imbalance_rad = 5.0 * 3.14159265358979323846 / 180.0;
  double dc_offset_fraction = 0.02;     // of the clean signal RMS
  double carrier_offset_fraction = 0.01;  // of the symbol rate
  double phase_noise_std = 0.01;        // rad per sample
  double nonlinearity = 0.05;           // cubic coefficient
};

void validate(const ImpairmentCaps& caps);

struct SynthDeviceProfile {
  double gain_imbalance_db = 0.0;
  double phase_imbalance_rad = 0.0;
  std::complex<double> dc_offset{0.0, 0.0};
  double carrier_offset = 0.0;  // fraction of the symbol rate
  double phase_noise_std = 0.0;
  double nonlinearity = 0.0;
  std::uint64_t seed = 0;
};

/// Draws every impairment uniformly within its cap (phase-noise std and DC
/// magnitude in [0, cap], the rest symmetric).
SynthDeviceProfile draw_profile(const ImpairmentCaps& caps, double signal_rms, std::uint64_t seed);

/// The fixed 32-symbol QPSK sequence, unit energy per symbol.
const std::vector<std::complex<double>>& preamble_symbols();

/// Raised-cosine shaped preamble, `oversample` samples per symbol, repeated
/// cyclically when the frame is longer than one preamble.
ComplexVector<double> shaped_preamble(Eigen::Index frame_len, double oversample, double rolloff = 0.35);

/// IQ imbalance, DC offset, carrier offset, phase-noise walk, cubic term, in
/// that order. `rng` drives the phase noise only.
ComplexVector<double> apply_profile(const ComplexVector<double>& clean, const SynthDeviceProfile& profile,
                                    double oversample, std::mt19937_64& rng);

/// Adds complex white noise so that the frame's own mean power over the noise
/// power equals snr_db. An infinite snr_db adds nothing.
void add_awgn(ComplexVector<double>& frame, double snr_db, std::mt19937_64& rng);

struct FleetConfig {
  int n_devices = 10;
  int frames_per_device = 400;
  Eigen::Index frame_len = 256;
  double snr_db = 20.0;
  std::uint64_t seed = 42;
  ImpairmentCaps caps;
  double sample_rate = kDefaultSampleRate;
  double symbol_rate = kDefaultSymbolRate;
};

void validate(const FleetConfig& c);

struct Fleet {
  Dataset data;
  std::vector<SynthDeviceProfile> profiles;
};

/// Frames are ordered device by device. Deterministic for a given config.
Fleet gen_fleet_with_profiles(const FleetConfig& config);
Dataset gen_fleet(int n_devices, int frames_per_device, Eigen::Index frame_len, double snr_db, std::uint64_t seed);

// ---- splits and partitions ----------------------------------------------------

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  std::uint64_t seed = 42;
  bool stratified = true;
};

struct Splits {
  Dataset train, val, test;
};

/// Per-class partition sizes for n samples. Shares are floored, then the left
/// over samples go to validation and test by largest fractional part (ties to
/// test). Training keeps its floor.
std::array<Eigen::Index, 3> split_counts(Eigen::Index n, const SplitSpec& spec);

Splits stratified_split(const Dataset& d, const SplitSpec& spec = {});

struct LegalPartition {
  Dataset legal;    // labels re-indexed 0 .. K-1
  Dataset illegal;  // original labels and class names
  std::vector<int> legal_classes;    // original index of legal class i
  std::vector<int> illegal_classes;  // sorted original indices
};

LegalPartition legal_illegal_partition(const Dataset& d, int n_illegal, std::uint64_t seed);

/// w_k = N / (K count_k).
Eigen::VectorXd class_weights(const std::vector<int>& labels, int n_classes);

/// Replaces each raw frame by its lossless modes, c = 2k.
Dataset vmd_preprocess(const Dataset& d, const CenterSet& centers);
/// Sums mode channel pairs back to (re, im).
Dataset vmd_collapse(const Dataset& d);

// ---- RFIQ files -----------------------------------------------------------------

class RfiqError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, BadVersion, BadHeader, Truncated, LabelRange, Unsupported };
  RfiqError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// "RFIQ", u16 version, u32 header length, JSON header, u16 labels, then
/// little-endian float32 samples, channel-interleaved per sample.
void save_iq(const std::filesystem::path& path, const Dataset& d);
Dataset load_iq(const std::filesystem::path& path);

}  // namespace modeforge
