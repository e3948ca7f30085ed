#pragma once

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/FFT>

namespace modeforge {

template <typename Scalar>
using ComplexVector = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, 1>;

template <typename Scalar>
using ComplexMatrix = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, Eigen::Dynamic>;

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXcd =
    Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Rates of the reference capture setup (25 Msps, 2 Msym/s).
inline constexpr double kDefaultSampleRate = 25e6;
inline constexpr double kDefaultSymbolRate = 2e6;

/// One complex baseband segment with its sampling metadata.
template <typename Scalar>
struct IQFrameT {
  ComplexVector<Scalar> samples;
  Scalar sample_rate = Scalar(kDefaultSampleRate);
  Scalar symbol_rate = Scalar(kDefaultSymbolRate);

  Eigen::Index size() const { return samples.size(); }
};

/// DFT bins of a frame; bin k = 0 ... L-1. Rates are carried through so that
/// an inverse transform yields a complete frame again.
template <typename Scalar>
struct SpectrumT {
  ComplexVector<Scalar> bins;
  Scalar sample_rate = Scalar(kDefaultSampleRate);
  Scalar symbol_rate = Scalar(kDefaultSymbolRate);

  Eigen::Index size() const { return bins.size(); }
};

using IQFrame = IQFrameT<double>;
using Spectrum = SpectrumT<double>;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& v) {
  // allFinite() on complex matrices checks both components.
  return v.allFinite();
}

template <typename Scalar>
void validate(const IQFrameT<Scalar>& frame) {
  if (frame.size() < 2) {
    throw std::invalid_argument("IQ frame needs at least 2 samples, got " +
                                std::to_string(frame.size()));
  }
  if (!(frame.symbol_rate > 0) || !(frame.sample_rate > frame.symbol_rate)) {
    throw std::invalid_argument("IQ frame rates must satisfy sample_rate > symbol_rate > 0");
  }
  if (!all_finite(frame.samples)) {
    throw std::invalid_argument("IQ frame contains non-finite samples");
  }
}

template <typename Scalar>
void validate(const SpectrumT<Scalar>& spectrum) {
  if (spectrum.size() < 1) throw std::invalid_argument("spectrum is empty");
  if (!all_finite(spectrum.bins)) {
    throw std::invalid_argument("spectrum contains non-finite bins");
  }
}

namespace detail {

template <typename Scalar>
Eigen::FFT<Scalar>& fft_engine() {
  // Plans are cached per length; one engine per thread keeps calls reentrant.
  thread_local Eigen::FFT<Scalar> engine;
  return engine;
}

}  // namespace detail

/// Forward transform X[k] = sum_n x[n] exp(-j 2 pi k n / L), unnormalized.
/// Works on any length; the caller owns validation.
template <typename Scalar>
void dft_inplace(const std::complex<Scalar>* src, std::complex<Scalar>* dst, Eigen::Index n) {
  detail::fft_engine<Scalar>().fwd(dst, src, static_cast<int>(n));
}

/// Inverse transform x[n] = (1/L) sum_k X[k] exp(+j 2 pi k n / L).
template <typename Scalar>
void idft_inplace(const std::complex<Scalar>* src, std::complex<Scalar>* dst, Eigen::Index n) {
  detail::fft_engine<Scalar>().inv(dst, src, static_cast<int>(n));
}

template <typename Derived>
ComplexVector<typename Derived::RealScalar> dft(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::RealScalar;
  const ComplexVector<Scalar> src = x;
  ComplexVector<Scalar> out(src.size());
  dft_inplace<Scalar>(src.data(), out.data(), src.size());
  return out;
}

template <typename Derived>
ComplexVector<typename Derived::RealScalar> idft(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::RealScalar;
  const ComplexVector<Scalar> src = x;
  ComplexVector<Scalar> out(src.size());
  idft_inplace<Scalar>(src.data(), out.data(), src.size());
  return out;
}

template <typename Scalar>
SpectrumT<Scalar> dft(const IQFrameT<Scalar>& frame) {
  validate(frame);
  return {dft(frame.samples), frame.sample_rate, frame.symbol_rate};
}

template <typename Scalar>
IQFrameT<Scalar> idft(const SpectrumT<Scalar>& spectrum) {
  validate(spectrum);
  return {idft(spectrum.bins), spectrum.sample_rate, spectrum.symbol_rate};
}

template <typename Derived>
typename Derived::RealScalar energy(const Eigen::MatrixBase<Derived>& v) {
  return v.squaredNorm();
}

/// Relative mismatch between time-domain energy and (1/L) times the spectral
/// energy. Zero for an all-zero frame.
template <typename Scalar>
Scalar parseval_gap(const IQFrameT<Scalar>& frame) {
  const SpectrumT<Scalar> spectrum = dft(frame);
  const Scalar time_energy = energy(frame.samples);
  if (time_energy == Scalar(0)) return Scalar(0);
  const Scalar freq_energy = energy(spectrum.bins) / Scalar(frame.size());
  return std::abs(time_energy - freq_energy) / time_energy;
}

/// Radix-2 transform of up to kLanes signals at once. Signals are stored one
/// per row; internally they are transposed into lanes so every butterfly
/// runs on a full SIMD register regardless of how many rows are live. Only
/// power-of-two lengths are supported; see is_power_of_two().
class BatchedDft {
 public:
  static constexpr int kLanes = 8;
  using LanePacket = Eigen::Array<double, kLanes, 1>;

  /// Real per-bin weights for a set of rows, transposed into lane groups.
  struct LaneWeights {
    Eigen::Index rows = 0;
    std::vector<std::vector<LanePacket>> groups;
  };

  explicit BatchedDft(Eigen::Index n);

  Eigen::Index size() const { return n_; }

  /// Rows of `in` are transformed into the matching rows of `out`.
  void forward(const RowMatrixXcd& in, RowMatrixXcd& out) const;
  void inverse(const RowMatrixXcd& in, RowMatrixXcd& out) const;

  LaneWeights pack(const RowMatrixXd& weights) const;

  /// Row i of `out` becomes the inverse transform of spectrum .* weights row i.
  void inverse_weighted(const ComplexVector<double>& spectrum, const LaneWeights& weights,
                        RowMatrixXcd& out) const;

  /// Shared instance for length n, cached per thread.
  static const BatchedDft& for_length(Eigen::Index n);

 private:
  struct Workspace;

  Workspace& workspace() const;
  void run(const RowMatrixXcd& in, RowMatrixXcd& out, bool inverse) const;
  void butterflies(Workspace& ws, bool inverse) const;
  void store(const Workspace& ws, Eigen::Index first, Eigen::Index live, double scale,
             RowMatrixXcd& out) const;

  Eigen::Index n_;
  std::vector<Eigen::Index> bit_reverse_;
  Eigen::ArrayXd cos_;
  Eigen::ArrayXd sin_;
};

inline bool is_power_of_two(Eigen::Index n) { return n > 0 && (n & (n - 1)) == 0; }

/// Row-wise inverse transform; uses BatchedDft for power-of-two lengths.
void idft_rows(const RowMatrixXcd& in, RowMatrixXcd& out);

/// ||a - b|| / ||b||, with 0 when both vanish.
template <typename DerivedA, typename DerivedB>
typename DerivedA::RealScalar relative_error(const Eigen::MatrixBase<DerivedA>& a,
                                             const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::RealScalar;
  const Scalar denom = b.norm();
  const Scalar diff = (a - b).norm();
  if (denom == Scalar(0)) return diff;
  return diff / denom;
}

}  // namespace modeforge
