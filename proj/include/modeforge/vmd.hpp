#pragma once

#include <optional>
#include <vector>

#include <Eigen/Core>

#include "modeforge/signal.hpp"

namespace modeforge {

/// Central DFT indices of the modes. Indices are real-valued: half-integer
/// multiples of the fundamental index are legal centers.
struct CenterSet {
  std::vector<double> indices;
  double fundamental_index = 0.0;

  Eigen::Index mode_count() const { return static_cast<Eigen::Index>(indices.size()); }
};

/// Requires a non-empty, strictly increasing set inside [0, frame_len).
void validate(const CenterSet& centers, Eigen::Index frame_len);

/// DFT index of the modulation fundamental: sample_rate / symbol_rate.
double fundamental_index(double sample_rate, double symbol_rate);

/// Fixed center table for k = 2..7, expressed in multiples of k0.
std::vector<int> center_multiples(int k);
CenterSet select_centers(int k, double k0, Eigen::Index frame_len);

/// Per-bin split weights, k x L. Column b holds the share of bin b assigned to
/// each mode: inverse squared distance to the mode center, normalized so the
/// column sums to one. A bin sitting exactly on a center belongs entirely to
/// that mode.
RowMatrixXd mode_weights(const CenterSet& centers, Eigen::Index frame_len);

/// k modes of one frame, one row per mode.
struct ModeSet {
  RowMatrixXcd spectra;  // k x L, U_i(b)
  RowMatrixXcd frames;   // k x L, u_i[n] = idft(U_i)
  CenterSet centers;
  double sample_rate = kDefaultSampleRate;
  double symbol_rate = kDefaultSymbolRate;

  Eigen::Index mode_count() const { return spectra.rows(); }
  Eigen::Index source_len() const { return spectra.cols(); }

  IQFrame mode_frame(Eigen::Index i) const;
  Spectrum mode_spectrum(Eigen::Index i) const;
  ComplexVector<double> summed_frames() const;
  ComplexVector<double> summed_spectra() const;
};

/// Closed-form decomposition with fixed centers. The weight matrix depends only
/// on the centers and the frame length, so it is built once and reused.
class LosslessVmd {
 public:
  LosslessVmd(CenterSet centers, Eigen::Index frame_len);

  ModeSet compute(const IQFrame& frame) const;
  void compute(const IQFrame& frame, ModeSet& out) const;

  const RowMatrixXd& weights() const { return weights_; }
  const CenterSet& centers() const { return centers_; }
  Eigen::Index frame_len() const { return frame_len_; }

 private:
  CenterSet centers_;
  Eigen::Index frame_len_;
  RowMatrixXd weights_;
  // Present only for power-of-two lengths.
  std::optional<BatchedDft::LaneWeights> packed_;
};

ModeSet lossless_vmd(const IQFrame& frame, const CenterSet& centers);

/// sum_b |F(b)|^2 / sum_i (b - k_i)^-2; bins on a center contribute nothing.
double center_objective(const Spectrum& spectrum, const CenterSet& centers);

struct CenterSearchResult {
  CenterSet centers;
  double objective = 0.0;
  int passes = 0;
};

/// Coordinate descent of center_objective over the grid {0, step, 2 step, ...}
/// below L. Starts from the lowest k grid points and only takes strictly
/// improving moves, so the result is a local optimum.
CenterSearchResult optimize_centers(const Spectrum& spectrum, int k, double grid_step);

struct AdmmConfig {
  double alpha = 2000.0;
  double tol = 1e-7;
  int max_iter = 500;
  double tau_dual = 1.0;
};

void validate(const AdmmConfig& config);

/// Iterate state of the ADMM baseline. Frequencies are normalized to
/// cycles/sample, so bin b sits at b / L in [0, 1).
struct AdmmState {
  RowMatrixXcd modes;                // k x L
  Eigen::VectorXd omega;             // k
  ComplexVector<double> dual;        // L
  int iteration = 0;
};

AdmmState admm_init(const ComplexVector<double>& spectrum, int k);

/// One sweep: every mode in turn, then its center, then the dual ascent.
/// Returns the largest relative squared change over the modes.
double admm_iterate(AdmmState& state, const ComplexVector<double>& spectrum,
                    const AdmmConfig& config);

struct AdmmResult {
  ModeSet modes;
  // Sorted ascending in bins. Collapsed modes may share a center, so this set
  // is not guaranteed to satisfy the strict ordering of a fixed CenterSet.
  CenterSet centers;
  int iterations = 0;
  bool converged = false;
};

AdmmResult admm_vmd(const IQFrame& frame, int k, const AdmmConfig& config = {});

/// ||sum_i u_i - f|| / ||f||, 0 for a zero-energy frame.
double reconstruction_error(const ModeSet& modes, const IQFrame& frame);

}  // namespace modeforge
