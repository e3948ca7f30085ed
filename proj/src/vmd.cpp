#include "modeforge/vmd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace modeforge {

void validate(const CenterSet& centers, Eigen::Index frame_len) {
  if (centers.indices.empty()) throw std::invalid_argument("center set is empty");
  for (std::size_t i = 0; i < centers.indices.size(); ++i) {
    const double c = centers.indices[i];
    if (!std::isfinite(c) || c < 0.0 || c >= static_cast<double>(frame_len)) {
      throw std::invalid_argument("center index " + std::to_string(c) + " outside [0, " +
                                  std::to_string(frame_len) + ")");
    }
    if (i > 0 && !(c > centers.indices[i - 1])) {
      throw std::invalid_argument("center indices must be strictly increasing and distinct");
    }
  }
}

double fundamental_index(double sample_rate, double symbol_rate) {
  if (!(symbol_rate > 0.0) || !std::isfinite(sample_rate)) {
    throw std::invalid_argument("symbol rate must be positive");
  }
  if (!(sample_rate > symbol_rate)) {
    throw std::invalid_argument("sample rate must exceed symbol rate");
  }
  return sample_rate / symbol_rate;
}

std::vector<int> center_multiples(int k) {
  switch (k) {
    case 2: return {2, 4};
    case 3: return {1, 3, 5};
    case 4: return {0, 2, 4, 6};
    case 5: return {0, 1, 3, 5, 6};
    case 6: return {1, 2, 3, 4, 5, 6};
    case 7: return {0, 1, 2, 3, 4, 5, 6};
    default:
      throw std::invalid_argument("no center table row for k = " + std::to_string(k) +
                                  " (supported: 2..7)");
  }
}

CenterSet select_centers(int k, double k0, Eigen::Index frame_len) {
  if (!(k0 > 0.0)) throw std::invalid_argument("fundamental index must be positive");
  CenterSet out;
  out.fundamental_index = k0;
  for (int m : center_multiples(k)) {
    const double c = m * k0;
    if (c >= static_cast<double>(frame_len)) {
      throw std::invalid_argument("center " + std::to_string(c) + " does not fit frame length " +
                                  std::to_string(frame_len));
    }
    out.indices.push_back(c);
  }
  return out;
}

RowMatrixXd mode_weights(const CenterSet& centers, Eigen::Index frame_len) {
  validate(centers, frame_len);
  const Eigen::Index k = centers.mode_count();
  RowMatrixXd w(k, frame_len);
  Eigen::VectorXd inv(k);
  for (Eigen::Index b = 0; b < frame_len; ++b) {
    const double bin = static_cast<double>(b);
    Eigen::Index hit = -1;
    for (Eigen::Index i = 0; i < k; ++i) {
      const double d = bin - centers.indices[i];
      if (d == 0.0) {
        hit = i;
        break;
      }
      inv[i] = 1.0 / (d * d);
    }
    if (hit >= 0) {
      w.col(b).setZero();
      w(hit, b) = 1.0;
    } else {
      w.col(b) = inv / inv.sum();
    }
  }
  return w;
}

IQFrame ModeSet::mode_frame(Eigen::Index i) const {
  return {frames.row(i).transpose(), sample_rate, symbol_rate};
}

Spectrum ModeSet::mode_spectrum(Eigen::Index i) const {
  return {spectra.row(i).transpose(), sample_rate, symbol_rate};
}

ComplexVector<double> ModeSet::summed_frames() const {
  return frames.colwise().sum().transpose();
}

ComplexVector<double> ModeSet::summed_spectra() const {
  return spectra.colwise().sum().transpose();
}

LosslessVmd::LosslessVmd(CenterSet centers, Eigen::Index frame_len)
    : centers_(std::move(centers)), frame_len_(frame_len), weights_(mode_weights(centers_, frame_len)) {
  if (is_power_of_two(frame_len_) && frame_len_ >= 2) {
    packed_ = BatchedDft::for_length(frame_len_).pack(weights_);
  }
}

ModeSet LosslessVmd::compute(const IQFrame& frame) const {
  ModeSet out;
  compute(frame, out);
  return out;
}

void LosslessVmd::compute(const IQFrame& frame, ModeSet& out) const {
  validate(frame);
  if (frame.size() != frame_len_) {
    throw std::invalid_argument("frame length " + std::to_string(frame.size()) +
                                " does not match decomposer length " + std::to_string(frame_len_));
  }
  const Eigen::Index k = weights_.rows();
  out.spectra.resize(k, frame_len_);
  out.frames.resize(k, frame_len_);
  out.centers = centers_;
  out.sample_rate = frame.sample_rate;
  out.symbol_rate = frame.symbol_rate;

  ComplexVector<double> spectrum(frame_len_);
  dft_inplace<double>(frame.samples.data(), spectrum.data(), frame_len_);
  for (Eigen::Index i = 0; i < k; ++i) {
    out.spectra.row(i).array() = spectrum.transpose().array() * weights_.row(i).array();
  }
  if (packed_) {
    BatchedDft::for_length(frame_len_).inverse_weighted(spectrum, *packed_, out.frames);
  } else {
    idft_rows(out.spectra, out.frames);
  }
}

ModeSet lossless_vmd(const IQFrame& frame, const CenterSet& centers) {
  return LosslessVmd(centers, frame.size()).compute(frame);
}

namespace {

double objective_for(const Eigen::ArrayXd& power, const double* centers, Eigen::Index k) {
  double total = 0.0;
  const Eigen::Index n = power.size();
  for (Eigen::Index b = 0; b < n; ++b) {
    if (power[b] == 0.0) continue;
    double denom = 0.0;
    bool singular = false;
    for (Eigen::Index i = 0; i < k; ++i) {
      const double d = static_cast<double>(b) - centers[i];
      if (d == 0.0) {
        singular = true;
        break;
      }
      denom += 1.0 / (d * d);
    }
    if (!singular) total += power[b] / denom;
  }
  return total;
}

}  // namespace

double center_objective(const Spectrum& spectrum, const CenterSet& centers) {
  validate(spectrum);
  validate(centers, spectrum.size());
  const Eigen::ArrayXd power = spectrum.bins.array().abs2();
  return objective_for(power, centers.indices.data(), centers.mode_count());
}

CenterSearchResult optimize_centers(const Spectrum& spectrum, int k, double grid_step) {
  validate(spectrum);
  const Eigen::Index frame_len = spectrum.size();
  if (k < 1) throw std::invalid_argument("mode count must be at least 1");
  if (!(grid_step > 0.0)) throw std::invalid_argument("grid step must be positive");
  if (k > frame_len) throw std::invalid_argument("mode count exceeds frame length");

  std::vector<double> grid;
  for (Eigen::Index j = 0;; ++j) {
    const double g = static_cast<double>(j) * grid_step;
    if (g >= static_cast<double>(frame_len)) break;
    grid.push_back(g);
  }
  if (static_cast<Eigen::Index>(grid.size()) < k) {
    throw std::invalid_argument("grid has fewer points than requested modes");
  }

  const Eigen::ArrayXd power = spectrum.bins.array().abs2();
  std::vector<std::size_t> slot(static_cast<std::size_t>(k));
  std::iota(slot.begin(), slot.end(), std::size_t{0});
  std::vector<double> current(slot.size());
  for (std::size_t i = 0; i < slot.size(); ++i) current[i] = grid[slot[i]];
  double best = objective_for(power, current.data(), k);

  CenterSearchResult result;
  constexpr int kMaxPasses = 1000;
  bool changed = true;
  while (changed && result.passes < kMaxPasses) {
    changed = false;
    ++result.passes;
    for (std::size_t c = 0; c < slot.size(); ++c) {
      std::size_t best_slot = slot[c];
      double best_here = best;
      for (std::size_t g = 0; g < grid.size(); ++g) {
        if (std::find(slot.begin(), slot.end(), g) != slot.end()) continue;
        current[c] = grid[g];
        const double value = objective_for(power, current.data(), k);
        if (value < best_here) {
          best_here = value;
          best_slot = g;
        }
      }
      current[c] = grid[best_slot];
      if (best_slot != slot[c]) {
        slot[c] = best_slot;
        best = best_here;
        changed = true;
      }
    }
  }

  std::sort(current.begin(), current.end());
  result.centers.indices = current;
  result.objective = best;
  return result;
}

void validate(const AdmmConfig& config) {
  if (!(config.alpha > 0.0)) throw std::invalid_argument("ADMM alpha must be positive");
  if (!(config.tol > 0.0)) throw std::invalid_argument("ADMM tolerance must be positive");
  if (config.max_iter < 1) throw std::invalid_argument("ADMM max_iter must be at least 1");
  if (!(config.tau_dual >= 0.0)) throw std::invalid_argument("ADMM dual step must be >= 0");
}

AdmmState admm_init(const ComplexVector<double>& spectrum, int k) {
  if (k < 1) throw std::invalid_argument("mode count must be at least 1");
  const Eigen::Index n = spectrum.size();
  AdmmState state;
  state.modes.resize(k, n);
  for (int i = 0; i < k; ++i) state.modes.row(i) = spectrum.transpose() / static_cast<double>(k);
  state.omega.resize(k);
  for (int i = 0; i < k; ++i) state.omega[i] = 0.5 * (i + 0.5) / k;
  state.dual = ComplexVector<double>::Zero(n);
  return state;
}

double admm_iterate(AdmmState& state, const ComplexVector<double>& spectrum,
                    const AdmmConfig& config) {
  const Eigen::Index k = state.modes.rows();
  const Eigen::Index n = state.modes.cols();
  const Eigen::ArrayXd freq = Eigen::ArrayXd::LinSpaced(n, 0.0, static_cast<double>(n - 1)) / n;
  const Eigen::ArrayXcd target = spectrum.array() + state.dual.array() * 0.5;

  Eigen::ArrayXcd total = state.modes.colwise().sum().transpose().array();
  Eigen::ArrayXcd previous(n);
  Eigen::ArrayXcd updated(n);
  double max_change = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    previous = state.modes.row(i).transpose().array();
    const Eigen::ArrayXcd others = total - previous;
    updated = (target - others) / (1.0 + 2.0 * config.alpha * (freq - state.omega[i]).square());
    total = others + updated;

    const Eigen::ArrayXd power = updated.abs2();
    const double mass = power.sum();
    if (mass > 0.0) state.omega[i] = std::max(0.0, (freq * power).sum() / mass);

    const double prev_energy = previous.abs2().sum();
    const double change = (updated - previous).abs2().sum();
    max_change = std::max(max_change, prev_energy > 0.0 ? change / prev_energy : change);
    state.modes.row(i) = updated.transpose().matrix();
  }
  state.dual.array() += config.tau_dual * (spectrum.array() - total);
  ++state.iteration;
  return max_change;
}

AdmmResult admm_vmd(const IQFrame& frame, int k, const AdmmConfig& config) {
  validate(frame);
  validate(config);
  const Eigen::Index n = frame.size();
  const ComplexVector<double> spectrum = dft(frame.samples);

  AdmmState state = admm_init(spectrum, k);
  AdmmResult result;
  while (state.iteration < config.max_iter) {
    const double change = admm_iterate(state, spectrum, config);
    if (!std::isfinite(change) || !state.modes.allFinite() || !state.omega.allFinite()) {
      throw std::runtime_error("ADMM produced non-finite iterates at iteration " +
                               std::to_string(state.iteration));
    }
    if (change < config.tol) {
      result.converged = true;
      break;
    }
  }
  result.iterations = state.iteration;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return state.omega[a] < state.omega[b]; });

  ModeSet& modes = result.modes;
  modes.spectra.resize(k, n);
  modes.frames.resize(k, n);
  modes.sample_rate = frame.sample_rate;
  modes.symbol_rate = frame.symbol_rate;
  result.centers.fundamental_index = frame.sample_rate / frame.symbol_rate;
  for (Eigen::Index r = 0; r < k; ++r) {
    const Eigen::Index src = order[static_cast<std::size_t>(r)];
    modes.spectra.row(r) = state.modes.row(src);
    result.centers.indices.push_back(state.omega[src] * static_cast<double>(n));
  }
  idft_rows(modes.spectra, modes.frames);
  modes.centers = result.centers;
  return result;
}

double reconstruction_error(const ModeSet& modes, const IQFrame& frame) {
  if (modes.source_len() != frame.size()) {
    throw std::invalid_argument("mode length " + std::to_string(modes.source_len()) +
                                " does not match frame length " + std::to_string(frame.size()));
  }
  return relative_error(modes.summed_frames(), frame.samples);
}

}  // namespace modeforge
