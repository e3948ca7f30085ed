#include "modeforge/signal.hpp"

#include <map>
#include <numbers>

namespace modeforge {

template struct IQFrameT<double>;
template struct SpectrumT<double>;

BatchedDft::BatchedDft(Eigen::Index n) : n_(n) {
  if (!is_power_of_two(n) || n < 2) {
    throw std::invalid_argument("batched transform needs a power-of-two length >= 2, got " +
                                std::to_string(n));
  }
  int bits = 0;
  while ((Eigen::Index{1} << bits) < n) ++bits;
  bit_reverse_.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index r = 0;
    for (int b = 0; b < bits; ++b) r |= ((i >> b) & 1) << (bits - 1 - b);
    bit_reverse_[static_cast<std::size_t>(i)] = r;
  }
  cos_.resize(n / 2);
  sin_.resize(n / 2);
  for (Eigen::Index j = 0; j < n / 2; ++j) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
    cos_[j] = std::cos(angle);
    sin_[j] = std::sin(angle);
  }
}

using Packet = BatchedDft::LanePacket;

struct BatchedDft::Workspace {
  std::vector<Packet> re;
  std::vector<Packet> im;
};

BatchedDft::Workspace& BatchedDft::workspace() const {
  thread_local Workspace ws;
  ws.re.resize(static_cast<std::size_t>(n_));
  ws.im.resize(static_cast<std::size_t>(n_));
  return ws;
}

void BatchedDft::forward(const RowMatrixXcd& in, RowMatrixXcd& out) const { run(in, out, false); }

void BatchedDft::inverse(const RowMatrixXcd& in, RowMatrixXcd& out) const { run(in, out, true); }

void BatchedDft::run(const RowMatrixXcd& in, RowMatrixXcd& out, bool inverse) const {
  if (in.cols() != n_) {
    throw std::invalid_argument("batched transform length mismatch");
  }
  const Eigen::Index rows = in.rows();
  out.resize(rows, n_);
  Workspace& ws = workspace();

  for (Eigen::Index first = 0; first < rows; first += kLanes) {
    const Eigen::Index live = std::min<Eigen::Index>(kLanes, rows - first);
    for (Eigen::Index i = 0; i < n_; ++i) {
      const Eigen::Index src = bit_reverse_[static_cast<std::size_t>(i)];
      Packet& r = ws.re[static_cast<std::size_t>(i)];
      Packet& m = ws.im[static_cast<std::size_t>(i)];
      r.setZero();
      m.setZero();
      for (Eigen::Index lane = 0; lane < live; ++lane) {
        const std::complex<double> v = in(first + lane, src);
        r[lane] = v.real();
        m[lane] = v.imag();
      }
    }
    butterflies(ws, inverse);
    store(ws, first, live, inverse ? 1.0 / static_cast<double>(n_) : 1.0, out);
  }
}

BatchedDft::LaneWeights BatchedDft::pack(const RowMatrixXd& weights) const {
  if (weights.cols() != n_) throw std::invalid_argument("batched transform length mismatch");
  LaneWeights packed;
  packed.rows = weights.rows();
  for (Eigen::Index first = 0; first < packed.rows; first += kLanes) {
    const Eigen::Index live = std::min<Eigen::Index>(kLanes, packed.rows - first);
    std::vector<Packet> group(static_cast<std::size_t>(n_), Packet::Zero());
    for (Eigen::Index lane = 0; lane < live; ++lane) {
      const double* w = weights.row(first + lane).data();
      for (Eigen::Index b = 0; b < n_; ++b) group[static_cast<std::size_t>(b)][lane] = w[b];
    }
    packed.groups.push_back(std::move(group));
  }
  return packed;
}

void BatchedDft::inverse_weighted(const ComplexVector<double>& spectrum, const LaneWeights& weights,
                                  RowMatrixXcd& out) const {
  if (spectrum.size() != n_) throw std::invalid_argument("batched transform length mismatch");
  out.resize(weights.rows, n_);
  Workspace& ws = workspace();

  for (std::size_t g = 0; g < weights.groups.size(); ++g) {
    const Eigen::Index first = static_cast<Eigen::Index>(g) * kLanes;
    const Eigen::Index live = std::min<Eigen::Index>(kLanes, weights.rows - first);
    const std::vector<Packet>& lane_weights = weights.groups[g];
    // One packet multiply per bin loads every live row at once.
    for (Eigen::Index i = 0; i < n_; ++i) {
      const std::size_t src = static_cast<std::size_t>(bit_reverse_[static_cast<std::size_t>(i)]);
      const std::complex<double> v = spectrum[static_cast<Eigen::Index>(src)];
      ws.re[static_cast<std::size_t>(i)] = v.real() * lane_weights[src];
      ws.im[static_cast<std::size_t>(i)] = v.imag() * lane_weights[src];
    }
    butterflies(ws, true);
    store(ws, first, live, 1.0 / static_cast<double>(n_), out);
  }
}

void BatchedDft::butterflies(Workspace& ws, bool inverse) const {
  auto& re = ws.re;
  auto& im = ws.im;
  // Exponent sign: forward uses exp(-j...), inverse exp(+j...).
  const double sign = inverse ? 1.0 : -1.0;

  // Length-2 butterflies carry the unit twiddle.
  for (std::size_t a = 0; a + 1 < re.size(); a += 2) {
    const Packet br = re[a + 1];
    const Packet bi = im[a + 1];
    re[a + 1] = re[a] - br;
    im[a + 1] = im[a] - bi;
    re[a] += br;
    im[a] += bi;
  }

  for (Eigen::Index half = 2; half < n_; half *= 2) {
    const Eigen::Index stride = n_ / (2 * half);
    for (Eigen::Index j = 0; j < half; ++j) {
      const double wr = cos_[j * stride];
      const double wi = sign * sin_[j * stride];
      for (Eigen::Index start = 0; start < n_; start += 2 * half) {
        const std::size_t a = static_cast<std::size_t>(start + j);
        const std::size_t b = a + static_cast<std::size_t>(half);
        const Packet tr = wr * re[b] - wi * im[b];
        const Packet ti = wr * im[b] + wi * re[b];
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
      }
    }
  }
}

void BatchedDft::store(const Workspace& ws, Eigen::Index first, Eigen::Index live, double scale,
                       RowMatrixXcd& out) const {
  for (Eigen::Index lane = 0; lane < live; ++lane) {
    std::complex<double>* dst = out.row(first + lane).data();
    for (Eigen::Index i = 0; i < n_; ++i) {
      dst[i] = {ws.re[static_cast<std::size_t>(i)][lane] * scale,
                ws.im[static_cast<std::size_t>(i)][lane] * scale};
    }
  }
}

const BatchedDft& BatchedDft::for_length(Eigen::Index n) {
  thread_local std::map<Eigen::Index, BatchedDft> cache;
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, BatchedDft(n)).first;
  return it->second;
}

void idft_rows(const RowMatrixXcd& in, RowMatrixXcd& out) {
  const Eigen::Index n = in.cols();
  if (is_power_of_two(n) && n >= 2) {
    BatchedDft::for_length(n).inverse(in, out);
    return;
  }
  out.resize(in.rows(), n);
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    idft_inplace<double>(in.row(r).data(), out.row(r).data(), n);
  }
}

}  // namespace modeforge
