#pragma once

// Independent reference computations used by the unit and acceptance suites.
// Nothing here calls into the library code paths it is used to check.

#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "modeforge/signal.hpp"

namespace oracle {

using cd = std::complex<double>;
using CVec = Eigen::Matrix<cd, Eigen::Dynamic, 1>;

/// O(L^2) transform, sign -1 forward / +1 inverse (unscaled).
inline CVec direct_dft(const CVec& x, int sign = -1) {
  const Eigen::Index n = x.size();
  CVec out(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    cd acc = 0.0;
    for (Eigen::Index t = 0; t < n; ++t) {
      // Reduce k*t modulo n before forming the angle to keep it accurate.
      const double phase = 2.0 * std::numbers::pi * static_cast<double>((k * t) % n) / n;
      acc += x[t] * cd(std::cos(phase), sign * std::sin(phase));
    }
    out[k] = acc;
  }
  return out;
}

inline CVec direct_idft(const CVec& x) {
  return direct_dft(x, +1) / static_cast<double>(x.size());
}

inline CVec random_signal(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  CVec x(n);
  for (auto& v : x) v = cd(nd(rng), nd(rng));
  return x;
}

inline modeforge::IQFrame random_frame(std::mt19937_64& rng, Eigen::Index n) {
  return {random_signal(rng, n), modeforge::kDefaultSampleRate, modeforge::kDefaultSymbolRate};
}

inline double rel_err(const CVec& a, const CVec& b) {
  const double d = b.norm();
  return d == 0.0 ? (a - b).norm() : (a - b).norm() / d;
}

/// Bandwidth penalty sum_i sum_b 4 (b - k_i)^2 |U_i(b)|^2 over explicit mode rows.
template <typename Rows>
double bandwidth_penalty(const Rows& modes, const std::vector<double>& centers) {
  double j = 0.0;
  for (Eigen::Index i = 0; i < modes.rows(); ++i) {
    for (Eigen::Index b = 0; b < modes.cols(); ++b) {
      const double d = static_cast<double>(b) - centers[static_cast<std::size_t>(i)];
      j += 4.0 * d * d * std::norm(modes(i, b));
    }
  }
  return j;
}

/// Central finite-difference gradient of f at x.
template <typename F>
Eigen::VectorXd numeric_gradient(F&& f, Eigen::VectorXd x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1, max|b|): relative to the gradient scale, so
/// entries that are analytically zero do not blow the ratio up.
inline double grad_rel_err(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  const double scale = std::max(1e-8, numeric.cwiseAbs().maxCoeff());
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

}  // namespace oracle
