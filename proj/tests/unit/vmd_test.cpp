#include <catch2/catch_amalgamated.hpp>

#include <limits>
#include <random>

#include "modeforge/vmd.hpp"
#include "oracles.hpp"

using namespace modeforge;
using Catch::Approx;

namespace {

IQFrame tone_frame(Eigen::Index n, const std::vector<std::pair<double, double>>& tones) {
  ComplexVector<double> x = ComplexVector<double>::Zero(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    for (auto [bin, amp] : tones) {
      const double phase = 2.0 * std::numbers::pi * bin * static_cast<double>(t) / static_cast<double>(n);
      x[t] += amp * std::complex<double>(std::cos(phase), std::sin(phase));
    }
  }
  return {x, kDefaultSampleRate, kDefaultSymbolRate};
}

CenterSet centers_of(std::vector<double> v) {
  CenterSet c;
  c.indices = std::move(v);
  return c;
}

// Plain scalar evaluation of the weight formula at one bin.
std::vector<double> scalar_weights(double bin, const std::vector<double>& centers) {
  std::vector<double> w;
  double total = 0.0;
  for (double c : centers) {
    w.push_back(1.0 / ((bin - c) * (bin - c)));
    total += w.back();
  }
  for (double& v : w) v /= total;
  return w;
}

}  // namespace

TEST_CASE("fundamental index", "[vmd][centers]") {
  REQUIRE(fundamental_index(25e6, 2e6) == 12.5);
  REQUIRE(fundamental_index(8e6, 2e6) == 4.0);
  REQUIRE_THROWS_AS(fundamental_index(2e6, 2e6), std::invalid_argument);
  REQUIRE_THROWS_AS(fundamental_index(1e6, 2e6), std::invalid_argument);
  REQUIRE_THROWS_AS(fundamental_index(25e6, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(fundamental_index(25e6, -2e6), std::invalid_argument);
}

TEST_CASE("center table rows", "[vmd][centers]") {
  const double k0 = 12.5;
  REQUIRE(select_centers(2, k0, 256).indices == std::vector<double>{25, 50});
  REQUIRE(select_centers(3, k0, 256).indices == std::vector<double>{12.5, 37.5, 62.5});
  REQUIRE(select_centers(4, k0, 256).indices == std::vector<double>{0, 25, 50, 75});
  REQUIRE(select_centers(5, k0, 256).indices == std::vector<double>{0, 12.5, 37.5, 62.5, 75});
  REQUIRE(select_centers(6, k0, 256).indices == std::vector<double>{12.5, 25, 37.5, 50, 62.5, 75});
  REQUIRE(select_centers(7, k0, 256).indices ==
          std::vector<double>{0, 12.5, 25, 37.5, 50, 62.5, 75});
  REQUIRE(select_centers(3, k0, 256).fundamental_index == k0);

  REQUIRE_THROWS_AS(select_centers(1, k0, 256), std::invalid_argument);
  REQUIRE_THROWS_AS(select_centers(8, k0, 256), std::invalid_argument);
  REQUIRE_THROWS_AS(select_centers(7, k0, 64), std::invalid_argument);
  REQUIRE_THROWS_AS(select_centers(3, 0.0, 256), std::invalid_argument);
}

TEST_CASE("center set validation", "[vmd][centers][errors]") {
  REQUIRE_THROWS_AS(validate(centers_of({}), 8), std::invalid_argument);
  REQUIRE_THROWS_AS(validate(centers_of({2, 2}), 8), std::invalid_argument);
  REQUIRE_THROWS_AS(validate(centers_of({4, 2}), 8), std::invalid_argument);
  REQUIRE_THROWS_AS(validate(centers_of({-1}), 8), std::invalid_argument);
  REQUIRE_THROWS_AS(validate(centers_of({8}), 8), std::invalid_argument);
  REQUIRE_NOTHROW(validate(centers_of({0, 7.5}), 8));
  REQUIRE_THROWS_AS(mode_weights(centers_of({3, 3}), 8), std::invalid_argument);
}

TEST_CASE("mode weights", "[vmd][weights]") {
  SECTION("equidistant bin splits evenly") {
    const RowMatrixXd w = mode_weights(centers_of({2, 6}), 8);
    REQUIRE(w(0, 4) == 0.5);
    REQUIRE(w(1, 4) == 0.5);
  }
  SECTION("bin on a center takes the whole bin") {
    const RowMatrixXd w = mode_weights(centers_of({2, 6}), 8);
    REQUIRE(w(0, 2) == 1.0);
    REQUIRE(w(1, 2) == 0.0);
    REQUIRE(w(0, 6) == 0.0);
    REQUIRE(w(1, 6) == 1.0);
  }
  SECTION("columns sum to one for random centers") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(0.0, 256.0);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> c;
      const int k = 1 + trial % 7;
      while (static_cast<int>(c.size()) < k) {
        // Mix integer and fractional centers so singular bins are exercised.
        const double v = trial % 2 ? std::floor(u(rng)) : u(rng);
        if (std::find(c.begin(), c.end(), v) == c.end()) c.push_back(v);
      }
      std::sort(c.begin(), c.end());
      const RowMatrixXd w = mode_weights(centers_of(c), 256);
      REQUIRE((w.colwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
      REQUIRE(w.minCoeff() >= 0.0);
    }
  }
  SECTION("tone bin against half-integer centers") {
    // Frozen from an exact rational evaluation of the three weight terms at bin 30.
    const RowMatrixXd w = mode_weights(centers_of({12.5, 37.5, 62.5}), 256);
    REQUIRE(w(0, 30) == Approx(0.14849165283608318).epsilon(1e-14));
    REQUIRE(w(1, 30) == Approx(0.8084545543297862).epsilon(1e-14));
    REQUIRE(w(2, 30) == Approx(0.043053792834130626).epsilon(1e-14));
  }
  SECTION("matches scalar evaluation at every bin") {
    const std::vector<double> c{12.5, 37.5, 62.5};
    const RowMatrixXd w = mode_weights(centers_of(c), 128);
    for (Eigen::Index b = 0; b < 128; ++b) {
      const auto ref = scalar_weights(static_cast<double>(b), c);
      for (std::size_t i = 0; i < c.size(); ++i) {
        REQUIRE(w(static_cast<Eigen::Index>(i), b) == Approx(ref[i]).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("lossless decomposition reconstructs exactly", "[vmd][lossless]") {
  std::mt19937_64 rng(29);
  for (int k = 2; k <= 7; ++k) {
    const CenterSet centers = select_centers(k, 12.5, 256);
    const LosslessVmd vmd(centers, 256);
    for (int i = 0; i < 20; ++i) {
      const IQFrame f = oracle::random_frame(rng, 256);
      const ModeSet m = vmd.compute(f);
      REQUIRE(m.mode_count() == k);
      REQUIRE(m.source_len() == 256);
      REQUIRE(reconstruction_error(m, f) <= 1e-12);
      REQUIRE(oracle::rel_err(m.summed_spectra(), oracle::direct_dft(f.samples)) <= 1e-12);
      for (Eigen::Index r = 0; r < k; ++r) {
        const oracle::CVec mode_frame = m.mode_frame(r).samples;
        REQUIRE(oracle::rel_err(mode_frame, oracle::direct_idft(m.mode_spectrum(r).bins)) <= 1e-12);
      }
    }
  }
}

TEST_CASE("lossless decomposition on other lengths", "[vmd][lossless]") {
  std::mt19937_64 rng(31);
  for (Eigen::Index n : {100, 300, 257}) {
    const IQFrame f = oracle::random_frame(rng, n);
    const ModeSet m = lossless_vmd(f, select_centers(3, 12.5, n));
    REQUIRE(reconstruction_error(m, f) <= 1e-12);
  }
}

TEST_CASE("spectrum on a center goes to one mode", "[vmd][lossless]") {
  const IQFrame f = tone_frame(64, {{8.0, 1.0}});
  const ModeSet m = lossless_vmd(f, centers_of({4, 8, 20}));
  // Transform round-off leaves ~1e-14 leakage in the other bins.
  REQUIRE(m.spectra.row(0).norm() <= 1e-12 * m.spectra.row(1).norm());
  REQUIRE(m.spectra.row(2).norm() <= 1e-12 * m.spectra.row(1).norm());
  REQUIRE(oracle::rel_err(m.mode_frame(1).samples, f.samples) <= 1e-12);
}

TEST_CASE("tone at bin 30 splits by the weight formula", "[vmd][lossless]") {
  const IQFrame f = tone_frame(256, {{30.0, 1.0}});
  const ModeSet m = lossless_vmd(f, select_centers(3, 12.5, 256));
  const std::complex<double> bin = oracle::direct_dft(f.samples)[30];
  REQUIRE(std::abs(m.spectra(1, 30) / bin - 0.8084545543297862) <= 1e-12);
  REQUIRE(std::abs(m.spectra(0, 30) / bin - 0.14849165283608318) <= 1e-12);
  REQUIRE(std::abs(m.spectra(2, 30) / bin - 0.043053792834130626) <= 1e-12);
}

TEST_CASE("lossless decomposition checks its inputs", "[vmd][lossless][errors]") {
  std::mt19937_64 rng(37);
  IQFrame f = oracle::random_frame(rng, 64);
  REQUIRE_THROWS_AS(lossless_vmd(f, centers_of({10, 70})), std::invalid_argument);
  const LosslessVmd vmd(select_centers(2, 12.5, 128), 128);
  REQUIRE_THROWS_AS(vmd.compute(f), std::invalid_argument);
  f.samples[0] = {std::numeric_limits<double>::quiet_NaN(), 0.0};
  REQUIRE_THROWS_AS(lossless_vmd(f, centers_of({10, 20})), std::invalid_argument);
}

TEST_CASE("closed-form split minimizes the bandwidth penalty", "[vmd][property]") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> mag(1e-3, 1e-1);
  std::normal_distribution<double> nd;
  const Eigen::Index n = 64;
  // Integer centers so the singular-bin exclusion is exercised.
  const std::vector<double> c{3, 12.5, 30, 47.5};
  const RowMatrixXd w = mode_weights(centers_of(c), n);
  for (int frame = 0; frame < 3; ++frame) {
    const IQFrame f = oracle::random_frame(rng, n);
    const ModeSet m = lossless_vmd(f, centers_of(c));
    const double base = oracle::bandwidth_penalty(m.spectra, c);
    for (int trial = 0; trial < 1000; ++trial) {
      RowMatrixXcd perturbed = m.spectra;
      for (Eigen::Index b = 0; b < n; ++b) {
        if ((w.col(b).array() == 1.0).any()) continue;
        const double scale = mag(rng) * std::abs(m.summed_spectra()[b]);
        Eigen::VectorXcd delta(static_cast<Eigen::Index>(c.size()));
        for (auto& d : delta) d = {nd(rng), nd(rng)};
        delta.array() -= delta.mean();
        perturbed.col(b) += scale * delta;
      }
      REQUIRE(base <= oracle::bandwidth_penalty(perturbed, c));
    }
  }
}

TEST_CASE("closed-form split satisfies the stationarity ratio", "[vmd][property]") {
  std::mt19937_64 rng(43);
  const std::vector<double> c{12.5, 37.5, 62.5};
  const IQFrame f = oracle::random_frame(rng, 256);
  const ModeSet m = lossless_vmd(f, centers_of(c));
  const ComplexVector<double> spectrum = m.summed_spectra();
  for (Eigen::Index b = 0; b < 256; ++b) {
    if (std::abs(spectrum[b]) <= 1e-9) continue;
    std::vector<std::complex<double>> ratios;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double d = static_cast<double>(b) - c[i];
      ratios.push_back(m.spectra(static_cast<Eigen::Index>(i), b) * d * d / spectrum[b]);
    }
    for (const auto& r : ratios) REQUIRE(std::abs(r - ratios[0]) <= 1e-10 * std::abs(ratios[0]));
  }
}

TEST_CASE("lossless decomposition is deterministic", "[vmd][property]") {
  std::mt19937_64 rng(47);
  const IQFrame f = oracle::random_frame(rng, 256);
  const CenterSet c = select_centers(5, 12.5, 256);
  const ModeSet a = lossless_vmd(f, c);
  const ModeSet b = lossless_vmd(f, c);
  REQUIRE(a.spectra == b.spectra);
  REQUIRE(a.frames == b.frames);
}

TEST_CASE("center objective", "[vmd][objective]") {
  SECTION("spectrum concentrated on a center") {
    Spectrum s{ComplexVector<double>::Zero(64)};
    s.bins[10] = {3.0, -1.0};
    REQUIRE(center_objective(s, centers_of({10, 30})) == 0.0);
  }
  SECTION("zero spectrum") {
    REQUIRE(center_objective(Spectrum{ComplexVector<double>::Zero(32)}, centers_of({1, 5})) == 0.0);
  }
  SECTION("matches a per-bin loop") {
    std::mt19937_64 rng(53);
    std::uniform_real_distribution<double> u(0.0, 128.0);
    for (int trial = 0; trial < 20; ++trial) {
      const Spectrum s{oracle::random_signal(rng, 128)};
      std::vector<double> c{u(rng), u(rng), u(rng)};
      std::sort(c.begin(), c.end());
      double ref = 0.0;
      for (Eigen::Index b = 0; b < 128; ++b) {
        double denom = 0.0;
        for (double ci : c) denom += 1.0 / ((b - ci) * (b - ci));
        ref += std::norm(s.bins[b]) / denom;
      }
      REQUIRE(center_objective(s, centers_of(c)) == Approx(ref).epsilon(1e-12));
    }
  }
}

TEST_CASE("center search", "[vmd][objective]") {
  SECTION("two tones, exhaustive pair check") {
    const Spectrum s = dft(tone_frame(96, {{20.0, 1.0}, {60.0, 0.7}}));
    const CenterSearchResult r = optimize_centers(s, 2, 1.0);
    REQUIRE(r.centers.indices == std::vector<double>{20, 60});
    double best = std::numeric_limits<double>::infinity();
    std::pair<int, int> arg{-1, -1};
    for (int a = 0; a < 96; ++a) {
      for (int b = a + 1; b < 96; ++b) {
        const double v = center_objective(s, centers_of({double(a), double(b)}));
        if (v < best) {
          best = v;
          arg = {a, b};
        }
      }
    }
    REQUIRE(arg == std::pair<int, int>{20, 60});
    REQUIRE(r.objective == Approx(best).margin(1e-12));
  }
  SECTION("single tone, one mode") {
    const Spectrum s = dft(tone_frame(64, {{10.0, 1.0}}));
    const CenterSearchResult r = optimize_centers(s, 1, 1.0);
    REQUIRE(r.centers.indices == std::vector<double>{10});
  }
  SECTION("zero spectrum keeps the lowest grid points") {
    const CenterSearchResult r =
        optimize_centers(Spectrum{ComplexVector<double>::Zero(64)}, 3, 2.5);
    REQUIRE(r.centers.indices == std::vector<double>{0, 2.5, 5});
    REQUIRE(r.objective == 0.0);
    REQUIRE(r.passes == 1);
  }
  SECTION("errors") {
    const Spectrum s{ComplexVector<double>::Ones(8)};
    REQUIRE_THROWS_AS(optimize_centers(s, 9, 1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(optimize_centers(s, 0, 1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(optimize_centers(s, 2, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(optimize_centers(s, 4, 3.0), std::invalid_argument);
  }
}

TEST_CASE("ADMM baseline", "[vmd][admm]") {
  std::mt19937_64 rng(59);
  SECTION("vanishing penalty keeps a single mode equal to the input") {
    const IQFrame f = oracle::random_frame(rng, 128);
    AdmmConfig cfg;
    cfg.alpha = 1e-6;
    cfg.tau_dual = 0.0;
    const AdmmResult r = admm_vmd(f, 1, cfg);
    REQUIRE(reconstruction_error(r.modes, f) <= 1e-4);
    REQUIRE(r.converged);
  }
  SECTION("noisy multi-tone frame, six modes") {
    IQFrame f = tone_frame(256, {{12.0, 1.0}, {40.0, 0.8}, {75.0, 0.5}});
    f.samples += 0.1 * oracle::random_signal(rng, 256);
    const AdmmResult r = admm_vmd(f, 6);
    const double err = reconstruction_error(r.modes, f);
    REQUIRE(err > 1e-3);
    REQUIRE(r.modes.mode_count() == 6);
    REQUIRE(r.iterations >= 1);
    REQUIRE(r.iterations <= 500);
    REQUIRE(std::is_sorted(r.centers.indices.begin(), r.centers.indices.end()));
    for (double c : r.centers.indices) REQUIRE(c >= 0.0);
  }
  SECTION("error dominates the lossless error") {
    const IQFrame f = oracle::random_frame(rng, 256);
    const double admm = reconstruction_error(admm_vmd(f, 3).modes, f);
    const double lossless = reconstruction_error(lossless_vmd(f, select_centers(3, 12.5, 256)), f);
    REQUIRE(admm > 1e-3);
    REQUIRE(admm >= 10.0 * lossless);
  }
  SECTION("iteration cap is reported, not thrown") {
    AdmmConfig cfg;
    cfg.max_iter = 2;
    const AdmmResult r = admm_vmd(oracle::random_frame(rng, 64), 3, cfg);
    REQUIRE(r.iterations == 2);
    REQUIRE_FALSE(r.converged);
  }
  SECTION("runaway dual step aborts") {
    AdmmConfig cfg;
    cfg.tau_dual = 1e300;
    try {
      admm_vmd(oracle::random_frame(rng, 64), 3, cfg);
      FAIL("expected a non-finite abort");
    } catch (const std::runtime_error& e) {
      REQUIRE(std::string(e.what()).find("iteration") != std::string::npos);
    }
  }
  SECTION("config validation") {
    const IQFrame f = oracle::random_frame(rng, 64);
    AdmmConfig cfg;
    cfg.alpha = 0.0;
    REQUIRE_THROWS_AS(admm_vmd(f, 2, cfg), std::invalid_argument);
    cfg = {};
    cfg.tol = 0.0;
    REQUIRE_THROWS_AS(admm_vmd(f, 2, cfg), std::invalid_argument);
    cfg = {};
    cfg.max_iter = 0;
    REQUIRE_THROWS_AS(admm_vmd(f, 2, cfg), std::invalid_argument);
    cfg = {};
    cfg.tau_dual = -1.0;
    REQUIRE_THROWS_AS(admm_vmd(f, 2, cfg), std::invalid_argument);
    REQUIRE_THROWS_AS(admm_vmd(f, 0), std::invalid_argument);
  }
  SECTION("deterministic") {
    const IQFrame f = oracle::random_frame(rng, 128);
    const AdmmResult a = admm_vmd(f, 3);
    const AdmmResult b = admm_vmd(f, 3);
    REQUIRE(a.modes.spectra == b.modes.spectra);
    REQUIRE(a.iterations == b.iterations);
  }
}

TEST_CASE("reconstruction error", "[vmd]") {
  std::mt19937_64 rng(61);
  const IQFrame f = oracle::random_frame(rng, 32);
  ModeSet zero;
  zero.spectra = RowMatrixXcd::Zero(2, 32);
  zero.frames = RowMatrixXcd::Zero(2, 32);
  REQUIRE(reconstruction_error(zero, f) == 1.0);

  const IQFrame silent{ComplexVector<double>::Zero(32)};
  REQUIRE(reconstruction_error(zero, silent) == 0.0);

  const IQFrame shorter = oracle::random_frame(rng, 16);
  REQUIRE_THROWS_AS(reconstruction_error(zero, shorter), std::invalid_argument);
}
