#include <catch2/catch_amalgamated.hpp>

#include <limits>
#include <random>

#include "modeforge/signal.hpp"
#include "oracles.hpp"

using namespace modeforge;
using Catch::Approx;

namespace {

IQFrame frame_of(const ComplexVector<double>& x) { return {x, kDefaultSampleRate, kDefaultSymbolRate}; }

}  // namespace

TEST_CASE("dft of an impulse is flat", "[signal][dft]") {
  ComplexVector<double> x = ComplexVector<double>::Zero(8);
  x[0] = 1.0;
  const Spectrum s = dft(frame_of(x));
  for (Eigen::Index k = 0; k < 8; ++k) {
    REQUIRE(s.bins[k].real() == Approx(1.0).margin(1e-15));
    REQUIRE(s.bins[k].imag() == Approx(0.0).margin(1e-15));
  }
}

TEST_CASE("dft of a constant is DC only", "[signal][dft]") {
  const Spectrum s = dft(frame_of(ComplexVector<double>::Ones(8)));
  REQUIRE(s.bins[0].real() == Approx(8.0));
  for (Eigen::Index k = 1; k < 8; ++k) REQUIRE(std::abs(s.bins[k]) < 1e-14);
}

TEST_CASE("fast path matches the direct sum", "[signal][dft]") {
  std::mt19937_64 rng(7);
  SECTION("100 frames of length 256") {
    for (int i = 0; i < 100; ++i) {
      const IQFrame f = oracle::random_frame(rng, 256);
      REQUIRE(oracle::rel_err(dft(f).bins, oracle::direct_dft(f.samples)) <= 1e-12);
    }
  }
  SECTION("mixed and prime lengths") {
    for (Eigen::Index n : {4, 8, 256, 300, 257, 2, 3}) {
      const IQFrame f = oracle::random_frame(rng, n);
      INFO("L = " << n);
      REQUIRE(oracle::rel_err(dft(f).bins, oracle::direct_dft(f.samples)) <= 1e-12);
      REQUIRE(oracle::rel_err(idft(dft(f)).samples, f.samples) <= 1e-12);
    }
  }
}

TEST_CASE("dft is linear", "[signal][dft][property]") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index n = (trial % 2 == 0) ? 256 : 300;
    const auto f = oracle::random_signal(rng, n);
    const auto g = oracle::random_signal(rng, n);
    const std::complex<double> a(nd(rng), nd(rng));
    const std::complex<double> b(nd(rng), nd(rng));
    const ComplexVector<double> lhs = dft(ComplexVector<double>(a * f + b * g));
    const ComplexVector<double> rhs = a * dft(f) + b * dft(g);
    REQUIRE(oracle::rel_err(lhs, rhs) <= 1e-12);
  }
}

TEST_CASE("idft inverts dft", "[signal][idft]") {
  std::mt19937_64 rng(3);
  SECTION("random frames round trip") {
    for (int i = 0; i < 20; ++i) {
      const IQFrame f = oracle::random_frame(rng, 256);
      const IQFrame back = idft(dft(f));
      REQUIRE(oracle::rel_err(back.samples, f.samples) <= 1e-12);
      REQUIRE(back.sample_rate == f.sample_rate);
      REQUIRE(back.symbol_rate == f.symbol_rate);
    }
  }
  SECTION("zero spectrum gives a zero frame") {
    const Spectrum s{ComplexVector<double>::Zero(16)};
    REQUIRE(idft(s).samples.isZero(0.0));
  }
  SECTION("single bin synthesizes a tone") {
    Spectrum s{ComplexVector<double>::Zero(4)};
    s.bins[1] = 1.0;
    const IQFrame f = idft(s);
    for (Eigen::Index n = 0; n < 4; ++n) {
      const double phase = 2.0 * std::numbers::pi * static_cast<double>(n) / 4.0;
      REQUIRE(f.samples[n].real() == Approx(0.25 * std::cos(phase)).margin(1e-15));
      REQUIRE(f.samples[n].imag() == Approx(0.25 * std::sin(phase)).margin(1e-15));
    }
  }
}

TEST_CASE("parseval gap", "[signal][parseval]") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) REQUIRE(parseval_gap(oracle::random_frame(rng, 256)) <= 1e-12);
  REQUIRE(parseval_gap(frame_of(ComplexVector<double>::Zero(8))) == 0.0);
  ComplexVector<double> impulse = ComplexVector<double>::Zero(8);
  impulse[0] = 1.0;
  REQUIRE(parseval_gap(frame_of(impulse)) == Approx(0.0).margin(1e-15));
}

TEST_CASE("frame validation", "[signal][errors]") {
  ComplexVector<double> x = ComplexVector<double>::Ones(8);
  SECTION("non-finite sample") {
    x[3] = {std::numeric_limits<double>::quiet_NaN(), 0.0};
    REQUIRE_THROWS_AS(dft(frame_of(x)), std::invalid_argument);
    x[3] = {0.0, std::numeric_limits<double>::infinity()};
    REQUIRE_THROWS_AS(parseval_gap(frame_of(x)), std::invalid_argument);
  }
  SECTION("too short") {
    REQUIRE_THROWS_AS(dft(frame_of(ComplexVector<double>::Ones(1))), std::invalid_argument);
  }
  SECTION("rates") {
    IQFrame f = frame_of(x);
    f.sample_rate = f.symbol_rate;
    REQUIRE_THROWS_AS(dft(f), std::invalid_argument);
    f.symbol_rate = 0.0;
    REQUIRE_THROWS_AS(dft(f), std::invalid_argument);
  }
  SECTION("non-finite spectrum") {
    Spectrum s{ComplexVector<double>::Ones(8)};
    s.bins[0] = {std::numeric_limits<double>::infinity(), 0.0};
    REQUIRE_THROWS_AS(idft(s), std::invalid_argument);
  }
}

TEST_CASE("batched transform agrees with the direct sum", "[signal][batched]") {
  std::mt19937_64 rng(17);
  for (Eigen::Index n : {2, 8, 64, 256}) {
    for (Eigen::Index rows : {1, 3, 8, 11}) {
      RowMatrixXcd in(rows, n);
      for (Eigen::Index r = 0; r < rows; ++r) in.row(r) = oracle::random_signal(rng, n).transpose();
      RowMatrixXcd fwd, inv;
      const BatchedDft& plan = BatchedDft::for_length(n);
      plan.forward(in, fwd);
      plan.inverse(in, inv);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const oracle::CVec row = in.row(r).transpose();
        REQUIRE(oracle::rel_err(fwd.row(r).transpose(), oracle::direct_dft(row)) <= 1e-12);
        REQUIRE(oracle::rel_err(inv.row(r).transpose(), oracle::direct_idft(row)) <= 1e-12);
      }
    }
  }
}

TEST_CASE("weighted batched inverse matches per-row products", "[signal][batched]") {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Eigen::Index n = 128;
  const auto spectrum = oracle::random_signal(rng, n);
  for (Eigen::Index rows : {1, 7, 9}) {
    RowMatrixXd w(rows, n);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    const BatchedDft& plan = BatchedDft::for_length(n);
    RowMatrixXcd out;
    plan.inverse_weighted(spectrum, plan.pack(w), out);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const oracle::CVec product = spectrum.cwiseProduct(w.row(r).transpose().cast<std::complex<double>>());
      REQUIRE(oracle::rel_err(out.row(r).transpose(), oracle::direct_idft(product)) <= 1e-12);
    }
  }
}

TEST_CASE("batched transform rejects other lengths", "[signal][batched][errors]") {
  REQUIRE_THROWS_AS(BatchedDft(300), std::invalid_argument);
  REQUIRE_THROWS_AS(BatchedDft(1), std::invalid_argument);
}
