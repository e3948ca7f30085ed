#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "modeforge/openset.hpp"

using namespace modeforge;
using Catch::Approx;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("temperature softmax", "[openset]") {
  SECTION("equal logits give the uniform vector") {
    for (double t : {0.3, 1.0, 4.0}) {
      const Eigen::VectorXd p = softmax_with_temperature(Eigen::VectorXd::Constant(5, 2.5), t);
      REQUIRE((p.array() - 0.2).abs().maxCoeff() <= 1e-15);
    }
  }
  SECTION("T = 1 is the standard softmax") {
    const Eigen::VectorXd z = vec({0.5, -1.0, 2.0});
    const Eigen::VectorXd e = z.array().exp().matrix();
    REQUIRE((softmax_with_temperature(z, 1.0) - e / e.sum()).cwiseAbs().maxCoeff() <= 1e-15);
  }
  SECTION("scalar evaluation") {
    const Eigen::VectorXd p = softmax_with_temperature(vec({2.0, 0.0}), 2.0);
    REQUIRE(p[0] == Approx(0.7310585786300049).epsilon(1e-14));
  }
  SECTION("large logits stay finite") {
    const Eigen::VectorXd p = softmax_with_temperature(vec({1000.0, 999.0, -1000.0}), 0.5);
    REQUIRE(p.allFinite());
    REQUIRE(p.sum() == Approx(1.0).epsilon(1e-15));
  }
  SECTION("invalid temperature and empty logits") {
    REQUIRE_THROWS_AS(softmax_with_temperature(vec({1.0}), 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(softmax_with_temperature(vec({1.0}), -1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(softmax_with_temperature(Eigen::VectorXd(), 1.0), std::invalid_argument);
  }
  SECTION("ties resolve to the lowest index") {
    REQUIRE(argmax(vec({1.0, 3.0, 3.0, 2.0})) == 1);
    REQUIRE(decide(vec({4.0, 4.0}), {1.0, 0.0}).verdict == 0);
  }
}

TEST_CASE("threshold decision", "[openset]") {
  SECTION("p_max equal to the threshold is legal") {
    const Eigen::VectorXd z = vec({2.0, 0.0});
    const double pmax = softmax_with_temperature(z, 2.0).maxCoeff();
    const Decision d = decide(z, {2.0, pmax});
    REQUIRE(d.legal());
    REQUIRE(d.verdict == 0);
    REQUIRE(d.p_max == pmax);
    REQUIRE_FALSE(decide(z, {2.0, std::nextafter(pmax, 2.0)}).legal());
  }
  SECTION("zero threshold accepts everything") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0.0, 3.0);
    for (int i = 0; i < 100; ++i) {
      Eigen::VectorXd z(7);
      for (auto& v : z) v = nd(rng);
      REQUIRE(decide(z, {1.0, 0.0}).verdict == argmax(z));
    }
  }
  SECTION("uniform logits over 26 classes are rejected at 0.5") {
    const Decision d = decide(Eigen::VectorXd::Zero(26), {1.0, 0.5});
    REQUIRE_FALSE(d.legal());
    REQUIRE(d.p_max == Approx(1.0 / 26));
  }
  SECTION("decision carries the simplex vector") {
    const Decision d = decide(vec({0.1, 0.7, -0.2}), {0.8, 0.3});
    REQUIRE(d.probabilities.sum() == Approx(1.0).epsilon(1e-15));
    REQUIRE(d.p_max == d.probabilities.maxCoeff());
  }
  SECTION("invalid configs") {
    REQUIRE_THROWS_AS(decide(vec({1.0}), {0.0, 0.5}), std::invalid_argument);
    REQUIRE_THROWS_AS(decide(vec({1.0}), {1.0, 1.5}), std::invalid_argument);
    REQUIRE_THROWS_AS(decide(vec({1.0}), {1.0, -0.1}), std::invalid_argument);
    REQUIRE_THROWS_AS(decide(Eigen::VectorXd(), {1.0, 0.5}), std::invalid_argument);
  }
}

TEST_CASE("open-set accuracy", "[openset]") {
  SECTION("hand-counted toy set") {
    // truth: 0, 1, illegal, illegal; verdicts: 0, illegal, illegal, 1
    const EvalReport r = open_accuracy({0, kIllegal, kIllegal, 1}, {0, 1, kIllegal, kIllegal}, 2);
    REQUIRE(r.n == 4);
    REQUIRE(r.n_legal == 2);
    REQUIRE(r.n_illegal == 2);
    REQUIRE(r.n_correct_legal == 1);
    REQUIRE(r.n_correct_illegal == 1);
    REQUIRE(r.open_accuracy == 0.5);
    Eigen::MatrixXi expected(3, 3);
    expected << 1, 0, 0,  //
        0, 0, 1,          //
        0, 1, 1;
    REQUIRE(r.confusion == expected);
  }
  SECTION("all correct") {
    REQUIRE(open_accuracy({2, 0, kIllegal}, {2, 0, kIllegal}, 3).open_accuracy == 1.0);
  }
  SECTION("errors") {
    REQUIRE_THROWS_AS(open_accuracy({0}, {0, 1}, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(open_accuracy({5}, {0}, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(open_accuracy({0}, {-4}, 2), std::invalid_argument);
  }
}

TEST_CASE("sweep", "[openset][sweep]") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd(0.0, 2.0);
  const int n = 300, k = 4;
  RowMatrixXd logits(n, k);
  std::vector<int> truth(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) logits(i, j) = nd(rng);
    truth[static_cast<std::size_t>(i)] = i % 5 == 4 ? kIllegal : i % k;
    if (truth[static_cast<std::size_t>(i)] != kIllegal) logits(i, truth[static_cast<std::size_t>(i)]) += 3.0;
  }

  SECTION("default grid") {
    const SweepGrid g = default_sweep_grid();
    REQUIRE(g.temperatures.size() == 48);
    REQUIRE(g.thresholds.size() == 201);
    REQUIRE(g.temperatures.front() == 0.3);
    REQUIRE(g.temperatures.back() == 5.0);
    REQUIRE(g.thresholds.front() == 0.8);
    REQUIRE(g.thresholds.back() == 1.0);
  }
  SECTION("a one-cell grid reduces to open_accuracy") {
    const SweepResult r = sweep(logits, truth, {{1.3}, {0.6}});
    std::vector<int> verdicts;
    for (int i = 0; i < n; ++i) verdicts.push_back(decide(logits.row(i).transpose(), {1.3, 0.6}).verdict);
    const EvalReport e = open_accuracy(verdicts, truth, k);
    REQUIRE(r.accuracy(0, 0) == e.open_accuracy);
    REQUIRE(r.best.confusion == e.confusion);
    REQUIRE(r.n_correct_legal(0, 0) == e.n_correct_legal);
    REQUIRE(r.n_correct_illegal(0, 0) == e.n_correct_illegal);
  }
  SECTION("accepted count is nonincreasing in the threshold") {
    const SweepResult r = sweep(logits, truth, default_sweep_grid());
    for (Eigen::Index t = 0; t < r.n_accepted.rows(); ++t) {
      for (Eigen::Index j = 1; j < r.n_accepted.cols(); ++j) REQUIRE(r.n_accepted(t, j) <= r.n_accepted(t, j - 1));
    }
    REQUIRE(r.accuracy(r.best_temperature, r.best_threshold) == r.accuracy.maxCoeff());
    REQUIRE(r.best.open_accuracy == r.accuracy.maxCoeff());
  }
  SECTION("best cell is the first maximum") {
    const SweepResult r = sweep(logits, truth, {{1.0, 2.0}, {1.5, 2.0}});
    // Thresholds above one reject everything, so every cell ties.
    REQUIRE(r.best_temperature == 0);
    REQUIRE(r.best_threshold == 0);
    REQUIRE(r.accuracy(1, 1) == Approx(60.0 / 300));
  }
  SECTION("tau = 0 accepts everything") {
    const SweepResult r = sweep(logits, truth, {{1.0}, {0.0}});
    int correct = 0;
    for (int i = 0; i < n; ++i) correct += truth[static_cast<std::size_t>(i)] == argmax(logits.row(i).transpose());
    REQUIRE(r.accuracy(0, 0) == Approx(static_cast<double>(correct) / n));
  }
  SECTION("csv outputs") {
    const SweepResult r = sweep(logits, truth, {{0.5, 1.0}, {0.8, 0.9, 1.0}});
    const auto dir = std::filesystem::temp_directory_path();
    write_sweep_csv(dir / "modeforge_sweep.csv", r);
    const std::string text = read_file(dir / "modeforge_sweep.csv");
    REQUIRE(text.rfind("temperature,threshold,accuracy,n_correct_legal,n_correct_illegal\n", 0) == 0);
    REQUIRE(std::count(text.begin(), text.end(), '\n') == 7);
    write_confusion_csv(dir / "modeforge_conf.csv", r.best.confusion, {"a", "b", "c", "d"});
    const std::string conf = read_file(dir / "modeforge_conf.csv");
    REQUIRE(conf.find(",illegal\n") != std::string::npos);
    REQUIRE(conf.find("\nillegal,") != std::string::npos);
    REQUIRE_THROWS_AS(write_confusion_csv(dir / "x.csv", r.best.confusion, {"a"}), std::invalid_argument);
    std::filesystem::remove(dir / "modeforge_sweep.csv");
    std::filesystem::remove(dir / "modeforge_conf.csv");
  }
  SECTION("validation") {
    REQUIRE_THROWS_AS(sweep(logits, truth, {{}, {0.5}}), std::invalid_argument);
    REQUIRE_THROWS_AS(sweep(logits, truth, {{0.0}, {0.5}}), std::invalid_argument);
    REQUIRE_THROWS_AS(sweep(logits, std::vector<int>(3, 0), {{1.0}, {0.5}}), std::invalid_argument);
  }
}

TEST_CASE("number formatting", "[openset]") {
  REQUIRE(format_double(0.1) == "0.1");
  REQUIRE(format_double(1.0 / 3.0) == "0.333333333333");
  REQUIRE(format_double(123456789.123456789) == "123456789.123");
}
