#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "modeforge/train.hpp"

using namespace modeforge;
using Catch::Approx;

namespace {

ModelConfig tiny_model(int n_classes, int channels = 2) {
  ModelConfig c;
  c.n_classes = n_classes;
  c.cfre = {.in_channels = channels, .width1 = 4, .width2 = 4, .d_model = 8, .kernel_t = 3, .kernel_f = 5, .dilation = 2};
  c.tdse = {.layers = 1, .heads = 2, .d_model = 8, .d_ff = 16, .dropout = 0.1, .max_len = 32};
  c.mlfe = {.layers = 1, .d_model = 8, .d_state = 4, .conv_kernel = 4, .expand = 2};
  return c;
}

/// Class c frames carry a constant offset of +-1 on the in-phase channel.
Dataset separable(int per_class, int n_classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.3);
  Dataset d;
  for (int c = 0; c < n_classes; ++c) {
    d.class_names.push_back("c" + std::to_string(c));
    for (int i = 0; i < per_class; ++i) {
      RowMatrixXd f(16, 2);
      for (Eigen::Index j = 0; j < f.size(); ++j) f.data()[j] = nd(rng);
      f.col(c % 2).array() += c < 2 ? 1.0 : -1.0;
      d.frames.push_back(f);
      d.labels.push_back(c);
    }
  }
  return d;
}

}  // namespace

TEST_CASE("Adam", "[train][adam]") {
  SECTION("first step moves by lr against the gradient sign") {
    Tensor p = Tensor::from({2}, Eigen::ArrayXd::Constant(2, 1.0), true);
    Adam opt({p}, {});
    backward(sum(mul(p, Tensor::from({2}, (Eigen::ArrayXd(2) << 0.5, -2.0).finished()))));
    opt.step();
    REQUIRE(p.value()[0] == Approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-8)).epsilon(1e-15));
    REQUIRE(p.value()[1] == Approx(1.0 + 1e-3 * 2.0 / (2.0 + 1e-8)).epsilon(1e-15));
    REQUIRE(opt.steps() == 1);
  }
  SECTION("minimizes a quadratic") {
    Tensor p = Tensor::from({3}, (Eigen::ArrayXd(3) << 3.0, -2.0, 0.5).finished(), true);
    Adam opt({p}, {.lr = 0.05});
    for (int i = 0; i < 2000; ++i) {
      p.zero_grad();
      backward(sum(mul(p, p)));
      opt.step();
    }
    REQUIRE(p.value().abs().maxCoeff() < 1e-3);
  }
  SECTION("config checks") {
    REQUIRE_THROWS_AS(Adam({}, {.lr = 0.0}), std::invalid_argument);
    REQUIRE_THROWS_AS(Adam({}, {.beta1 = 1.0}), std::invalid_argument);
  }
}

TEST_CASE("plateau scheduler", "[train][scheduler]") {
  SECTION("constant validation loss") {
    PlateauScheduler s(1e-3, {});
    std::vector<int> reductions;
    int stop = 0;
    for (int epoch = 1; epoch <= 100 && stop == 0; ++epoch) {
      const auto a = s.observe(0.5);
      if (a == PlateauScheduler::Action::Reduced) reductions.push_back(epoch);
      if (a == PlateauScheduler::Action::Stop) stop = epoch;
    }
    REQUIRE(reductions == std::vector<int>{11, 21});
    REQUIRE(stop == 31);
    REQUIRE(s.lr() == Approx(1e-5));
  }
  SECTION("improvements below the threshold do not count") {
    PlateauScheduler s(1e-3, {});
    s.observe(1.0);
    for (int i = 1; i <= 9; ++i) REQUIRE(s.observe(1.0 - i * 1e-10) == PlateauScheduler::Action::Continue);
    REQUIRE(s.observe(1.0 - 1e-9) == PlateauScheduler::Action::Reduced);
    REQUIRE(s.observe(0.9) == PlateauScheduler::Action::Continue);
    REQUIRE(s.last_improved());
    REQUIRE(s.bad_epochs() == 0);
  }
  SECTION("patience counts consecutive epochs only") {
    PlateauScheduler s(1e-3, {.patience = 3});
    s.observe(1.0);
    s.observe(1.1);
    s.observe(1.1);
    s.observe(0.5);
    s.observe(0.6);
    s.observe(0.6);
    REQUIRE(s.observe(0.6) == PlateauScheduler::Action::Reduced);
  }
  SECTION("config checks") {
    REQUIRE_THROWS_AS(PlateauScheduler(1e-5, {}), std::invalid_argument);
    REQUIRE_THROWS_AS(PlateauScheduler(1e-3, {.factor = 1.0}), std::invalid_argument);
  }
}

TEST_CASE("closed-set evaluation", "[train][eval]") {
  SECTION("perfect predictor") {
    RowMatrixXd z = RowMatrixXd::Identity(4, 4);
    const ClosedReport r = eval_closed(z, {0, 1, 2, 3}, 4);
    REQUIRE(r.accuracy == 1.0);
    REQUIRE(r.macro_f1 == 1.0);
  }
  SECTION("constant predictor on a balanced two-class set") {
    RowMatrixXd z(4, 2);
    z << 1, 0, 1, 0, 1, 0, 1, 0;
    const ClosedReport r = eval_closed(z, {0, 1, 0, 1}, 2);
    REQUIRE(r.accuracy == 0.5);
    REQUIRE(r.macro_f1 == Approx(1.0 / 3.0).epsilon(1e-15));
    REQUIRE(r.confusion.row(0).sum() == 2);
    REQUIRE(r.confusion.row(1).sum() == 2);
  }
  SECTION("errors") {
    REQUIRE_THROWS_AS(eval_closed(RowMatrixXd(0, 2), {}, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(eval_closed(RowMatrixXd::Zero(2, 2), {0, 2}, 2), std::invalid_argument);
  }
}

TEST_CASE("training loop", "[train]") {
  const Dataset all = separable(30, 2, 1);
  const Splits s = stratified_split(all);

  SECTION("loss decreases and parameters are reproducible") {
    FingerprintNet a(tiny_model(2), 5);
    FingerprintNet b(tiny_model(2), 5);
    TrainConfig cfg;
    cfg.max_epochs = 5;
    cfg.batch_size = 8;
    const TrainResult ra = train(a, s.train, s.val, cfg);
    const TrainResult rb = train(b, s.train, s.val, cfg);
    REQUIRE(ra.history.size() == 5);
    for (std::size_t i = 1; i < ra.history.size(); ++i) {
      REQUIRE(ra.history[i].train_loss < ra.history[i - 1].train_loss);
    }
    for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
      REQUIRE(a.params().entries()[i].tensor.value().isApprox(b.params().entries()[i].tensor.value(), 0.0));
    }
    REQUIRE(ra.stop_reason == "max_epochs");
  }
  SECTION("returned parameters reproduce the best validation loss") {
    FingerprintNet net(tiny_model(2), 9);
    TrainConfig cfg;
    cfg.max_epochs = 6;
    cfg.batch_size = 8;
    const TrainResult r = train(net, s.train, s.val, cfg);
    REQUIRE(r.best_epoch >= 1);
    double best = r.history.front().val_loss;
    for (const auto& e : r.history) best = std::min(best, e.val_loss);
    REQUIRE(r.best_val_loss == best);
    const Eigen::VectorXd w = class_weights(s.train.labels, 2);
    REQUIRE(dataset_loss(net, s.val, w) == r.best_val_loss);
  }
  SECTION("divergence names the epoch") {
    FingerprintNet net(tiny_model(2), 9);
    Tensor w = net.params().get("head.weight");
    w.value()[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.max_epochs = 3;
    REQUIRE_THROWS_WITH(train(net, s.train, s.val, cfg), Catch::Matchers::ContainsSubstring("epoch 1"));
  }
  SECTION("class space mismatch") {
    FingerprintNet net(tiny_model(3), 9);
    REQUIRE_THROWS_AS(train(net, s.train, s.val, {}), std::invalid_argument);
  }
  SECTION("state-space mode trains too") {
    ModelConfig c = tiny_model(2);
    c.mode = EncoderMode::Mlfe;
    FingerprintNet net(c, 2);
    TrainConfig cfg;
    cfg.max_epochs = 8;
    cfg.batch_size = 8;
    train(net, s.train, s.val, cfg);
    REQUIRE(eval_closed(net, s.test).accuracy >= 0.8);
  }
}

TEST_CASE("open-set evaluation", "[train][eval]") {
  const Dataset all = separable(30, 4, 2);
  const LegalPartition p = legal_illegal_partition(all, 1, 3);
  const Splits s = stratified_split(p.legal);
  FingerprintNet net(tiny_model(3), 4);
  TrainConfig cfg;
  cfg.max_epochs = 4;
  cfg.batch_size = 8;
  train(net, s.train, s.val, cfg);

  const RowMatrixXd logits = predict_logits(net, s.test);
  int correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    correct += argmax(logits.row(i).transpose()) == s.test.labels[static_cast<std::size_t>(i)];
  }
  const double n = static_cast<double>(s.test.size() + p.illegal.size());
  SECTION("tau = 0 counts every illegal frame as wrong") {
    const SweepResult r = eval_open(net, s.test, p.illegal, {{1.0}, {0.0}});
    REQUIRE(r.accuracy(0, 0) == Approx(correct / n));
  }
  SECTION("a threshold above one rejects everything") {
    const SweepResult r = eval_open(net, s.test, p.illegal, {{1.0}, {std::nextafter(1.0, 2.0)}});
    REQUIRE(r.accuracy(0, 0) == Approx(p.illegal.size() / n));
  }
  SECTION("mapping mismatch") {
    REQUIRE_THROWS_AS(eval_open(net, all, p.illegal, {{1.0}, {0.5}}), std::invalid_argument);
  }
}
