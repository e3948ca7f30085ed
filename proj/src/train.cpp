#include "modeforge/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace modeforge {

Adam::Adam(std::vector<Tensor> params, const AdamConfig& config)
    : params_(std::move(params)), config_(config), lr_(config.lr) {
  if (!(config.lr > 0.0) || !(config.beta1 >= 0.0 && config.beta1 < 1.0) ||
      !(config.beta2 >= 0.0 && config.beta2 < 1.0) || !(config.eps > 0.0)) {
    throw std::invalid_argument("Adam needs lr > 0, betas in [0, 1) and eps > 0");
  }
  for (const Tensor& p : params_) {
    m_.push_back(Eigen::ArrayXd::Zero(p.numel()));
    v_.push_back(Eigen::ArrayXd::Zero(p.numel()));
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i];
    if (!p.has_grad()) continue;
    const Eigen::ArrayXd& g = p.grad();
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.square();
    p.value() -= lr_ * (m_[i] / c1) / ((v_[i] / c2).sqrt() + config_.eps);
  }
}

PlateauScheduler::PlateauScheduler(double lr, const PlateauConfig& config)
    : config_(config), lr_(lr), best_(std::numeric_limits<double>::infinity()) {
  if (!(config.factor > 0.0 && config.factor < 1.0)) throw std::invalid_argument("plateau factor must lie in (0, 1)");
  if (config.patience < 1) throw std::invalid_argument("plateau patience must be >= 1");
  if (!(lr > config.min_lr)) throw std::invalid_argument("initial learning rate must exceed min_lr");
}

PlateauScheduler::Action PlateauScheduler::observe(double val_loss) {
  improved_ = val_loss < best_ - config_.threshold;
  if (improved_) {
    best_ = val_loss;
    bad_ = 0;
    return Action::Continue;
  }
  if (++bad_ < config_.patience) return Action::Continue;
  bad_ = 0;
  const double next = lr_ * config_.factor;
  // 1e-3 * 0.1 * 0.1 lands a few ulps off 1e-5; that still counts as reaching it.
  if (next < config_.min_lr * (1.0 - 1e-9)) return Action::Stop;
  lr_ = next;
  return Action::Reduced;
}

void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (c.max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  if (!(c.adam.lr > c.plateau.min_lr)) throw std::invalid_argument("learning rate must exceed min_lr at start");
}

Tensor batch_tensor(const Dataset& d, const std::vector<Eigen::Index>& order, std::size_t begin, std::size_t end) {
  const Eigen::Index len = d.frame_len(), ch = d.channels();
  const auto b = static_cast<Eigen::Index>(end - begin);
  Eigen::ArrayXd v(b * len * ch);
  for (std::size_t i = begin; i < end; ++i) {
    const RowMatrixXd& f = d.frames[static_cast<std::size_t>(order[i])];
    std::copy(f.data(), f.data() + f.size(), v.data() + static_cast<Eigen::Index>(i - begin) * len * ch);
  }
  return Tensor::from({b, len, ch}, std::move(v));
}

namespace {

std::vector<Eigen::Index> identity_order(const Dataset& d) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(d.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  return order;
}

std::vector<int> batch_labels(const Dataset& d, const std::vector<Eigen::Index>& order, std::size_t begin,
                              std::size_t end) {
  std::vector<int> y;
  for (std::size_t i = begin; i < end; ++i) y.push_back(d.labels[static_cast<std::size_t>(order[i])]);
  return y;
}

void check_compatible(const FingerprintNet& net, const Dataset& d, const char* what) {
  validate(d);
  if (d.n_classes() != net.config().n_classes) {
    throw std::invalid_argument(std::string(what) + " has " + std::to_string(d.n_classes()) +
                                " classes but the model predicts " + std::to_string(net.config().n_classes));
  }
  if (!d.empty() && d.channels() != net.config().cfre.in_channels) {
    throw std::invalid_argument(std::string(what) + " frames have " + std::to_string(d.channels()) +
                                " channels but the model expects " + std::to_string(net.config().cfre.in_channels));
  }
}

void keep_large_blocks() {
#if defined(__GLIBC__)
  // Activation buffers of tens of MB are allocated and freed every step. Served
  // from fresh mmaps they page-fault on every touch; kept on the heap they are
  // reused. Process-wide, and only called by train().
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
}

}  // namespace

RowMatrixXd predict_logits(FingerprintNet& net, const Dataset& d, int batch_size) {
  check_compatible(net, d, "dataset");
  NoGradGuard guard;
  const auto order = identity_order(d);
  RowMatrixXd out(d.size(), net.config().n_classes);
  for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(batch_size));
    const Tensor logits = net.logits(batch_tensor(d, order, s, e), false);
    out.middleRows(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(e - s)) =
        Eigen::Map<const RowMatrixXd>(logits.value().data(), static_cast<Eigen::Index>(e - s), out.cols());
  }
  return out;
}

double dataset_loss(FingerprintNet& net, const Dataset& d, const Eigen::VectorXd& weights, int batch_size) {
  if (d.empty()) throw std::invalid_argument("loss of an empty dataset");
  const RowMatrixXd logits = predict_logits(net, d, batch_size);
  NoGradGuard guard;
  return cross_entropy(Tensor::from({logits.rows(), logits.cols()}, logits.reshaped<Eigen::RowMajor>().array()),
                       d.labels, weights)
      .item();
}

TrainResult train(FingerprintNet& net, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config) {
  validate(config);
  check_compatible(net, train_set, "training split");
  check_compatible(net, val_set, "validation split");
  if (train_set.empty() || val_set.empty()) throw std::invalid_argument("training and validation splits must be non-empty");
  keep_large_blocks();

  const Eigen::VectorXd weights =
      config.class_weighted ? class_weights(train_set.labels, train_set.n_classes()) : Eigen::VectorXd();
  Adam opt(net.params().trainable(), config.adam);
  PlateauScheduler sched(config.adam.lr, config.plateau);
  std::mt19937_64 shuffle_rng(config.seed);
  net.reseed_dropout(config.seed ^ 0x5bd1e995ULL);

  std::vector<Eigen::ArrayXd> best_values;
  auto snapshot = [&] {
    best_values.clear();
    for (const auto& e : net.params().entries()) best_values.push_back(e.tensor.value());
  };

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  auto order = identity_order(train_set);
  const auto bs = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    try {
      for (std::size_t s = 0; s < order.size(); s += bs) {
        const std::size_t e = std::min(order.size(), s + bs);
        net.params().zero_grad();
        const Tensor loss =
            cross_entropy(net.logits(batch_tensor(train_set, order, s, e), true), batch_labels(train_set, order, s, e), weights);
        if (!std::isfinite(loss.item())) throw std::domain_error("loss is not finite");
        backward(loss);
        opt.step();
        loss_sum += loss.item();
        ++batches;
      }
    } catch (const std::domain_error& err) {
      throw std::runtime_error("training diverged in epoch " + std::to_string(epoch) + ": " + err.what());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.lr = opt.lr();
    const RowMatrixXd val_logits = predict_logits(net, val_set);
    {
      NoGradGuard guard;
      rec.val_loss = cross_entropy(Tensor::from({val_logits.rows(), val_logits.cols()},
                                                val_logits.reshaped<Eigen::RowMajor>().array()),
                                   val_set.labels, weights)
                         .item();
    }
    if (!std::isfinite(rec.val_loss)) {
      throw std::runtime_error("training diverged in epoch " + std::to_string(epoch) + ": validation loss is not finite");
    }
    rec.val_accuracy = eval_closed(val_logits, val_set.labels, val_set.n_classes()).accuracy;
    const auto action = sched.observe(rec.val_loss);
    rec.improved = sched.last_improved();
    if (rec.improved) {
      result.best_epoch = epoch;
      result.best_val_loss = rec.val_loss;
      snapshot();
    }
    result.history.push_back(rec);
    if (config.on_epoch) config.on_epoch(rec);
    if (action == PlateauScheduler::Action::Stop) {
      result.stop_reason = "min_lr";
      break;
    }
    if (action == PlateauScheduler::Action::Reduced) opt.set_lr(sched.lr());
  }
  if (result.stop_reason.empty()) result.stop_reason = "max_epochs";
  const auto& entries = net.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = entries[i].tensor;
    t.value() = best_values[i];
  }
  return result;
}

ClosedReport eval_closed(const RowMatrixXd& logits, const std::vector<int>& labels, int n_classes) {
  if (labels.empty()) throw std::invalid_argument("cannot evaluate an empty split");
  if (static_cast<std::size_t>(logits.rows()) != labels.size() || logits.cols() != n_classes) {
    throw std::invalid_argument("logits shape does not match labels and class count");
  }
  ClosedReport r;
  r.confusion = Eigen::MatrixXi::Zero(n_classes, n_classes);
  Eigen::Index correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= n_classes) throw std::invalid_argument("label " + std::to_string(y) + " out of range");
    const auto p = static_cast<int>(argmax(logits.row(static_cast<Eigen::Index>(i)).transpose()));
    ++r.confusion(y, p);
    correct += p == y;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  r.f1 = Eigen::VectorXd::Zero(n_classes);
  int seen = 0;
  double total = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    const double tp = r.confusion(c, c);
    const double support = r.confusion.row(c).sum();
    const double predicted = r.confusion.col(c).sum();
    if (support == 0 && predicted == 0) continue;
    r.f1[c] = 2.0 * tp / (support + predicted);
    total += r.f1[c];
    ++seen;
  }
  r.macro_f1 = total / seen;
  return r;
}

ClosedReport eval_closed(FingerprintNet& net, const Dataset& test) {
  if (test.empty()) throw std::invalid_argument("cannot evaluate an empty split");
  return eval_closed(predict_logits(net, test), test.labels, test.n_classes());
}

SweepResult eval_open(FingerprintNet& net, const Dataset& legal_test, const Dataset& illegal, const SweepGrid& grid) {
  check_compatible(net, legal_test, "legal test split");
  validate(illegal);
  if (!illegal.empty() && illegal.channels() != net.config().cfre.in_channels) {
    throw std::invalid_argument("illegal frames do not match the model's input channels");
  }
  RowMatrixXd logits(legal_test.size() + illegal.size(), net.config().n_classes);
  std::vector<int> truth = legal_test.labels;
  if (!legal_test.empty()) logits.topRows(legal_test.size()) = predict_logits(net, legal_test);
  if (!illegal.empty()) {
    // The illegal split keeps its own class space; only the frames matter here.
    Dataset frames_only = illegal;
    frames_only.class_names.assign(static_cast<std::size_t>(net.config().n_classes), "");
    std::fill(frames_only.labels.begin(), frames_only.labels.end(), 0);
    logits.bottomRows(illegal.size()) = predict_logits(net, frames_only);
    truth.insert(truth.end(), static_cast<std::size_t>(illegal.size()), kIllegal);
  }
  return sweep(logits, truth, grid);
}

}  // namespace modeforge
