#include "modeforge/openset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace modeforge {

void validate(const DecisionConfig& c) {
  if (!(c.temperature > 0.0) || !std::isfinite(c.temperature)) {
    throw std::invalid_argument("temperature must be positive and finite, got " + format_double(c.temperature));
  }
  if (!(c.threshold >= 0.0 && c.threshold <= 1.0)) {
    throw std::invalid_argument("threshold must lie in [0, 1], got " + format_double(c.threshold));
  }
}

Eigen::VectorXd softmax_with_temperature(const Eigen::Ref<const Eigen::VectorXd>& logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (logits.size() == 0) throw std::invalid_argument("logits are empty");
  const double mx = logits.maxCoeff();
  Eigen::VectorXd p = ((logits.array() - mx) / temperature).exp().matrix();
  p /= p.sum();
  return p;
}

Eigen::Index argmax(const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (v.size() == 0) throw std::invalid_argument("argmax of an empty vector");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

Decision decide(const Eigen::Ref<const Eigen::VectorXd>& logits, const DecisionConfig& config) {
  validate(config);
  Decision d;
  d.probabilities = softmax_with_temperature(logits, config.temperature);
  // argmax of p equals argmax of z; taking it from z keeps ties exact.
  const Eigen::Index k = argmax(logits);
  d.p_max = d.probabilities.maxCoeff();
  d.verdict = d.p_max >= config.threshold ? static_cast<int>(k) : kIllegal;
  return d;
}

EvalReport open_accuracy(const std::vector<int>& verdicts, const std::vector<int>& truth, int n_known) {
  if (verdicts.size() != truth.size()) {
    throw std::invalid_argument("open_accuracy: " + std::to_string(verdicts.size()) + " decisions for " +
                                std::to_string(truth.size()) + " labels");
  }
  if (n_known < 1) throw std::invalid_argument("open_accuracy: need at least one known class");
  EvalReport r;
  r.confusion = Eigen::MatrixXi::Zero(n_known + 1, n_known + 1);
  auto slot = [n_known](int c, const char* what) {
    if (c == kIllegal) return n_known;
    if (c < 0 || c >= n_known) {
      throw std::invalid_argument(std::string("open_accuracy: ") + what + " " + std::to_string(c) +
                                  " outside [0, " + std::to_string(n_known) + ")");
    }
    return c;
  };
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = slot(truth[i], "label");
    const int v = slot(verdicts[i], "verdict");
    ++r.confusion(t, v);
    if (t == n_known) {
      ++r.n_illegal;
      if (v == n_known) ++r.n_correct_illegal;
    } else {
      ++r.n_legal;
      if (v == t) ++r.n_correct_legal;
    }
  }
  r.n = static_cast<Eigen::Index>(truth.size());
  r.open_accuracy = r.n == 0 ? 0.0 : static_cast<double>(r.n_correct_legal + r.n_correct_illegal) / r.n;
  return r;
}

SweepGrid default_sweep_grid() {
  SweepGrid g;
  for (int i = 3; i <= 50; ++i) g.temperatures.push_back(i / 10.0);
  for (int i = 800; i <= 1000; ++i) g.thresholds.push_back(i / 1000.0);
  return g;
}

double SweepResult::accuracy_at(double temperature, double threshold) const {
  for (std::size_t i = 0; i < grid.temperatures.size(); ++i) {
    if (grid.temperatures[i] != temperature) continue;
    for (std::size_t j = 0; j < grid.thresholds.size(); ++j) {
      if (grid.thresholds[j] == threshold) {
        return accuracy(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      }
    }
  }
  throw std::out_of_range("cell (" + format_double(temperature) + ", " + format_double(threshold) +
                          ") is not on the sweep grid");
}

SweepResult sweep(const RowMatrixXd& logits, const std::vector<int>& truth, const SweepGrid& grid) {
  if (grid.temperatures.empty() || grid.thresholds.empty()) throw std::invalid_argument("sweep grid is empty");
  for (double t : grid.temperatures) validate(DecisionConfig{t, 0.0});
  for (double tau : grid.thresholds) {
    if (!(tau >= 0.0) || !std::isfinite(tau)) throw std::invalid_argument("sweep thresholds must be >= 0");
  }
  const Eigen::Index n = logits.rows(), k = logits.cols();
  if (static_cast<std::size_t>(n) != truth.size()) throw std::invalid_argument("sweep: logits/labels count mismatch");
  if (k < 1) throw std::invalid_argument("sweep: logits have no classes");

  std::vector<int> top(static_cast<std::size_t>(n));
  Eigen::VectorXd mx(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    top[static_cast<std::size_t>(i)] = static_cast<int>(argmax(logits.row(i).transpose()));
    mx[i] = logits.row(i).maxCoeff();
  }
  const Eigen::Index nt = static_cast<Eigen::Index>(grid.temperatures.size());
  const Eigen::Index ntau = static_cast<Eigen::Index>(grid.thresholds.size());
  SweepResult r;
  r.grid = grid;
  r.accuracy.resize(nt, ntau);
  r.n_correct_legal.resize(nt, ntau);
  r.n_correct_illegal.resize(nt, ntau);
  r.n_accepted.resize(nt, ntau);
  Eigen::VectorXd pmax(n);
  double best = -1.0;
  for (Eigen::Index ti = 0; ti < nt; ++ti) {
    const double t = grid.temperatures[static_cast<std::size_t>(ti)];
    for (Eigen::Index i = 0; i < n; ++i) {
      const double z = ((logits.row(i).array() - mx[i]) / t).exp().sum();
      pmax[i] = 1.0 / z;
    }
    for (Eigen::Index j = 0; j < ntau; ++j) {
      const double tau = grid.thresholds[static_cast<std::size_t>(j)];
      int cl = 0, ci = 0, acc = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const bool accept = pmax[i] >= tau;
        const int y = truth[static_cast<std::size_t>(i)];
        acc += accept;
        if (y == kIllegal) {
          ci += !accept;
        } else {
          cl += accept && top[static_cast<std::size_t>(i)] == y;
        }
      }
      r.n_correct_legal(ti, j) = cl;
      r.n_correct_illegal(ti, j) = ci;
      r.n_accepted(ti, j) = acc;
      r.accuracy(ti, j) = n == 0 ? 0.0 : static_cast<double>(cl + ci) / n;
      if (r.accuracy(ti, j) > best) {
        best = r.accuracy(ti, j);
        r.best_temperature = ti;
        r.best_threshold = j;
      }
    }
  }
  const double temp = grid.temperatures[static_cast<std::size_t>(r.best_temperature)];
  std::vector<int> verdicts(static_cast<std::size_t>(n));
  const double tau = grid.thresholds[static_cast<std::size_t>(r.best_threshold)];
  for (Eigen::Index i = 0; i < n; ++i) {
    const double z = ((logits.row(i).array() - mx[i]) / temp).exp().sum();
    verdicts[static_cast<std::size_t>(i)] = 1.0 / z >= tau ? top[static_cast<std::size_t>(i)] : kIllegal;
  }
  r.best = open_accuracy(verdicts, truth, static_cast<int>(k));
  return r;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

void write_sweep_csv(const std::filesystem::path& path, const SweepResult& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "temperature,threshold,accuracy,n_correct_legal,n_correct_illegal\n";
  for (Eigen::Index i = 0; i < r.accuracy.rows(); ++i) {
    for (Eigen::Index j = 0; j < r.accuracy.cols(); ++j) {
      out << format_double(r.grid.temperatures[static_cast<std::size_t>(i)]) << ','
          << format_double(r.grid.thresholds[static_cast<std::size_t>(j)]) << ',' << format_double(r.accuracy(i, j))
          << ',' << r.n_correct_legal(i, j) << ',' << r.n_correct_illegal(i, j) << '\n';
    }
  }
}

void write_confusion_csv(const std::filesystem::path& path, const Eigen::MatrixXi& confusion,
                         const std::vector<std::string>& class_names) {
  const Eigen::Index k = confusion.rows() - 1;
  if (confusion.cols() != confusion.rows() || static_cast<Eigen::Index>(class_names.size()) != k) {
    throw std::invalid_argument("confusion matrix and class names disagree");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto label = [&](Eigen::Index i) { return i == k ? std::string("illegal") : class_names[static_cast<std::size_t>(i)]; };
  out << "truth\\predicted";
  for (Eigen::Index j = 0; j <= k; ++j) out << ',' << label(j);
  out << '\n';
  for (Eigen::Index i = 0; i <= k; ++i) {
    out << label(i);
    for (Eigen::Index j = 0; j <= k; ++j) out << ',' << confusion(i, j);
    out << '\n';
  }
}

}  // namespace modeforge
