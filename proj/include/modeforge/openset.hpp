#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "modeforge/signal.hpp"

namespace modeforge {

/// Class index used for the rejected verdict and for unknown-device labels.
inline constexpr int kIllegal = -1;

struct DecisionConfig {
  double temperature = 1.0;
  double threshold = 0.0;
};

void validate(const DecisionConfig& c);

/// exp(z_k / T) / sum_j exp(z_j / T), evaluated after subtracting max z.
Eigen::VectorXd softmax_with_temperature(const Eigen::Ref<const Eigen::VectorXd>& logits, double temperature);

/// First index of the largest entry.
Eigen::Index argmax(const Eigen::Ref<const Eigen::VectorXd>& v);

struct Decision {
  int verdict = kIllegal;  // class index, or kIllegal
  double p_max = 0.0;
  Eigen::VectorXd probabilities;

  bool legal() const { return verdict != kIllegal; }
};

/// Legal(argmax) iff p_max >= threshold.
Decision decide(const Eigen::Ref<const Eigen::VectorXd>& logits, const DecisionConfig& config);

struct EvalReport {
  Eigen::Index n = 0;
  Eigen::Index n_legal = 0;
  Eigen::Index n_illegal = 0;
  Eigen::Index n_correct_legal = 0;
  Eigen::Index n_correct_illegal = 0;
  double open_accuracy = 0.0;
  /// (K + 1) x (K + 1), rows = truth, cols = verdict; index K is Illegal.
  Eigen::MatrixXi confusion;
};

/// `truth` holds class indices in [0, n_known) or kIllegal.
EvalReport open_accuracy(const std::vector<int>& verdicts, const std::vector<int>& truth, int n_known);

struct SweepGrid {
  std::vector<double> temperatures;
  std::vector<double> thresholds;
};

/// T = 0.3 ... 5.0 step 0.1 and tau = 0.800 ... 1.000 step 0.001.
SweepGrid default_sweep_grid();

struct SweepResult {
  SweepGrid grid;
  Eigen::MatrixXd accuracy;             // temperatures x thresholds
  Eigen::MatrixXi n_correct_legal;
  Eigen::MatrixXi n_correct_illegal;
  Eigen::MatrixXi n_accepted;           // samples judged Legal
  Eigen::Index best_temperature = 0;    // first highest cell in row-major order
  Eigen::Index best_threshold = 0;
  EvalReport best;

  double accuracy_at(double temperature, double threshold) const;
};

/// logits: one row per sample, computed once by the caller.
SweepResult sweep(const RowMatrixXd& logits, const std::vector<int>& truth, const SweepGrid& grid);

/// Columns: temperature, threshold, accuracy, n_correct_legal, n_correct_illegal.
void write_sweep_csv(const std::filesystem::path& path, const SweepResult& result);
/// Labeled matrix with an `illegal` row and column last.
void write_confusion_csv(const std::filesystem::path& path, const Eigen::MatrixXi& confusion,
                         const std::vector<std::string>& class_names);

/// Twelve significant digits, the format of every metrics file.
std::string format_double(double v);

}  // namespace modeforge
