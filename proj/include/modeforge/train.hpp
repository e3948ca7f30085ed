#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "modeforge/data.hpp"
#include "modeforge/model.hpp"
#include "modeforge/openset.hpp"

namespace modeforge {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, const AdamConfig& config);

  /// One bias-corrected update from the gradients currently on the params.
  void step();
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<Eigen::ArrayXd> m_, v_;
  AdamConfig config_;
  double lr_;
  long t_ = 0;
};

struct PlateauConfig {
  double factor = 0.1;
  int patience = 10;
  double min_lr = 1e-5;
  double threshold = 1e-8;  // absolute improvement needed
};

/// Reduce-on-plateau on the validation loss. After `patience` epochs in a row
/// without improvement the rate is multiplied by `factor`; when that product
/// would fall below `min_lr` training stops instead.
class PlateauScheduler {
 public:
  enum class Action { Continue, Reduced, Stop };

  PlateauScheduler(double lr, const PlateauConfig& config);

  Action observe(double val_loss);
  double lr() const { return lr_; }
  double best() const { return best_; }
  int bad_epochs() const { return bad_; }
  bool last_improved() const { return improved_; }

 private:
  PlateauConfig config_;
  double lr_;
  double best_;
  int bad_ = 0;
  bool improved_ = false;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
  bool improved = false;
};

struct TrainConfig {
  AdamConfig adam;
  PlateauConfig plateau;
  int batch_size = 32;
  int max_epochs = 50;
  std::uint64_t seed = 42;
  bool class_weighted = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

void validate(const TrainConfig& c);

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  std::string stop_reason;  // "max_epochs" or "min_lr"
};

/// Stacks frames [begin, end) of `order` into a (b, L, c) tensor.
Tensor batch_tensor(const Dataset& d, const std::vector<Eigen::Index>& order, std::size_t begin, std::size_t end);

/// Trains in place and leaves the parameters of the best validation epoch.
TrainResult train(FingerprintNet& net, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config);

/// Eval-mode logits, one row per frame.
RowMatrixXd predict_logits(FingerprintNet& net, const Dataset& d, int batch_size = 64);

/// Weighted cross-entropy of eval-mode logits; weights may be empty.
double dataset_loss(FingerprintNet& net, const Dataset& d, const Eigen::VectorXd& weights, int batch_size = 64);

struct ClosedReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  Eigen::VectorXd f1;          // per class
  Eigen::MatrixXi confusion;   // rows truth, cols prediction
};

/// Macro-F1 averages the classes seen in either the labels or the predictions.
ClosedReport eval_closed(const RowMatrixXd& logits, const std::vector<int>& labels, int n_classes);
ClosedReport eval_closed(FingerprintNet& net, const Dataset& test);

/// Logits are computed once for the legal test split and the illegal frames,
/// then swept over the grid.
SweepResult eval_open(FingerprintNet& net, const Dataset& legal_test, const Dataset& illegal,
                      const SweepGrid& grid = default_sweep_grid());

}  // namespace modeforge
