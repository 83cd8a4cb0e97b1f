#pragma once

#include <cmath>
#include <string>
#include <vector>

namespace fesvibs {

// Mean per-class recall over the classes present in y_true; absent classes
// are excluded from the mean.
double balanced_accuracy(const std::vector<int>& y_true,
                         const std::vector<int>& y_pred, std::size_t classes);

struct MetricsRecord {
  int round = 0;
  std::vector<double> train_loss;    // per client
  std::vector<double> balanced_acc;  // per client; empty when not evaluated
  std::vector<int> sampled_block;    // per client; -1 when not applicable
  bool evaluated = false;
  double acc_mean = std::nan("");
  double acc_std = std::nan("");  // population std across clients

  void finalize_accuracy();
};

// CSV schema: round,client_id,train_loss,test_balanced_acc,sampled_block
// with one row per (round, client); the accuracy cell is empty on rounds
// without an evaluation pass.
std::string metrics_csv(const std::vector<MetricsRecord>& records);

// Minimal multi-series learning-curve plot (mean accuracy bold, per-client
// thin) for --emit-plots.
std::string learning_curve_svg(const std::vector<MetricsRecord>& records);

}  // namespace fesvibs
