#pragma once

#include <vector>

#include "pstconv/types.hpp"

namespace pstconv {

/// Row = ground truth class, column = predicted class.
struct ConfusionMatrix {
  explicit ConfusionMatrix(int num_classes)
      : counts(Eigen::MatrixXd::Zero(num_classes, num_classes)) {}

  void add(int truth, int predicted) { counts(truth, predicted) += 1.0; }

  double accuracy() const {
    const double total = counts.sum();
    return total > 0.0 ? counts.trace() / total : 0.0;
  }

  /// Mean over classes of TP / (TP + FP + FN). Classes absent from both truth
  /// and prediction are skipped.
  double mean_iou() const {
    double sum = 0.0;
    int seen = 0;
    for (Index c = 0; c < counts.rows(); ++c) {
      const double tp = counts(c, c);
      const double denom = counts.row(c).sum() + counts.col(c).sum() - tp;
      if (denom <= 0.0) continue;
      sum += tp / denom;
      ++seen;
    }
    return seen > 0 ? sum / seen : 0.0;
  }

  Eigen::MatrixXd counts;
};

}  // namespace pstconv
