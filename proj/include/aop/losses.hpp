#pragma once

#include <vector>

#include "aop/ops.hpp"

namespace aop::losses {

/// Penalty-reduced focal loss on probabilities (CenterPoint form), summed and
/// divided by max(1, number of cells with target == 1). Predictions are
/// clamped to [1e-4, 1 - 1e-4]; targets must lie in [0, 1].
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& prob, const Tensor<T>& target);

/// Weighted mean absolute error: sum(w * |p - t|) / sum(w). Zero when the
/// weights sum to zero. An undefined weight tensor means all ones.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& weight = {});

/// Softmax cross-entropy over logits[C, P]. labels[p] == -1 is ignored.
/// Result is sum(w_y * nll) / sum(w_y); zero when no position is valid.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                        const std::vector<double>& class_weights = {});

/// Mean squared Euclidean distance between pred[2, P] and target[2, P] over
/// positions with fg[p] != 0; zero when fg is empty.
template <typename T>
Tensor<T> l2_offset_loss(const Tensor<T>& pred, const Tensor<T>& target, const ops::Mask& fg);

}  // namespace aop::losses
