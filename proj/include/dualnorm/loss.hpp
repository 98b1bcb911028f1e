#pragma once

#include <span>
#include <vector>

#include "dualnorm/tensor.hpp"

namespace dualnorm {

template <typename T>
struct LossValue {
  double value = 0.0;
  Tensor<T> grad;                    // d(value)/d(logits)
  std::vector<double> per_sample;  // unreduced loss terms
};

// Row-wise softmax of logits [batch, classes], computed with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

// Mean cross-entropy over the batch.
template <typename T>
LossValue<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// alpha * CE(clean) + (1 - alpha) * CE(adv); gradients returned per branch.
template <typename T>
struct HybridLoss {
  double value = 0.0;
  double clean = 0.0;
  double adv = 0.0;
  Tensor<T> grad_clean;
  Tensor<T> grad_adv;
};

template <typename T>
HybridLoss<T> hybrid_loss(const Tensor<T>& logits_clean, const Tensor<T>& logits_adv, std::span<const int> labels,
                          double alpha);

// Batch mean of KL(softmax(clean) || softmax(adv)), with gradients into both
// sets of logits.
template <typename T>
struct KlValue {
  double value = 0.0;
  Tensor<T> grad_clean;
  Tensor<T> grad_adv;
};

template <typename T>
KlValue<T> kl_regularizer(const Tensor<T>& logits_clean, const Tensor<T>& logits_adv);

}  // namespace dualnorm
