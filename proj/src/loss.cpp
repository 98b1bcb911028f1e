#include "dualnorm/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dualnorm/errors.hpp"

namespace dualnorm {

namespace {

template <typename T>
void check_logits(const Tensor<T>& logits) {
  if (logits.rank() != 2 || logits.dim(0) == 0) throw PreconditionError("logits must have shape [batch, classes]");
  if (!logits.all_finite()) throw NumericalError("non-finite logits");
}

// log-softmax of one row in double precision.
template <typename T>
void log_softmax_row(const T* row, std::size_t k, std::vector<double>& out) {
  out.resize(k);
  double mx = row[0];
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
  double sum = 0.0;
  for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t j = 0; j < k; ++j) out[j] = row[j] - lse;
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  check_logits(logits);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  std::vector<double> ls;
  for (std::size_t i = 0; i < n; ++i) {
    log_softmax_row(logits.data() + i * k, k, ls);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = static_cast<T>(std::exp(ls[j]));
  }
  return out;
}

template <typename T>
LossValue<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  check_logits(logits);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw PreconditionError("label count does not match batch size");
  LossValue<T> out;
  out.grad = Tensor<T>(logits.shape());
  out.per_sample.resize(n);
  std::vector<double> ls;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw PreconditionError("label " + std::to_string(y) + " out of range");
    log_softmax_row(logits.data() + i * k, k, ls);
    out.per_sample[i] = -ls[static_cast<std::size_t>(y)];
    out.value += out.per_sample[i];
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(ls[j]);
      out.grad[i * k + j] = static_cast<T>((p - (static_cast<std::size_t>(y) == j ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  out.value /= static_cast<double>(n);
  return out;
}

template <typename T>
HybridLoss<T> hybrid_loss(const Tensor<T>& logits_clean, const Tensor<T>& logits_adv, std::span<const int> labels,
                          double alpha) {
  if (logits_clean.shape() != logits_adv.shape()) throw PreconditionError("hybrid_loss: branch batch sizes differ");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("hybrid alpha must lie in [0, 1]");
  auto ce_clean = cross_entropy(logits_clean, labels);
  auto ce_adv = cross_entropy(logits_adv, labels);
  HybridLoss<T> out;
  out.clean = ce_clean.value;
  out.adv = ce_adv.value;
  out.value = alpha * ce_clean.value + (1.0 - alpha) * ce_adv.value;
  out.grad_clean = std::move(ce_clean.grad);
  out.grad_adv = std::move(ce_adv.grad);
  for (auto& g : out.grad_clean.storage()) g = static_cast<T>(alpha * g);
  for (auto& g : out.grad_adv.storage()) g = static_cast<T>((1.0 - alpha) * g);
  return out;
}

template <typename T>
KlValue<T> kl_regularizer(const Tensor<T>& logits_clean, const Tensor<T>& logits_adv) {
  check_logits(logits_clean);
  check_logits(logits_adv);
  if (logits_clean.shape() != logits_adv.shape()) throw PreconditionError("kl_regularizer: shape mismatch");
  const std::size_t n = logits_clean.dim(0), k = logits_clean.dim(1);
  KlValue<T> out;
  out.grad_clean = Tensor<T>(logits_clean.shape());
  out.grad_adv = Tensor<T>(logits_adv.shape());
  std::vector<double> lp, lq;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    log_softmax_row(logits_clean.data() + i * k, k, lp);
    log_softmax_row(logits_adv.data() + i * k, k, lq);
    double kl = 0.0;
    for (std::size_t j = 0; j < k; ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
    out.value += std::max(kl, 0.0);
    // d/dz_p KL = p * ((lp - lq) - KL);  d/dz_q KL = q - p
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(lp[j]), q = std::exp(lq[j]);
      out.grad_clean[i * k + j] = static_cast<T>(p * ((lp[j] - lq[j]) - kl) * inv_n);
      out.grad_adv[i * k + j] = static_cast<T>((q - p) * inv_n);
    }
  }
  out.value *= inv_n;
  return out;
}

#define DUALNORM_INSTANTIATE(T)                                                                              \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                                           \
  template LossValue<T> cross_entropy<T>(const Tensor<T>&, std::span<const int>);                            \
  template HybridLoss<T> hybrid_loss<T>(const Tensor<T>&, const Tensor<T>&, std::span<const int>, double);   \
  template KlValue<T> kl_regularizer<T>(const Tensor<T>&, const Tensor<T>&);

DUALNORM_INSTANTIATE(float)
DUALNORM_INSTANTIATE(double)
#undef DUALNORM_INSTANTIATE

}  // namespace dualnorm
