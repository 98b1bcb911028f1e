#include "dualnorm/attacks.hpp"

#include <algorithm>
#include <limits>
#include <string>

#include "dualnorm/errors.hpp"
#include "dualnorm/loss.hpp"

namespace dualnorm {

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || epsilon > 1.0) throw ConfigError("attack epsilon must lie in [0, 1]");
  if (!(step_size >= 0.0)) throw ConfigError("attack step_size must be non-negative");
  if (steps < 0) throw ConfigError("attack steps must be non-negative");
  if (restarts < 1) throw ConfigError("attack restarts must be at least 1");
}

namespace {

template <typename T>
T clip01(T v) {
  return std::clamp(v, T{0}, T{1});
}

template <typename T>
struct Evaluation {
  std::vector<double> loss;  // per attacked sample
  Tensor<T> grad;            // d(mean CE)/d(attacked input), empty when not requested
};

// Loss (and optionally gradient) of the attacked slice under the target's
// forward configuration.
template <typename T>
Evaluation<T> evaluate(const ModelState<T>& model, const Tensor<T>& x, std::span<const int> labels,
                       const AttackTarget<T>& target, bool want_grad) {
  const std::size_t n = x.dim(0);
  const std::size_t nc = target.clean_context ? target.clean_context->dim(0) : 0;
  ForwardOptions<T> opt = target.options;
  opt.segments.clear();
  if (nc) opt.segments.push_back({Branch::Clean, nc});
  opt.segments.push_back({target.branch, n});
  opt.record_backward = want_grad;
  Tensor<T> input = nc ? concat_batch(*target.clean_context, x) : x;
  Tape<T> tape = record(model, input, opt);

  const Tensor<T>& logits = tape.logits();
  auto ce = cross_entropy(nc ? logits.slice(nc, nc + n) : logits, labels);
  Evaluation<T> out;
  out.loss = std::move(ce.per_sample);
  if (!want_grad) return out;

  Tensor<T> grad_logits(logits.shape());
  std::copy(ce.grad.storage().begin(), ce.grad.storage().end(), grad_logits.data() + nc * logits.dim(1));
  Tensor<T> g = backpropagate(tape, grad_logits, false).input;
  out.grad = nc ? g.slice(nc, nc + n) : std::move(g);
  return out;
}

}  // namespace

template <typename T>
Tensor<T> pgd(const ModelState<T>& model, const Tensor<T>& batch, std::span<const int> labels,
              const AttackTarget<T>& target, const AttackConfig& config, Rng& rng) {
  config.validate();
  if (batch.rank() != 4 || batch.dim(0) == 0) throw PreconditionError("pgd: batch must be [N,C,H,W] with N > 0");
  if (labels.size() != batch.dim(0)) throw PreconditionError("pgd: label count does not match batch size");
  if (target.clean_context && target.clean_context->shape() != batch.shape()) {
    throw PreconditionError("pgd: clean context must match the attacked batch shape");
  }

  if (config.epsilon == 0.0 || (config.steps == 0 && !config.random_init)) return batch;

  const std::size_t n = batch.dim(0);
  const std::size_t per = batch.size() / n;
  const T eps = static_cast<T>(config.epsilon);
  const T step = static_cast<T>(config.step_size);

  Tensor<T> best = batch;
  std::vector<double> best_loss(n, -std::numeric_limits<double>::infinity());

  auto keep_best = [&](const Tensor<T>& x, const std::vector<double>& loss) {
    for (std::size_t i = 0; i < n; ++i) {
      if (loss[i] > best_loss[i]) {
        best_loss[i] = loss[i];
        std::copy_n(x.data() + i * per, per, best.data() + i * per);
      }
    }
  };

  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int r = 0; r < config.restarts; ++r) {
    Tensor<T> x = batch;
    if (config.random_init && config.epsilon > 0.0) {
      for (std::size_t j = 0; j < x.size(); ++j) x[j] = clip01(static_cast<T>(batch[j] + eps * static_cast<T>(unit(rng))));
    }
    for (int s = 0; s < config.steps; ++s) {
      auto ev = evaluate(model, x, labels, target, true);
      keep_best(x, ev.loss);
      for (std::size_t j = 0; j < x.size(); ++j) {
        const T g = ev.grad[j];
        const T dir = g > T{0} ? T{1} : (g < T{0} ? T{-1} : T{0});
        const T moved = std::clamp(static_cast<T>(x[j] + step * dir), static_cast<T>(batch[j] - eps),
                                   static_cast<T>(batch[j] + eps));
        x[j] = clip01(moved);
      }
    }
    keep_best(x, evaluate(model, x, labels, target, false).loss);
  }
  return best;
}

template <typename T>
AttackTarget<T> eval_target(Branch branch, HeadSelect head) {
  AttackTarget<T> t;
  t.options.train = false;
  t.options.branch = branch;
  t.options.head = head;
  t.branch = branch;
  return t;
}

template <typename T>
Tensor<T> uniform_noise(const Tensor<T>& batch, double magnitude, Rng& rng) {
  if (!(magnitude >= 0.0)) throw ConfigError("noise magnitude must be non-negative");
  std::uniform_real_distribution<double> u(-magnitude, magnitude);
  Tensor<T> out = batch;
  for (auto& v : out.storage()) v = clip01(static_cast<T>(v + u(rng)));
  return out;
}

#define DUALNORM_INSTANTIATE(T)                                                                             \
  template Tensor<T> pgd<T>(const ModelState<T>&, const Tensor<T>&, std::span<const int>,                   \
                            const AttackTarget<T>&, const AttackConfig&, Rng&);                             \
  template AttackTarget<T> eval_target<T>(Branch, HeadSelect);                                              \
  template Tensor<T> uniform_noise<T>(const Tensor<T>&, double, Rng&);

DUALNORM_INSTANTIATE(float)
DUALNORM_INSTANTIATE(double)
#undef DUALNORM_INSTANTIATE

}  // namespace dualnorm
