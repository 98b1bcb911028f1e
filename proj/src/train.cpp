#include "dualnorm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dualnorm/errors.hpp"
#include "dualnorm/loss.hpp"

namespace dualnorm {

std::string_view to_string(Regime regime) {
  switch (regime) {
    case Regime::Madry: return "madry";
    case Regime::CrossAt: return "cross_at";
    case Regime::Hybrid: return "hybrid";
    case Regime::CrossHybrid: return "cross_hybrid";
    case Regime::KlHybrid: return "kl_hybrid";
    case Regime::DualLinear: return "dual_linear";
  }
  return "?";
}

Regime parse_regime(std::string_view text) {
  for (Regime r : {Regime::Madry, Regime::CrossAt, Regime::Hybrid, Regime::CrossHybrid, Regime::KlHybrid,
                   Regime::DualLinear}) {
    if (to_string(r) == text) return r;
  }
  throw ConfigError("unknown regime '" + std::string(text) + "'");
}

std::optional<NormMode> RegimeConfig::required_mode() const {
  switch (regime) {
    case Regime::CrossAt:
    case Regime::KlHybrid:
    case Regime::DualLinear: return NormMode::Single;
    case Regime::CrossHybrid: return NormMode::Cross;
    default: return std::nullopt;
  }
}

void RegimeConfig::validate(const NormConfig& norm, std::size_t heads) const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(kl_weight >= 0.0)) throw ConfigError("kl_weight must be non-negative");
  if (!std::isfinite(loss_scale)) throw ConfigError("loss_scale must be finite");
  const std::string name(to_string(regime));
  if (heads != required_heads()) {
    throw ConfigError("regime " + name + " needs " + std::to_string(required_heads()) + " head(s), model has " +
                      std::to_string(heads));
  }
  const NormMode m = norm.mode;
  bool ok = true;
  switch (regime) {
    case Regime::Madry: ok = m == NormMode::Single || m == NormMode::Dual; break;
    case Regime::Hybrid:
      ok = m == NormMode::Single || m == NormMode::Dual || m == NormMode::DualAPOnly || m == NormMode::DualNSOnly;
      break;
    default: ok = m == *required_mode(); break;
  }
  if (!ok) throw ConfigError("regime " + name + " cannot train norm mode " + std::string(to_string(m)));
  if (regime == Regime::CrossAt && !norm.has_running_stats()) {
    throw ConfigError("regime cross_at injects batch statistics and needs batch norm");
  }
}

void OptimConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (!(decay > 0.0)) throw ConfigError("decay factor must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  for (int e : decay_epochs) {
    if (e < 0 || (epochs > 0 && e >= epochs)) {
      throw ConfigError("decay epoch " + std::to_string(e) + " must lie below epochs (" + std::to_string(epochs) + ")");
    }
  }
}

double OptimConfig::lr_at(int epoch) const {
  double r = lr;
  for (int e : decay_epochs)
    if (epoch >= e) r *= decay;
  return r;
}

template <typename T>
void sgd_step(ModelState<T>& model, ModelGradients<T>& grads, SgdState<T>& state, const OptimConfig& optim, double lr) {
  auto views = parameter_views(model, grads);
  if (state.velocity.empty()) {
    for (const auto& v : views) state.velocity.emplace_back(v.value.size(), T{0});
  }
  if (state.velocity.size() != views.size()) throw PreconditionError("optimizer state does not match the model");
  const T m = static_cast<T>(optim.momentum), wd = static_cast<T>(optim.weight_decay), step = static_cast<T>(lr);
  for (std::size_t p = 0; p < views.size(); ++p) {
    auto& vel = state.velocity[p];
    auto w = views[p].value;
    auto g = views[p].grad;
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (!std::isfinite(g[j])) throw NumericalError("non-finite gradient in " + views[p].name);
      vel[j] = m * vel[j] + (g[j] + wd * w[j]);
      w[j] -= step * vel[j];
    }
  }
}

namespace {

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::size_t c = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * k;
    if (static_cast<int>(std::max_element(row, row + k) - row) == labels[i]) ++c;
  }
  return c;
}

template <typename T>
void scale(Tensor<T>& t, double s) {
  if (s == 1.0) return;
  for (auto& v : t.storage()) v = static_cast<T>(v * s);
}

template <typename T>
void add_scaled(Tensor<T>& dst, const Tensor<T>& src, double s) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += static_cast<T>(s * src[i]);
}

template <typename T>
void finish(ModelState<T>& model, const Tape<T>& tape, const Tensor<T>& grad_logits, bool update_running,
            SgdState<T>& sgd, const OptimConfig& optim, double lr) {
  auto back = backpropagate(tape, grad_logits, true);
  if (update_running) apply_running_updates(model, tape);
  sgd_step(model, back.params, sgd, optim, lr);
}

template <typename T>
StepMetrics madry_step(ModelState<T>& model, const Tensor<T>& x, std::span<const int> y, const RegimeConfig& regime,
                       const AttackConfig& attack, SgdState<T>& sgd, const OptimConfig& optim, double lr, Rng& rng) {
  const std::size_t n = x.dim(0);
  AttackTarget<T> target;
  target.options.train = true;
  target.branch = Branch::Adv;
  Tensor<T> xa = pgd(model, x, y, target, attack, rng);

  ForwardOptions<T> opt;
  opt.train = true;
  opt.segments = {{Branch::Adv, n}};
  Tape<T> tape = record(model, xa, opt);
  auto ce = cross_entropy(tape.logits(), y);
  StepMetrics out;
  out.count = n;
  out.loss = out.adv_loss = ce.value;
  out.adv_correct = count_correct(tape.logits(), y);
  scale(ce.grad, regime.loss_scale);
  finish(model, tape, ce.grad, true, sgd, optim, lr);
  return out;
}

// Clean samples only supply batch statistics; the weights learn from the
// adversarial branch normalized with those statistics.
template <typename T>
StepMetrics cross_at_step(ModelState<T>& model, const Tensor<T>& x, std::span<const int> y, const RegimeConfig& regime,
                          const AttackConfig& attack, SgdState<T>& sgd, const OptimConfig& optim, double lr,
                          Rng& rng) {
  const std::size_t n = x.dim(0);
  ForwardOptions<T> clean;
  clean.train = true;
  clean.segments = {{Branch::Clean, n}};
  clean.record_backward = false;
  Tape<T> clean_tape = record(model, x, clean);
  const auto captured = captured_stats(model, clean_tape, Branch::Clean);
  StepMetrics out;
  out.count = n;
  auto ce_clean = cross_entropy(clean_tape.logits(), y);
  out.clean_loss = ce_clean.value;
  out.clean_correct = count_correct(clean_tape.logits(), y);

  AttackTarget<T> target;
  target.options.train = true;
  target.options.stats_overrides = &captured;
  target.branch = Branch::Adv;
  Tensor<T> xa = pgd(model, x, y, target, attack, rng);

  ForwardOptions<T> adv = target.options;
  adv.segments = {{Branch::Adv, n}};
  Tape<T> tape = record(model, xa, adv);
  auto ce = cross_entropy(tape.logits(), y);
  out.loss = out.adv_loss = ce.value;
  out.adv_correct = count_correct(tape.logits(), y);
  scale(ce.grad, regime.loss_scale);
  apply_running_updates(model, clean_tape);
  finish(model, tape, ce.grad, false, sgd, optim, lr);
  return out;
}

// Clean and adversarial halves share one forward pass.
template <typename T>
StepMetrics hybrid_step(ModelState<T>& model, const Tensor<T>& x, std::span<const int> y, const RegimeConfig& regime,
                        const AttackConfig& attack, SgdState<T>& sgd, const OptimConfig& optim, double lr, Rng& rng) {
  const std::size_t n = x.dim(0);
  AttackTarget<T> target;
  target.options.train = true;
  target.branch = Branch::Adv;
  // The clean half only matters to the attack when it feeds the statistics
  // that normalize the adversarial half.
  const NormMode mode = model.norm.mode;
  const bool shared = model.norm.has_running_stats() &&
                      route(mode, Branch::Adv).stats == fed_stats_set(mode, Branch::Clean);
  target.clean_context = shared ? &x : nullptr;
  Tensor<T> xa = pgd(model, x, y, target, attack, rng);

  ForwardOptions<T> opt;
  opt.train = true;
  opt.segments = {{Branch::Clean, n}, {Branch::Adv, n}};
  Tape<T> tape = record(model, concat_batch(x, xa), opt);
  const Tensor<T> lc = tape.logits().slice(0, n);
  const Tensor<T> la = tape.logits().slice(n, 2 * n);
  auto h = hybrid_loss(lc, la, y, regime.alpha);
  StepMetrics out;
  out.count = n;
  out.loss = h.value;
  out.clean_loss = h.clean;
  out.adv_loss = h.adv;
  out.clean_correct = count_correct(lc, y);
  out.adv_correct = count_correct(la, y);
  if (regime.regime == Regime::KlHybrid) {
    auto kl = kl_regularizer(lc, la);
    out.loss += regime.kl_weight * kl.value;
    add_scaled(h.grad_clean, kl.grad_clean, regime.kl_weight);
    add_scaled(h.grad_adv, kl.grad_adv, regime.kl_weight);
  }
  Tensor<T> grad = concat_batch(h.grad_clean, h.grad_adv);
  scale(grad, regime.loss_scale);
  finish(model, tape, grad, true, sgd, optim, lr);
  return out;
}

}  // namespace

template <typename T>
StepMetrics train_step(ModelState<T>& model, const Tensor<T>& batch, std::span<const int> labels,
                       const RegimeConfig& regime, const AttackConfig& attack, SgdState<T>& sgd,
                       const OptimConfig& optim, double lr, Rng& rng) {
  regime.validate(model.norm, model.heads.size());
  if (batch.rank() != 4 || batch.dim(0) == 0) throw PreconditionError("train_step: empty or malformed batch");
  if (labels.size() != batch.dim(0)) throw PreconditionError("train_step: label count does not match batch size");
  switch (regime.regime) {
    case Regime::Madry: return madry_step(model, batch, labels, regime, attack, sgd, optim, lr, rng);
    case Regime::CrossAt: return cross_at_step(model, batch, labels, regime, attack, sgd, optim, lr, rng);
    default: return hybrid_step(model, batch, labels, regime, attack, sgd, optim, lr, rng);
  }
}

template <typename T>
ForwardOptions<T> Deployment<T>::options() const {
  ForwardOptions<T> o;
  o.train = false;
  o.branch = branch;
  o.affine_branch = affine;
  o.head = head;
  o.stats_overrides = stats;
  return o;
}

template <typename T>
EvalResult evaluate(const ModelState<T>& model, const Dataset& test, const Deployment<T>& deployment,
                    const AttackConfig& attack, Rng& rng, std::size_t batch_size) {
  if (test.size() == 0) throw PreconditionError("evaluate: empty test set");
  if (batch_size == 0) throw PreconditionError("evaluate: batch_size must be positive");
  AttackTarget<T> target;
  target.options = deployment.options();
  target.branch = deployment.branch;
  std::size_t clean = 0, robust = 0;
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < test.size(); b += batch_size) {
    const std::size_t e = std::min(test.size(), b + batch_size);
    idx.resize(e - b);
    std::iota(idx.begin(), idx.end(), b);
    Tensor<T> x;
    if constexpr (std::is_same_v<T, float>) {
      x = test.gather(idx);
    } else {
      x = test.gather(idx).template cast<T>();
    }
    const auto y = test.gather_labels(idx);
    const std::size_t c = count_correct(forward(model, x, target.options), y);
    clean += c;
    if (attack.epsilon == 0.0) {
      robust += c;
    } else {
      Tensor<T> xa = pgd(model, x, y, target, attack, rng);
      robust += count_correct(forward(model, xa, target.options), y);
    }
  }
  const double n = static_cast<double>(test.size());
  return {static_cast<double>(clean) / n, static_cast<double>(robust) / n, test.size()};
}

TrainResult train_loop(const TrainConfig& config, const Dataset& train, const Dataset& test,
                       const EpochCallback& on_epoch) {
  config.optim.validate();
  config.train_attack.validate();
  config.eval_attack.validate();
  TrainResult result{build_model<float>(config.arch, config.norm, config.regime.required_heads(), config.seed), {}};
  config.regime.validate(config.norm, result.model.heads.size());
  if (config.optim.epochs == 0) return result;
  if (train.size() == 0) throw PreconditionError("train_loop: empty training set");

  Dataset eval_set;
  const Dataset* eval = &test;
  if (config.eval_size > 0 && config.eval_size < test.size()) {
    eval_set = test.subset(subset_indices(test.size(), config.eval_size, config.seed));
    eval = &eval_set;
  }

  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  SgdState<float> sgd;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = config.optim.batch_size;

  for (int epoch = 0; epoch < config.optim.epochs; ++epoch) {
    const double lr = config.optim.lr_at(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(order.size(), b + bs) - b);
      const Tensor<float> x = train.gather(idx);
      const auto y = train.gather_labels(idx);
      const StepMetrics m = train_step(result.model, x, y, config.regime, config.train_attack, sgd, config.optim, lr, rng);
      loss_sum += m.loss * static_cast<double>(m.count);
    }
    const bool last = epoch + 1 == config.optim.epochs;
    const bool due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
    if (!last && !due) continue;
    for (Branch br : config.eval_branches) {
      Rng eval_rng(config.seed * 1000003ULL + static_cast<std::uint64_t>(epoch) * 2 + index_of(br));
      Deployment<float> dep;
      dep.branch = br;
      const EvalResult r = evaluate(result.model, *eval, dep, config.eval_attack, eval_rng);
      EpochMetrics em{epoch + 1, config.regime.regime, br, r.clean_acc, r.robust_acc,
                      loss_sum / static_cast<double>(train.size()), lr};
      result.history.push_back(em);
      if (on_epoch) on_epoch(em);
    }
  }
  return result;
}

#define DUALNORM_INSTANTIATE(T)                                                                                  \
  template void sgd_step<T>(ModelState<T>&, ModelGradients<T>&, SgdState<T>&, const OptimConfig&, double);       \
  template StepMetrics train_step<T>(ModelState<T>&, const Tensor<T>&, std::span<const int>, const RegimeConfig&, \
                                     const AttackConfig&, SgdState<T>&, const OptimConfig&, double, Rng&);        \
  template struct Deployment<T>;                                                                                 \
  template EvalResult evaluate<T>(const ModelState<T>&, const Dataset&, const Deployment<T>&, const AttackConfig&, \
                                  Rng&, std::size_t);

DUALNORM_INSTANTIATE(float)
DUALNORM_INSTANTIATE(double)
#undef DUALNORM_INSTANTIATE

}  // namespace dualnorm
