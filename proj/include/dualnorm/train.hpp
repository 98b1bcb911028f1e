#pragma once

// Training regimes over a shared forward program, SGD, and the evaluation
// harness.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dualnorm/attacks.hpp"
#include "dualnorm/data.hpp"
#include "dualnorm/model.hpp"

namespace dualnorm {

enum class Regime : std::uint8_t { Madry, CrossAt, Hybrid, CrossHybrid, KlHybrid, DualLinear };

std::string_view to_string(Regime regime);
Regime parse_regime(std::string_view text);

struct RegimeConfig {
  Regime regime = Regime::Hybrid;
  double alpha = 0.5;      // clean weight in the hybrid objective
  double kl_weight = 1.0;  // kl_hybrid only
  double loss_scale = 1.0;  // multiplies the whole objective before backprop

  // Throws ConfigError when the model's norm mode or head count cannot serve
  // the regime.
  void validate(const NormConfig& norm, std::size_t heads) const;
  // Norm mode and head count a fresh model for this regime should use when
  // the regime dictates them.
  std::optional<NormMode> required_mode() const;
  std::size_t required_heads() const { return regime == Regime::DualLinear ? 2 : 1; }

  friend bool operator==(const RegimeConfig&, const RegimeConfig&) = default;
};

struct OptimConfig {
  int epochs = 110;
  double lr = 0.1;
  double decay = 0.1;
  std::vector<int> decay_epochs{100, 105};
  double weight_decay = 5e-4;
  double momentum = 0.9;
  std::size_t batch_size = 128;

  void validate() const;
  // Learning rate in effect during epoch `epoch` (0-based).
  double lr_at(int epoch) const;

  friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

// SGD with momentum and L2 weight decay folded into the gradient:
// v = m v + (g + wd w);  w -= lr v.
template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;  // parallel to parameter_views order
};

template <typename T>
void sgd_step(ModelState<T>& model, ModelGradients<T>& grads, SgdState<T>& state, const OptimConfig& optim, double lr);

struct StepMetrics {
  double loss = 0.0;
  double clean_loss = 0.0;
  double adv_loss = 0.0;
  std::size_t clean_correct = 0;
  std::size_t adv_correct = 0;
  std::size_t count = 0;
};

// One optimization step of `regime` on a clean batch. The attack sees the
// parameters as they are at the start of the step.
template <typename T>
StepMetrics train_step(ModelState<T>& model, const Tensor<T>& batch, std::span<const int> labels,
                       const RegimeConfig& regime, const AttackConfig& attack, SgdState<T>& sgd,
                       const OptimConfig& optim, double lr, Rng& rng);

// Inference configuration: which NS set, AP set and head classify a sample.
// `stats` replaces the NS of every batch-norm layer when set.
template <typename T>
struct Deployment {
  Branch branch = Branch::Adv;
  std::optional<Branch> affine;
  HeadSelect head = HeadSelect::Default;
  const std::vector<NormStats<T>>* stats = nullptr;

  ForwardOptions<T> options() const;
};

struct EvalResult {
  double clean_acc = 0.0;
  double robust_acc = 0.0;
  std::size_t count = 0;
};

// Clean accuracy and accuracy under white-box PGD against the deployment.
template <typename T>
EvalResult evaluate(const ModelState<T>& model, const Dataset& test, const Deployment<T>& deployment,
                    const AttackConfig& attack, Rng& rng, std::size_t batch_size = 256);

struct EpochMetrics {
  int epoch = 0;
  Regime regime = Regime::Hybrid;
  Branch branch = Branch::Adv;
  double clean_acc = 0.0;
  double pgd_acc = 0.0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainConfig {
  Architecture arch;
  NormConfig norm;
  RegimeConfig regime;
  AttackConfig train_attack{8.0 / 255.0, 2.0 / 255.0, 10, 1, true};
  AttackConfig eval_attack{8.0 / 255.0, 2.0 / 255.0, 10, 1, true};
  OptimConfig optim;
  std::uint64_t seed = 0;
  std::vector<Branch> eval_branches{Branch::Adv};  // deployments reported each epoch
  int eval_every = 1;                               // 0: final epoch only
  std::size_t eval_size = 0;                        // 0: whole test set
};

struct TrainResult {
  ModelState<float> model;
  std::vector<EpochMetrics> history;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Deterministic given the config: the seed drives initialization, shuffling
// and every attack.
TrainResult train_loop(const TrainConfig& config, const Dataset& train, const Dataset& test,
                       const EpochCallback& on_epoch = {});

}  // namespace dualnorm
