#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "dualnorm/model.hpp"

namespace dualnorm {

using Rng = std::mt19937_64;

// l-infinity attack budget; all values in raw [0,1] pixel units.
struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int steps = 10;
  int restarts = 1;
  bool random_init = true;

  void validate() const;
  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

// The forward configuration an attack differentiates through. The attacked
// samples form the trailing segment tagged `branch`; an optional clean context
// batch is prepended as a leading Clean segment so training-time attacks see
// the same batch statistics as the training forward.
template <typename T>
struct AttackTarget {
  ForwardOptions<T> options;                 // segments are filled in by the attack
  Branch branch = Branch::Adv;
  const Tensor<T>* clean_context = nullptr;  // optional, excluded from the loss
};

// Projected sign-gradient ascent on cross-entropy. Per sample, the returned
// point is the highest-loss iterate seen over all restarts, starting points
// included. ||x' - x||_inf <= epsilon and x' in [0,1].
template <typename T>
Tensor<T> pgd(const ModelState<T>& model, const Tensor<T>& batch, std::span<const int> labels,
              const AttackTarget<T>& target, const AttackConfig& config, Rng& rng);

// Eval-mode target against a deployed branch and head.
template <typename T>
AttackTarget<T> eval_target(Branch branch, HeadSelect head = HeadSelect::Default);

// x + u, u ~ Uniform(-magnitude, magnitude) per pixel, clipped to [0,1].
template <typename T>
Tensor<T> uniform_noise(const Tensor<T>& batch, double magnitude, Rng& rng);

}  // namespace dualnorm
