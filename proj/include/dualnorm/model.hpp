#pragma once

// Backbones with injectable normalization layers and one or two linear heads.
//
// A forward pass is recorded on a Tape: the tape holds every intermediate value
// plus a backward closure per op, so one forward program per architecture
// serves inference, input gradients (attacks) and parameter gradients
// (training). Running statistics are never touched by a forward pass; the
// measured batch moments are returned on the tape and applied explicitly.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dualnorm/norm.hpp"
#include "dualnorm/tensor.hpp"

namespace dualnorm {

enum class ArchKind : std::uint8_t { SmallCNN, ResNet18 };

std::string_view to_string(ArchKind kind);
ArchKind parse_arch(std::string_view text);

struct Architecture {
  ArchKind kind = ArchKind::SmallCNN;
  double width = 1.0;
  std::size_t classes = 10;
  std::size_t image_size = 32;

  // Channel widths per stage after applying the width multiplier.
  std::vector<std::size_t> stage_widths() const;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

enum class HeadSelect : std::uint8_t { Default, Clean, Adv };

template <typename T>
struct ConvLayer {
  std::string name;
  Tensor<T> weight;  // [out, in, k, k]
  std::size_t stride = 1;
  std::size_t pad = 1;
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

template <typename T>
struct NormLayer {
  std::string name;
  NormLayerState<T> state;
  friend bool operator==(const NormLayer&, const NormLayer&) = default;
};

template <typename T>
struct LinearLayer {
  std::string name;
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]
  friend bool operator==(const LinearLayer&, const LinearLayer&) = default;
};

template <typename T>
struct ModelState {
  Architecture arch;
  NormConfig norm;
  std::vector<ConvLayer<T>> convs;
  std::vector<NormLayer<T>> norms;
  std::vector<LinearLayer<T>> heads;  // index by Branch when two exist

  std::size_t parameter_count() const;
  std::size_t norm_index(std::string_view name) const;  // throws ConfigError when unknown

  template <typename U>
  ModelState<U> cast() const;

  friend bool operator==(const ModelState&, const ModelState&) = default;
};

template <typename T>
ModelState<T> build_model(const Architecture& arch, const NormConfig& norm, std::size_t heads, std::uint64_t seed);

// Gradients mirroring ModelState's trainable parameters.
template <typename T>
struct ModelGradients {
  std::vector<Tensor<T>> convs;
  std::vector<std::vector<AffineParams<T>>> norms;
  std::vector<Tensor<T>> head_weights;
  std::vector<Tensor<T>> head_biases;

  static ModelGradients zeros_like(const ModelState<T>& model);
};

// Flat view over one parameter tensor and its gradient, for optimizers and
// serialization.
template <typename T>
struct ParamView {
  std::string name;
  std::span<T> value;
  std::span<T> grad;
};

template <typename T>
std::vector<ParamView<T>> parameter_views(ModelState<T>& model, ModelGradients<T>& grads);

template <typename T>
struct ForwardOptions {
  std::vector<Segment> segments;  // empty: the whole batch is one segment tagged `branch`
  Branch branch = Branch::Adv;
  bool train = false;
  const std::vector<NormStats<T>>* stats_overrides = nullptr;  // one per norm layer
  std::optional<Branch> affine_branch;
  HeadSelect head = HeadSelect::Default;
  StatsRoute route = StatsRoute::Routed;
  bool record_backward = true;
};

template <typename T>
class Tape;

template <typename T>
struct BackwardContext {
  const Tape<T>* tape = nullptr;
  std::vector<Tensor<T>> grads;
  ModelGradients<T>* params = nullptr;  // null: skip parameter gradients
  void accumulate(std::size_t id, Tensor<T> g);
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& dy, BackwardContext<T>& ctx)>;

  explicit Tape(const ModelState<T>& model) : model_(&model), moments_(model.norms.size()) {}

  std::size_t push(Tensor<T> value, BackwardFn fn);
  const Tensor<T>& value(std::size_t id) const { return values_[id]; }
  void release(std::size_t id) { values_[id] = Tensor<T>(); }
  const Tensor<T>& logits() const { return values_.back(); }
  std::size_t size() const { return values_.size(); }
  const ModelState<T>& model() const { return *model_; }

  // Batch moments measured per norm layer (train-mode batch norm only).
  const std::vector<std::vector<BatchMoments<T>>>& moments() const { return moments_; }
  std::vector<std::vector<BatchMoments<T>>>& moments() { return moments_; }

  const std::vector<BackwardFn>& backward_fns() const { return fns_; }

 private:
  const ModelState<T>* model_;
  std::vector<Tensor<T>> values_;
  std::vector<BackwardFn> fns_;
  std::vector<std::vector<BatchMoments<T>>> moments_;
};

template <typename T>
Tape<T> record(const ModelState<T>& model, const Tensor<T>& batch, const ForwardOptions<T>& options);

// logits [batch, classes]
template <typename T>
Tensor<T> forward(const ModelState<T>& model, const Tensor<T>& batch, const ForwardOptions<T>& options);

template <typename T>
struct Backward {
  Tensor<T> input;
  ModelGradients<T> params;
};

// Propagates grad_logits through the tape. Parameter gradients are only
// computed when `with_params` is set.
template <typename T>
Backward<T> backpropagate(const Tape<T>& tape, const Tensor<T>& grad_logits, bool with_params);

// Folds the tape's batch moments into the model's running statistics.
template <typename T>
void apply_running_updates(ModelState<T>& model, const Tape<T>& tape);

// Per-layer batch moments of the tape as NormStats (the set fed by `branch`),
// for statistics injection.
template <typename T>
std::vector<NormStats<T>> captured_stats(const ModelState<T>& model, const Tape<T>& tape, Branch branch);

// Gradient of mean cross-entropy w.r.t. input pixels.
template <typename T>
Tensor<T> input_gradient(const ModelState<T>& model, const Tensor<T>& batch, std::span<const int> labels,
                         const ForwardOptions<T>& options);

}  // namespace dualnorm
