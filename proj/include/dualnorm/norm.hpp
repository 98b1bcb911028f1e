#pragma once

// Normalization layer with pluggable kind (batch/layer/group/instance) and
// branch routing between one or two sets of normalization statistics (NS) and
// one or two sets of affine parameters (AP).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dualnorm/tensor.hpp"

namespace dualnorm {

enum class Branch : std::uint8_t { Clean = 0, Adv = 1 };

constexpr Branch other(Branch b) { return b == Branch::Clean ? Branch::Adv : Branch::Clean; }
constexpr std::size_t index_of(Branch b) { return static_cast<std::size_t>(b); }
std::string_view to_string(Branch b);
Branch parse_branch(std::string_view text);

enum class NormKind : std::uint8_t { Batch, Layer, Group, Instance };
enum class NormMode : std::uint8_t { Single, Dual, Cross, DualAPOnly, DualNSOnly };

std::string_view to_string(NormKind kind);
std::string_view to_string(NormMode mode);
NormKind parse_norm_kind(std::string_view text);
NormMode parse_norm_mode(std::string_view text);

struct NormConfig {
  NormKind kind = NormKind::Batch;
  NormMode mode = NormMode::Single;
  double eps = 1e-5;
  double momentum = 0.1;
  std::size_t group_count = 1;  // GN only

  // Throws ConfigError when the config cannot serve a layer with `channels`.
  void validate(std::size_t channels) const;
  bool has_running_stats() const { return kind == NormKind::Batch; }
  std::size_t stats_sets() const;
  std::size_t affine_sets() const;

  friend bool operator==(const NormConfig&, const NormConfig&) = default;
};

template <typename T>
struct NormStats {
  std::vector<T> mean;
  std::vector<T> var;
  T momentum = T(0.1);

  static NormStats initial(std::size_t channels, T momentum) {
    return NormStats{std::vector<T>(channels, T{0}), std::vector<T>(channels, T{1}), momentum};
  }
  std::size_t channels() const { return mean.size(); }

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

template <typename T>
struct AffineParams {
  std::vector<T> gamma;
  std::vector<T> beta;

  static AffineParams identity(std::size_t channels) {
    return AffineParams{std::vector<T>(channels, T{1}), std::vector<T>(channels, T{0})};
  }
  static AffineParams zeros(std::size_t channels) {
    return AffineParams{std::vector<T>(channels, T{0}), std::vector<T>(channels, T{0})};
  }
  std::size_t channels() const { return gamma.size(); }

  friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

// Statistics sets are indexed by Branch when two exist, otherwise index 0 is
// the shared (mixture) set. Same for affine sets.
template <typename T>
struct NormLayerState {
  NormConfig config;
  std::size_t channels = 0;
  std::vector<NormStats<T>> stats;
  std::vector<AffineParams<T>> affine;

  static NormLayerState make(const NormConfig& config, std::size_t channels);
  void validate() const;

  friend bool operator==(const NormLayerState&, const NormLayerState&) = default;
};

struct Routing {
  std::size_t stats = 0;
  std::size_t affine = 0;
  friend bool operator==(const Routing&, const Routing&) = default;
};

// Which NS set normalizes and which AP set scales samples of `branch`.
// Cross swaps the NS set only.
Routing route(NormMode mode, Branch branch);

template <typename T>
Routing select_params(const NormLayerState<T>& state, Branch branch);

// The NS set that samples of `branch` feed with their batch moments.
std::size_t fed_stats_set(NormMode mode, Branch branch);

// A contiguous run of samples in a batch sharing one branch tag.
struct Segment {
  Branch branch = Branch::Clean;
  std::size_t count = 0;
};

enum class StatsRoute : std::uint8_t {
  Routed,  // batch moments of the set selected by routing
  Own,     // every segment normalized with its own batch moments (re-calibration)
};

template <typename T>
struct NormRequest {
  std::span<const Segment> segments;
  bool train = false;
  const NormStats<T>* stats_override = nullptr;  // fixed NS for every segment, no gradient through it
  std::optional<Branch> affine_branch;           // explicit AP set, otherwise routed
  StatsRoute route = StatsRoute::Routed;
};

template <typename T>
struct BatchMoments {
  std::size_t stats_set = 0;
  std::vector<T> mean;
  std::vector<T> var;
};

template <typename T>
struct NormForward {
  Tensor<T> output;
  // Batch moments measured in this pass, one entry per fed NS set (train-mode
  // batch norm without override only).
  std::vector<BatchMoments<T>> moments;

  // Backward cache.
  Tensor<T> input;
  Tensor<T> normalized;                   // pre-affine
  std::vector<std::size_t> segment_begin;  // sample offsets, size segments+1
  std::vector<std::size_t> segment_affine;
  std::vector<int> segment_norm_group;  // moment group normalizing the segment, -1 when fixed
  std::vector<int> segment_feed_group;  // moment group the segment contributes to, -1 when none
  std::vector<T> segment_inv_std;       // batch kinds: [segment][channel]
  std::vector<T> sample_inv_std;        // per-sample kinds: [sample][group]
  std::vector<double> group_mean;       // batch kinds: [group][channel]
  std::vector<double> group_inv_std;
  std::vector<double> group_count;      // elements per channel in each group
  std::size_t groups = 0;
};

template <typename T>
struct NormGradients {
  Tensor<T> input;
  std::vector<AffineParams<T>> affine;  // one per affine set, zeros when unused
};

template <typename T>
NormForward<T> normalize_forward(const Tensor<T>& x, const NormLayerState<T>& state, const NormRequest<T>& request);

template <typename T>
NormForward<T> normalize_forward(const Tensor<T>& x, Branch branch, bool train_mode, const NormLayerState<T>& state,
                                 const NormStats<T>* stats_override = nullptr);

template <typename T>
NormGradients<T> normalize_backward(const NormForward<T>& forward, const NormLayerState<T>& state,
                                    const Tensor<T>& grad_output);

// running <- (1 - momentum) * running + momentum * batch, for mean and var.
template <typename T>
NormStats<T> update_running(const NormStats<T>& stats, std::span<const T> batch_mean, std::span<const T> batch_var);

// Applies every measured batch moment to its NS set in `state`.
template <typename T>
void apply_moments(NormLayerState<T>& state, std::span<const BatchMoments<T>> moments);

}  // namespace dualnorm
