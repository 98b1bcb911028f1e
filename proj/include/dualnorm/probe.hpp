#pragma once

// Test-time statistics: re-calibration, NS/AP recombination, layer-wise
// Wasserstein gaps and channel exports.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dualnorm/attacks.hpp"
#include "dualnorm/data.hpp"
#include "dualnorm/model.hpp"
#include "dualnorm/train.hpp"

namespace dualnorm {

enum class DataSource : std::uint8_t { Clean, Adv, Noisy };

std::string_view to_string(DataSource source);
DataSource parse_data_source(std::string_view text);

// NS_{data}^{ap}: statistics measured on `data` while normalizing with AP `ap`.
struct SnapshotLabel {
  Branch ap = Branch::Adv;
  DataSource data = DataSource::Adv;
  bool stored = false;  // taken from the model's running statistics

  std::string name() const;  // e.g. "NS_clean^adv", or "NS_adv" when stored
  friend bool operator==(const SnapshotLabel&, const SnapshotLabel&) = default;
};

// One NormStats per norm layer of the model, in model order. Layers without
// running statistics hold empty vectors.
template <typename T>
struct StatsSnapshot {
  SnapshotLabel label;
  std::vector<std::string> layer_names;
  std::vector<NormStats<T>> layers;
  int passes = 0;
  bool converged = true;

  void check_compatible(const ModelState<T>& model) const;  // throws ConfigError
  friend bool operator==(const StatsSnapshot&, const StatsSnapshot&) = default;
};

// The running statistics a model deploys for `branch`.
template <typename T>
StatsSnapshot<T> stored_snapshot(const ModelState<T>& model, Branch branch);

struct RecalibrationConfig {
  int max_passes = 10;
  double tol = 1e-3;  // max per-channel relative change between passes
  double momentum = 0.1;
  std::size_t batch_size = 128;
  std::optional<AttackConfig> attack;  // required for DataSource::Adv
  double noise_magnitude = 16.0 / 255.0;
};

// Re-estimates NS from scratch with frozen weights: batch statistics of every
// layer under AP `ap_choice`, folded into fresh (0, 1) running estimates pass
// after pass until they settle. Adversarial inputs are generated once, against
// the model deployed with `ap_choice`. The model is not modified.
template <typename T>
StatsSnapshot<T> recalibrate(const ModelState<T>& model, Branch ap_choice, DataSource source, const Dataset& data,
                             const RecalibrationConfig& config, Rng& rng);

// Evaluates the model with NS from `ns` and AP (and head) `ap_choice`.
template <typename T>
EvalResult recombine_eval(const ModelState<T>& model, const StatsSnapshot<T>& ns, Branch ap_choice,
                          const Dataset& test, const AttackConfig& attack, Rng& rng, std::size_t batch_size = 256);

// 1-Wasserstein distance between two equal-size empirical distributions.
double wasserstein_1d(std::span<const double> a, std::span<const double> b);

struct GapEntry {
  std::size_t layer_index = 0;
  std::string layer_name;
  std::optional<double> d_mu;
  std::optional<double> d_sigma;
  std::optional<double> d_gamma;
  std::optional<double> d_beta;
};

struct GapReport {
  std::string left;
  std::string right;
  std::vector<GapEntry> entries;
};

// NS gap over batch-norm layers: mu and sigma = sqrt(var).
template <typename T>
GapReport gap_report(const StatsSnapshot<T>& left, const StatsSnapshot<T>& right);

// AP gap over every norm layer: gamma and beta of two affine sets.
template <typename T>
GapReport affine_gap(const ModelState<T>& model, Branch left, Branch right);

// Layer-wise union of two reports over the same model; fields of `b` fill
// the gaps left by `a`.
GapReport merge_reports(const GapReport& a, const GapReport& b);

// Median over layers of d_mu + d_sigma (stats_fields) or d_gamma + d_beta,
// skipping layers where those fields are absent. NaN when none remain.
double layer_median(const GapReport& report, bool stats_fields);

struct ChannelRow {
  std::size_t channel = 0;
  std::string variant;
  std::optional<double> mean;
  double sigma_or_gamma = 0.0;
  std::optional<double> beta;
  friend bool operator==(const ChannelRow&, const ChannelRow&) = default;
};

// Channel table for one layer: `k` channels drawn without replacement by
// `seed`, in ascending order, one row per channel and source.
template <typename T>
std::vector<ChannelRow> export_channels(const ModelState<T>& model, std::span<const StatsSnapshot<T>> snapshots,
                                        std::span<const Branch> affine_sets, std::string_view layer_name,
                                        std::size_t k, std::uint64_t seed);

std::vector<std::size_t> sample_channels(std::size_t channels, std::size_t k, std::uint64_t seed);

}  // namespace dualnorm
