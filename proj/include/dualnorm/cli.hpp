#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dualnorm/config.hpp"
#include "dualnorm/probe.hpp"
#include "dualnorm/train.hpp"

namespace dualnorm {

// Subcommands: train, eval, recalibrate, probe-gap, export-channels,
// make-synthetic. Returns the process exit status.
int run_cli(int argc, char** argv);

// CSV artifacts. Each starts with the config echo as '#'-prefixed lines.
void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochMetrics> rows, const std::string& echo);
void write_gap_csv(const std::filesystem::path& path, const GapReport& report, const std::string& echo);
void write_channels_csv(const std::filesystem::path& path, std::span<const ChannelRow> rows, const std::string& echo);

struct LoadedData {
  Dataset train;
  Dataset test;
};

// Train and test splits named by the config (data_root, else CIFAR10_ROOT),
// subsampled per train_subset and test_subset.
LoadedData load_experiment_data(const ExperimentConfig& config, bool need_train = true);

}  // namespace dualnorm
