#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dualnorm/train.hpp"

namespace dualnorm {

// Resolved experiment settings. Sections and keys of the INI form:
//   [experiment] preset regime seed output_dir data_root train_subset test_subset
//   [model]      arch width classes
//   [norm]       kind mode eps momentum group_count
//   [regime]     alpha kl_weight
//   [optim]      epochs lr decay decay_epochs weight_decay momentum batch_size
//   [train_attack], [eval_attack]  epsilon step_size steps restarts random_init
//   [eval]       branches every size
// Real values accept fractions such as 8/255.
struct ExperimentConfig {
  std::string preset = "desk";
  TrainConfig train;
  std::filesystem::path output_dir = "runs";
  std::optional<std::filesystem::path> data_root;  // falls back to CIFAR10_ROOT
  std::size_t train_subset = 0;                    // 0: whole split
  std::size_t test_subset = 0;

  void validate() const;
  // Canonical INI text with every default expanded.
  std::string to_ini() const;
};

ExperimentConfig preset_config(std::string_view name);

// Key/value overrides keyed "section.key".
using ConfigOverrides = std::map<std::string, std::string>;

// Preset (from [experiment] preset, else "desk"), then the file, then the
// overrides. Unknown sections or keys raise ConfigError naming them.
ExperimentConfig load_config(const std::optional<std::filesystem::path>& file, const ConfigOverrides& overrides = {});
ExperimentConfig parse_config(std::string_view ini_text, const ConfigOverrides& overrides = {});

// "0.5", "8/255", "1e-3".
double parse_real(std::string_view text);

}  // namespace dualnorm
