#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "dualnorm/model.hpp"
#include "dualnorm/probe.hpp"

namespace dualnorm {

struct CheckpointMeta {
  std::string config_echo;  // resolved config text
  int epoch = 0;
  std::uint64_t seed = 0;
};

struct LoadedCheckpoint {
  ModelState<float> model;
  CheckpointMeta meta;
};

// Every weight, affine set and running-statistics set, as little-endian f32
// blobs with per-blob CRC-32.
void save_checkpoint(const std::filesystem::path& path, const ModelState<float>& model, const CheckpointMeta& meta);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

void save_snapshot(const std::filesystem::path& path, const StatsSnapshot<float>& snapshot,
                   const std::string& config_echo);
StatsSnapshot<float> load_snapshot(const std::filesystem::path& path);

}  // namespace dualnorm
