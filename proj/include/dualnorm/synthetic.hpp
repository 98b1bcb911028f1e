#pragma once

#include <cstdint>
#include <filesystem>

#include "dualnorm/data.hpp"

namespace dualnorm {

// Ten-class 32x32 images mixing two kinds of class evidence:
//  - a robust cue: class color tint plus oriented low-frequency stripes, large
//    amplitude, matching the label with probability `robust_reliability`;
//  - a brittle cue: a class-specific periodic high-frequency texture, a few
//    intensity levels in amplitude, always matching the label;
// over per-image clutter (random tint, distractor stripes, pixel noise).
struct SyntheticConfig {
  std::size_t train_size = 10000;
  std::size_t test_size = 2000;
  std::uint64_t seed = 1;
  double robust_amplitude = 0.10;
  double robust_reliability = 0.8;
  double texture_amplitude = 4.0 / 255.0;
  double clutter_amplitude = 0.08;
  double pixel_noise = 2.0 / 255.0;

  friend bool operator==(const SyntheticConfig&, const SyntheticConfig&) = default;
};

struct SyntheticData {
  Dataset train;
  Dataset test;
};

SyntheticData make_synthetic(const SyntheticConfig& config);

// Writes the split in CIFAR-10 binary layout (five train batch files and one
// test file) so it loads through load_cifar10.
void write_synthetic_cifar(const std::filesystem::path& root, const SyntheticConfig& config);

}  // namespace dualnorm
