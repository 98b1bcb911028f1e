#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "dualnorm/tensor.hpp"

namespace dualnorm {

// Labeled images in NCHW layout, pixels in [0,1].
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  Tensor<float> gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

enum class Split : std::uint8_t { Train, Test };

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

// Standard CIFAR-10 binary layout: data_batch_{1..5}.bin and test_batch.bin,
// each record one label byte followed by the R, G and B planes.
// `subset` draws that many records without replacement, in ascending file
// order, from a seed-determined permutation.
Dataset load_cifar10(const std::filesystem::path& root, Split split, std::optional<std::size_t> subset = std::nullopt,
                     std::uint64_t seed = 0);

// Parse records from one file. Throws FormatError on a partial record or a
// label above 9.
Dataset read_cifar_file(const std::filesystem::path& file);

// Write records in the same layout (pixels rounded to bytes).
void write_cifar_file(const std::filesystem::path& file, const Dataset& data);

// Indices chosen by load_cifar10 for a split of `total` records.
std::vector<std::size_t> subset_indices(std::size_t total, std::size_t subset, std::uint64_t seed);

// Root from CIFAR10_ROOT, if set.
std::optional<std::filesystem::path> cifar_root_from_env();

}  // namespace dualnorm
