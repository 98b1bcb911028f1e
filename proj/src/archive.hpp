#pragma once

// Tensor container shared by checkpoints and statistics files:
//   8-byte magic | u64 LE manifest length | JSON manifest | f32 LE blobs
// The manifest lists each blob's name, shape, offset, byte count and CRC-32.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dualnorm/tensor.hpp"
#include "json.hpp"

namespace dualnorm::archive {

inline constexpr int kVersion = 1;

struct Blob {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Archive {
  std::string kind;  // "checkpoint" or "stats"
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Blob> blobs;

  const Blob& find(std::string_view name) const;  // throws FormatError
};

void write(const std::filesystem::path& path, const Archive& archive);
Archive read(const std::filesystem::path& path, std::string_view expected_kind);

}  // namespace dualnorm::archive
