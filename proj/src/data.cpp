#include "dualnorm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>

#include "dualnorm/errors.hpp"

namespace dualnorm {

namespace fs = std::filesystem;

Tensor<float> Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t per = size() ? images.size() / size() : 0;
  Shape s = images.shape();
  s[0] = indices.size();
  Tensor<float> out(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw PreconditionError("dataset index out of range");
    std::copy_n(images.data() + indices[i] * per, per, out.data() + i * per);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels.at(indices[i]);
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const { return {gather(indices), gather_labels(indices)}; }

Dataset read_cifar_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecord != 0) {
    throw FormatError(file.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                      std::to_string(kCifarRecord) + "-byte record");
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset d{Tensor<float>({n, 3, kCifarSide, kCifarSide}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] > 9) throw FormatError(file.string() + ": record " + std::to_string(i) + " has label " + std::to_string(rec[0]));
    d.labels[i] = rec[0];
    float* px = d.images.data() + i * kCifarPixels;
    for (std::size_t j = 0; j < kCifarPixels; ++j) px[j] = static_cast<float>(rec[1 + j]) / 255.0f;
  }
  return d;
}

void write_cifar_file(const fs::path& file, const Dataset& data) {
  if (data.images.rank() != 4 || data.images.dim(1) != 3 || data.images.dim(2) != kCifarSide ||
      data.images.dim(3) != kCifarSide) {
    throw PreconditionError("CIFAR records need [N,3,32,32] images");
  }
  std::vector<unsigned char> bytes(data.size() * kCifarRecord);
  for (std::size_t i = 0; i < data.size(); ++i) {
    unsigned char* rec = bytes.data() + i * kCifarRecord;
    if (data.labels[i] < 0 || data.labels[i] > 9) throw PreconditionError("CIFAR labels must be 0..9");
    rec[0] = static_cast<unsigned char>(data.labels[i]);
    const float* px = data.images.data() + i * kCifarPixels;
    for (std::size_t j = 0; j < kCifarPixels; ++j)
      rec[1 + j] = static_cast<unsigned char>(std::lround(std::clamp(px[j], 0.0f, 1.0f) * 255.0f));
  }
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + file.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + file.string());
}

std::vector<std::size_t> subset_indices(std::size_t total, std::size_t subset, std::uint64_t seed) {
  if (subset > total) {
    throw ConfigError("subset " + std::to_string(subset) + " exceeds " + std::to_string(total) + " records");
  }
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(subset);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Dataset load_cifar10(const fs::path& root, Split split, std::optional<std::size_t> subset, std::uint64_t seed) {
  std::vector<fs::path> files;
  if (split == Split::Train) {
    for (int i = 1; i <= 5; ++i) files.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(root / "test_batch.bin");
  }
  Dataset all;
  for (const auto& f : files) {
    if (!fs::exists(f)) throw FormatError("missing CIFAR-10 file " + f.string());
    Dataset part = read_cifar_file(f);
    all.images = concat_batch(all.images, part.images);
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
  }
  if (!subset) return all;
  const auto idx = subset_indices(all.size(), *subset, seed);
  return all.subset(idx);
}

std::optional<fs::path> cifar_root_from_env() {
  const char* v = std::getenv("CIFAR10_ROOT");
  if (!v || !*v) return std::nullopt;
  return fs::path(v);
}

}  // namespace dualnorm
