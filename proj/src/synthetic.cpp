#include "dualnorm/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include "dualnorm/errors.hpp"

namespace dualnorm {

namespace {

constexpr std::size_t kClasses = 10;
constexpr std::size_t kSide = kCifarSide;
constexpr std::size_t kTile = 4;
constexpr double kStripePeriod = 12.0;

struct ClassCues {
  std::array<double, 3> tint{};
  std::array<double, 3> stripe_color{};
  double angle = 0.0;
  std::array<double, 3 * kTile * kTile> tile{};
};

std::array<ClassCues, kClasses> make_cues(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.5, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::array<ClassCues, kClasses> cues;
  for (std::size_t c = 0; c < kClasses; ++c) {
    auto& q = cues[c];
    double norm = 0.0;
    for (auto& t : q.tint) {
      t = normal(rng);
      norm += t * t;
    }
    for (auto& t : q.tint) t /= std::sqrt(norm);
    for (auto& s : q.stripe_color) s = unit(rng);
    q.angle = std::numbers::pi * static_cast<double>(c) / static_cast<double>(kClasses);
    // zero-mean +-1 tile per channel
    for (std::size_t ch = 0; ch < 3; ++ch) {
      std::array<double, kTile * kTile> t{};
      for (std::size_t k = 0; k < t.size(); ++k) t[k] = k < t.size() / 2 ? 1.0 : -1.0;
      std::shuffle(t.begin(), t.end(), rng);
      std::copy(t.begin(), t.end(), q.tile.begin() + ch * kTile * kTile);
    }
  }
  return cues;
}

double stripe(double angle, double phase, std::size_t y, std::size_t x) {
  const double u = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y);
  return std::sin(2.0 * std::numbers::pi * u / kStripePeriod + phase);
}

Dataset render(const SyntheticConfig& cfg, const std::array<ClassCues, kClasses>& cues, std::size_t n,
               std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_int_distribution<int> other(1, static_cast<int>(kClasses) - 1);
  std::bernoulli_distribution reliable(cfg.robust_reliability);

  Dataset d{Tensor<float>({n, 3, kSide, kSide}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(i % kClasses);
  std::shuffle(d.labels.begin(), d.labels.end(), rng);

  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(d.labels[i]);
    const std::size_t r = reliable(rng) ? y : (y + static_cast<std::size_t>(other(rng))) % kClasses;
    const ClassCues& robust = cues[r];
    const ClassCues& brittle = cues[y];
    const double ph = phase(rng);
    const double clutter_angle = angle(rng), clutter_phase = phase(rng);
    std::array<double, 3> clutter_tint{};
    for (auto& t : clutter_tint) t = cfg.clutter_amplitude * normal(rng);
    float* img = d.images.data() + i * kCifarPixels;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t py = 0; py < kSide; ++py) {
        for (std::size_t px = 0; px < kSide; ++px) {
          double v = 0.5;
          v += cfg.robust_amplitude * (robust.tint[ch] + robust.stripe_color[ch] * stripe(robust.angle, ph, py, px));
          v += clutter_tint[ch] + cfg.clutter_amplitude * stripe(clutter_angle, clutter_phase, py, px);
          v += cfg.texture_amplitude * brittle.tile[ch * kTile * kTile + (py % kTile) * kTile + (px % kTile)];
          v += cfg.pixel_noise * normal(rng);
          // quantized so in-memory data equals what the binary files hold
          v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
          img[(ch * kSide + py) * kSide + px] = static_cast<float>(v);
        }
      }
    }
  }
  return d;
}

}  // namespace

SyntheticData make_synthetic(const SyntheticConfig& config) {
  if (!(config.robust_reliability >= 0.0 && config.robust_reliability <= 1.0)) {
    throw ConfigError("robust_reliability must lie in [0, 1]");
  }
  if (config.train_size == 0 || config.test_size == 0) throw ConfigError("synthetic split sizes must be positive");
  std::mt19937_64 class_rng(config.seed);
  const auto cues = make_cues(class_rng);
  std::mt19937_64 train_rng(config.seed * 2 + 1), test_rng(config.seed * 2 + 2);
  return {render(config, cues, config.train_size, train_rng), render(config, cues, config.test_size, test_rng)};
}

void write_synthetic_cifar(const std::filesystem::path& root, const SyntheticConfig& config) {
  const SyntheticData data = make_synthetic(config);
  std::filesystem::create_directories(root);
  const std::size_t n = data.train.size();
  for (std::size_t f = 0; f < 5; ++f) {
    std::vector<std::size_t> idx;
    for (std::size_t i = n * f / 5; i < n * (f + 1) / 5; ++i) idx.push_back(i);
    write_cifar_file(root / ("data_batch_" + std::to_string(f + 1) + ".bin"), data.train.subset(idx));
  }
  write_cifar_file(root / "test_batch.bin", data.test);
}

}  // namespace dualnorm
