#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "dualnorm/data.hpp"
#include "dualnorm/model.hpp"
#include "dualnorm/tensor.hpp"

namespace testing {

template <typename T>
dualnorm::Tensor<T> random_tensor(const dualnorm::Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                                  double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  dualnorm::Tensor<T> t(shape);
  for (auto& v : t.storage()) v = static_cast<T>(u(rng));
  return t;
}

// |a - b| <= tol * max(|a|, |b|, floor)
inline bool close(double a, double b, double tol, double floor = 1.0) {
  return std::abs(a - b) <= tol * std::max({std::abs(a), std::abs(b), floor});
}

inline dualnorm::Architecture tiny_cnn(std::size_t image = 8, double width = 0.25) {
  return {dualnorm::ArchKind::SmallCNN, width, 10, image};
}

inline dualnorm::NormConfig bn(dualnorm::NormMode mode) {
  dualnorm::NormConfig c;
  c.mode = mode;
  return c;
}

inline std::vector<int> random_labels(std::size_t n, std::mt19937_64& rng, int classes = 10) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> y(n);
  for (auto& v : y) v = u(rng);
  return y;
}

inline dualnorm::Dataset random_dataset(std::size_t n, std::size_t image, std::mt19937_64& rng) {
  return {random_tensor<float>({n, 3, image, image}, rng, 0.0, 1.0), random_labels(n, rng)};
}

// Weights and affine sets bitwise equal.
template <typename T>
bool same_parameters(const dualnorm::ModelState<T>& a, const dualnorm::ModelState<T>& b) {
  if (a.convs != b.convs || a.heads != b.heads || a.norms.size() != b.norms.size()) return false;
  for (std::size_t i = 0; i < a.norms.size(); ++i)
    if (a.norms[i].state.affine != b.norms[i].state.affine) return false;
  return true;
}

template <typename T>
bool same_running(const dualnorm::ModelState<T>& a, const dualnorm::ModelState<T>& b) {
  for (std::size_t i = 0; i < a.norms.size(); ++i)
    if (a.norms[i].state.stats != b.norms[i].state.stats) return false;
  return true;
}

}  // namespace testing
