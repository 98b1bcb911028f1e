#include <cmath>
#include <random>

#include "doctest.h"
#include "dualnorm/errors.hpp"
#include "dualnorm/loss.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace dualnorm;

namespace {

// Cross-entropy by direct summation of -log softmax.
double ce_oracle(const Tensor<double>& z, const std::vector<int>& y) {
  const std::size_t n = z.dim(0), k = z.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[i * k + j]);
    total += -std::log(std::exp(z[i * k + static_cast<std::size_t>(y[i])]) / denom);
  }
  return total / static_cast<double>(n);
}

double kl_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t n = a.dim(0), k = a.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      sa += std::exp(a[i * k + j]);
      sb += std::exp(b[i * k + j]);
    }
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(a[i * k + j]) / sa, q = std::exp(b[i * k + j]) / sb;
      total += p * std::log(p / q);
    }
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("hybrid loss endpoints are the branch cross-entropies") {
  std::mt19937_64 rng(1);
  auto zc = testing::random_tensor<double>({5, 10}, rng, -3, 3);
  auto za = testing::random_tensor<double>({5, 10}, rng, -3, 3);
  const auto y = testing::random_labels(5, rng);
  CHECK(hybrid_loss(zc, za, y, 1.0).value == doctest::Approx(ce_oracle(zc, y)).epsilon(1e-12));
  CHECK(hybrid_loss(zc, za, y, 0.0).value == doctest::Approx(ce_oracle(za, y)).epsilon(1e-12));
}

TEST_CASE("uniform two-class logits give ln 2") {
  Tensor<double> z({1, 2}, 0.0);
  const std::vector<int> y{0};
  CHECK(hybrid_loss(z, z, y, 0.5).value == doctest::Approx(0.6931).epsilon(1e-4));
}

TEST_CASE("hybrid loss is linear in alpha") {
  std::mt19937_64 rng(2);
  auto zc = testing::random_tensor<double>({8, 10}, rng, -2, 2);
  auto za = testing::random_tensor<double>({8, 10}, rng, -2, 2);
  const auto y = testing::random_labels(8, rng);
  const double c = ce_oracle(zc, y), a = ce_oracle(za, y);
  for (double alpha : {0.0, 0.25, 0.5, 1.0})
    CHECK(testing::close(hybrid_loss(zc, za, y, alpha).value, alpha * c + (1 - alpha) * a, 1e-12));
  CHECK_THROWS_AS(hybrid_loss(zc, za, y, 1.5), ConfigError);
  auto short_adv = testing::random_tensor<double>({7, 10}, rng);
  CHECK_THROWS_AS(hybrid_loss(zc, short_adv, y, 0.5), PreconditionError);
}

TEST_CASE("KL of identical logits is zero") {
  std::mt19937_64 rng(3);
  auto z = testing::random_tensor<double>({4, 10}, rng, -3, 3);
  CHECK(kl_regularizer(z, z).value == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("KL two-class hand value") {
  Tensor<double> p({1, 2}, 0.0), q({1, 2}, 0.0);
  p[0] = std::log(9.0);
  const double expected = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
  CHECK(kl_regularizer(p, q).value == doctest::Approx(expected).epsilon(1e-12));
  CHECK(kl_regularizer(p, q).value == doctest::Approx(0.3681).epsilon(1e-4));
}

TEST_CASE("KL is non-negative and matches direct summation") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 1000; ++t) {
    auto a = testing::random_tensor<double>({1, 10}, rng, -5, 5);
    auto b = testing::random_tensor<double>({1, 10}, rng, -5, 5);
    const double v = kl_regularizer(a, b).value;
    REQUIRE(v >= 0.0);
    if (t < 50) REQUIRE(testing::close(v, kl_oracle(a, b), 1e-10, 1e-12));
  }
}

TEST_CASE("loss gradients match central differences") {
  std::mt19937_64 rng(5);
  auto zc = testing::random_tensor<double>({3, 10}, rng, -2, 2);
  auto za = testing::random_tensor<double>({3, 10}, rng, -2, 2);
  const auto y = testing::random_labels(3, rng);
  const auto h = hybrid_loss(zc, za, y, 0.3);
  const auto k = kl_regularizer(zc, za);
  for (std::size_t i = 0; i < zc.size(); ++i) {
    auto hl = [&] { return hybrid_loss(zc, za, y, 0.3).value; };
    auto kl = [&] { return kl_regularizer(zc, za).value; };
    REQUIRE(testing::close(h.grad_clean[i], oracle::central_difference(zc.storage(), i, hl), 1e-6, 1e-3));
    REQUIRE(testing::close(h.grad_adv[i], oracle::central_difference(za.storage(), i, hl), 1e-6, 1e-3));
    REQUIRE(testing::close(k.grad_clean[i], oracle::central_difference(zc.storage(), i, kl), 1e-6, 1e-3));
    REQUIRE(testing::close(k.grad_adv[i], oracle::central_difference(za.storage(), i, kl), 1e-6, 1e-3));
  }
}

TEST_CASE("cross-entropy rejects bad labels and non-finite logits") {
  Tensor<double> z({2, 3}, 0.0);
  CHECK_THROWS(cross_entropy(z, std::vector<int>{0, 3}));
  z[1] = std::nan("");
  CHECK_THROWS(cross_entropy(z, std::vector<int>{0, 1}));
}
