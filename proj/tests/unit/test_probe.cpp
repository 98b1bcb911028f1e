#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "dualnorm/errors.hpp"
#include "dualnorm/probe.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace dualnorm;

namespace {

std::vector<double> random_values(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 2.0);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

// Per-channel population moments of a 3x3, pad-1, stride-1 convolution.
std::pair<std::vector<double>, std::vector<double>> conv_moments(const Tensor<float>& x, const Tensor<float>& w) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3), cout = w.dim(0);
  std::vector<double> mean(cout, 0.0), var(cout, 0.0);
  std::vector<double> out(n * h * wd);
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < wd; ++c) {
          double s = 0.0;
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t kr = 0; kr < 3; ++kr)
              for (std::size_t kc = 0; kc < 3; ++kc) {
                const long rr = static_cast<long>(r + kr) - 1, cc = static_cast<long>(c + kc) - 1;
                if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(wd)) continue;
                s += static_cast<double>(x[((i * cin + ci) * h + rr) * wd + cc]) *
                     static_cast<double>(w[((o * cin + ci) * 3 + kr) * 3 + kc]);
              }
          out[(i * h + r) * wd + c] = s;
        }
    for (double v : out) mean[o] += v;
    mean[o] /= static_cast<double>(out.size());
    for (double v : out) var[o] += (v - mean[o]) * (v - mean[o]);
    var[o] /= static_cast<double>(out.size());
  }
  return {mean, var};
}

}  // namespace

TEST_CASE("wasserstein examples") {
  const std::vector<double> a{0, 1}, b{1, 2};
  CHECK(wasserstein_1d(a, b) == doctest::Approx(1.0));
  CHECK(wasserstein_1d(a, a) == 0.0);
  const std::vector<double> short_v{1.0};
  CHECK_THROWS(wasserstein_1d(a, short_v));
}

TEST_CASE("wasserstein agrees with the CDF integral and is a metric") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 200; ++t) {
    const auto x = random_values(17, rng), y = random_values(17, rng), z = random_values(17, rng);
    const double xy = wasserstein_1d(x, y);
    REQUIRE(testing::close(xy, oracle::wasserstein_cdf(x, y), 1e-10, 1e-12));
    REQUIRE(xy >= 0.0);
    REQUIRE(xy == doctest::Approx(wasserstein_1d(y, x)).epsilon(1e-14));
    REQUIRE(wasserstein_1d(x, z) <= xy + wasserstein_1d(y, z) + 1e-12);
    auto p = x;
    std::shuffle(p.begin(), p.end(), rng);
    REQUIRE(wasserstein_1d(p, y) == doctest::Approx(xy).epsilon(1e-14));
    auto sorted = x;
    std::sort(sorted.begin(), sorted.end());
    REQUIRE(wasserstein_1d(p, sorted) == 0.0);
  }
}

TEST_CASE("gap of a snapshot with itself is zero") {
  auto m = build_model<float>(testing::tiny_cnn(), testing::bn(NormMode::Dual), 1, 1);
  std::mt19937_64 rng(2);
  for (auto& n : m.norms)
    for (auto& s : n.state.stats)
      for (std::size_t c = 0; c < s.mean.size(); ++c) {
        s.mean[c] = static_cast<float>(random_values(1, rng)[0]);
        s.var[c] = 1.0f + static_cast<float>(c);
      }
  const auto snap = stored_snapshot(m, Branch::Adv);
  const auto r = gap_report(snap, snap);
  REQUIRE(r.entries.size() == m.norms.size());
  for (const auto& e : r.entries) {
    CHECK(*e.d_mu == 0.0);
    CHECK(*e.d_sigma == 0.0);
    CHECK(!e.d_gamma);
  }
  CHECK(r.left == "NS_adv");
}

TEST_CASE("hand-built two-channel gap") {
  NormConfig cfg = testing::bn(NormMode::Dual);
  auto m = build_model<float>(testing::tiny_cnn(8, 0.125), cfg, 1, 1);
  REQUIRE(m.norms[0].state.stats[0].mean.size() == 2);
  auto& st = m.norms[0].state;
  st.stats[0].mean = {0.0f, 1.0f};
  st.stats[0].var = {1.0f, 4.0f};
  st.stats[1].mean = {3.0f, -1.0f};
  st.stats[1].var = {9.0f, 16.0f};
  st.affine[0].gamma = {1.0f, 2.0f};
  st.affine[1].gamma = {2.0f, 4.0f};
  st.affine[0].beta = {0.0f, 0.0f};
  st.affine[1].beta = {0.5f, -0.5f};
  const auto ns = gap_report(stored_snapshot(m, Branch::Clean), stored_snapshot(m, Branch::Adv));
  // sorted pairing: mu {0,1} vs {-1,3}; sigma {1,2} vs {3,4}; gamma {1,2} vs {2,4}; beta {0,0} vs {-.5,.5}
  CHECK(*ns.entries[0].d_mu == doctest::Approx(1.5));
  CHECK(*ns.entries[0].d_sigma == doctest::Approx(2.0));
  const auto ap = affine_gap(m, Branch::Clean, Branch::Adv);
  CHECK(*ap.entries[0].d_gamma == doctest::Approx(1.5));
  CHECK(*ap.entries[0].d_beta == doctest::Approx(0.5));
  const auto merged = merge_reports(ns, ap);
  CHECK(*merged.entries[0].d_mu == doctest::Approx(1.5));
  CHECK(*merged.entries[0].d_beta == doctest::Approx(0.5));
}

TEST_CASE("layer median skips missing fields") {
  GapReport r;
  r.entries.push_back({0, "a", 1.0, 1.0, std::nullopt, std::nullopt});
  r.entries.push_back({1, "b", 3.0, 0.0, 5.0, 1.0});
  r.entries.push_back({2, "c", 0.5, 0.5, 1.0, 1.0});
  CHECK(layer_median(r, true) == doctest::Approx(2.0));
  CHECK(layer_median(r, false) == doctest::Approx(4.0));
  CHECK(std::isnan(layer_median(GapReport{}, true)));
}

TEST_CASE("zero passes return the initialization unconverged") {
  std::mt19937_64 gen(4);
  const auto data = testing::random_dataset(16, 8, gen);
  auto m = build_model<float>(testing::tiny_cnn(), testing::bn(NormMode::Dual), 1, 1);
  RecalibrationConfig cfg;
  cfg.max_passes = 0;
  Rng rng(1);
  const auto s = recalibrate(m, Branch::Adv, DataSource::Clean, data, cfg, rng);
  CHECK(!s.converged);
  CHECK(s.passes == 0);
  for (const auto& l : s.layers) {
    for (float v : l.mean) CHECK(v == 0.0f);
    for (float v : l.var) CHECK(v == 1.0f);
  }
  CHECK(s.label.name() == "NS_clean^adv");
}

TEST_CASE("recalibration leaves the model untouched and tracks batch moments") {
  std::mt19937_64 gen(5);
  const auto data = testing::random_dataset(96, 8, gen);
  auto m = build_model<float>(testing::tiny_cnn(8, 0.5), testing::bn(NormMode::Dual), 1, 2);
  const auto before = m;
  for (DataSource src : {DataSource::Clean, DataSource::Adv, DataSource::Noisy}) {
    RecalibrationConfig cfg;
    cfg.batch_size = 32;
    cfg.attack = AttackConfig{8.0 / 255.0, 2.0 / 255.0, 2, 1, true};
    Rng rng(3);
    const auto s = recalibrate(m, Branch::Clean, src, data, cfg, rng);
    CHECK(m == before);
    CHECK(s.passes >= 1);
    CHECK(s.passes <= cfg.max_passes);
    s.check_compatible(m);
  }

  // First-layer oracle: replay the running average over direct conv moments.
  RecalibrationConfig cfg;
  cfg.batch_size = 8;
  cfg.max_passes = 30;
  Rng rng(3);
  const auto s = recalibrate(m, Branch::Clean, DataSource::Clean, data, cfg, rng);
  const std::size_t channels = m.convs[0].weight.dim(0);
  std::vector<double> mean(channels, 0.0), var(channels, 1.0);
  std::vector<std::pair<std::vector<double>, std::vector<double>>> batch;
  for (std::size_t b = 0; b < data.size(); b += 8) {
    std::vector<std::size_t> idx(8);
    std::iota(idx.begin(), idx.end(), b);
    batch.push_back(conv_moments(data.gather(idx), m.convs[0].weight));
  }
  for (int p = 0; p < s.passes; ++p)
    for (const auto& [bm, bv] : batch)
      for (std::size_t c = 0; c < channels; ++c) {
        mean[c] = 0.9 * mean[c] + 0.1 * bm[c];
        var[c] = 0.9 * var[c] + 0.1 * bv[c];
      }
  CHECK(s.converged);
  for (std::size_t c = 0; c < channels; ++c) {
    CHECK(testing::close(s.layers[0].mean[c], mean[c], 1e-4, 1e-3));
    CHECK(testing::close(s.layers[0].var[c], var[c], 1e-4, 1e-3));
  }
}

TEST_CASE("adversarial recalibration needs an attack") {
  std::mt19937_64 gen(6);
  const auto data = testing::random_dataset(8, 8, gen);
  auto m = build_model<float>(testing::tiny_cnn(), testing::bn(NormMode::Dual), 1, 1);
  Rng rng(1);
  CHECK_THROWS_AS(recalibrate(m, Branch::Adv, DataSource::Adv, data, RecalibrationConfig{}, rng), ConfigError);
}

TEST_CASE("stored statistics with their own affine set reproduce the default deployment") {
  std::mt19937_64 gen(7);
  const auto test = testing::random_dataset(40, 8, gen);
  auto m = build_model<float>(testing::tiny_cnn(8, 0.5), testing::bn(NormMode::Dual), 1, 2);
  for (auto& n : m.norms)
    for (auto& s : n.state.stats)
      for (std::size_t c = 0; c < s.mean.size(); ++c) {
        s.mean[c] = static_cast<float>(0.1 * random_values(1, gen)[0]);
        s.var[c] = 0.5f + 0.1f * static_cast<float>(c % 5);
      }
  const auto snap = stored_snapshot(m, Branch::Adv);
  Deployment<float> def;
  def.branch = Branch::Adv;
  Deployment<float> rec;
  rec.branch = Branch::Adv;
  rec.affine = Branch::Adv;
  rec.stats = &snap.layers;
  const auto& x = test.images;
  CHECK(forward(m, x, def.options()) == forward(m, x, rec.options()));

  const AttackConfig attack{8.0 / 255.0, 2.0 / 255.0, 3, 1, true};
  Rng ra(4), rb(4);
  const auto a = evaluate(m, test, def, attack, ra);
  const auto b = recombine_eval(m, snap, Branch::Adv, test, attack, rb);
  CHECK(a.clean_acc == b.clean_acc);
  CHECK(a.robust_acc == b.robust_acc);

  auto other = build_model<float>(testing::tiny_cnn(8, 0.25), testing::bn(NormMode::Dual), 1, 2);
  Rng rc(1);
  CHECK_THROWS_AS(recombine_eval(other, snap, Branch::Adv, test, attack, rc), ConfigError);
}

TEST_CASE("channel sampling") {
  const auto all = sample_channels(12, 12, 5);
  std::vector<std::size_t> expect(12);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(all == expect);
  const auto a = sample_channels(64, 20, 9);
  CHECK(a == sample_channels(64, 20, 9));
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 20);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(a.back() < 64);
  CHECK_THROWS(sample_channels(8, 9, 1));
}

TEST_CASE("channel export rows") {
  auto m = build_model<float>(testing::tiny_cnn(8, 0.5), testing::bn(NormMode::Dual), 1, 2);
  const auto name = m.norms[1].name;
  const std::size_t channels = m.norms[1].state.affine[0].gamma.size();
  const std::vector<StatsSnapshot<float>> snaps{stored_snapshot(m, Branch::Clean), stored_snapshot(m, Branch::Adv)};
  const std::vector<Branch> aps{Branch::Clean, Branch::Adv};
  const auto rows = export_channels<float>(m, snaps, aps, name, 4, 3);
  CHECK(rows.size() == 4 * 4);
  for (const auto& r : rows) CHECK(r.channel < channels);
  CHECK(rows == export_channels<float>(m, snaps, aps, name, 4, 3));
  CHECK_THROWS_AS(export_channels<float>(m, snaps, aps, "nope", 4, 3), ConfigError);
}
