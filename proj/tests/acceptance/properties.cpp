#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "dualnorm/attacks.hpp"
#include "dualnorm/loss.hpp"
#include "dualnorm/probe.hpp"
#include "dualnorm/train.hpp"
#include "harness.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

namespace acceptance {

using namespace dualnorm;

namespace {

constexpr NormMode kModes[] = {NormMode::Single, NormMode::Dual, NormMode::Cross, NormMode::DualAPOnly,
                               NormMode::DualNSOnly};

// Counts checks and keeps the first failure.
struct Tally {
  std::size_t checks = 0;
  std::size_t failures = 0;
  std::string first;
  double worst = 0.0;  // largest relative error seen, when tracked

  void expect(bool ok, const std::string& what) {
    ++checks;
    if (!ok && failures++ == 0) first = what;
  }
  // Relative error in the |a - b| / max(|a|, |b|, floor) form.
  void near(double a, double b, double tol, double floor, const std::string& what) {
    const double rel = std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
    worst = std::max(worst, std::isfinite(rel) ? rel : INFINITY);
    std::ostringstream os;
    os << what << ": " << a << " vs " << b;
    expect(rel <= tol, os.str());
  }
  Outcome outcome(const std::string& summary) const {
    std::ostringstream os;
    os << summary << "; " << checks << " checks";
    if (worst > 0.0) os << ", max rel err " << worst;
    if (failures) os << "; " << failures << " failed, first: " << first;
    return {failures == 0 && checks > 0, os.str()};
  }
};

NormLayerState<double> random_state(NormConfig cfg, std::size_t channels, std::mt19937_64& rng) {
  auto st = NormLayerState<double>::make(cfg, channels);
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(0.5, 2.0);
  for (auto& a : st.affine)
    for (std::size_t c = 0; c < channels; ++c) {
      a.gamma[c] = pos(rng);
      a.beta[c] = u(rng);
    }
  for (auto& s : st.stats)
    for (std::size_t c = 0; c < channels; ++c) {
      s.mean[c] = u(rng);
      s.var[c] = pos(rng);
    }
  return st;
}

Outcome oracle_equivalence() {
  Tally t;
  std::mt19937_64 rng(101);
  for (NormKind kind : {NormKind::Batch, NormKind::Layer, NormKind::Group, NormKind::Instance}) {
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 2 + trial % 4, c = 4 + 2 * (trial % 3), s = 1 + trial % 7;
      // Cross needs both branches in a training batch; its routing is covered in eval mode.
      const NormMode train_modes[] = {NormMode::Single, NormMode::Dual, NormMode::DualAPOnly, NormMode::DualNSOnly};
      const NormMode mode = kind == NormKind::Batch ? train_modes[trial % 4] : NormMode::Single;
      NormConfig cfg{kind, mode, 1e-5, 0.1, kind == NormKind::Group ? 2u : 1u};
      auto st = random_state(cfg, c, rng);
      auto x = testing::random_tensor<double>({n, c, s}, rng, -3.0, 3.0);
      const Branch b = trial % 2 ? Branch::Adv : Branch::Clean;
      const Routing r = select_params(st, b);
      const auto& ap = st.affine[r.affine];
      const auto f = normalize_forward(x, b, true, st);
      const auto y = oracle::normalize(x.storage(), n, c, s, kind, cfg.group_count, ap.gamma, ap.beta, cfg.eps);
      for (std::size_t i = 0; i < y.size(); ++i)
        t.near(f.output[i], y[i], 1e-6, 1.0, std::string(to_string(kind)) + " train output");

      if (kind == NormKind::Batch) {
        // Eval mode: fixed running statistics of the routed NS set.
        NormConfig ecfg = cfg;
        ecfg.mode = kModes[trial % 5];
        const auto est = random_state(ecfg, c, rng);
        const Routing er = select_params(est, b);
        const auto& ns = est.stats[er.stats];
        const auto& eap = est.affine[er.affine];
        const auto e = normalize_forward(x, b, false, est);
        for (std::size_t i = 0; i < x.size(); ++i) {
          const std::size_t ch = (i / s) % c;
          const double want = (x[i] - ns.mean[ch]) / std::sqrt(ns.var[ch] + cfg.eps) * eap.gamma[ch] + eap.beta[ch];
          t.near(e.output[i], want, 1e-6, 1.0, "batch eval output");
        }
      }
    }
  }
  return t.outcome("4 kinds x 100 random tensors vs scalar-loop oracle, tol 1e-6");
}

double mean_ce(const ModelState<double>& m, const Tensor<double>& x, const std::vector<int>& y,
               const ForwardOptions<double>& opt) {
  return cross_entropy(forward(m, x, opt), y).value;
}

Outcome gradients() {
  Tally t;
  std::mt19937_64 rng(202);
  const double tol = 1e-4, floor = 1e-2;

  // Normalization layer alone: input, gamma, beta.
  const std::vector<Segment> mixed{{Branch::Clean, 3}, {Branch::Adv, 2}};
  for (NormKind kind : {NormKind::Batch, NormKind::Layer, NormKind::Group, NormKind::Instance})
    for (NormMode mode : kModes) {
      NormConfig cfg{kind, mode, 1e-5, 0.1, 2};
      try {
        cfg.validate(4);
      } catch (const std::exception&) {
        continue;
      }
      auto st = random_state(cfg, 4, rng);
      auto x = testing::random_tensor<double>({5, 4, 3}, rng, -2.0, 2.0);
      auto w = testing::random_tensor<double>({5, 4, 3}, rng);
      NormRequest<double> req{mixed, true, nullptr, std::nullopt, StatsRoute::Routed};
      auto loss = [&] {
        const auto f = normalize_forward(x, st, req);
        double l = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) l += w[i] * f.output[i];
        return l;
      };
      const auto f = normalize_forward(x, st, req);
      const auto g = normalize_backward(f, st, w);
      const std::string tag = std::string(to_string(kind)) + "/" + std::string(to_string(mode));
      for (std::size_t i = 0; i < x.size(); ++i)
        t.near(g.input[i], oracle::central_difference(x.storage(), i, loss), tol, floor, tag + " input");
      for (std::size_t a = 0; a < st.affine.size(); ++a)
        for (std::size_t ch = 0; ch < 4; ++ch) {
          t.near(g.affine[a].gamma[ch], oracle::central_difference(st.affine[a].gamma, ch, loss), tol, floor,
                 tag + " gamma");
          t.near(g.affine[a].beta[ch], oracle::central_difference(st.affine[a].beta, ch, loss), tol, floor,
                 tag + " beta");
        }
    }

  // Whole network: conv weights, affine sets and heads through the tape, plus
  // input pixels.
  for (NormMode mode : {NormMode::Single, NormMode::Dual, NormMode::Cross, NormMode::DualAPOnly}) {
    auto m = build_model<double>(testing::tiny_cnn(8, 0.25), testing::bn(mode), 1, 9);
    auto x = testing::random_tensor<double>({6, 3, 8, 8}, rng, 0.0, 1.0);
    const auto y = testing::random_labels(6, rng);
    ForwardOptions<double> opt;
    opt.train = true;
    opt.segments = {{Branch::Clean, 3}, {Branch::Adv, 3}};
    const Tape<double> tape = record(m, x, opt);
    const auto ce = cross_entropy(tape.logits(), y);
    auto back = backpropagate(tape, ce.grad, true);
    auto views = parameter_views(m, back.params);
    std::uniform_int_distribution<std::size_t> pick(0, 1u << 30);
    for (auto& v : views)
      for (int s = 0; s < 3; ++s) {
        const std::size_t j = pick(rng) % v.value.size();
        const double keep = v.value[j];
        v.value[j] = keep + 1e-6;
        const double up = mean_ce(m, x, y, opt);
        v.value[j] = keep - 1e-6;
        const double down = mean_ce(m, x, y, opt);
        v.value[j] = keep;
        t.near(v.grad[j], (up - down) / 2e-6, tol, floor, std::string(to_string(mode)) + " " + v.name);
      }
    for (int s = 0; s < 8; ++s) {
      const std::size_t i = pick(rng) % x.size();
      t.near(back.input[i], oracle::central_difference(x.storage(), i, [&] { return mean_ce(m, x, y, opt); }), tol,
             floor, std::string(to_string(mode)) + " input pixel");
    }
  }
  return t.outcome("central differences h=1e-6 in double, tol 1e-4");
}

Outcome attack_invariants() {
  Tally t;
  std::mt19937_64 gen(303);
  const auto model = build_model<float>(testing::tiny_cnn(8, 0.5), testing::bn(NormMode::Dual), 1, 4);
  const auto x = testing::random_tensor<float>({10000, 3, 8, 8}, gen, 0.0, 1.0);
  const auto y = testing::random_labels(10000, gen);
  const auto target = eval_target<float>(Branch::Adv);
  for (double eps : {2.0 / 255.0, 8.0 / 255.0}) {
    const AttackConfig cfg{eps, eps / 4.0, 5, 1, true};
    Rng rng(7);
    const auto adv = pgd(model, x, y, target, cfg, rng);
    t.expect(adv.shape() == x.shape(), "shape");
    double worst = 0.0;
    bool in_range = true;
    for (std::size_t i = 0; i < adv.size(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(adv[i]) - static_cast<double>(x[i])));
      in_range = in_range && adv[i] >= 0.0f && adv[i] <= 1.0f;
    }
    // Float rounding slack at the box edge.
    t.expect(worst <= eps + 1e-6, "linf budget exceeded: " + std::to_string(worst));
    t.expect(in_range, "pixel range");
  }

  // FGSM identity on a double model: one full step without random start gives,
  // per sample, the FGSM point when it raises the loss, else the input.
  {
    const auto m = build_model<double>(testing::tiny_cnn(8, 0.5), testing::bn(NormMode::Dual), 1, 5);
    const auto xd = testing::random_tensor<double>({64, 3, 8, 8}, gen, 0.0, 1.0);
    const auto yd = testing::random_labels(64, gen);
    const auto td = eval_target<double>(Branch::Adv);
    const AttackConfig cfg{8.0 / 255.0, 8.0 / 255.0, 1, 1, false};
    Rng rng(1);
    const auto adv = pgd(m, xd, yd, td, cfg, rng);
    const auto g = input_gradient(m, xd, yd, td.options);
    Tensor<double> fgsm = xd;
    for (std::size_t i = 0; i < fgsm.size(); ++i) {
      const double s = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
      fgsm[i] = std::clamp(xd[i] + cfg.epsilon * s, 0.0, 1.0);
    }
    const auto l0 = cross_entropy(forward(m, xd, td.options), yd).per_sample;
    const auto l1 = cross_entropy(forward(m, fgsm, td.options), yd).per_sample;
    const std::size_t per = xd.size() / xd.dim(0);
    std::size_t moved = 0;
    for (std::size_t n = 0; n < xd.dim(0); ++n) {
      const Tensor<double>& want = l1[n] > l0[n] ? fgsm : xd;
      moved += l1[n] > l0[n];
      bool same = true;
      for (std::size_t i = n * per; i < (n + 1) * per; ++i) same = same && adv[i] == want[i];
      t.expect(same, "FGSM identity, sample " + std::to_string(n));
    }
    t.expect(moved > 0, "FGSM never raised the loss");
  }

  // Determinism by seed.
  {
    const AttackConfig cfg{8.0 / 255.0, 2.0 / 255.0, 3, 2, true};
    std::vector<std::size_t> idx(256);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const Dataset d{x, y};
    const auto xs = d.gather(idx);
    const auto ys = d.gather_labels(idx);
    Rng a(9), b(9), c(10);
    const auto xa = pgd(model, xs, ys, target, cfg, a);
    t.expect(xa == pgd(model, xs, ys, target, cfg, b), "same seed, different points");
    t.expect(xa != pgd(model, xs, ys, target, cfg, c), "different seeds, same points");
  }
  return t.outcome("10^4 samples at two budgets, FGSM identity on 64 samples, seed determinism");
}

Outcome routing_isolation() {
  Tally t;
  const Routing expected[5][2] = {
      {{0, 0}, {0, 0}}, {{0, 0}, {1, 1}}, {{1, 0}, {0, 1}}, {{0, 0}, {0, 1}}, {{0, 0}, {1, 0}},
  };
  const std::size_t fed[5][2] = {{0, 0}, {0, 1}, {0, 1}, {0, 0}, {0, 1}};
  for (std::size_t m = 0; m < 5; ++m)
    for (Branch b : {Branch::Clean, Branch::Adv}) {
      const std::string tag = std::string(to_string(kModes[m])) + "/" + std::string(to_string(b));
      t.expect(route(kModes[m], b) == expected[m][index_of(b)], "route " + tag);
      t.expect(fed_stats_set(kModes[m], b) == fed[m][index_of(b)], "fed set " + tag);
    }

  std::mt19937_64 gen(404);
  const auto x = testing::random_tensor<float>({8, 3, 8, 8}, gen, 0.0, 1.0);
  const auto y = testing::random_labels(8, gen);
  const AttackConfig attack{8.0 / 255.0, 2.0 / 255.0, 3, 1, true};
  OptimConfig optim;
  optim.weight_decay = 0.0;

  // Dual: the clean NS set is untouched by the adversarial data and the clean
  // AP set gets no gradient from the adversarial loss.
  {
    const auto init = build_model<float>(testing::tiny_cnn(8, 0.5), testing::bn(NormMode::Dual), 1, 3);
    RegimeConfig rc;
    auto a = init, b = init;
    SgdState<float> sa, sb;
    AttackConfig stronger = attack;
    stronger.steps = 6;
    Rng ra(3), rb(4);
    train_step(a, x, y, rc, attack, sa, optim, 0.1, ra);
    train_step(b, x, y, rc, stronger, sb, optim, 0.1, rb);
    for (std::size_t i = 0; i < init.norms.size(); ++i) {
      t.expect(a.norms[i].state.stats[0] == b.norms[i].state.stats[0], "clean NS depends on the attack");
      t.expect(a.norms[i].state.stats[1] != b.norms[i].state.stats[1], "adv NS ignores the attack");
    }
    rc.alpha = 0.0;  // adversarial loss only
    auto c = init;
    SgdState<float> sc;
    Rng rc_rng(5);
    train_step(c, x, y, rc, attack, sc, optim, 0.1, rc_rng);
    for (std::size_t i = 0; i < init.norms.size(); ++i) {
      t.expect(c.norms[i].state.affine[0] == init.norms[i].state.affine[0], "clean AP moved under adv loss");
      t.expect(c.norms[i].state.affine[1] != init.norms[i].state.affine[1], "adv AP frozen under adv loss");
    }
  }

  // Cross-AT: the clean forward contributes statistics but no gradient.
  {
    const auto init = build_model<float>(testing::tiny_cnn(8, 0.5), testing::bn(NormMode::Single), 1, 3);
    RegimeConfig rc;
    rc.regime = Regime::CrossAt;
    rc.loss_scale = 0.0;
    auto m = init;
    SgdState<float> sgd;
    Rng rng(2);
    train_step(m, x, y, rc, attack, sgd, optim, 0.1, rng);
    t.expect(testing::same_parameters(m, init), "cross_at parameters moved with the adversarial loss zeroed");
    auto clean_only = init;
    ForwardOptions<float> opt;
    opt.train = true;
    opt.branch = Branch::Clean;
    opt.record_backward = false;
    apply_running_updates(clean_only, record(clean_only, x, opt));
    t.expect(testing::same_running(m, clean_only), "cross_at running stats differ from a clean-only update");
  }
  return t.outcome("routing table over 5 modes, dual NS/AP isolation, cross_at clean forward");
}

Outcome wasserstein() {
  Tally t;
  std::mt19937_64 rng(505);
  std::normal_distribution<double> g(0.0, 2.0);
  auto draw = [&] {
    std::vector<double> v(17);
    for (auto& x : v) x = g(rng);
    return v;
  };
  for (int trial = 0; trial < 200; ++trial) {
    const auto x = draw(), y = draw(), z = draw();
    const double xy = wasserstein_1d(x, y);
    t.expect(wasserstein_1d(x, x) == 0.0, "identity");
    t.expect(xy > 0.0, "positivity");
    t.expect(xy == wasserstein_1d(y, x), "symmetry");
    t.expect(wasserstein_1d(x, z) <= xy + wasserstein_1d(y, z) + 1e-12, "triangle");
    t.near(xy, oracle::wasserstein_cdf(x, y), 1e-10, 1e-12, "CDF integral");
  }
  struct Example {
    std::vector<double> a, b;
    double want;
  };
  const Example examples[] = {
      {{0.0}, {1.0}, 1.0},
      {{0.0, 1.0}, {1.0, 2.0}, 1.0},
      {{3.0, 1.0}, {1.0, 3.0}, 0.0},
      {{0.0, 0.0, 1.0, 1.0}, {0.0, 1.0, 1.0, 1.0}, 0.25},
      {{-1.0, 2.0}, {0.5, 0.0}, 1.25},
  };
  for (const auto& e : examples) t.expect(wasserstein_1d(e.a, e.b) == e.want, "hand example");
  return t.outcome("200 random triples, 5 hand examples");
}

}  // namespace

std::vector<Criterion> property_criteria() {
  return {
      {"P1", "normalization matches the scalar-loop oracle", oracle_equivalence},
      {"P2", "analytic gradients match central differences", gradients},
      {"P3", "attack invariants", attack_invariants},
      {"P4", "routing and branch isolation", routing_isolation},
      {"P5", "1-Wasserstein metric", wasserstein},
  };
}

}  // namespace acceptance
