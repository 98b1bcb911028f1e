#include "dualnorm/probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>

#include "dualnorm/errors.hpp"

namespace dualnorm {

std::string_view to_string(DataSource source) {
  switch (source) {
    case DataSource::Clean: return "clean";
    case DataSource::Adv: return "adv";
    case DataSource::Noisy: return "noisy";
  }
  return "?";
}

DataSource parse_data_source(std::string_view text) {
  for (DataSource d : {DataSource::Clean, DataSource::Adv, DataSource::Noisy})
    if (to_string(d) == text) return d;
  throw ConfigError("unknown data source '" + std::string(text) + "'");
}

std::string SnapshotLabel::name() const {
  if (stored) return "NS_" + std::string(to_string(ap));
  return "NS_" + std::string(to_string(data)) + "^" + std::string(to_string(ap));
}

template <typename T>
void StatsSnapshot<T>::check_compatible(const ModelState<T>& model) const {
  if (layers.size() != model.norms.size() || layer_names.size() != model.norms.size()) {
    throw ConfigError("snapshot has " + std::to_string(layers.size()) + " layers, model has " +
                      std::to_string(model.norms.size()));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& layer = model.norms[i];
    if (layer_names[i] != layer.name) {
      throw ConfigError("snapshot layer " + std::to_string(i) + " is '" + layer_names[i] + "', model has '" +
                        layer.name + "'");
    }
    const std::size_t want = layer.state.config.has_running_stats() ? layer.state.channels : 0;
    if (layers[i].mean.size() != want || layers[i].var.size() != want) {
      throw ConfigError("snapshot layer '" + layer.name + "' has " + std::to_string(layers[i].mean.size()) +
                        " channels, expected " + std::to_string(want));
    }
  }
}

namespace {

template <typename T>
StatsSnapshot<T> empty_snapshot(const ModelState<T>& model, SnapshotLabel label, double momentum) {
  StatsSnapshot<T> s;
  s.label = label;
  for (const auto& layer : model.norms) {
    s.layer_names.push_back(layer.name);
    if (layer.state.config.has_running_stats()) {
      s.layers.push_back(NormStats<T>::initial(layer.state.channels, static_cast<T>(momentum)));
    } else {
      s.layers.push_back(NormStats<T>{{}, {}, static_cast<T>(momentum)});
    }
  }
  return s;
}

template <typename T>
double max_relative_change(const std::vector<NormStats<T>>& prev, const std::vector<NormStats<T>>& cur) {
  constexpr double floor = 1e-3;
  double worst = 0.0;
  auto scan = [&](const std::vector<T>& a, const std::vector<T>& b) {
    for (std::size_t c = 0; c < a.size(); ++c) {
      const double d = std::abs(static_cast<double>(b[c]) - static_cast<double>(a[c]));
      worst = std::max(worst, d / std::max(std::abs(static_cast<double>(a[c])), floor));
    }
  };
  for (std::size_t i = 0; i < prev.size(); ++i) {
    scan(prev[i].mean, cur[i].mean);
    scan(prev[i].var, cur[i].var);
  }
  return worst;
}

template <typename T>
Tensor<T> to_type(Tensor<float> x) {
  if constexpr (std::is_same_v<T, float>) {
    return x;
  } else {
    return x.template cast<T>();
  }
}

}  // namespace

template <typename T>
StatsSnapshot<T> stored_snapshot(const ModelState<T>& model, Branch branch) {
  SnapshotLabel label{branch, branch == Branch::Clean ? DataSource::Clean : DataSource::Adv, true};
  StatsSnapshot<T> s = empty_snapshot(model, label, 0.1);
  for (std::size_t i = 0; i < model.norms.size(); ++i) {
    const auto& st = model.norms[i].state;
    if (st.config.has_running_stats()) s.layers[i] = st.stats[select_params(st, branch).stats];
  }
  return s;
}

template <typename T>
StatsSnapshot<T> recalibrate(const ModelState<T>& model, Branch ap_choice, DataSource source, const Dataset& data,
                             const RecalibrationConfig& config, Rng& rng) {
  if (config.max_passes < 0) throw ConfigError("max_passes must be non-negative");
  if (!(config.tol > 0.0)) throw ConfigError("recalibration tol must be positive");
  if (!(config.momentum > 0.0 && config.momentum <= 1.0)) throw ConfigError("recalibration momentum must lie in (0, 1]");
  if (config.batch_size == 0) throw ConfigError("recalibration batch_size must be positive");
  if (source == DataSource::Adv && !config.attack) throw ConfigError("adversarial re-calibration needs an attack config");

  StatsSnapshot<T> snap = empty_snapshot(model, SnapshotLabel{ap_choice, source, false}, config.momentum);
  snap.converged = false;
  if (config.max_passes == 0) return snap;
  if (data.size() == 0) throw PreconditionError("recalibrate: empty dataset");

  // Inputs are fixed once so that passes differ only by accumulation.
  std::vector<Tensor<T>> batches;
  Deployment<T> deployed;
  deployed.branch = ap_choice;
  deployed.affine = ap_choice;
  AttackTarget<T> target;
  target.options = deployed.options();
  target.branch = ap_choice;
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < data.size(); b += config.batch_size) {
    const std::size_t e = std::min(data.size(), b + config.batch_size);
    idx.resize(e - b);
    std::iota(idx.begin(), idx.end(), b);
    Tensor<T> x = to_type<T>(data.gather(idx));
    if (source == DataSource::Adv) {
      const auto y = data.gather_labels(idx);
      x = pgd(model, x, y, target, *config.attack, rng);
    } else if (source == DataSource::Noisy) {
      x = uniform_noise(x, config.noise_magnitude, rng);
    }
    batches.push_back(std::move(x));
  }

  ForwardOptions<T> opt;
  opt.train = true;
  opt.route = StatsRoute::Own;
  opt.affine_branch = ap_choice;
  opt.branch = ap_choice;
  opt.record_backward = false;
  for (int pass = 1; pass <= config.max_passes; ++pass) {
    const auto prev = snap.layers;
    for (const auto& x : batches) {
      opt.segments = {{ap_choice, x.dim(0)}};
      Tape<T> tape = record(model, x, opt);
      for (std::size_t i = 0; i < model.norms.size(); ++i) {
        const auto& moments = tape.moments()[i];
        if (moments.empty()) continue;
        snap.layers[i] = update_running(snap.layers[i], std::span<const T>(moments[0].mean),
                                        std::span<const T>(moments[0].var));
      }
    }
    snap.passes = pass;
    if (pass > 1 && max_relative_change(prev, snap.layers) < config.tol) {
      snap.converged = true;
      break;
    }
  }
  return snap;
}

template <typename T>
EvalResult recombine_eval(const ModelState<T>& model, const StatsSnapshot<T>& ns, Branch ap_choice,
                          const Dataset& test, const AttackConfig& attack, Rng& rng, std::size_t batch_size) {
  ns.check_compatible(model);
  Deployment<T> dep;
  dep.branch = ap_choice;
  dep.affine = ap_choice;
  dep.stats = &ns.layers;
  return evaluate(model, test, dep, attack, rng, batch_size);
}

double wasserstein_1d(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw PreconditionError("wasserstein_1d: lengths " + std::to_string(a.size()) + " and " +
                            std::to_string(b.size()) + " differ");
  }
  if (a.empty()) throw PreconditionError("wasserstein_1d: empty input");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sum += std::abs(x[i] - y[i]);
  return sum / static_cast<double>(x.size());
}

namespace {

template <typename T>
std::vector<double> widen(const std::vector<T>& v, bool root = false) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = root ? std::sqrt(static_cast<double>(v[i])) : v[i];
  return out;
}

}  // namespace

template <typename T>
GapReport gap_report(const StatsSnapshot<T>& left, const StatsSnapshot<T>& right) {
  if (left.layer_names != right.layer_names) throw ConfigError("gap_report: snapshots cover different layers");
  GapReport r{left.label.name(), right.label.name(), {}};
  for (std::size_t i = 0; i < left.layers.size(); ++i) {
    const auto& a = left.layers[i];
    const auto& b = right.layers[i];
    if (a.mean.size() != b.mean.size()) throw ConfigError("gap_report: channel mismatch in " + left.layer_names[i]);
    if (a.mean.empty()) continue;
    GapEntry e;
    e.layer_index = i;
    e.layer_name = left.layer_names[i];
    e.d_mu = wasserstein_1d(widen(a.mean), widen(b.mean));
    e.d_sigma = wasserstein_1d(widen(a.var, true), widen(b.var, true));
    r.entries.push_back(std::move(e));
  }
  return r;
}

template <typename T>
GapReport affine_gap(const ModelState<T>& model, Branch left, Branch right) {
  GapReport r{"AP_" + std::string(to_string(left)), "AP_" + std::string(to_string(right)), {}};
  for (std::size_t i = 0; i < model.norms.size(); ++i) {
    const auto& st = model.norms[i].state;
    auto set = [&](Branch b) -> const AffineParams<T>& {
      return st.affine[st.affine.size() == 1 ? 0 : index_of(b)];
    };
    GapEntry e;
    e.layer_index = i;
    e.layer_name = model.norms[i].name;
    e.d_gamma = wasserstein_1d(widen(set(left).gamma), widen(set(right).gamma));
    e.d_beta = wasserstein_1d(widen(set(left).beta), widen(set(right).beta));
    r.entries.push_back(std::move(e));
  }
  return r;
}

GapReport merge_reports(const GapReport& a, const GapReport& b) {
  std::map<std::size_t, GapEntry> rows;
  for (const auto& e : a.entries) rows[e.layer_index] = e;
  for (const auto& e : b.entries) {
    auto [it, inserted] = rows.try_emplace(e.layer_index, e);
    if (inserted) continue;
    GapEntry& m = it->second;
    if (m.layer_name != e.layer_name) throw ConfigError("merge_reports: layer " + std::to_string(e.layer_index) + " differs");
    if (!m.d_mu) m.d_mu = e.d_mu;
    if (!m.d_sigma) m.d_sigma = e.d_sigma;
    if (!m.d_gamma) m.d_gamma = e.d_gamma;
    if (!m.d_beta) m.d_beta = e.d_beta;
  }
  GapReport out{a.left + " | " + b.left, a.right + " | " + b.right, {}};
  for (auto& [_, e] : rows) out.entries.push_back(std::move(e));
  return out;
}

double layer_median(const GapReport& report, bool stats_fields) {
  std::vector<double> v;
  for (const auto& e : report.entries) {
    if (stats_fields && e.d_mu && e.d_sigma) v.push_back(*e.d_mu + *e.d_sigma);
    if (!stats_fields && e.d_gamma && e.d_beta) v.push_back(*e.d_gamma + *e.d_beta);
  }
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::vector<std::size_t> sample_channels(std::size_t channels, std::size_t k, std::uint64_t seed) {
  if (k > channels) {
    throw PreconditionError("cannot sample " + std::to_string(k) + " of " + std::to_string(channels) + " channels");
  }
  std::vector<std::size_t> idx(channels);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k == channels) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
std::vector<ChannelRow> export_channels(const ModelState<T>& model, std::span<const StatsSnapshot<T>> snapshots,
                                        std::span<const Branch> affine_sets, std::string_view layer_name,
                                        std::size_t k, std::uint64_t seed) {
  const std::size_t li = model.norm_index(layer_name);
  const auto& st = model.norms[li].state;
  for (const auto& s : snapshots) {
    s.check_compatible(model);
    if (s.layers[li].mean.empty()) throw ConfigError("layer '" + std::string(layer_name) + "' has no statistics");
  }
  std::vector<ChannelRow> rows;
  for (std::size_t c : sample_channels(st.channels, k, seed)) {
    for (const auto& s : snapshots) {
      rows.push_back({c, s.label.name(), static_cast<double>(s.layers[li].mean[c]),
                      std::sqrt(static_cast<double>(s.layers[li].var[c])), std::nullopt});
    }
    for (Branch b : affine_sets) {
      const auto& ap = st.affine[st.affine.size() == 1 ? 0 : index_of(b)];
      rows.push_back({c, "AP_" + std::string(to_string(b)), std::nullopt, static_cast<double>(ap.gamma[c]),
                      static_cast<double>(ap.beta[c])});
    }
  }
  return rows;
}

#define DUALNORM_INSTANTIATE(T)                                                                                   \
  template struct StatsSnapshot<T>;                                                                               \
  template StatsSnapshot<T> stored_snapshot<T>(const ModelState<T>&, Branch);                                     \
  template StatsSnapshot<T> recalibrate<T>(const ModelState<T>&, Branch, DataSource, const Dataset&,              \
                                           const RecalibrationConfig&, Rng&);                                     \
  template EvalResult recombine_eval<T>(const ModelState<T>&, const StatsSnapshot<T>&, Branch, const Dataset&,    \
                                        const AttackConfig&, Rng&, std::size_t);                                  \
  template GapReport gap_report<T>(const StatsSnapshot<T>&, const StatsSnapshot<T>&);                             \
  template GapReport affine_gap<T>(const ModelState<T>&, Branch, Branch);                                         \
  template std::vector<ChannelRow> export_channels<T>(const ModelState<T>&, std::span<const StatsSnapshot<T>>,    \
                                                      std::span<const Branch>, std::string_view, std::size_t,     \
                                                      std::uint64_t);

DUALNORM_INSTANTIATE(float)
DUALNORM_INSTANTIATE(double)
#undef DUALNORM_INSTANTIATE

}  // namespace dualnorm
