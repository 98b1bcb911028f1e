#include "dualnorm/norm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dualnorm/errors.hpp"

namespace dualnorm {

std::string_view to_string(Branch b) { return b == Branch::Clean ? "clean" : "adv"; }

Branch parse_branch(std::string_view text) {
  if (text == "clean") return Branch::Clean;
  if (text == "adv") return Branch::Adv;
  throw ConfigError("unknown branch '" + std::string(text) + "' (expected clean or adv)");
}

std::string_view to_string(NormKind kind) {
  switch (kind) {
    case NormKind::Batch: return "bn";
    case NormKind::Layer: return "ln";
    case NormKind::Group: return "gn";
    case NormKind::Instance: return "in";
  }
  return "?";
}

std::string_view to_string(NormMode mode) {
  switch (mode) {
    case NormMode::Single: return "single";
    case NormMode::Dual: return "dual";
    case NormMode::Cross: return "cross";
    case NormMode::DualAPOnly: return "dual_ap_only";
    case NormMode::DualNSOnly: return "dual_ns_only";
  }
  return "?";
}

NormKind parse_norm_kind(std::string_view text) {
  for (auto k : {NormKind::Batch, NormKind::Layer, NormKind::Group, NormKind::Instance})
    if (text == to_string(k)) return k;
  throw ConfigError("unknown norm kind '" + std::string(text) + "' (expected bn, ln, gn or in)");
}

NormMode parse_norm_mode(std::string_view text) {
  for (auto m : {NormMode::Single, NormMode::Dual, NormMode::Cross, NormMode::DualAPOnly, NormMode::DualNSOnly})
    if (text == to_string(m)) return m;
  throw ConfigError("unknown norm mode '" + std::string(text) +
                    "' (expected single, dual, cross, dual_ap_only or dual_ns_only)");
}

void NormConfig::validate(std::size_t channels) const {
  if (!(eps > 0.0)) throw ConfigError("norm eps must be positive");
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("norm momentum must lie in [0, 1]");
  if (channels == 0) throw ConfigError("norm layer needs at least one channel");
  if (kind == NormKind::Group && (group_count == 0 || channels % group_count != 0)) {
    throw ConfigError("group_count " + std::to_string(group_count) + " does not divide channel count " +
                      std::to_string(channels));
  }
  if (kind != NormKind::Batch && (mode == NormMode::Cross || mode == NormMode::DualNSOnly)) {
    throw ConfigError("mode " + std::string(to_string(mode)) + " needs running statistics; " +
                      std::string(to_string(kind)) + " computes per-sample statistics only");
  }
}

std::size_t NormConfig::stats_sets() const {
  if (!has_running_stats()) return 0;
  return (mode == NormMode::Single || mode == NormMode::DualAPOnly) ? 1 : 2;
}

std::size_t NormConfig::affine_sets() const {
  return (mode == NormMode::Single || mode == NormMode::DualNSOnly) ? 1 : 2;
}

template <typename T>
NormLayerState<T> NormLayerState<T>::make(const NormConfig& config, std::size_t channels) {
  config.validate(channels);
  NormLayerState s;
  s.config = config;
  s.channels = channels;
  s.stats.assign(config.stats_sets(), NormStats<T>::initial(channels, static_cast<T>(config.momentum)));
  s.affine.assign(config.affine_sets(), AffineParams<T>::identity(channels));
  return s;
}

template <typename T>
void NormLayerState<T>::validate() const {
  config.validate(channels);
  if (stats.size() != config.stats_sets() || affine.size() != config.affine_sets()) {
    throw ConfigError("norm layer holds " + std::to_string(stats.size()) + " NS / " + std::to_string(affine.size()) +
                      " AP sets; mode " + std::string(to_string(config.mode)) + " needs " +
                      std::to_string(config.stats_sets()) + " / " + std::to_string(config.affine_sets()));
  }
  for (const auto& s : stats) {
    if (s.mean.size() != channels || s.var.size() != channels) throw ConfigError("NS length != channel count");
    if (std::any_of(s.var.begin(), s.var.end(), [](T v) { return v < T{0}; }))
      throw NumericalError("negative running variance");
  }
  for (const auto& a : affine) {
    if (a.gamma.size() != channels || a.beta.size() != channels) throw ConfigError("AP length != channel count");
  }
}

Routing route(NormMode mode, Branch branch) {
  const std::size_t b = index_of(branch);
  switch (mode) {
    case NormMode::Single: return {0, 0};
    case NormMode::Dual: return {b, b};
    case NormMode::Cross: return {index_of(other(branch)), b};
    case NormMode::DualAPOnly: return {0, b};
    case NormMode::DualNSOnly: return {b, 0};
  }
  return {0, 0};
}

std::size_t fed_stats_set(NormMode mode, Branch branch) {
  return (mode == NormMode::Single || mode == NormMode::DualAPOnly) ? 0 : index_of(branch);
}

template <typename T>
Routing select_params(const NormLayerState<T>& state, Branch branch) {
  const Routing r = route(state.config.mode, branch);
  if (state.config.has_running_stats() && r.stats >= state.stats.size()) {
    throw ConfigError("no NS set for branch " + std::string(to_string(branch)) + " in mode " +
                      std::string(to_string(state.config.mode)));
  }
  if (r.affine >= state.affine.size()) {
    throw ConfigError("no AP set for branch " + std::string(to_string(branch)) + " in mode " +
                      std::string(to_string(state.config.mode)));
  }
  return r;
}

namespace {

struct Layout {
  std::size_t batch, channels, spatial;
};

template <typename T>
Layout check_input(const Tensor<T>& x, std::size_t channels) {
  if (x.rank() < 2) throw PreconditionError("normalization input needs shape [batch, channels, ...]");
  if (x.dim(0) == 0) throw PreconditionError("normalization of an empty batch");
  if (x.dim(1) != channels) {
    throw PreconditionError("normalization input has " + std::to_string(x.dim(1)) + " channels, layer has " +
                            std::to_string(channels));
  }
  if (!x.all_finite()) throw NumericalError("non-finite activation entering normalization");
  return {x.dim(0), x.dim(1), x.size() / (x.dim(0) * x.dim(1))};
}

std::size_t resolve_affine(const NormConfig& config, std::size_t sets, Branch branch,
                           std::optional<Branch> explicit_branch) {
  if (!explicit_branch) return route(config.mode, branch).affine;
  const std::size_t id = sets == 1 ? 0 : index_of(*explicit_branch);
  return id;
}

template <typename T>
void forward_batch_kind(const Tensor<T>& x, const Layout& L, const NormLayerState<T>& state,
                        const NormRequest<T>& req, NormForward<T>& f) {
  const std::size_t S = req.segments.size();
  const std::size_t C = L.channels, HW = L.spatial;
  const bool batch_moments = req.train && req.stats_override == nullptr;

  // Moment groups: one per fed NS set (Routed) or one per segment (Own).
  std::vector<std::size_t> group_set;
  f.segment_norm_group.assign(S, -1);
  f.segment_feed_group.assign(S, -1);
  if (batch_moments) {
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t fed = fed_stats_set(state.config.mode, req.segments[s].branch);
      if (req.route == StatsRoute::Own) {
        f.segment_feed_group[s] = static_cast<int>(group_set.size());
        group_set.push_back(fed);
        continue;
      }
      auto it = std::find(group_set.begin(), group_set.end(), fed);
      if (it == group_set.end()) {
        f.segment_feed_group[s] = static_cast<int>(group_set.size());
        group_set.push_back(fed);
      } else {
        f.segment_feed_group[s] = static_cast<int>(it - group_set.begin());
      }
    }
    for (std::size_t s = 0; s < S; ++s) {
      if (req.route == StatsRoute::Own) {
        f.segment_norm_group[s] = f.segment_feed_group[s];
        continue;
      }
      const std::size_t want = select_params(state, req.segments[s].branch).stats;
      auto it = std::find(group_set.begin(), group_set.end(), want);
      if (it == group_set.end()) {
        throw ConfigError("training-mode routing for branch " + std::string(to_string(req.segments[s].branch)) +
                          " in mode " + std::string(to_string(state.config.mode)) +
                          " needs samples of the other branch in the same batch or a stats override");
      }
      f.segment_norm_group[s] = static_cast<int>(it - group_set.begin());
    }
  }
  const std::size_t G = group_set.size();
  f.groups = G;
  std::vector<double> gmean(G * C, 0.0), gvar(G * C, 0.0);
  std::vector<double> gcount(G, 0.0);
  for (std::size_t s = 0; s < S; ++s)
    if (f.segment_feed_group[s] >= 0)
      gcount[static_cast<std::size_t>(f.segment_feed_group[s])] += static_cast<double>(req.segments[s].count * HW);

  const T* xd = x.data();
  if (G > 0) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(C); ++ci) {
      const auto c = static_cast<std::size_t>(ci);
      for (std::size_t s = 0; s < S; ++s) {
        const int g = f.segment_feed_group[s];
        double acc = 0.0;
        for (std::size_t n = f.segment_begin[s]; n < f.segment_begin[s + 1]; ++n) {
          const T* p = xd + (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) acc += p[i];
        }
        gmean[static_cast<std::size_t>(g) * C + c] += acc;
      }
      for (std::size_t g = 0; g < G; ++g) gmean[g * C + c] /= gcount[g];
      for (std::size_t s = 0; s < S; ++s) {
        const auto g = static_cast<std::size_t>(f.segment_feed_group[s]);
        const double m = gmean[g * C + c];
        double acc = 0.0;
        for (std::size_t n = f.segment_begin[s]; n < f.segment_begin[s + 1]; ++n) {
          const T* p = xd + (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            const double d = p[i] - m;
            acc += d * d;
          }
        }
        gvar[g * C + c] += acc;
      }
      for (std::size_t g = 0; g < G; ++g) gvar[g * C + c] /= gcount[g];
    }
    f.group_mean = gmean;
    f.group_count = gcount;
    f.group_inv_std.resize(G * C);
    for (std::size_t i = 0; i < G * C; ++i) f.group_inv_std[i] = 1.0 / std::sqrt(gvar[i] + state.config.eps);
    f.moments.resize(G);
    for (std::size_t g = 0; g < G; ++g) {
      f.moments[g].stats_set = group_set[g];
      f.moments[g].mean.resize(C);
      f.moments[g].var.resize(C);
      for (std::size_t c = 0; c < C; ++c) {
        f.moments[g].mean[c] = static_cast<T>(gmean[g * C + c]);
        f.moments[g].var[c] = static_cast<T>(gvar[g * C + c]);
      }
    }
  }

  // Per-segment (mean, inv_std) actually used.
  std::vector<T> seg_mean(S * C);
  f.segment_inv_std.assign(S * C, T{0});
  for (std::size_t s = 0; s < S; ++s) {
    const NormStats<T>* fixed = nullptr;
    if (!batch_moments) {
      fixed = req.stats_override ? req.stats_override : &state.stats[select_params(state, req.segments[s].branch).stats];
      if (fixed->mean.size() != C || fixed->var.size() != C) throw ConfigError("stats override has wrong channel count");
    }
    for (std::size_t c = 0; c < C; ++c) {
      double m, v;
      if (fixed) {
        m = fixed->mean[c];
        v = fixed->var[c];
      } else {
        const auto g = static_cast<std::size_t>(f.segment_norm_group[s]);
        m = gmean[g * C + c];
        v = gvar[g * C + c];
      }
      if (v < 0.0) throw NumericalError("negative variance in normalization statistics");
      seg_mean[s * C + c] = static_cast<T>(m);
      f.segment_inv_std[s * C + c] = static_cast<T>(1.0 / std::sqrt(v + state.config.eps));
    }
  }

  T* out = f.output.data();
  T* xn = f.normalized.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ni = 0; ni < static_cast<std::ptrdiff_t>(L.batch); ++ni) {
    const auto n = static_cast<std::size_t>(ni);
    const auto s = static_cast<std::size_t>(
        std::upper_bound(f.segment_begin.begin(), f.segment_begin.end(), n) - f.segment_begin.begin() - 1);
    const AffineParams<T>& ap = state.affine[f.segment_affine[s]];
    for (std::size_t c = 0; c < C; ++c) {
      const T m = seg_mean[s * C + c], inv = f.segment_inv_std[s * C + c];
      const T gam = ap.gamma[c], bet = ap.beta[c];
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T h = (xd[off + i] - m) * inv;
        xn[off + i] = h;
        out[off + i] = h * gam + bet;
      }
    }
  }
}

std::size_t groups_per_sample(const NormConfig& config, std::size_t channels) {
  switch (config.kind) {
    case NormKind::Layer: return 1;
    case NormKind::Group: return config.group_count;
    case NormKind::Instance: return channels;
    case NormKind::Batch: break;
  }
  return 0;
}

template <typename T>
void forward_sample_kind(const Tensor<T>& x, const Layout& L, const NormLayerState<T>& state, NormForward<T>& f) {
  const std::size_t C = L.channels, HW = L.spatial;
  const std::size_t G = groups_per_sample(state.config, C);
  const std::size_t cpg = C / G;
  const double M = static_cast<double>(cpg * HW);
  f.sample_inv_std.assign(L.batch * G, T{0});
  f.groups = G;
  const T* xd = x.data();
  T* out = f.output.data();
  T* xn = f.normalized.data();
  const std::size_t S = f.segment_affine.size();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ni = 0; ni < static_cast<std::ptrdiff_t>(L.batch); ++ni) {
    const auto n = static_cast<std::size_t>(ni);
    std::size_t s = 0;
    while (s + 1 < S && n >= f.segment_begin[s + 1]) ++s;
    const AffineParams<T>& ap = state.affine[f.segment_affine[s]];
    for (std::size_t g = 0; g < G; ++g) {
      const std::size_t begin = (n * C + g * cpg) * HW, end = begin + cpg * HW;
      double mean = 0.0;
      for (std::size_t i = begin; i < end; ++i) mean += xd[i];
      mean /= M;
      double var = 0.0;
      for (std::size_t i = begin; i < end; ++i) var += (xd[i] - mean) * (xd[i] - mean);
      var /= M;
      const T inv = static_cast<T>(1.0 / std::sqrt(var + state.config.eps));
      f.sample_inv_std[n * G + g] = inv;
      const T m = static_cast<T>(mean);
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t c = (i / HW) % C;
        const T h = (xd[i] - m) * inv;
        xn[i] = h;
        out[i] = h * ap.gamma[c] + ap.beta[c];
      }
    }
  }
}

}  // namespace

template <typename T>
NormForward<T> normalize_forward(const Tensor<T>& x, const NormLayerState<T>& state, const NormRequest<T>& request) {
  const Layout L = check_input(x, state.channels);
  if (request.segments.empty()) throw PreconditionError("normalization request has no segments");
  if (request.stats_override && !state.config.has_running_stats()) {
    throw ConfigError("stats override given to a " + std::string(to_string(state.config.kind)) + " layer");
  }
  if (request.affine_branch && state.affine.size() == 2) select_params(state, *request.affine_branch);

  NormForward<T> f;
  f.segment_begin.push_back(0);
  for (const auto& seg : request.segments) {
    f.segment_begin.push_back(f.segment_begin.back() + seg.count);
    const std::size_t a = resolve_affine(state.config, state.affine.size(), seg.branch, request.affine_branch);
    if (a >= state.affine.size()) throw ConfigError("AP set out of range for configured mode");
    f.segment_affine.push_back(a);
  }
  if (f.segment_begin.back() != L.batch) {
    throw PreconditionError("segments cover " + std::to_string(f.segment_begin.back()) + " samples, batch has " +
                            std::to_string(L.batch));
  }
  f.input = x;
  f.output = Tensor<T>(x.shape());
  f.normalized = Tensor<T>(x.shape());
  if (state.config.kind == NormKind::Batch) {
    forward_batch_kind(x, L, state, request, f);
  } else {
    f.segment_norm_group.assign(request.segments.size(), -1);
    f.segment_feed_group.assign(request.segments.size(), -1);
    forward_sample_kind(x, L, state, f);
  }
  return f;
}

template <typename T>
NormForward<T> normalize_forward(const Tensor<T>& x, Branch branch, bool train_mode, const NormLayerState<T>& state,
                                 const NormStats<T>* stats_override) {
  const Segment seg{branch, x.rank() > 0 ? x.dim(0) : 0};
  NormRequest<T> req;
  req.segments = std::span<const Segment>(&seg, 1);
  req.train = train_mode;
  req.stats_override = stats_override;
  return normalize_forward(x, state, req);
}

template <typename T>
NormGradients<T> normalize_backward(const NormForward<T>& f, const NormLayerState<T>& state,
                                    const Tensor<T>& grad_output) {
  if (grad_output.shape() != f.input.shape()) throw PreconditionError("normalization gradient shape mismatch");
  const std::size_t N = f.input.dim(0), C = f.input.dim(1), HW = f.input.size() / (N * C);
  const std::size_t S = f.segment_affine.size();
  NormGradients<T> out;
  out.input = Tensor<T>(f.input.shape());
  out.affine.assign(state.affine.size(), AffineParams<T>::zeros(C));
  const T* dy = grad_output.data();
  const T* xh = f.normalized.data();
  const T* xd = f.input.data();
  T* dx = out.input.data();

  // Affine gradients, accumulated per channel in sample order.
  const std::size_t A = state.affine.size();
  std::vector<double> dgam(A * C, 0.0), dbet(A * C, 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(C); ++ci) {
    const auto c = static_cast<std::size_t>(ci);
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t a = f.segment_affine[s];
      double sg = 0.0, sb = 0.0;
      for (std::size_t n = f.segment_begin[s]; n < f.segment_begin[s + 1]; ++n) {
        const std::size_t off = (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          sg += static_cast<double>(dy[off + i]) * xh[off + i];
          sb += dy[off + i];
        }
      }
      dgam[a * C + c] += sg;
      dbet[a * C + c] += sb;
    }
  }
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t c = 0; c < C; ++c) {
      out.affine[a].gamma[c] = static_cast<T>(dgam[a * C + c]);
      out.affine[a].beta[c] = static_cast<T>(dbet[a * C + c]);
    }

  if (state.config.kind == NormKind::Batch) {
    const std::size_t G = f.groups;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(C); ++ci) {
      const auto c = static_cast<std::size_t>(ci);
      std::vector<double> sum_g(G, 0.0), sum_gx(G, 0.0);
      for (std::size_t s = 0; s < S; ++s) {
        const T gam = state.affine[f.segment_affine[s]].gamma[c];
        const T inv = f.segment_inv_std[s * C + c];
        const int q = f.segment_norm_group[s];
        double sg = 0.0, sgx = 0.0;
        for (std::size_t n = f.segment_begin[s]; n < f.segment_begin[s + 1]; ++n) {
          const std::size_t off = (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            const T gh = dy[off + i] * gam;
            dx[off + i] = gh * inv;
            sg += gh;
            sgx += static_cast<double>(gh) * xh[off + i];
          }
        }
        if (q >= 0) {
          sum_g[static_cast<std::size_t>(q)] += sg;
          sum_gx[static_cast<std::size_t>(q)] += sgx;
        }
      }
      if (G == 0) continue;
      for (std::size_t s = 0; s < S; ++s) {
        const int qi = f.segment_feed_group[s];
        if (qi < 0) continue;
        const auto q = static_cast<std::size_t>(qi);
        const double inv = f.group_inv_std[q * C + c];
        const double dmean = -inv * sum_g[q];
        const double dvar = -0.5 * inv * inv * sum_gx[q];
        const double a = dmean / f.group_count[q];
        const double b = 2.0 * dvar / f.group_count[q];
        const double m = f.group_mean[q * C + c];
        for (std::size_t n = f.segment_begin[s]; n < f.segment_begin[s + 1]; ++n) {
          const std::size_t off = (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) dx[off + i] += static_cast<T>(a + b * (xd[off + i] - m));
        }
      }
    }
  } else {
    const std::size_t G = f.groups, cpg = C / G;
    const double M = static_cast<double>(cpg * HW);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ni = 0; ni < static_cast<std::ptrdiff_t>(N); ++ni) {
      const auto n = static_cast<std::size_t>(ni);
      std::size_t s = 0;
      while (s + 1 < S && n >= f.segment_begin[s + 1]) ++s;
      const AffineParams<T>& ap = state.affine[f.segment_affine[s]];
      for (std::size_t g = 0; g < G; ++g) {
        const std::size_t begin = (n * C + g * cpg) * HW, end = begin + cpg * HW;
        double sg = 0.0, sgx = 0.0;
        for (std::size_t i = begin; i < end; ++i) {
          const double gh = static_cast<double>(dy[i]) * ap.gamma[(i / HW) % C];
          sg += gh;
          sgx += gh * xh[i];
        }
        const double inv = f.sample_inv_std[n * G + g];
        for (std::size_t i = begin; i < end; ++i) {
          const double gh = static_cast<double>(dy[i]) * ap.gamma[(i / HW) % C];
          dx[i] = static_cast<T>(inv / M * (M * gh - sg - xh[i] * sgx));
        }
      }
    }
  }
  return out;
}

template <typename T>
NormStats<T> update_running(const NormStats<T>& stats, std::span<const T> batch_mean, std::span<const T> batch_var) {
  if (batch_mean.size() != stats.mean.size() || batch_var.size() != stats.var.size()) {
    throw PreconditionError("update_running: dimension mismatch");
  }
  if (std::any_of(batch_var.begin(), batch_var.end(), [](T v) { return !(v >= T{0}); })) {
    throw NumericalError("update_running: negative or NaN batch variance");
  }
  NormStats<T> out = stats;
  const T m = stats.momentum;
  for (std::size_t c = 0; c < out.mean.size(); ++c) {
    out.mean[c] = (T{1} - m) * stats.mean[c] + m * batch_mean[c];
    out.var[c] = (T{1} - m) * stats.var[c] + m * batch_var[c];
  }
  return out;
}

template <typename T>
void apply_moments(NormLayerState<T>& state, std::span<const BatchMoments<T>> moments) {
  for (const auto& bm : moments) {
    if (bm.stats_set >= state.stats.size()) throw ConfigError("batch moments for a missing NS set");
    state.stats[bm.stats_set] = update_running(state.stats[bm.stats_set], std::span<const T>(bm.mean),
                                               std::span<const T>(bm.var));
  }
}

#define DUALNORM_INSTANTIATE(T)                                                                                     \
  template struct NormLayerState<T>;                                                                                \
  template Routing select_params<T>(const NormLayerState<T>&, Branch);                                              \
  template NormForward<T> normalize_forward<T>(const Tensor<T>&, const NormLayerState<T>&, const NormRequest<T>&);  \
  template NormForward<T> normalize_forward<T>(const Tensor<T>&, Branch, bool, const NormLayerState<T>&,            \
                                               const NormStats<T>*);                                                \
  template NormGradients<T> normalize_backward<T>(const NormForward<T>&, const NormLayerState<T>&,                  \
                                                  const Tensor<T>&);                                                \
  template NormStats<T> update_running<T>(const NormStats<T>&, std::span<const T>, std::span<const T>);             \
  template void apply_moments<T>(NormLayerState<T>&, std::span<const BatchMoments<T>>);

DUALNORM_INSTANTIATE(float)
DUALNORM_INSTANTIATE(double)
#undef DUALNORM_INSTANTIATE

}  // namespace dualnorm
