#include "dualnorm/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "dualnorm/errors.hpp"
#include "dualnorm/kernels.hpp"
#include "dualnorm/loss.hpp"

namespace dualnorm {

std::string_view to_string(ArchKind kind) { return kind == ArchKind::SmallCNN ? "small_cnn" : "resnet18"; }

ArchKind parse_arch(std::string_view text) {
  if (text == "small_cnn") return ArchKind::SmallCNN;
  if (text == "resnet18") return ArchKind::ResNet18;
  throw ConfigError("unknown architecture '" + std::string(text) + "' (expected small_cnn or resnet18)");
}

std::vector<std::size_t> Architecture::stage_widths() const {
  if (!(width > 0.0)) throw ConfigError("width multiplier must be positive");
  const std::vector<std::size_t> base =
      kind == ArchKind::SmallCNN ? std::vector<std::size_t>{16, 32, 64, 128} : std::vector<std::size_t>{64, 128, 256, 512};
  std::vector<std::size_t> out;
  for (auto b : base) out.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(b * width))));
  return out;
}

template <typename T>
std::size_t ModelState<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& c : convs) total += c.weight.size();
  for (const auto& n : norms)
    for (const auto& a : n.state.affine) total += a.gamma.size() + a.beta.size();
  for (const auto& h : heads) total += h.weight.size() + h.bias.size();
  return total;
}

template <typename T>
std::size_t ModelState<T>::norm_index(std::string_view name) const {
  for (std::size_t i = 0; i < norms.size(); ++i)
    if (norms[i].name == name) return i;
  throw ConfigError("unknown norm layer '" + std::string(name) + "'");
}

template <typename T>
template <typename U>
ModelState<U> ModelState<T>::cast() const {
  ModelState<U> out;
  out.arch = arch;
  out.norm = norm;
  for (const auto& c : convs) out.convs.push_back({c.name, c.weight.template cast<U>(), c.stride, c.pad});
  for (const auto& n : norms) {
    NormLayer<U> m;
    m.name = n.name;
    m.state.config = n.state.config;
    m.state.channels = n.state.channels;
    for (const auto& s : n.state.stats) {
      m.state.stats.push_back({std::vector<U>(s.mean.begin(), s.mean.end()), std::vector<U>(s.var.begin(), s.var.end()),
                               static_cast<U>(s.momentum)});
    }
    for (const auto& a : n.state.affine) {
      m.state.affine.push_back(
          {std::vector<U>(a.gamma.begin(), a.gamma.end()), std::vector<U>(a.beta.begin(), a.beta.end())});
    }
    out.norms.push_back(std::move(m));
  }
  for (const auto& h : heads) out.heads.push_back({h.name, h.weight.template cast<U>(), h.bias.template cast<U>()});
  return out;
}

namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
struct Builder {
  ModelState<T>& m;
  std::mt19937_64& rng;

  void conv(std::string name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    m.convs.push_back({std::move(name), uniform_tensor<T>({out, in, k, k}, bound, rng), stride, pad});
  }
  void norm(std::string name, std::size_t channels) {
    m.norms.push_back({std::move(name), NormLayerState<T>::make(m.norm, channels)});
  }
};

}  // namespace

template <typename T>
ModelState<T> build_model(const Architecture& arch, const NormConfig& norm, std::size_t heads, std::uint64_t seed) {
  if (heads != 1 && heads != 2) throw ConfigError("head count must be 1 or 2");
  if (arch.classes < 2) throw ConfigError("need at least two classes");
  if (arch.image_size % 8 != 0) throw ConfigError("image size must be a multiple of 8");
  ModelState<T> m;
  m.arch = arch;
  m.norm = norm;
  std::mt19937_64 rng(seed);
  Builder<T> b{m, rng};
  const auto w = arch.stage_widths();
  std::size_t features = 0;
  if (arch.kind == ArchKind::SmallCNN) {
    std::size_t in = 3;
    for (std::size_t i = 0; i < 4; ++i) {
      b.conv("conv" + std::to_string(i + 1), in, w[i], 3, 1, 1);
      b.norm("norm" + std::to_string(i + 1), w[i]);
      in = w[i];
    }
    features = w[3];
  } else {
    b.conv("conv1", 3, w[0], 3, 1, 1);
    b.norm("norm1", w[0]);
    std::size_t in = w[0];
    for (std::size_t stage = 0; stage < 4; ++stage) {
      for (std::size_t blk = 0; blk < 2; ++blk) {
        const std::size_t stride = (stage > 0 && blk == 0) ? 2 : 1;
        const std::size_t out = w[stage];
        const std::string p = "layer" + std::to_string(stage + 1) + "." + std::to_string(blk) + ".";
        b.conv(p + "conv1", in, out, 3, stride, 1);
        b.norm(p + "norm1", out);
        b.conv(p + "conv2", out, out, 3, 1, 1);
        b.norm(p + "norm2", out);
        if (stride != 1 || in != out) {
          b.conv(p + "shortcut.conv", in, out, 1, stride, 0);
          b.norm(p + "shortcut.norm", out);
        }
        in = out;
      }
    }
    features = w[3];
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(features));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string name = heads == 1 ? "head" : (h == 0 ? "head.clean" : "head.adv");
    auto weight = uniform_tensor<T>({arch.classes, features}, bound, rng);
    auto bias = uniform_tensor<T>({arch.classes}, bound, rng);
    m.heads.push_back({name, std::move(weight), std::move(bias)});
  }
  return m;
}

template <typename T>
ModelGradients<T> ModelGradients<T>::zeros_like(const ModelState<T>& model) {
  ModelGradients g;
  for (const auto& c : model.convs) g.convs.emplace_back(c.weight.shape());
  for (const auto& n : model.norms) {
    std::vector<AffineParams<T>> sets;
    for (std::size_t i = 0; i < n.state.affine.size(); ++i) sets.push_back(AffineParams<T>::zeros(n.state.channels));
    g.norms.push_back(std::move(sets));
  }
  for (const auto& h : model.heads) {
    g.head_weights.emplace_back(h.weight.shape());
    g.head_biases.emplace_back(h.bias.shape());
  }
  return g;
}

template <typename T>
std::vector<ParamView<T>> parameter_views(ModelState<T>& model, ModelGradients<T>& grads) {
  std::vector<ParamView<T>> views;
  for (std::size_t i = 0; i < model.convs.size(); ++i) {
    views.push_back({model.convs[i].name + ".weight", model.convs[i].weight.values(), grads.convs[i].values()});
  }
  for (std::size_t i = 0; i < model.norms.size(); ++i) {
    auto& layer = model.norms[i];
    const bool two = layer.state.affine.size() == 2;
    for (std::size_t a = 0; a < layer.state.affine.size(); ++a) {
      const std::string suffix = two ? "." + std::string(to_string(static_cast<Branch>(a))) : "";
      views.push_back({layer.name + ".gamma" + suffix, layer.state.affine[a].gamma, grads.norms[i][a].gamma});
      views.push_back({layer.name + ".beta" + suffix, layer.state.affine[a].beta, grads.norms[i][a].beta});
    }
  }
  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    views.push_back({model.heads[h].name + ".weight", model.heads[h].weight.values(), grads.head_weights[h].values()});
    views.push_back({model.heads[h].name + ".bias", model.heads[h].bias.values(), grads.head_biases[h].values()});
  }
  return views;
}

template <typename T>
void BackwardContext<T>::accumulate(std::size_t id, Tensor<T> g) {
  if (grads[id].empty()) {
    grads[id] = std::move(g);
    return;
  }
  auto& dst = grads[id].storage();
  const auto& src = g.storage();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
std::size_t Tape<T>::push(Tensor<T> value, BackwardFn fn) {
  values_.push_back(std::move(value));
  fns_.push_back(std::move(fn));
  return values_.size() - 1;
}

namespace {

// One forward program per architecture, written against these ops.
template <typename T>
struct Program {
  const ModelState<T>& m;
  Tape<T>& tape;
  const ForwardOptions<T>& opt;
  std::vector<Segment> segments;
  bool grad;
  std::size_t next_conv = 0;
  std::size_t next_norm = 0;

  std::size_t conv(std::size_t x) {
    const std::size_t idx = next_conv++;
    const auto& layer = m.convs[idx];
    const Tensor<T>& in = tape.value(x);
    kernels::ConvGeometry g{in.dim(0), in.dim(1), in.dim(2), in.dim(3), layer.weight.dim(0), layer.weight.dim(2),
                            layer.stride, layer.pad};
    if (in.dim(1) != layer.weight.dim(1)) throw PreconditionError("conv input channels mismatch at " + layer.name);
    Tensor<T> out({g.batch, g.out_channels, g.out_height(), g.out_width()});
    kernels::conv2d_forward<T>(g, in.values(), layer.weight.values(), out.values());
    typename Tape<T>::BackwardFn fn;
    if (grad) {
      fn = [x, idx, g](const Tensor<T>& dy, BackwardContext<T>& ctx) {
        const auto& weight = ctx.tape->model().convs[idx].weight;
        if (ctx.params) {
          kernels::conv2d_backward_weight<T>(g, ctx.tape->value(x).values(), dy.values(),
                                             ctx.params->convs[idx].values());
        }
        Tensor<T> dx({g.batch, g.in_channels, g.height, g.width});
        kernels::conv2d_backward_input<T>(g, dy.values(), weight.values(), dx.values());
        ctx.accumulate(x, std::move(dx));
      };
    }
    return tape.push(std::move(out), std::move(fn));
  }

  std::size_t norm(std::size_t x) {
    const std::size_t idx = next_norm++;
    const auto& layer = m.norms[idx];
    NormRequest<T> req;
    req.segments = segments;
    req.train = opt.train;
    req.affine_branch = opt.affine_branch;
    req.route = opt.route;
    if (opt.stats_overrides) {
      if (opt.stats_overrides->size() != m.norms.size()) {
        throw ConfigError("stats overrides cover " + std::to_string(opt.stats_overrides->size()) +
                          " layers, model has " + std::to_string(m.norms.size()));
      }
      if (layer.state.config.has_running_stats()) req.stats_override = &(*opt.stats_overrides)[idx];
    }
    auto f = std::make_shared<NormForward<T>>(normalize_forward(tape.value(x), layer.state, req));
    tape.moments()[idx] = std::move(f->moments);
    Tensor<T> out = std::move(f->output);
    typename Tape<T>::BackwardFn fn;
    if (grad) {
      fn = [x, idx, f](const Tensor<T>& dy, BackwardContext<T>& ctx) {
        auto g = normalize_backward(*f, ctx.tape->model().norms[idx].state, dy);
        if (ctx.params) {
          auto& dst = ctx.params->norms[idx];
          for (std::size_t a = 0; a < dst.size(); ++a) {
            for (std::size_t c = 0; c < dst[a].gamma.size(); ++c) {
              dst[a].gamma[c] += g.affine[a].gamma[c];
              dst[a].beta[c] += g.affine[a].beta[c];
            }
          }
        }
        ctx.accumulate(x, std::move(g.input));
      };
    }
    return tape.push(std::move(out), std::move(fn));
  }

  std::size_t relu(std::size_t x) {
    Tensor<T> out = tape.value(x);
    for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
    typename Tape<T>::BackwardFn fn;
    const std::size_t self = tape.size();
    if (grad) {
      fn = [x, self](const Tensor<T>& dy, BackwardContext<T>& ctx) {
        const auto& y = ctx.tape->value(self);
        Tensor<T> dx(dy.shape());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = y[i] > T{0} ? dy[i] : T{0};
        ctx.accumulate(x, std::move(dx));
      };
    }
    return tape.push(std::move(out), std::move(fn));
  }

  std::size_t maxpool(std::size_t x) {
    const Tensor<T>& in = tape.value(x);
    const std::size_t n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
    Tensor<T> out({n, c, h / 2, w / 2});
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
    kernels::maxpool2_forward<T>(n * c, h, w, in.values(), out.values(), *argmax);
    typename Tape<T>::BackwardFn fn;
    if (grad) {
      const Shape in_shape = in.shape();
      fn = [x, argmax, in_shape](const Tensor<T>& dy, BackwardContext<T>& ctx) {
        Tensor<T> dx(in_shape);
        kernels::maxpool2_backward<T>(dy.values(), *argmax, dx.values());
        ctx.accumulate(x, std::move(dx));
      };
    }
    return tape.push(std::move(out), std::move(fn));
  }

  std::size_t add(std::size_t a, std::size_t b) {
    Tensor<T> out = tape.value(a);
    const auto& other = tape.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += other[i];
    typename Tape<T>::BackwardFn fn;
    if (grad) {
      fn = [a, b](const Tensor<T>& dy, BackwardContext<T>& ctx) {
        ctx.accumulate(a, dy);
        ctx.accumulate(b, dy);
      };
    }
    return tape.push(std::move(out), std::move(fn));
  }

  std::size_t global_avg_pool(std::size_t x) {
    const Tensor<T>& in = tape.value(x);
    const std::size_t n = in.dim(0), c = in.dim(1), hw = in.size() / (n * c);
    Tensor<T> out({n, c});
    for (std::size_t i = 0; i < n * c; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < hw; ++j) s += in[i * hw + j];
      out[i] = static_cast<T>(s / static_cast<double>(hw));
    }
    typename Tape<T>::BackwardFn fn;
    if (grad) {
      const Shape in_shape = in.shape();
      fn = [x, in_shape, hw](const Tensor<T>& dy, BackwardContext<T>& ctx) {
        Tensor<T> dx(in_shape);
        const T scale = T{1} / static_cast<T>(hw);
        for (std::size_t i = 0; i < dy.size(); ++i)
          for (std::size_t j = 0; j < hw; ++j) dx[i * hw + j] = dy[i] * scale;
        ctx.accumulate(x, std::move(dx));
      };
    }
    return tape.push(std::move(out), std::move(fn));
  }

  std::size_t head_for(Branch segment_branch) const {
    if (opt.head == HeadSelect::Default) return m.heads.size() == 1 ? 0 : index_of(segment_branch);
    if (m.heads.size() == 1) throw ConfigError("second classifier head requested on a single-head model");
    return opt.head == HeadSelect::Clean ? 0 : 1;
  }

  std::size_t heads(std::size_t x) {
    const Tensor<T>& in = tape.value(x);
    const std::size_t n = in.dim(0), f = in.dim(1), k = m.arch.classes;
    Tensor<T> out({n, k});
    std::vector<std::size_t> head_of(n);
    std::size_t row = 0;
    for (const auto& seg : segments) {
      const std::size_t h = head_for(seg.branch);
      for (std::size_t i = 0; i < seg.count; ++i) head_of[row++] = h;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& head = m.heads[head_of[i]];
      for (std::size_t o = 0; o < k; ++o) {
        T s = head.bias[o];
        for (std::size_t j = 0; j < f; ++j) s += head.weight[o * f + j] * in[i * f + j];
        out[i * k + o] = s;
      }
    }
    typename Tape<T>::BackwardFn fn;
    if (grad) {
      fn = [x, head_of, f, k](const Tensor<T>& dy, BackwardContext<T>& ctx) {
        const auto& model = ctx.tape->model();
        const auto& in = ctx.tape->value(x);
        const std::size_t n = dy.dim(0);
        Tensor<T> dx({n, f});
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t h = head_of[i];
          const auto& w = model.heads[h].weight;
          for (std::size_t o = 0; o < k; ++o) {
            const T g = dy[i * k + o];
            for (std::size_t j = 0; j < f; ++j) dx[i * f + j] += g * w[o * f + j];
            if (ctx.params) {
              auto& gw = ctx.params->head_weights[h];
              for (std::size_t j = 0; j < f; ++j) gw[o * f + j] += g * in[i * f + j];
              ctx.params->head_biases[h][o] += g;
            }
          }
        }
        ctx.accumulate(x, std::move(dx));
      };
    }
    return tape.push(std::move(out), std::move(fn));
  }

  void drop(std::size_t id) {
    if (!grad) tape.release(id);
  }

  // conv -> norm -> relu, releasing intermediates in inference mode.
  std::size_t conv_norm_relu(std::size_t x, bool release_input) {
    std::size_t c = conv(x);
    if (release_input) drop(x);
    std::size_t n = norm(c);
    drop(c);
    std::size_t r = relu(n);
    drop(n);
    return r;
  }

  std::size_t small_cnn(std::size_t x) {
    std::size_t h = x;
    for (int stage = 0; stage < 4; ++stage) {
      h = conv_norm_relu(h, stage > 0);
      if (stage < 3) {
        std::size_t p = maxpool(h);
        drop(h);
        h = p;
      }
    }
    std::size_t g = global_avg_pool(h);
    drop(h);
    return heads(g);
  }

  std::size_t resnet18(std::size_t x) {
    std::size_t h = conv_norm_relu(x, false);
    const auto w = m.arch.stage_widths();
    std::size_t in = w[0];
    for (std::size_t stage = 0; stage < 4; ++stage) {
      for (std::size_t blk = 0; blk < 2; ++blk) {
        const std::size_t stride = (stage > 0 && blk == 0) ? 2 : 1;
        const std::size_t out = w[stage];
        std::size_t a = conv_norm_relu(h, false);
        std::size_t c2 = conv(a);
        drop(a);
        std::size_t n2 = norm(c2);
        drop(c2);
        std::size_t shortcut = h;
        if (stride != 1 || in != out) {
          std::size_t sc = conv(h);
          shortcut = norm(sc);
          drop(sc);
        }
        std::size_t sum = add(n2, shortcut);
        drop(n2);
        if (shortcut != h) drop(shortcut);
        drop(h);
        std::size_t r = relu(sum);
        drop(sum);
        h = r;
        in = out;
      }
    }
    std::size_t g = global_avg_pool(h);
    drop(h);
    return heads(g);
  }
};

}  // namespace

template <typename T>
Tape<T> record(const ModelState<T>& model, const Tensor<T>& batch, const ForwardOptions<T>& options) {
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != model.arch.image_size ||
      batch.dim(3) != model.arch.image_size) {
    throw PreconditionError("batch shape " + shape_string(batch.shape()) + " does not match architecture input [N,3," +
                            std::to_string(model.arch.image_size) + "," + std::to_string(model.arch.image_size) + "]");
  }
  if (batch.dim(0) == 0) throw PreconditionError("empty batch");
  Tape<T> tape(model);
  Program<T> prog{model, tape, options, options.segments, options.record_backward};
  if (prog.segments.empty()) prog.segments.push_back({options.branch, batch.dim(0)});
  std::size_t x = tape.push(batch, nullptr);
  if (model.arch.kind == ArchKind::SmallCNN) {
    prog.small_cnn(x);
  } else {
    prog.resnet18(x);
  }
  return tape;
}

template <typename T>
Tensor<T> forward(const ModelState<T>& model, const Tensor<T>& batch, const ForwardOptions<T>& options) {
  ForwardOptions<T> opt = options;
  opt.record_backward = false;
  Tape<T> tape = record(model, batch, opt);
  return tape.logits();
}

template <typename T>
Backward<T> backpropagate(const Tape<T>& tape, const Tensor<T>& grad_logits, bool with_params) {
  if (grad_logits.shape() != tape.logits().shape()) throw PreconditionError("grad_logits shape mismatch");
  Backward<T> out;
  if (with_params) out.params = ModelGradients<T>::zeros_like(tape.model());
  BackwardContext<T> ctx;
  ctx.tape = &tape;
  ctx.params = with_params ? &out.params : nullptr;
  ctx.grads.resize(tape.size());
  ctx.grads.back() = grad_logits;
  const auto& fns = tape.backward_fns();
  for (std::size_t id = tape.size(); id-- > 1;) {
    if (ctx.grads[id].empty()) continue;
    if (!fns[id]) throw PreconditionError("tape was recorded without backward support");
    fns[id](ctx.grads[id], ctx);
    ctx.grads[id] = Tensor<T>();
  }
  out.input = std::move(ctx.grads[0]);
  if (out.input.empty()) out.input = Tensor<T>(tape.value(0).shape());
  if (!out.input.all_finite()) throw NumericalError("non-finite input gradient");
  return out;
}

template <typename T>
void apply_running_updates(ModelState<T>& model, const Tape<T>& tape) {
  for (std::size_t i = 0; i < model.norms.size(); ++i) {
    apply_moments(model.norms[i].state, std::span<const BatchMoments<T>>(tape.moments()[i]));
  }
}

template <typename T>
std::vector<NormStats<T>> captured_stats(const ModelState<T>& model, const Tape<T>& tape, Branch branch) {
  std::vector<NormStats<T>> out;
  for (std::size_t i = 0; i < model.norms.size(); ++i) {
    const auto& layer = model.norms[i];
    NormStats<T> s = NormStats<T>::initial(layer.state.channels, static_cast<T>(layer.state.config.momentum));
    if (layer.state.config.has_running_stats()) {
      const std::size_t want = fed_stats_set(layer.state.config.mode, branch);
      bool found = false;
      for (const auto& bm : tape.moments()[i]) {
        if (bm.stats_set == want) {
          s.mean = bm.mean;
          s.var = bm.var;
          found = true;
          break;
        }
      }
      if (!found) throw ConfigError("no batch moments captured for layer " + layer.name);
    }
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
Tensor<T> input_gradient(const ModelState<T>& model, const Tensor<T>& batch, std::span<const int> labels,
                         const ForwardOptions<T>& options) {
  ForwardOptions<T> opt = options;
  opt.record_backward = true;
  Tape<T> tape = record(model, batch, opt);
  auto loss = cross_entropy(tape.logits(), labels);
  return backpropagate(tape, loss.grad, false).input;
}

#define DUALNORM_INSTANTIATE(T)                                                                                   \
  template struct ModelState<T>;                                                                                  \
  template struct ModelGradients<T>;                                                                              \
  template struct BackwardContext<T>;                                                                             \
  template class Tape<T>;                                                                                         \
  template ModelState<T> build_model<T>(const Architecture&, const NormConfig&, std::size_t, std::uint64_t);      \
  template std::vector<ParamView<T>> parameter_views<T>(ModelState<T>&, ModelGradients<T>&);                      \
  template Tape<T> record<T>(const ModelState<T>&, const Tensor<T>&, const ForwardOptions<T>&);                   \
  template Tensor<T> forward<T>(const ModelState<T>&, const Tensor<T>&, const ForwardOptions<T>&);                \
  template Backward<T> backpropagate<T>(const Tape<T>&, const Tensor<T>&, bool);                                  \
  template void apply_running_updates<T>(ModelState<T>&, const Tape<T>&);                                         \
  template std::vector<NormStats<T>> captured_stats<T>(const ModelState<T>&, const Tape<T>&, Branch);             \
  template Tensor<T> input_gradient<T>(const ModelState<T>&, const Tensor<T>&, std::span<const int>,              \
                                       const ForwardOptions<T>&);

DUALNORM_INSTANTIATE(float)
DUALNORM_INSTANTIATE(double)
#undef DUALNORM_INSTANTIATE

template ModelState<double> ModelState<float>::cast<double>() const;
template ModelState<float> ModelState<double>::cast<float>() const;
template ModelState<float> ModelState<float>::cast<float>() const;
template ModelState<double> ModelState<double>::cast<double>() const;

}  // namespace dualnorm
