#include "dualnorm/checkpoint.hpp"

#include <string>

#include "archive.hpp"
#include "dualnorm/errors.hpp"

namespace dualnorm {

namespace {

using nlohmann::json;

std::string set_label(std::size_t sets, std::size_t i) {
  if (sets == 1) return "shared";
  return std::string(to_string(static_cast<Branch>(i)));
}

archive::Blob blob(std::string name, const Shape& shape, const std::vector<float>& data) {
  return {std::move(name), shape, data};
}

void restore(const archive::Archive& a, const std::string& name, std::vector<float>& dst, const Shape& shape) {
  const auto& b = a.find(name);
  if (b.shape != shape) {
    throw FormatError("tensor '" + name + "' has shape " + shape_string(b.shape) + ", model expects " +
                      shape_string(shape));
  }
  dst = b.data;
}

json norm_json(const NormConfig& n) {
  return {{"kind", to_string(n.kind)},
          {"mode", to_string(n.mode)},
          {"eps", n.eps},
          {"momentum", n.momentum},
          {"group_count", n.group_count}};
}

NormConfig norm_from(const json& j) {
  NormConfig n;
  n.kind = parse_norm_kind(j.at("kind").get<std::string>());
  n.mode = parse_norm_mode(j.at("mode").get<std::string>());
  n.eps = j.at("eps").get<double>();
  n.momentum = j.at("momentum").get<double>();
  n.group_count = j.at("group_count").get<std::size_t>();
  return n;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelState<float>& model, const CheckpointMeta& meta) {
  archive::Archive a;
  a.kind = "checkpoint";
  a.meta = {{"config", meta.config_echo},
            {"epoch", meta.epoch},
            {"seed", meta.seed},
            {"arch",
             {{"kind", to_string(model.arch.kind)},
              {"width", model.arch.width},
              {"classes", model.arch.classes},
              {"image_size", model.arch.image_size}}},
            {"norm", norm_json(model.norm)},
            {"heads", model.heads.size()}};
  json layers = json::array();
  for (const auto& c : model.convs) {
    layers.push_back({{"name", c.name}, {"type", "conv"}});
    a.blobs.push_back(blob(c.name + ".weight", c.weight.shape(), c.weight.storage()));
  }
  for (const auto& n : model.norms) {
    layers.push_back({{"name", n.name}, {"type", "norm"}, {"channels", n.state.channels}});
    const Shape s{n.state.channels};
    for (std::size_t i = 0; i < n.state.affine.size(); ++i) {
      const std::string tag = set_label(n.state.affine.size(), i);
      a.blobs.push_back(blob(n.name + ".gamma." + tag, s, n.state.affine[i].gamma));
      a.blobs.push_back(blob(n.name + ".beta." + tag, s, n.state.affine[i].beta));
    }
    for (std::size_t i = 0; i < n.state.stats.size(); ++i) {
      const std::string tag = set_label(n.state.stats.size(), i);
      a.blobs.push_back(blob(n.name + ".running_mean." + tag, s, n.state.stats[i].mean));
      a.blobs.push_back(blob(n.name + ".running_var." + tag, s, n.state.stats[i].var));
    }
  }
  for (const auto& h : model.heads) {
    layers.push_back({{"name", h.name}, {"type", "linear"}});
    a.blobs.push_back(blob(h.name + ".weight", h.weight.shape(), h.weight.storage()));
    a.blobs.push_back(blob(h.name + ".bias", h.bias.shape(), h.bias.storage()));
  }
  a.meta["layers"] = std::move(layers);
  archive::write(path, a);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const archive::Archive a = archive::read(path, "checkpoint");
  LoadedCheckpoint out;
  try {
    const json& m = a.meta;
    Architecture arch;
    arch.kind = parse_arch(m.at("arch").at("kind").get<std::string>());
    arch.width = m.at("arch").at("width").get<double>();
    arch.classes = m.at("arch").at("classes").get<std::size_t>();
    arch.image_size = m.at("arch").at("image_size").get<std::size_t>();
    out.model = build_model<float>(arch, norm_from(m.at("norm")), m.at("heads").get<std::size_t>(), 0);
    out.meta.config_echo = m.at("config").get<std::string>();
    out.meta.epoch = m.at("epoch").get<int>();
    out.meta.seed = m.at("seed").get<std::uint64_t>();
    const std::size_t expected = out.model.convs.size() + out.model.norms.size() + out.model.heads.size();
    if (m.at("layers").size() != expected) {
      throw FormatError(path.string() + ": manifest lists " + std::to_string(m.at("layers").size()) +
                        " layers, architecture has " + std::to_string(expected));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed checkpoint manifest: " + e.what());
  }

  auto& model = out.model;
  for (auto& c : model.convs) restore(a, c.name + ".weight", c.weight.storage(), c.weight.shape());
  for (auto& n : model.norms) {
    const Shape s{n.state.channels};
    for (std::size_t i = 0; i < n.state.affine.size(); ++i) {
      const std::string tag = set_label(n.state.affine.size(), i);
      restore(a, n.name + ".gamma." + tag, n.state.affine[i].gamma, s);
      restore(a, n.name + ".beta." + tag, n.state.affine[i].beta, s);
    }
    for (std::size_t i = 0; i < n.state.stats.size(); ++i) {
      const std::string tag = set_label(n.state.stats.size(), i);
      restore(a, n.name + ".running_mean." + tag, n.state.stats[i].mean, s);
      restore(a, n.name + ".running_var." + tag, n.state.stats[i].var, s);
    }
    n.state.validate();
  }
  for (auto& h : model.heads) {
    restore(a, h.name + ".weight", h.weight.storage(), h.weight.shape());
    restore(a, h.name + ".bias", h.bias.storage(), h.bias.shape());
  }
  return out;
}

void save_snapshot(const std::filesystem::path& path, const StatsSnapshot<float>& snapshot,
                   const std::string& config_echo) {
  archive::Archive a;
  a.kind = "stats";
  a.meta = {{"config", config_echo},
            {"label", snapshot.label.name()},
            {"ap", to_string(snapshot.label.ap)},
            {"data", to_string(snapshot.label.data)},
            {"stored", snapshot.label.stored},
            {"passes", snapshot.passes},
            {"converged", snapshot.converged},
            {"layers", snapshot.layer_names}};
  for (std::size_t i = 0; i < snapshot.layers.size(); ++i) {
    const auto& s = snapshot.layers[i];
    const Shape shape{s.mean.size()};
    a.blobs.push_back(blob(snapshot.layer_names[i] + ".mean", shape, s.mean));
    a.blobs.push_back(blob(snapshot.layer_names[i] + ".var", shape, s.var));
  }
  archive::write(path, a);
}

StatsSnapshot<float> load_snapshot(const std::filesystem::path& path) {
  const archive::Archive a = archive::read(path, "stats");
  StatsSnapshot<float> s;
  try {
    s.label.ap = parse_branch(a.meta.at("ap").get<std::string>());
    s.label.data = parse_data_source(a.meta.at("data").get<std::string>());
    s.label.stored = a.meta.at("stored").get<bool>();
    s.passes = a.meta.at("passes").get<int>();
    s.converged = a.meta.at("converged").get<bool>();
    s.layer_names = a.meta.at("layers").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed statistics manifest: " + e.what());
  }
  for (const auto& name : s.layer_names) {
    NormStats<float> st;
    st.mean = a.find(name + ".mean").data;
    st.var = a.find(name + ".var").data;
    if (st.mean.size() != st.var.size()) throw FormatError(path.string() + ": layer '" + name + "' mean/var differ");
    s.layers.push_back(std::move(st));
  }
  return s;
}

}  // namespace dualnorm
