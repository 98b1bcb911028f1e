#include "dualnorm/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dualnorm/errors.hpp"

namespace dualnorm {

namespace pt = boost::property_tree;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

double parse_number(std::string_view text, std::string_view key) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty()) {
    throw ConfigError("invalid number '" + t + "'" + (key.empty() ? "" : " for " + std::string(key)));
  }
  return v;
}

std::size_t parse_count(std::string_view text, std::string_view key) {
  const double v = parse_number(text, key);
  if (v < 0 || v != std::floor(v)) throw ConfigError(std::string(key) + " must be a non-negative integer");
  return static_cast<std::size_t>(v);
}

bool parse_bool(std::string_view text, std::string_view key) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw ConfigError("invalid boolean '" + t + "' for " + std::string(key));
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::stringstream ss{std::string(text)};
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "," : "") + items[i];
  return s;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

void add_attack_keys(std::map<std::string, Setter>& t, const std::string& section,
                     AttackConfig TrainConfig::*member) {
  t[section + ".epsilon"] = [=](ExperimentConfig& c, const std::string& v) { (c.train.*member).epsilon = parse_real(v); };
  t[section + ".step_size"] = [=](ExperimentConfig& c, const std::string& v) {
    (c.train.*member).step_size = parse_real(v);
  };
  t[section + ".steps"] = [=](ExperimentConfig& c, const std::string& v) {
    (c.train.*member).steps = static_cast<int>(parse_count(v, section + ".steps"));
  };
  t[section + ".restarts"] = [=](ExperimentConfig& c, const std::string& v) {
    (c.train.*member).restarts = static_cast<int>(parse_count(v, section + ".restarts"));
  };
  t[section + ".random_init"] = [=](ExperimentConfig& c, const std::string& v) {
    (c.train.*member).random_init = parse_bool(v, section + ".random_init");
  };
}

const std::map<std::string, Setter>& key_table() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["experiment.preset"] = [](ExperimentConfig& c, const std::string& v) { c.preset = trim(v); };
    t["experiment.regime"] = [](ExperimentConfig& c, const std::string& v) {
      c.train.regime.regime = parse_regime(trim(v));
    };
    t["experiment.seed"] = [](ExperimentConfig& c, const std::string& v) {
      c.train.seed = parse_count(v, "experiment.seed");
    };
    t["experiment.output_dir"] = [](ExperimentConfig& c, const std::string& v) { c.output_dir = trim(v); };
    t["experiment.data_root"] = [](ExperimentConfig& c, const std::string& v) {
      const std::string s = trim(v);
      if (s.empty()) {
        c.data_root.reset();
      } else {
        c.data_root = s;
      }
    };
    t["experiment.train_subset"] = [](ExperimentConfig& c, const std::string& v) {
      c.train_subset = parse_count(v, "experiment.train_subset");
    };
    t["experiment.test_subset"] = [](ExperimentConfig& c, const std::string& v) {
      c.test_subset = parse_count(v, "experiment.test_subset");
    };
    t["model.arch"] = [](ExperimentConfig& c, const std::string& v) { c.train.arch.kind = parse_arch(trim(v)); };
    t["model.width"] = [](ExperimentConfig& c, const std::string& v) { c.train.arch.width = parse_real(v); };
    t["model.classes"] = [](ExperimentConfig& c, const std::string& v) {
      c.train.arch.classes = parse_count(v, "model.classes");
    };
    t["norm.kind"] = [](ExperimentConfig& c, const std::string& v) { c.train.norm.kind = parse_norm_kind(trim(v)); };
    t["norm.mode"] = [](ExperimentConfig& c, const std::string& v) { c.train.norm.mode = parse_norm_mode(trim(v)); };
    t["norm.eps"] = [](ExperimentConfig& c, const std::string& v) { c.train.norm.eps = parse_real(v); };
    t["norm.momentum"] = [](ExperimentConfig& c, const std::string& v) { c.train.norm.momentum = parse_real(v); };
    t["norm.group_count"] = [](ExperimentConfig& c, const std::string& v) {
      c.train.norm.group_count = parse_count(v, "norm.group_count");
    };
    t["regime.alpha"] = [](ExperimentConfig& c, const std::string& v) { c.train.regime.alpha = parse_real(v); };
    t["regime.kl_weight"] = [](ExperimentConfig& c, const std::string& v) { c.train.regime.kl_weight = parse_real(v); };
    t["optim.epochs"] = [](ExperimentConfig& c, const std::string& v) {
      c.train.optim.epochs = static_cast<int>(parse_count(v, "optim.epochs"));
    };
    t["optim.lr"] = [](ExperimentConfig& c, const std::string& v) { c.train.optim.lr = parse_real(v); };
    t["optim.decay"] = [](ExperimentConfig& c, const std::string& v) { c.train.optim.decay = parse_real(v); };
    t["optim.decay_epochs"] = [](ExperimentConfig& c, const std::string& v) {
      c.train.optim.decay_epochs.clear();
      for (const auto& e : split_list(v))
        c.train.optim.decay_epochs.push_back(static_cast<int>(parse_count(e, "optim.decay_epochs")));
    };
    t["optim.weight_decay"] = [](ExperimentConfig& c, const std::string& v) {
      c.train.optim.weight_decay = parse_real(v);
    };
    t["optim.momentum"] = [](ExperimentConfig& c, const std::string& v) { c.train.optim.momentum = parse_real(v); };
    t["optim.batch_size"] = [](ExperimentConfig& c, const std::string& v) {
      c.train.optim.batch_size = parse_count(v, "optim.batch_size");
    };
    add_attack_keys(t, "train_attack", &TrainConfig::train_attack);
    add_attack_keys(t, "eval_attack", &TrainConfig::eval_attack);
    t["eval.branches"] = [](ExperimentConfig& c, const std::string& v) {
      c.train.eval_branches.clear();
      for (const auto& b : split_list(v)) c.train.eval_branches.push_back(parse_branch(b));
    };
    t["eval.every"] = [](ExperimentConfig& c, const std::string& v) {
      c.train.eval_every = static_cast<int>(parse_count(v, "eval.every"));
    };
    t["eval.size"] = [](ExperimentConfig& c, const std::string& v) { c.train.eval_size = parse_count(v, "eval.size"); };
    return t;
  }();
  return table;
}

NormMode default_mode(const RegimeConfig& r) {
  if (auto m = r.required_mode()) return *m;
  return r.regime == Regime::Hybrid ? NormMode::Dual : NormMode::Single;
}

ExperimentConfig resolve(const std::vector<std::pair<std::string, std::string>>& entries) {
  const auto& table = key_table();
  std::string preset = "desk";
  for (const auto& [k, v] : entries) {
    if (!table.count(k)) throw ConfigError("unknown config key '" + k + "'");
    if (k == "experiment.preset") preset = trim(v);
  }
  ExperimentConfig c = preset_config(preset);
  bool mode_set = false;
  for (const auto& [k, v] : entries) {
    table.at(k)(c, v);
    mode_set = mode_set || k == "norm.mode";
  }
  if (!mode_set) c.train.norm.mode = default_mode(c.train.regime);
  c.validate();
  return c;
}

void flatten(const pt::ptree& tree, const ConfigOverrides& overrides,
             std::vector<std::pair<std::string, std::string>>& out) {
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("config key '" + section + "' must sit inside a section");
    for (const auto& [key, value] : body) out.emplace_back(section + "." + key, value.data());
  }
  for (const auto& [k, v] : overrides) out.emplace_back(k, v);
}

}  // namespace

double parse_real(std::string_view text) {
  const std::string t = trim(text);
  const auto slash = t.find('/');
  if (slash == std::string::npos) return parse_number(t, "");
  const double num = parse_number(std::string_view(t).substr(0, slash), "");
  const double den = parse_number(std::string_view(t).substr(slash + 1), "");
  if (den == 0.0) throw ConfigError("zero denominator in '" + t + "'");
  return num / den;
}

ExperimentConfig preset_config(std::string_view name) {
  ExperimentConfig c;
  c.preset = std::string(name);
  TrainConfig& t = c.train;
  if (name == "paper") {
    t.arch = {ArchKind::ResNet18, 1.0, 10, 32};
    t.optim = OptimConfig{};
    t.train_attack = {8.0 / 255.0, 2.0 / 255.0, 10, 1, true};
    t.eval_attack = {8.0 / 255.0, 2.0 / 255.0, 10, 1, true};
    t.eval_every = 1;
  } else if (name == "desk") {
    t.arch = {ArchKind::SmallCNN, 1.0, 10, 32};
    t.optim.epochs = 30;
    t.optim.decay_epochs = {27, 29};
    t.train_attack = {8.0 / 255.0, 2.0 / 255.0, 5, 1, true};
    t.eval_attack = {8.0 / 255.0, 2.0 / 255.0, 20, 3, true};
    t.eval_every = 0;
    c.train_subset = 10000;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected paper or desk)");
  }
  t.norm.mode = default_mode(t.regime);
  return c;
}

void ExperimentConfig::validate() const {
  train.optim.validate();
  train.train_attack.validate();
  train.eval_attack.validate();
  if (!(train.arch.width > 0.0)) throw ConfigError("model.width must be positive");
  if (train.arch.classes < 2) throw ConfigError("model.classes must be at least 2");
  if (!(train.norm.eps > 0.0)) throw ConfigError("norm.eps must be positive");
  if (train.eval_branches.empty()) throw ConfigError("eval.branches must name at least one branch");
  train.regime.validate(train.norm, train.regime.required_heads());
  if (train.regime.regime == Regime::DualLinear && train.norm.mode != NormMode::Single) {
    throw ConfigError("dual_linear needs norm mode single");
  }
  // GN group divisibility and LN/GN/IN routing limits are checked per layer
  for (std::size_t w : train.arch.stage_widths()) train.norm.validate(w);
}

std::string ExperimentConfig::to_ini() const {
  std::ostringstream os;
  std::vector<std::string> branches;
  for (Branch b : train.eval_branches) branches.emplace_back(to_string(b));
  std::vector<std::string> decays;
  for (int e : train.optim.decay_epochs) decays.push_back(std::to_string(e));
  auto attack = [&](const char* name, const AttackConfig& a) {
    os << "[" << name << "]\n"
       << "epsilon = " << fmt(a.epsilon) << "\nstep_size = " << fmt(a.step_size) << "\nsteps = " << a.steps
       << "\nrestarts = " << a.restarts << "\nrandom_init = " << (a.random_init ? "true" : "false") << "\n\n";
  };
  os << "[experiment]\npreset = " << preset << "\nregime = " << to_string(train.regime.regime)
     << "\nseed = " << train.seed << "\noutput_dir = " << output_dir.string()
     << "\ndata_root = " << (data_root ? data_root->string() : "") << "\ntrain_subset = " << train_subset
     << "\ntest_subset = " << test_subset << "\n\n";
  os << "[model]\narch = " << to_string(train.arch.kind) << "\nwidth = " << fmt(train.arch.width)
     << "\nclasses = " << train.arch.classes << "\n\n";
  os << "[norm]\nkind = " << to_string(train.norm.kind) << "\nmode = " << to_string(train.norm.mode)
     << "\neps = " << fmt(train.norm.eps) << "\nmomentum = " << fmt(train.norm.momentum)
     << "\ngroup_count = " << train.norm.group_count << "\n\n";
  os << "[regime]\nalpha = " << fmt(train.regime.alpha) << "\nkl_weight = " << fmt(train.regime.kl_weight) << "\n\n";
  os << "[optim]\nepochs = " << train.optim.epochs << "\nlr = " << fmt(train.optim.lr)
     << "\ndecay = " << fmt(train.optim.decay) << "\ndecay_epochs = " << join(decays)
     << "\nweight_decay = " << fmt(train.optim.weight_decay) << "\nmomentum = " << fmt(train.optim.momentum)
     << "\nbatch_size = " << train.optim.batch_size << "\n\n";
  attack("train_attack", train.train_attack);
  attack("eval_attack", train.eval_attack);
  os << "[eval]\nbranches = " << join(branches) << "\nevery = " << train.eval_every << "\nsize = " << train.eval_size
     << "\n";
  return os.str();
}

ExperimentConfig parse_config(std::string_view ini_text, const ConfigOverrides& overrides) {
  pt::ptree tree;
  std::istringstream in{std::string(ini_text)};
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  std::vector<std::pair<std::string, std::string>> entries;
  flatten(tree, overrides, entries);
  return resolve(entries);
}

ExperimentConfig load_config(const std::optional<std::filesystem::path>& file, const ConfigOverrides& overrides) {
  if (!file) return parse_config("", overrides);
  std::ifstream in(*file);
  if (!in) throw ConfigError("cannot read config " + file->string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

}  // namespace dualnorm
