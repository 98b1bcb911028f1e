#include "dualnorm/cli.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dualnorm/checkpoint.hpp"
#include "dualnorm/errors.hpp"
#include "dualnorm/synthetic.hpp"

namespace dualnorm {

namespace fs = std::filesystem;

namespace {

std::ofstream open_csv(const fs::path& path, const std::string& echo) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  std::istringstream lines(echo);
  std::string line;
  while (std::getline(lines, line)) out << "# " << line << '\n';
  out << std::setprecision(10);
  return out;
}

void put(std::ostream& os, const std::optional<double>& v) {
  if (v) os << *v;
}

void finish_file(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) throw FormatError("short write to " + path.string());
}

HeadSelect parse_head(const std::string& s) {
  if (s == "default") return HeadSelect::Default;
  if (s == "clean") return HeadSelect::Clean;
  if (s == "adv") return HeadSelect::Adv;
  throw ConfigError("unknown head '" + s + "' (expected default, clean or adv)");
}

ConfigOverrides parse_sets(const std::vector<std::string>& sets) {
  ConfigOverrides o;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
    o[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return o;
}

// "stored:clean", "stored:adv", or a statistics file.
StatsSnapshot<float> resolve_ns(const ModelState<float>& model, const std::string& spec) {
  if (spec.rfind("stored:", 0) == 0) return stored_snapshot(model, parse_branch(spec.substr(7)));
  return load_snapshot(spec);
}

struct Common {
  std::optional<std::string> config_file;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_file, "INI config file");
    app->add_option("--set", sets, "override as section.key=value (repeatable)");
  }
  ExperimentConfig load() const {
    return load_config(config_file ? std::optional<fs::path>(*config_file) : std::nullopt, parse_sets(sets));
  }
};

void print_eval(const std::string& what, const EvalResult& r) {
  std::cout << std::fixed << std::setprecision(4) << what << " clean_acc=" << r.clean_acc
            << " robust_acc=" << r.robust_acc << " n=" << r.count << '\n';
}

}  // namespace

void write_metrics_csv(const fs::path& path, std::span<const EpochMetrics> rows, const std::string& echo) {
  auto out = open_csv(path, echo);
  out << "epoch,regime,branch,clean_acc,pgd_acc,loss,lr\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << to_string(r.regime) << ',' << to_string(r.branch) << ',' << r.clean_acc << ','
        << r.pgd_acc << ',' << r.loss << ',' << r.lr << '\n';
  }
  finish_file(out, path);
}

void write_gap_csv(const fs::path& path, const GapReport& report, const std::string& echo) {
  auto out = open_csv(path, echo + "left = " + report.left + "\nright = " + report.right + "\n");
  out << "layer_index,layer_name,d_mu,d_sigma,d_gamma,d_beta\n";
  for (const auto& e : report.entries) {
    out << e.layer_index << ',' << e.layer_name << ',';
    put(out, e.d_mu);
    out << ',';
    put(out, e.d_sigma);
    out << ',';
    put(out, e.d_gamma);
    out << ',';
    put(out, e.d_beta);
    out << '\n';
  }
  finish_file(out, path);
}

void write_channels_csv(const fs::path& path, std::span<const ChannelRow> rows, const std::string& echo) {
  auto out = open_csv(path, echo);
  out << "channel,variant,mean,sigma_or_gamma,beta\n";
  for (const auto& r : rows) {
    out << r.channel << ',' << r.variant << ',';
    put(out, r.mean);
    out << ',' << r.sigma_or_gamma << ',';
    put(out, r.beta);
    out << '\n';
  }
  finish_file(out, path);
}

LoadedData load_experiment_data(const ExperimentConfig& config, bool need_train) {
  std::optional<fs::path> root = config.data_root;
  if (!root) root = cifar_root_from_env();
  if (!root) {
    throw ConfigError("no dataset: set experiment.data_root or CIFAR10_ROOT (make-synthetic writes a stand-in)");
  }
  auto sub = [](std::size_t n) { return n ? std::optional<std::size_t>(n) : std::nullopt; };
  LoadedData d;
  if (need_train) d.train = load_cifar10(*root, Split::Train, sub(config.train_subset), config.train.seed);
  d.test = load_cifar10(*root, Split::Test, sub(config.test_subset), config.train.seed + 1);
  return d;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Normalization strategies for hybrid adversarial training"};
  app.require_subcommand(1);

  // train
  Common train_opts;
  auto* train = app.add_subcommand("train", "train a model; writes checkpoint, metrics CSV and resolved config");
  train_opts.attach(train);

  // eval
  Common eval_opts;
  std::string eval_ckpt, eval_branch = "adv", eval_head = "default";
  std::optional<std::string> eval_ns, eval_ap, eval_csv;
  auto* eval = app.add_subcommand("eval", "clean and PGD accuracy of a checkpoint under a deployment");
  eval_opts.attach(eval);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--branch", eval_branch, "routing branch: clean or adv");
  eval->add_option("--ns", eval_ns, "NS source: stored:clean, stored:adv or a statistics file");
  eval->add_option("--ap", eval_ap, "AP set: clean or adv (default: routed)");
  eval->add_option("--head", eval_head, "classifier head: default, clean or adv");
  eval->add_option("--csv", eval_csv, "append a result row to this CSV");

  // recalibrate
  Common rc_opts;
  std::string rc_ckpt, rc_ap = "adv", rc_data = "clean", rc_out;
  RecalibrationConfig rc_cfg;
  auto* recal = app.add_subcommand("recalibrate", "re-estimate NS under a chosen AP and data source");
  rc_opts.attach(recal);
  recal->add_option("--checkpoint", rc_ckpt, "checkpoint file")->required();
  recal->add_option("--ap", rc_ap, "AP set used while measuring: clean or adv");
  recal->add_option("--data", rc_data, "data source: clean, adv or noisy");
  recal->add_option("--out", rc_out, "statistics file to write")->required();
  recal->add_option("--max-passes", rc_cfg.max_passes, "passes over the data");
  recal->add_option("--tol", rc_cfg.tol, "max relative change between passes");
  recal->add_option("--noise", rc_cfg.noise_magnitude, "uniform noise magnitude for --data noisy");

  // probe-gap
  Common gap_opts;
  std::string gap_ckpt, gap_out;
  std::optional<std::string> gap_left, gap_right;
  bool gap_affine = false;
  auto* gap = app.add_subcommand("probe-gap", "layer-wise Wasserstein gap between NS sources and/or AP sets");
  gap_opts.attach(gap);
  gap->add_option("--checkpoint", gap_ckpt, "checkpoint file")->required();
  gap->add_option("--left", gap_left, "NS source: stored:clean, stored:adv or a statistics file");
  gap->add_option("--right", gap_right, "NS source compared against --left");
  gap->add_flag("--affine", gap_affine, "include the AP_clean vs AP_adv gap");
  gap->add_option("--out", gap_out, "gap CSV to write")->required();

  // export-channels
  Common ch_opts;
  std::string ch_ckpt, ch_layer, ch_out;
  std::vector<std::string> ch_stats, ch_ap;
  std::size_t ch_k = 20;
  std::uint64_t ch_seed = 0;
  auto* channels = app.add_subcommand("export-channels", "per-channel NS/AP table for one layer");
  ch_opts.attach(channels);
  channels->add_option("--checkpoint", ch_ckpt, "checkpoint file")->required();
  channels->add_option("--layer", ch_layer, "norm layer name, e.g. layer1.0.norm2")->required();
  channels->add_option("--stats", ch_stats, "NS sources (stored:clean, stored:adv or files)");
  channels->add_option("--ap", ch_ap, "AP sets to include: clean, adv");
  channels->add_option("--k", ch_k, "channels to sample");
  channels->add_option("--seed", ch_seed, "channel sampling seed");
  channels->add_option("--out", ch_out, "channel CSV to write")->required();

  // make-synthetic
  SyntheticConfig syn;
  std::string syn_out;
  auto* synth = app.add_subcommand("make-synthetic", "write a synthetic dataset in CIFAR-10 binary layout");
  synth->add_option("--out", syn_out, "output directory")->required();
  synth->add_option("--train-size", syn.train_size, "training records");
  synth->add_option("--test-size", syn.test_size, "test records");
  synth->add_option("--seed", syn.seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) {
      const ExperimentConfig cfg = train_opts.load();
      const std::string echo = cfg.to_ini();
      const LoadedData data = load_experiment_data(cfg);
      fs::create_directories(cfg.output_dir);
      {
        std::ofstream(cfg.output_dir / "config.ini") << echo;
      }
      TrainResult r = train_loop(cfg.train, data.train, data.test, [](const EpochMetrics& m) {
        std::cout << "epoch " << m.epoch << " branch=" << to_string(m.branch) << std::fixed << std::setprecision(4)
                  << " clean_acc=" << m.clean_acc << " pgd_acc=" << m.pgd_acc << " loss=" << m.loss
                  << " lr=" << m.lr << std::endl;
      });
      save_checkpoint(cfg.output_dir / "checkpoint.dnck", r.model, {echo, cfg.train.optim.epochs, cfg.train.seed});
      write_metrics_csv(cfg.output_dir / "metrics.csv", r.history, echo);
      std::cout << "wrote " << (cfg.output_dir / "checkpoint.dnck").string() << '\n';
      return 0;
    }
    if (*eval) {
      const ExperimentConfig cfg = eval_opts.load();
      const LoadedCheckpoint ck = load_checkpoint(eval_ckpt);
      const LoadedData data = load_experiment_data(cfg, false);
      Deployment<float> dep;
      dep.branch = parse_branch(eval_branch);
      dep.head = parse_head(eval_head);
      if (eval_ap) dep.affine = parse_branch(*eval_ap);
      std::optional<StatsSnapshot<float>> ns;
      if (eval_ns) {
        ns = resolve_ns(ck.model, *eval_ns);
        ns->check_compatible(ck.model);
        dep.stats = &ns->layers;
      }
      Rng rng(cfg.train.seed);
      const EvalResult r = evaluate(ck.model, data.test, dep, cfg.train.eval_attack, rng);
      std::string what = "branch=" + eval_branch + " ns=" + (ns ? ns->label.name() : "routed") +
                         " ap=" + (eval_ap ? *eval_ap : "routed") + " head=" + eval_head;
      print_eval(what, r);
      if (eval_csv) {
        const bool fresh = !fs::exists(*eval_csv);
        std::ofstream out(*eval_csv, std::ios::app);
        if (fresh) {
          std::istringstream lines(cfg.to_ini());
          for (std::string line; std::getline(lines, line);) out << "# " << line << '\n';
          out << "checkpoint,branch,ns,ap,head,clean_acc,robust_acc,count\n";
        }
        out << eval_ckpt << ',' << eval_branch << ',' << (ns ? ns->label.name() : "routed") << ','
            << (eval_ap ? *eval_ap : "routed") << ',' << eval_head << ',' << r.clean_acc << ',' << r.robust_acc
            << ',' << r.count << '\n';
      }
      return 0;
    }
    if (*recal) {
      const ExperimentConfig cfg = rc_opts.load();
      const LoadedCheckpoint ck = load_checkpoint(rc_ckpt);
      const LoadedData data = load_experiment_data(cfg);
      rc_cfg.attack = cfg.train.eval_attack;
      Rng rng(cfg.train.seed);
      const auto snap = recalibrate(ck.model, parse_branch(rc_ap), parse_data_source(rc_data), data.train, rc_cfg, rng);
      if (!snap.converged) {
        std::cerr << "warning: statistics did not settle within " << rc_cfg.max_passes << " passes\n";
      }
      save_snapshot(rc_out, snap, cfg.to_ini());
      std::cout << "wrote " << snap.label.name() << " (" << snap.passes << " passes) to " << rc_out << '\n';
      return 0;
    }
    if (*gap) {
      const ExperimentConfig cfg = gap_opts.load();
      const LoadedCheckpoint ck = load_checkpoint(gap_ckpt);
      if (gap_left.has_value() != gap_right.has_value()) throw ConfigError("--left and --right go together");
      if (!gap_left && !gap_affine) throw ConfigError("probe-gap needs --left/--right, --affine, or both");
      std::optional<GapReport> report;
      if (gap_left) {
        auto l = resolve_ns(ck.model, *gap_left), r = resolve_ns(ck.model, *gap_right);
        l.check_compatible(ck.model);
        r.check_compatible(ck.model);
        report = gap_report(l, r);
      }
      if (gap_affine) {
        GapReport a = affine_gap(ck.model, Branch::Clean, Branch::Adv);
        report = report ? merge_reports(*report, a) : a;
      }
      write_gap_csv(gap_out, *report, cfg.to_ini());
      std::cout << "wrote " << report->entries.size() << " layers to " << gap_out << '\n';
      return 0;
    }
    if (*channels) {
      const ExperimentConfig cfg = ch_opts.load();
      const LoadedCheckpoint ck = load_checkpoint(ch_ckpt);
      if (ch_stats.empty() && ch_ap.empty()) throw ConfigError("export-channels needs --stats and/or --ap");
      std::vector<StatsSnapshot<float>> snaps;
      for (const auto& s : ch_stats) snaps.push_back(resolve_ns(ck.model, s));
      std::vector<Branch> aps;
      for (const auto& a : ch_ap) aps.push_back(parse_branch(a));
      const auto rows = export_channels<float>(ck.model, snaps, aps, ch_layer, ch_k, ch_seed);
      write_channels_csv(ch_out, rows, cfg.to_ini());
      std::cout << "wrote " << rows.size() << " rows to " << ch_out << '\n';
      return 0;
    }
    if (*synth) {
      write_synthetic_cifar(syn_out, syn);
      std::cout << "wrote synthetic CIFAR-format data to " << syn_out << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace dualnorm
