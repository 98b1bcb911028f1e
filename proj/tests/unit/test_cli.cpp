#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <random>
#include <sstream>
#include <string>

#include "doctest.h"
#include "dualnorm/checkpoint.hpp"
#include "dualnorm/config.hpp"
#include "dualnorm/data.hpp"
#include "dualnorm/train.hpp"

using namespace dualnorm;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status = 0;
  std::string out;
};

struct Sandbox {
  fs::path dir;
  std::string cli;
  Sandbox() {
    const char* env = std::getenv("DUALNORM_CLI");
    REQUIRE_MESSAGE(env != nullptr, "DUALNORM_CLI must point at the command-line tool");
    cli = env;
    dir = fs::temp_directory_path() / ("dualnorm_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
  }
  ~Sandbox() { fs::remove_all(dir); }

  Run run(const std::string& args) const {
    const fs::path log = dir / "out.txt";
    const std::string cmd = "\"" + cli + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    Run r;
    const int raw = std::system(cmd.c_str());
    r.status = raw == 0 ? 0 : (raw == -1 ? -1 : (raw >> 8 ? raw >> 8 : 1));
    std::ifstream in(log);
    r.out.assign(std::istreambuf_iterator<char>(in), {});
    return r;
  }

  std::string common() const {
    return "--set experiment.data_root=" + (dir / "data").string() +
           " --set experiment.train_subset=0 --set experiment.output_dir=" + (dir / "run").string() +
           " --set model.width=0.25 --set optim.batch_size=25 --set optim.decay_epochs= "
           "--set eval_attack.steps=2 --set eval_attack.restarts=1 --set train_attack.steps=1";
  }
};

std::string read(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("command-line workflow") {
  Sandbox box;
  REQUIRE(box.run("make-synthetic --out " + (box.dir / "data").string() + " --train-size 50 --test-size 30").status ==
          0);
  CHECK(fs::file_size(box.dir / "data" / "test_batch.bin") == 30 * kCifarRecord);

  SUBCASE("unknown keys fail with a message") {
    const auto r = box.run("train " + box.common() + " --set optim.learning_rate=0.2");
    CHECK(r.status != 0);
    CHECK(r.out.find("optim.learning_rate") != std::string::npos);
    CHECK(box.run("frobnicate").status != 0);
  }

  SUBCASE("zero-epoch training evaluates like a fresh initialization") {
    const auto t = box.run("train " + box.common() + " --set optim.epochs=0");
    REQUIRE_MESSAGE(t.status == 0, t.out);
    const fs::path ckpt = box.dir / "run" / "checkpoint.dnck";
    REQUIRE(fs::exists(ckpt));
    CHECK(read(box.dir / "run" / "metrics.csv").rfind("# [experiment]", 0) == 0);

    const auto e = box.run("eval " + box.common() + " --set optim.epochs=0 --checkpoint " + ckpt.string() +
                           " --branch adv --csv " + (box.dir / "eval.csv").string());
    REQUIRE_MESSAGE(e.status == 0, e.out);

    const auto cfg = parse_config("", {{"experiment.data_root", (box.dir / "data").string()},
                                       {"experiment.train_subset", "0"},
                                       {"model.width", "0.25"},
                                       {"optim.batch_size", "25"},
                                       {"optim.decay_epochs", ""},
                                       {"optim.epochs", "0"},
                                       {"eval_attack.steps", "2"},
                                       {"eval_attack.restarts", "1"},
                                       {"train_attack.steps", "1"}});
    const auto fresh = build_model<float>(cfg.train.arch, cfg.train.norm, 1, cfg.train.seed);
    CHECK(load_checkpoint(ckpt).model == fresh);
    const auto test = load_cifar10(box.dir / "data", Split::Test, std::nullopt, cfg.train.seed + 1);
    Rng rng(cfg.train.seed);
    const auto r = evaluate(fresh, test, Deployment<float>{}, cfg.train.eval_attack, rng);
    std::ostringstream expect;
    expect << std::fixed << std::setprecision(4) << "clean_acc=" << r.clean_acc << " robust_acc=" << r.robust_acc;
    CHECK_MESSAGE(e.out.find(expect.str()) != std::string::npos, e.out);
    const auto csv = read(box.dir / "eval.csv");
    CHECK(csv.rfind("# [experiment]", 0) == 0);
    CHECK(csv.find("checkpoint,branch,ns,ap,head,clean_acc,robust_acc,count") != std::string::npos);
  }

  SUBCASE("training, probing and exports") {
    const auto t = box.run("train " + box.common() + " --set optim.epochs=1 --set eval.branches=clean,adv");
    REQUIRE_MESSAGE(t.status == 0, t.out);
    const auto metrics = read(box.dir / "run" / "metrics.csv");
    CHECK(metrics.find("epoch,regime,branch,clean_acc,pgd_acc,loss,lr\n1,hybrid,clean,") != std::string::npos);
    CHECK(metrics.find("\n1,hybrid,adv,") != std::string::npos);
    CHECK(read(box.dir / "run" / "config.ini").find("regime = hybrid") != std::string::npos);

    const std::string ckpt = (box.dir / "run" / "checkpoint.dnck").string();
    const std::string stats = (box.dir / "ns.dnst").string();
    const auto rc = box.run("recalibrate " + box.common() + " --checkpoint " + ckpt +
                            " --ap adv --data clean --max-passes 2 --out " + stats);
    REQUIRE_MESSAGE(rc.status == 0, rc.out);
    CHECK(rc.out.find("NS_clean^adv") != std::string::npos);

    const auto ev = box.run("eval " + box.common() + " --checkpoint " + ckpt + " --ns " + stats + " --ap adv");
    CHECK_MESSAGE(ev.status == 0, ev.out);

    const std::string gap = (box.dir / "gap.csv").string();
    const auto g = box.run("probe-gap " + box.common() + " --checkpoint " + ckpt + " --left stored:adv --right " +
                           stats + " --affine --out " + gap);
    REQUIRE_MESSAGE(g.status == 0, g.out);
    const auto gap_text = read(gap);
    CHECK(gap_text.rfind("# ", 0) == 0);
    CHECK(gap_text.find("layer_index,layer_name,d_mu,d_sigma,d_gamma,d_beta") != std::string::npos);

    const std::string ch = (box.dir / "channels.csv").string();
    const auto c = box.run("export-channels " + box.common() + " --checkpoint " + ckpt +
                           " --layer norm1 --stats stored:clean stored:adv --ap clean adv --k 3 --out " + ch);
    REQUIRE_MESSAGE(c.status == 0, c.out);
    CHECK(read(ch).rfind("# ", 0) == 0);

    const auto bad = box.run("export-channels " + box.common() + " --checkpoint " + ckpt +
                             " --layer nope --out " + ch);
    CHECK(bad.status != 0);
  }
}
