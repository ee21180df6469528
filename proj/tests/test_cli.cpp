#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ndl/runconfig.hpp"

using namespace ndl;
namespace fs = std::filesystem;

namespace {

int run_cmd(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  if (status == -1) return -1;
  return WEXITSTATUS(status);
}

std::string bin() { return NODULENET_BIN; }

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

int count_lines(const fs::path& p) {
  std::ifstream is(p);
  int n = 0;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) ++n;
  return n;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Micro configuration: 4 scans x (2+2) records, 8^3 patches, 2-channel net.
std::string micro_config(const std::string& extra = {}) {
  std::ostringstream os;
  os << "[run]\nstrategy = multi-task-manual\nseed = 42\n"
     << "[paths]\ndata_dir = data\n"
     << "[data]\nn_scans = 4\nnodules_per_scan = 2\nnonnodules_per_scan = 2\n"
     << "patch_z = 8\npatch_y = 8\npatch_x = 8\naugment = true\nk_folds = 4\n"
     << "[network]\nchannels = 2,2,2,2,2,2,2,2,2,2,2,2,2,2\nfc_hidden = 4\n"
     << "cls_head_channels = 1\n"
     << "[train]\nepochs = 2\nbatch_size = 4\nvalidation_fold = 0\n"
     << extra;
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

}  // namespace

TEST_CASE("config: serialize/parse round-trips bit-exactly, unknown keys fail") {
  RunConfig cfg;
  cfg.seed = 987654321;
  cfg.loss.lambda = 1.0 / 3.0;
  cfg.lr = 0.00123456789012345678;
  cfg.strategy = Strategy::MultiTaskSemisup;
  const std::string text = cfg.serialize();
  RunConfig back = RunConfig::parse(text, "mem");
  CHECK(back.serialize() == text);
  CHECK(back.loss.lambda == cfg.loss.lambda);
  CHECK(back.lr == cfg.lr);

  CHECK_THROWS_AS(RunConfig::parse("[run]\nbogus_key = 1\n", "mem"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[nosuch]\nseed = 1\n", "mem"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("seed = 1\n", "mem"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[run]\nseed = banana\n", "mem"), ConfigError);

  // Comments and blank lines are fine.
  CHECK_NOTHROW(RunConfig::parse("# top comment\n\n[run]\nseed = 3\n", "mem"));
}

TEST_CASE("cli: gen-data manifest arithmetic, determinism, verify") {
  TempDir dir("ndl_cli_gen");
  write_file(dir.path / "c.cfg", micro_config());
  const std::string cd = "cd " + dir.path.string() + " && ";

  CHECK(run_cmd(cd + bin() + " gen-data --config c.cfg --out data --verify") == 0);
  // n_scans * (7*nodules + nonnodules) rows + header
  CHECK(count_lines(dir.path / "data" / "manifest.csv") == 1 + 4 * (7 * 2 + 2));

  CHECK(run_cmd(cd + bin() + " gen-data --config c.cfg --out data2") == 0);
  CHECK(file_bytes(dir.path / "data" / "manifest.csv") ==
        file_bytes(dir.path / "data2" / "manifest.csv"));

  // Different seed changes the volumes.
  CHECK(run_cmd(cd + bin() + " gen-data --config c.cfg --seed 7 --out data3") == 0);
  CHECK(file_bytes(dir.path / "data" / "volumes" / "scan000-n00.vol") !=
        file_bytes(dir.path / "data3" / "volumes" / "scan000-n00.vol"));
}

TEST_CASE("cli: usage and config errors exit with code 1") {
  TempDir dir("ndl_cli_err");
  const std::string cd = "cd " + dir.path.string() + " && ";
  CHECK(run_cmd(cd + bin() + " gen-data") == 1);  // missing --config
  write_file(dir.path / "bad.cfg", "[run]\nnot_a_key = 1\n");
  CHECK(run_cmd(cd + bin() + " gen-data --config bad.cfg --out d") == 1);
  write_file(dir.path / "bad2.cfg", micro_config("[train]\nbatch_size = 0\n"));
  CHECK(run_cmd(cd + bin() + " train --config bad2.cfg --out d") == 1);
  CHECK(run_cmd(cd + bin() + " no-such-command") == 1);
}

TEST_CASE("cli: train determinism, resume bit-identity, eval artifacts") {
  TempDir dir("ndl_cli_train");
  write_file(dir.path / "c.cfg", micro_config());
  const std::string cd = "cd " + dir.path.string() + " && ";
  REQUIRE(run_cmd(cd + bin() + " gen-data --config c.cfg --out data") == 0);

  REQUIRE(run_cmd(cd + bin() + " train --config c.cfg --out run1") == 0);
  REQUIRE(run_cmd(cd + bin() + " train --config c.cfg --out run2") == 0);
  CHECK(file_bytes(dir.path / "run1" / "weights.ndlw") ==
        file_bytes(dir.path / "run2" / "weights.ndlw"));
  CHECK(file_bytes(dir.path / "run1" / "metrics.csv") ==
        file_bytes(dir.path / "run2" / "metrics.csv"));

  // Interrupted run resumes to bit-identical results.
  REQUIRE(run_cmd(cd + bin() +
                  " train --config c.cfg --out run3 --halt-after 1") == 0);
  CHECK(fs::exists(dir.path / "run3" / "checkpoint" / "state.cfg"));
  REQUIRE(run_cmd(cd + bin() + " train --config c.cfg --out run3 --resume") == 0);
  CHECK(file_bytes(dir.path / "run1" / "weights.ndlw") ==
        file_bytes(dir.path / "run3" / "weights.ndlw"));
  CHECK(file_bytes(dir.path / "run1" / "metrics.csv") ==
        file_bytes(dir.path / "run3" / "metrics.csv"));
  CHECK_FALSE(fs::exists(dir.path / "run3" / "checkpoint"));

  // The effective config round-trips.
  auto eff = RunConfig::load(dir.path / "run1" / "config.effective");
  CHECK(eff.serialize() == file_bytes(dir.path / "run1" / "config.effective"));

  // Evaluation emits its CSV artifacts.
  std::string eval_cfg = micro_config("[paths]\nweights = run1/weights.ndlw\n");
  write_file(dir.path / "e.cfg", eval_cfg);
  REQUIRE(run_cmd(cd + bin() + " eval --config e.cfg --out ev --fold 0") == 0);
  CHECK(fs::exists(dir.path / "ev" / "eval.csv"));
  CHECK(fs::exists(dir.path / "ev" / "froc.csv"));
  CHECK(count_lines(dir.path / "ev" / "eval.csv") == 2);

  // Evaluating with a mismatched architecture is a data error (exit 2).
  std::string wrong = micro_config("[paths]\nweights = run1/weights.ndlw\n[network]\nchannels = 3,2,2,2,2,2,2,2,2,2,2,2,2,2\n");
  write_file(dir.path / "w.cfg", wrong);
  CHECK(run_cmd(cd + bin() + " eval --config w.cfg --out ev2 --fold 0") == 2);
}

TEST_CASE("cli: single-task strategies run with the weight-0 contract") {
  TempDir dir("ndl_cli_single");
  write_file(dir.path / "c.cfg",
             micro_config("[run]\nstrategy = single-task-cls\n"));
  write_file(dir.path / "s.cfg",
             micro_config("[run]\nstrategy = single-task-seg\n"));
  const std::string cd = "cd " + dir.path.string() + " && ";
  REQUIRE(run_cmd(cd + bin() + " gen-data --config c.cfg --out data") == 0);
  // The in-process assert that the seg head receives zero gradient runs on
  // every batch; a violation would abort with a nonzero exit.
  CHECK(run_cmd(cd + bin() + " train --config c.cfg --out cls") == 0);
  CHECK(run_cmd(cd + bin() + " train --config s.cfg --out seg") == 0);
}

TEST_CASE("cli: semisup emits per-round pool checkpoints and resumes exactly") {
  TempDir dir("ndl_cli_semi");
  const std::string semi =
      micro_config("[run]\nstrategy = multi-task-semisup\n"
                   "[train]\nlabeled_fraction = 0.5\n"
                   "[semisup]\nchunk_fraction = 0.5\nrounds = 2\n"
                   "epochs_initial = 1\nepochs_per_round = 1\n");
  write_file(dir.path / "c.cfg", semi);
  const std::string cd = "cd " + dir.path.string() + " && ";
  REQUIRE(run_cmd(cd + bin() + " gen-data --config c.cfg --out data") == 0);

  REQUIRE(run_cmd(cd + bin() + " train --config c.cfg --out straight") == 0);
  CHECK(fs::exists(dir.path / "straight" / "pool_round_1.csv"));
  CHECK(fs::exists(dir.path / "straight" / "pool_round_2.csv"));
  CHECK(count_lines(dir.path / "straight" / "metrics.csv") == 1 + 3);

  // Halt inside round 1, then resume: everything must match bit for bit.
  REQUIRE(run_cmd(cd + bin() +
                  " train --config c.cfg --out resumed --halt-after 2") == 0);
  REQUIRE(run_cmd(cd + bin() + " train --config c.cfg --out resumed --resume") ==
          0);
  CHECK(file_bytes(dir.path / "straight" / "weights.ndlw") ==
        file_bytes(dir.path / "resumed" / "weights.ndlw"));
  CHECK(file_bytes(dir.path / "straight" / "metrics.csv") ==
        file_bytes(dir.path / "resumed" / "metrics.csv"));
  CHECK(file_bytes(dir.path / "straight" / "pool_round_2.csv") ==
        file_bytes(dir.path / "resumed" / "pool_round_2.csv"));

  // pseudo-label as a standalone surface.
  const std::string pl =
      semi + "[paths]\nweights = straight/weights.ndlw\n";
  write_file(dir.path / "p.cfg", pl);
  REQUIRE(run_cmd(cd + bin() + " pseudo-label --config p.cfg --out plout") == 0);
  CHECK(fs::exists(dir.path / "plout" / "pool.csv"));
}

TEST_CASE("cli: plot determinism, empty inputs, mixed kinds") {
  TempDir dir("ndl_cli_plot");
  const std::string cd = "cd " + dir.path.string() + " && ";

  write_file(dir.path / "m.csv",
             "epoch,round,loss_total,loss_cls,loss_seg,val_dsc,val_sens\n"
             "1,0,0.5,0.3,0.2,0.6,0.7\n"
             "2,0,0.4,0.25,0.15,0.7,0.8\n");
  write_file(dir.path / "f.csv",
             "threshold,fp_per_scan,sensitivity\n"
             "0.9,0.125,0.773\n0.8,0.25,0.87\n0.7,0.5,0.924\n0.6,1,0.941\n"
             "0.5,2,0.962\n0.4,4,0.98\n0.3,8,0.986\n");

  REQUIRE(run_cmd(cd + bin() + " plot m.csv --out a.svg") == 0);
  REQUIRE(run_cmd(cd + bin() + " plot m.csv --out b.svg") == 0);
  CHECK(file_bytes(dir.path / "a.svg") == file_bytes(dir.path / "b.svg"));

  REQUIRE(run_cmd(cd + bin() + " plot f.csv --out froc.svg") == 0);
  const std::string svg = file_bytes(dir.path / "froc.svg");
  CHECK(svg.find("score 0.919") != std::string::npos);
  CHECK(std::count(svg.begin(), svg.end(), 'c') >= 7);  // 7 plotted circles

  // Mixed inputs emit one SVG per kind.
  REQUIRE(run_cmd(cd + bin() + " plot m.csv f.csv --out mix.svg") == 0);
  CHECK(fs::exists(dir.path / "mix_learning.svg"));
  CHECK(fs::exists(dir.path / "mix_froc.svg"));

  // Header-only CSV: nonzero exit, no partial SVG.
  write_file(dir.path / "empty.csv",
             "epoch,round,loss_total,loss_cls,loss_seg,val_dsc,val_sens\n");
  CHECK(run_cmd(cd + bin() + " plot empty.csv --out no.svg") == 2);
  CHECK_FALSE(fs::exists(dir.path / "no.svg"));

  write_file(dir.path / "junk.csv", "a,b,c\n1,2,3\n");
  CHECK(run_cmd(cd + bin() + " plot junk.csv --out no2.svg") == 2);
  CHECK_FALSE(fs::exists(dir.path / "no2.svg"));
}
