#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "apt/cli.hpp"

using namespace apt;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("apt_cli_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

struct CliRun {
  int exit_code = -1;
  std::string out;
};

CliRun run_cli(const std::string& args) {
  const std::string cmd = std::string("'") + APT_CLI_PATH + "' " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  CliRun r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int status = pclose(p);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

TrainRecord record(int epoch, double acc, double energy) {
  TrainRecord r;
  r.epoch = epoch;
  r.layers = {{6, 1.5}};
  r.test_accuracy = acc;
  r.energy_norm = energy;
  r.memory_norm = 0.5;
  r.train_loss = 0.3;
  r.lr = 0.1;
  return r;
}

}  // namespace

TEST(Parse, DefaultRecipe) {
  const auto r = cli::parse({"train", "--mode", "apt", "--tmin", "6.0", "--init-bits", "6"});
  ASSERT_TRUE(r.spec) << r.message;
  const TrainConfig& c = r.spec->experiment.train;
  EXPECT_EQ(r.spec->command, cli::Command::train);
  EXPECT_EQ(c.mode, TrainMode::apt);
  EXPECT_EQ(c.initial_bitwidth, 6);
  EXPECT_EQ(c.policy.t_min(), 6.0);
  EXPECT_TRUE(std::isinf(c.policy.t_max()));
  EXPECT_EQ(c.momentum, 0.9);
  EXPECT_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(c.lr, 0.1);
  EXPECT_EQ(c.rounding, Rounding::nearest);
  EXPECT_EQ(c.cost_fn, CostFn::bit_linear);
}

TEST(Parse, AllFlags) {
  const auto r = cli::parse({"train", "--mode", "fixed", "--init-bits", "9", "--tmin", "0.5", "--tmax", "50",
                             "--epochs", "12", "--batch", "32", "--lr", "0.05", "--decay-epochs", "3,7",
                             "--momentum", "0.5", "--wd", "0", "--interval", "4", "--ema-beta", "0.8",
                             "--rounding", "floor", "--seed", "11", "--data", "blobs:3:8", "--out", "x/y",
                             "--cost-fn", "quadratic", "--arch", "cnn", "--hidden", "64,32"});
  ASSERT_TRUE(r.spec) << r.message;
  const ExperimentSpec& e = r.spec->experiment;
  const TrainConfig& c = e.train;
  EXPECT_EQ(c.mode, TrainMode::fixed);
  EXPECT_EQ(c.initial_bitwidth, 9);
  EXPECT_EQ(c.policy.t_max(), 50.0);
  EXPECT_EQ(c.epochs, 12);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.resolved_decay_epochs(), (std::vector<int>{3, 7}));
  EXPECT_EQ(c.momentum, 0.5);
  EXPECT_EQ(c.weight_decay, 0.0);
  EXPECT_EQ(c.interval, 4);
  EXPECT_EQ(c.ema_beta, 0.8);
  EXPECT_EQ(c.rounding, Rounding::floor);
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.cost_fn, CostFn::bit_quadratic);
  EXPECT_EQ(e.data, "blobs:3:8");
  EXPECT_EQ(e.arch, "cnn");
  EXPECT_EQ(e.hidden, (std::vector<std::size_t>{64, 32}));
  EXPECT_EQ(r.spec->out_dir, fs::path("x/y"));
}

TEST(Parse, UsageErrors) {
  for (const std::vector<std::string>& args : std::vector<std::vector<std::string>>{
           {"train", "--tmin", "10", "--tmax", "5"},
           {"train", "--bogus"},
           {"train", "--epochs", "many"},
           {"train", "--init-bits", "1"},
           {"train", "--mode", "int8"},
           {"train", "--decay-epochs", "25"},
           {"sweep"},
           {"compare"},
           {"frobnicate"}}) {
    const auto r = cli::parse(args);
    EXPECT_FALSE(r.spec) << args[1 % args.size()];
    EXPECT_EQ(r.exit_code, cli::kExitUsage) << r.message;
    EXPECT_FALSE(r.message.empty());
  }
}

TEST(Parse, NoArgumentsPrintsHelp) {
  const auto r = cli::parse({});
  EXPECT_FALSE(r.spec);
  EXPECT_EQ(r.exit_code, cli::kExitOk);
  EXPECT_NE(r.message.find("--tmin"), std::string::npos);
  EXPECT_EQ(cli::parse({"--help"}).exit_code, cli::kExitOk);
}

TEST(Parse, ConfigFileBelowFlags) {
  TempDir dir;
  const fs::path cfg = dir.path() / "run.cfg";
  std::ofstream(cfg) << "mode=fixed\ninit-bits=5\ntmin=2.5\nepochs=4\nseed=9\n";
  const auto r = cli::parse({"train", "--config", cfg.string(), "--seed", "3"});
  ASSERT_TRUE(r.spec) << r.message;
  const TrainConfig& c = r.spec->experiment.train;
  EXPECT_EQ(c.mode, TrainMode::fixed);
  EXPECT_EQ(c.initial_bitwidth, 5);
  EXPECT_EQ(c.policy.t_min(), 2.5);
  EXPECT_EQ(c.epochs, 4);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.lr, 0.1);
}

TEST(Parse, ConfigFileUnknownKeyRejected) {
  TempDir dir;
  const fs::path cfg = dir.path() / "bad.cfg";
  std::ofstream(cfg) << "tmin=2\nwarmup=5\n";
  const auto r = cli::parse({"train", "--config", cfg.string()});
  EXPECT_FALSE(r.spec);
  EXPECT_EQ(r.exit_code, cli::kExitUsage);
}

TEST(Parse, OutputDirectoryFallbacks) {
  ::unsetenv("APT_OUT_DIR");
  EXPECT_EQ(cli::parse({"train"}).spec->out_dir, fs::path("runs/latest"));
  ::setenv("APT_OUT_DIR", "/tmp/from-env", 1);
  EXPECT_EQ(cli::parse({"train"}).spec->out_dir, fs::path("/tmp/from-env"));
  EXPECT_EQ(cli::parse({"train", "--out", "flag"}).spec->out_dir, fs::path("flag"));
  ::unsetenv("APT_OUT_DIR");
}

TEST(Parse, SweepAndCompareOptions) {
  const auto s = cli::parse({"sweep", "--tmin-list", "0.1,1,10", "--jobs", "2", "--epochs", "3"});
  ASSERT_TRUE(s.spec) << s.message;
  EXPECT_EQ(s.spec->command, cli::Command::sweep);
  EXPECT_EQ(s.spec->tmin_list, (std::vector<double>{0.1, 1.0, 10.0}));
  EXPECT_EQ(s.spec->jobs, 2u);
  EXPECT_EQ(s.spec->experiment.train.epochs, 3);

  TempDir dir;
  const fs::path a = dir.path() / "a.csv", b = dir.path() / "b.csv";
  std::ofstream(a) << "x";
  std::ofstream(b) << "x";
  const auto c = cli::parse({"compare", a.string(), b.string(), "--targets", "0.5,0.9"});
  ASSERT_TRUE(c.spec) << c.message;
  EXPECT_EQ(c.spec->histories.size(), 2u);
  EXPECT_EQ(c.spec->targets, (std::vector<double>{0.5, 0.9}));
  EXPECT_FALSE(cli::parse({"compare", (dir.path() / "missing.csv").string()}).spec);
}

TEST(HistoryCsv, ExactLayoutAndRoundTrip) {
  std::vector<TrainRecord> h{record(0, 0.5, 0.25), record(1, 0.75, 0.3)};
  h[1].layers.push_back({7, std::nullopt});
  h[0].layers.push_back({6, 0.1});
  const std::string text = history_csv(h);
  EXPECT_EQ(text,
            "epoch,layer_id,bitwidth,gavg_ema,train_loss,test_acc,energy_norm,mem_norm,lr\n"
            "0,0,6,1.5,,,,,\n"
            "0,1,6,0.1,,,,,\n"
            "0,-1,,,0.3,0.5,0.25,0.5,0.1\n"
            "1,0,6,1.5,,,,,\n"
            "1,1,7,,,,,,\n"
            "1,-1,,,0.3,0.75,0.3,0.5,0.1\n");
  std::istringstream in(text);
  EXPECT_EQ(read_history_csv(in), h);
  std::istringstream bad("epoch,layer\n");
  EXPECT_THROW(read_history_csv(bad), std::runtime_error);
}

TEST(Sweep, SingletonAndDuplicates) {
  ExperimentSpec spec;
  spec.data = "blobs";
  spec.arch = "linear";
  spec.train.epochs = 3;
  const DataSplit data = load_data(spec);
  EXPECT_EQ(sweep_tmin(spec, data, {2.0}).size(), 1u);
  const auto rows = sweep_tmin(spec, data, {2.0, 2.0}, 2);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].result.history, rows[1].result.history);
  std::ostringstream a, b;
  write_sweep_csv(a, {rows[0]});
  write_sweep_csv(b, {rows[1]});
  EXPECT_EQ(a.str(), b.str());
  EXPECT_THROW(sweep_tmin(spec, data, {}), std::invalid_argument);
}

TEST(Sweep, InversionCount) {
  std::vector<SweepRow> rows(4);
  const double t[] = {10, 0.1, 1, 100}, e[] = {0.5, 0.2, 0.3, 0.4};
  for (int i = 0; i < 4; ++i) {
    rows[i].t_min = t[i];
    rows[i].energy_norm = e[i];
  }
  EXPECT_EQ(count_inversions(rows, [](const SweepRow& r) { return r.energy_norm; }), 1u);
}

TEST(Compare, UnreachedAndSingleEpoch) {
  const std::vector<NamedHistory> runs{{"a", {record(0, 0.6, 0.2)}}, {"b", {record(0, 0.8, 0.4)}}};
  const CompareTable t = compare_histories(runs, {0.5, 0.7, 0.99});
  EXPECT_EQ(t.energy[0], (std::vector<std::optional<double>>{0.2, 0.4}));
  EXPECT_EQ(t.energy[1], (std::vector<std::optional<double>>{std::nullopt, 0.4}));
  EXPECT_EQ(t.energy[2], (std::vector<std::optional<double>>{std::nullopt, std::nullopt}));
  std::ostringstream out;
  write_compare_csv(out, t);
  EXPECT_EQ(out.str(), "target,a,b\n0.5,0.2,0.4\n0.7,unreached,0.4\n0.99,unreached,unreached\n");
  EXPECT_THROW(compare_histories({runs[0]}, {}), std::invalid_argument);
  const auto d = default_targets(runs);
  EXPECT_EQ(d.back(), 0.8);
}

TEST(Compare, EnergyAccumulatesInThirtyTwoBitEpochs) {
  const std::vector<NamedHistory> runs{{"full", {record(0, 0.5, 1.0), record(1, 0.7, 1.0), record(2, 0.9, 1.0)}},
                                       {"half", {record(0, 0.6, 0.5), record(1, 0.8, 0.5), record(2, 0.8, 0.5)}}};
  const CompareTable t = compare_histories(runs, {0.7, 0.9});
  EXPECT_EQ(t.energy[0], (std::vector<std::optional<double>>{2.0, 1.0}));
  EXPECT_EQ(t.energy[1], (std::vector<std::optional<double>>{3.0, std::nullopt}));
}

// The desk task: 784-128-10 MLP on the bundled MNIST subset for 20 epochs.
TEST(Compare, AptNeedsLessEnergyThanThirtyTwoBitsOnDeskTask) {
  ExperimentSpec spec;
  spec.data = APT_DATA_DIR;
  const DataSplit data = load_data(spec);
  ExperimentSpec fixed32 = spec;
  fixed32.train.mode = TrainMode::fixed;
  fixed32.train.initial_bitwidth = 32;
  const TrainResult base = run_experiment(fixed32, data);
  const TrainResult apt = run_experiment(spec, data);
  const double target = base.final_record().test_accuracy - 0.005;
  const CompareTable t = compare_histories({{"fixed32", base.history}, {"apt", apt.history}}, {target});
  ASSERT_TRUE(t.energy[0][0]);
  ASSERT_TRUE(t.energy[0][1]);
  EXPECT_LT(*t.energy[0][1], *t.energy[0][0]);
}

TEST(Binary, TrainWritesHistoryAndCheckpoint) {
  TempDir dir;
  const CliRun r = run_cli("train --data blobs --arch linear --epochs 3 --out '" + dir.path().string() + "'");
  ASSERT_EQ(r.exit_code, 0) << r.out;
  const std::string csv = slurp(dir.path() / "history.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,layer_id,bitwidth,gavg_ema,train_loss,test_acc,energy_norm,mem_norm,lr");
  std::istringstream in(csv);
  EXPECT_EQ(read_history_csv(in).size(), 3u);
  EXPECT_TRUE(fs::exists(dir.path() / "checkpoint.apt"));
  EXPECT_NE(r.out.find("apt: epochs=3"), std::string::npos);
}

TEST(Binary, ExitCodes) {
  EXPECT_EQ(run_cli("").exit_code, 0);
  EXPECT_EQ(run_cli("train --tmin 10 --tmax 5").exit_code, 2);
  EXPECT_EQ(run_cli("train --nope").exit_code, 2);
  TempDir dir;
  const CliRun diverged = run_cli("train --mode fp32 --data blobs --arch linear --epochs 2 --lr 1e300 --out '" +
                               dir.path().string() + "'");
  EXPECT_EQ(diverged.exit_code, 3) << diverged.out;
  EXPECT_NE(diverged.out.find("diverged"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir.path() / "history.csv"));
  EXPECT_FALSE(fs::exists(dir.path() / "checkpoint.apt"));
  EXPECT_EQ(run_cli("train --data /nonexistent --out '" + dir.path().string() + "'").exit_code, 3);
}

TEST(Binary, SweepAndCompare) {
  TempDir dir;
  const std::string out = dir.path().string();
  const CliRun s = run_cli("sweep --tmin-list 0.5,5 --data blobs --arch linear --epochs 2 --out '" + out + "'");
  ASSERT_EQ(s.exit_code, 0) << s.out;
  const std::string sweep = slurp(dir.path() / "sweep.csv");
  EXPECT_EQ(sweep.substr(0, sweep.find('\n')), "t_min,final_acc,energy_norm,mem_norm,status");
  EXPECT_EQ(std::count(sweep.begin(), sweep.end(), '\n'), 3);
  const CliRun c = run_cli("compare '" + out + "/tmin_0.5/history.csv' '" + out + "/tmin_5/history.csv' --targets 2 --out '" +
                        out + "'");
  ASSERT_EQ(c.exit_code, 0) << c.out;
  EXPECT_EQ(slurp(dir.path() / "compare.csv"), "target,tmin_0.5,tmin_5\n2,unreached,unreached\n");
}
