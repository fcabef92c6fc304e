#pragma once

// Command-line parsing for the `apt` tool. Precedence: flags, then the
// key=value config file, then built-in defaults.

#include <cstdlib>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "apt/experiment.hpp"

namespace apt::cli {

enum class Command { train, sweep, compare };

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

struct RunSpec {
  Command command = Command::train;
  ExperimentSpec experiment;
  std::filesystem::path out_dir;
  std::vector<double> tmin_list;
  unsigned jobs = 1;
  std::vector<std::filesystem::path> histories;
  std::vector<double> targets;
};

/// Result of parsing: a spec to run, or an exit code with text to print
/// (help on stdout when the code is 0, an error on stderr otherwise).
struct ParseResult {
  std::optional<RunSpec> spec;
  int exit_code = kExitOk;
  std::string message;
};

inline ParseResult parse(std::vector<std::string> args) {
  RunSpec spec;
  ExperimentSpec& ex = spec.experiment;
  TrainConfig& tc = ex.train;

  CLI::App app{"Adaptive-precision quantized training", "apt"};
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "flat key=value file; keys mirror the long flag names");
  app.require_subcommand(0, 1);

  std::string mode = "apt", rounding = "nearest", cost_fn = "linear";
  double t_min = 6.0, t_max = std::numeric_limits<double>::infinity();
  std::vector<int> decay_epochs;
  std::string out;
  app.add_option("--mode", mode, "apt | fixed | fp32")->check(CLI::IsMember({"apt", "fixed", "fp32"}));
  app.add_option("--init-bits", tc.initial_bitwidth, "initial (or fixed) weight bitwidth")
      ->check(CLI::Range(kMinBitwidth, kMaxBitwidth));
  app.add_option("--tmin", t_min, "lower Gavg threshold");
  app.add_option("--tmax", t_max, "upper Gavg threshold (inf disables)");
  app.add_option("--epochs", tc.epochs)->check(CLI::PositiveNumber);
  app.add_option("--batch", tc.batch_size)->check(CLI::PositiveNumber);
  app.add_option("--lr", tc.lr, "base learning rate")->check(CLI::PositiveNumber);
  app.add_option("--decay-epochs", decay_epochs, "epochs where lr drops 10x (default: 1/2 and 3/4 of --epochs)")
      ->delimiter(',');
  app.add_option("--momentum", tc.momentum);
  app.add_option("--wd", tc.weight_decay, "weight decay");
  app.add_option("--interval", tc.interval, "iterations between Gavg samples (0 = auto)")
      ->check(CLI::NonNegativeNumber);
  app.add_option("--ema-beta", tc.ema_beta);
  app.add_option("--rounding", rounding, "nearest | floor")->check(CLI::IsMember({"nearest", "floor"}));
  app.add_option("--seed", tc.seed);
  app.add_option("--data", ex.data, "IDX directory or blobs[:classes[:dim]]");
  app.add_option("--out", out, "output directory (falls back to $APT_OUT_DIR, then runs/latest)");
  app.add_option("--cost-fn", cost_fn, "linear | quadratic")->check(CLI::IsMember({"linear", "quadratic"}));
  app.add_option("--arch", ex.arch, "mlp | linear | cnn")->check(CLI::IsMember({"mlp", "linear", "cnn"}));
  app.add_option("--hidden", ex.hidden, "hidden layer widths for mlp")->delimiter(',');
  app.add_option("--train-limit", ex.train_limit, "use only the first N training samples");
  app.add_option("--test-limit", ex.test_limit, "use only the first N test samples");

  auto* train = app.add_subcommand("train", "train one model and write history.csv + checkpoint.apt");
  auto* sweep = app.add_subcommand("sweep", "one APT run per --tmin-list value; writes sweep.csv");
  auto* compare = app.add_subcommand("compare", "energy needed to reach target accuracies across histories");
  for (auto* sub : {train, sweep, compare}) sub->fallthrough();
  sweep->add_option("--tmin-list", spec.tmin_list, "comma-separated thresholds")->delimiter(',')->required();
  sweep->add_option("--jobs", spec.jobs, "concurrent runs")->check(CLI::PositiveNumber);
  compare->add_option("histories", spec.histories, "history.csv files")->required()->check(CLI::ExistingFile);
  compare->add_option("--targets", spec.targets, "target accuracies in [0, 1]")->delimiter(',');

  if (args.empty()) return {std::nullopt, kExitOk, app.help()};

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    return {std::nullopt, kExitOk, app.help()};
  } catch (const CLI::CallForAllHelp&) {
    return {std::nullopt, kExitOk, app.help("", CLI::AppFormatMode::All)};
  } catch (const CLI::ParseError& e) {
    return {std::nullopt, kExitUsage, e.what()};
  }

  if (train->parsed()) spec.command = Command::train;
  else if (sweep->parsed()) spec.command = Command::sweep;
  else if (compare->parsed()) spec.command = Command::compare;
  else return {std::nullopt, kExitOk, app.help()};

  try {
    tc.mode = parse_train_mode(mode);
    tc.rounding = parse_rounding(rounding);
    tc.cost_fn = parse_cost_fn(cost_fn);
    tc.policy = PolicyConfig(t_min, t_max);
    if (!decay_epochs.empty()) tc.decay_epochs = decay_epochs;
    tc.validate();
  } catch (const std::exception& e) {
    return {std::nullopt, kExitUsage, e.what()};
  }

  if (!out.empty()) {
    spec.out_dir = out;
  } else if (const char* env = std::getenv("APT_OUT_DIR"); env && *env) {
    spec.out_dir = env;
  } else {
    spec.out_dir = "runs/latest";
  }
  return {std::move(spec), kExitOk, {}};
}

}  // namespace apt::cli
