#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "apt/checkpoint.hpp"
#include "apt/cli.hpp"
#include "apt/experiment.hpp"
#include "apt/history_csv.hpp"

namespace fs = std::filesystem;
using namespace apt;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

void print_summary(const std::string& label, const TrainResult& r) {
  if (r.history.empty()) {
    std::printf("%s: no completed epochs\n", label.c_str());
    return;
  }
  const TrainRecord& last = r.final_record();
  std::string bits;
  for (const auto& l : last.layers) bits += (bits.empty() ? "" : "/") + std::to_string(l.bitwidth);
  std::printf("%s: epochs=%zu test_acc=%.4f train_loss=%.4f energy_norm=%.4f mem_norm=%.4f bits=%s\n",
              label.c_str(), r.history.size(), last.test_accuracy, last.train_loss, last.energy_norm,
              last.memory_norm, bits.c_str());
}

int run_train(const cli::RunSpec& spec) {
  const DataSplit data = load_data(spec.experiment);
  Network net = build_network(spec.experiment, data.train);
  const TrainResult r = run_training(spec.experiment.train, net, data.train, data.test);
  fs::create_directories(spec.out_dir);
  write_file(spec.out_dir / "history.csv", history_csv(r.history));
  print_summary(std::string(to_string(spec.experiment.train.mode)), r);
  if (!r.ok()) {
    std::fprintf(stderr, "error: %s\n", r.error->c_str());
    return cli::kExitRuntime;
  }
  save_checkpoint(net, spec.out_dir / "checkpoint.apt");
  return cli::kExitOk;
}

int run_sweep(const cli::RunSpec& spec) {
  const DataSplit data = load_data(spec.experiment);
  const auto rows = sweep_tmin(spec.experiment, data, spec.tmin_list, spec.jobs);
  fs::create_directories(spec.out_dir);
  for (const SweepRow& row : rows) {
    const fs::path dir = spec.out_dir / ("tmin_" + format_real(row.t_min));
    fs::create_directories(dir);
    write_file(dir / "history.csv", history_csv(row.result.history));
    print_summary("t_min=" + format_real(row.t_min), row.result);
  }
  std::ofstream f(spec.out_dir / "sweep.csv", std::ios::binary);
  write_sweep_csv(f, rows);
  write_sweep_csv(std::cout, rows);
  std::printf("trend: accuracy inversions=%zu energy inversions=%zu memory inversions=%zu (in t_min order)\n",
              count_inversions(rows, [](const SweepRow& r) { return r.final_accuracy; }),
              count_inversions(rows, [](const SweepRow& r) { return r.energy_norm; }),
              count_inversions(rows, [](const SweepRow& r) { return r.memory_norm; }));
  return cli::kExitOk;
}

int run_compare(const cli::RunSpec& spec) {
  const auto runs = load_histories(spec.histories);
  const CompareTable table = compare_histories(runs, spec.targets);
  fs::create_directories(spec.out_dir);
  std::ofstream f(spec.out_dir / "compare.csv", std::ios::binary);
  write_compare_csv(f, table);
  write_compare_csv(std::cout, table);
  return cli::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  const cli::ParseResult parsed = cli::parse(std::vector<std::string>(argv + 1, argv + argc));
  if (!parsed.spec) {
    (parsed.exit_code == cli::kExitOk ? std::cout : std::cerr) << parsed.message << '\n';
    return parsed.exit_code;
  }
  const cli::RunSpec& spec = *parsed.spec;
  try {
    switch (spec.command) {
      case cli::Command::train: return run_train(spec);
      case cli::Command::sweep: return run_sweep(spec);
      case cli::Command::compare: return run_compare(spec);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return cli::kExitRuntime;
  }
  return cli::kExitOk;
}
