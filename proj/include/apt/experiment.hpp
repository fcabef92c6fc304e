#pragma once

// Run-level plumbing shared by the CLI and the acceptance suite: dataset and
// architecture selection, threshold sweeps and energy-to-target comparisons.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "apt/cost_model.hpp"
#include "apt/data.hpp"
#include "apt/history_csv.hpp"
#include "apt/network.hpp"
#include "apt/trainer.hpp"

namespace apt {

struct ExperimentSpec {
  TrainConfig train = TrainConfig::desk();
  std::string arch = "mlp";                    // mlp | linear | cnn
  std::vector<std::size_t> hidden = {128};     // mlp hidden widths
  std::size_t cnn_filters = 8;
  std::string data = "data/mnist5k";           // IDX directory, or blobs[:classes[:dim]]
  std::size_t train_limit = 0;                 // 0 keeps every sample
  std::size_t test_limit = 0;
};

struct DataSplit {
  Dataset train;
  Dataset test;
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) return out;
    start = pos + 1;
  }
}

}  // namespace detail

/// "blobs[:classes[:dim]]" gives 2000/500 synthetic samples (separation 6,
/// seed 7); anything else names a directory in the MNIST IDX layout.
inline DataSplit load_data(const ExperimentSpec& spec) {
  DataSplit d;
  if (spec.data.rfind("blobs", 0) == 0) {
    const auto parts = detail::split(spec.data, ':');
    if (parts[0] != "blobs" || parts.size() > 3) throw DataError("bad blobs spec '" + spec.data + "'");
    const std::size_t classes = parts.size() > 1 ? std::stoul(parts[1]) : 2;
    const std::size_t dim = parts.size() > 2 ? std::stoul(parts[2]) : 16;
    Dataset all = synthetic_blobs(2500, classes, dim, 7);
    d.train = all.slice(0, 2000);
    d.test = all.slice(2000, 500);
  } else {
    d.train = load_idx_dir(spec.data, "train");
    d.test = load_idx_dir(spec.data, "t10k");
  }
  if (spec.train_limit && spec.train_limit < d.train.size()) d.train = d.train.slice(0, spec.train_limit);
  if (spec.test_limit && spec.test_limit < d.test.size()) d.test = d.test.slice(0, spec.test_limit);
  const int classes = std::max(d.train.class_count, d.test.class_count);
  d.train.class_count = d.test.class_count = classes;
  d.train.validate();
  d.test.validate();
  return d;
}

inline Network build_network(const ExperimentSpec& spec, const Dataset& train) {
  const auto classes = static_cast<std::size_t>(train.class_count);
  const std::uint64_t seed = spec.train.seed;
  const WeightFormat fmt = spec.train.weight_format();
  if (spec.arch == "mlp" || spec.arch == "linear") {
    std::vector<std::size_t> sizes{train.features()};
    if (spec.arch == "mlp") sizes.insert(sizes.end(), spec.hidden.begin(), spec.hidden.end());
    sizes.push_back(classes);
    return make_mlp(sizes, seed, fmt);
  }
  if (spec.arch == "cnn") {
    const Shape& s = train.images.shape();
    if (s.size() != 3) throw std::invalid_argument("cnn needs image-shaped data");
    return make_small_cnn(1, s[1], s[2], spec.cnn_filters, 3, classes, seed, fmt);
  }
  throw std::invalid_argument("unknown architecture '" + spec.arch + "'");
}

inline TrainResult run_experiment(const ExperimentSpec& spec, const DataSplit& data) {
  Network net = build_network(spec, data.train);
  return run_training(spec.train, net, data.train, data.test);
}

struct SweepRow {
  double t_min = 0.0;
  double final_accuracy = 0.0;
  double energy_norm = 0.0;
  double memory_norm = 0.0;
  std::string status = "ok";
  TrainResult result;
};

/// One APT run per threshold (t_max kept from `spec.train.policy`). Runs are
/// independent; `jobs` > 1 runs them concurrently.
inline std::vector<SweepRow> sweep_tmin(const ExperimentSpec& spec, const DataSplit& data,
                                        const std::vector<double>& t_mins, unsigned jobs = 1) {
  if (t_mins.empty()) throw std::invalid_argument("sweep needs at least one t_min");
  auto run_one = [&](double t_min) {
    ExperimentSpec s = spec;
    s.train.mode = TrainMode::apt;
    s.train.policy = PolicyConfig(t_min, spec.train.policy.t_max(), spec.train.policy.k_min(),
                                  spec.train.policy.k_max());
    SweepRow row;
    row.t_min = t_min;
    row.result = run_experiment(s, data);
    if (!row.result.ok()) row.status = *row.result.error;
    if (!row.result.history.empty()) {
      const TrainRecord& last = row.result.final_record();
      row.final_accuracy = last.test_accuracy;
      row.energy_norm = last.energy_norm;
      row.memory_norm = last.memory_norm;
    }
    return row;
  };

  std::vector<SweepRow> rows;
  if (jobs <= 1) {
    for (double t : t_mins) rows.push_back(run_one(t));
    return rows;
  }
  std::vector<std::future<SweepRow>> pending;
  for (std::size_t next = 0; next < t_mins.size() || !pending.empty();) {
    while (next < t_mins.size() && pending.size() < jobs) {
      pending.push_back(std::async(std::launch::async, run_one, t_mins[next++]));
    }
    rows.push_back(pending.front().get());
    pending.erase(pending.begin());
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "t_min,final_acc,energy_norm,mem_norm,status\n";
  for (const SweepRow& r : rows) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    out << format_real(r.t_min) << ',' << format_real(r.final_accuracy) << ',' << format_real(r.energy_norm)
        << ',' << format_real(r.memory_norm) << ',' << status << '\n';
  }
}

/// Adjacent pairs (in t_min order) where `value` decreases.
template <typename Fn>
std::size_t count_inversions(std::vector<SweepRow> rows, Fn value) {
  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) { return a.t_min < b.t_min; });
  std::size_t n = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) n += value(rows[i]) < value(rows[i - 1]);
  return n;
}

struct NamedHistory {
  std::string name;
  std::vector<TrainRecord> history;
};

inline std::vector<NamedHistory> load_histories(const std::vector<std::filesystem::path>& paths) {
  std::vector<NamedHistory> out;
  for (const auto& p : paths) {
    std::ifstream f(p);
    if (!f) throw std::runtime_error("cannot open " + p.string());
    std::string name = p.parent_path().filename().string();
    if (name.empty()) name = p.stem().string();
    out.push_back({name, read_history_csv(f)});
  }
  return out;
}

struct CompareTable {
  std::vector<double> targets;
  std::vector<std::string> runs;
  std::vector<std::vector<std::optional<double>>> energy;  // [target][run]
};

/// Default grid: 0, 0.5, 1 and 2 points below the best final accuracy.
inline std::vector<double> default_targets(const std::vector<NamedHistory>& runs) {
  double best = 0.0;
  for (const auto& r : runs) {
    if (!r.history.empty()) best = std::max(best, r.history.back().test_accuracy);
  }
  return {best - 0.02, best - 0.01, best - 0.005, best};
}

/// Energy spent through `rec`, in units of one epoch of the same model at 32
/// bits. Unlike energy_norm this is comparable across runs of one model.
inline double cumulative_epoch_units(const TrainRecord& rec) {
  return rec.energy_norm * static_cast<double>(rec.epoch + 1);
}

inline CompareTable compare_histories(const std::vector<NamedHistory>& runs, std::vector<double> targets) {
  if (runs.size() < 2) throw std::invalid_argument("compare needs at least two histories");
  if (targets.empty()) targets = default_targets(runs);
  CompareTable t;
  t.targets = targets;
  for (const auto& r : runs) t.runs.push_back(r.name);
  for (double target : targets) {
    auto& row = t.energy.emplace_back();
    for (const auto& r : runs) {
      std::vector<double> acc, energy;
      for (const auto& rec : r.history) {
        acc.push_back(rec.test_accuracy);
        energy.push_back(cumulative_epoch_units(rec));
      }
      row.push_back(energy_to_accuracy(acc, energy, target));
    }
  }
  return t;
}

inline void write_compare_csv(std::ostream& out, const CompareTable& t) {
  out << "target";
  for (const auto& name : t.runs) out << ',' << name;
  out << '\n';
  for (std::size_t i = 0; i < t.targets.size(); ++i) {
    out << format_real(t.targets[i]);
    for (const auto& e : t.energy[i]) out << ',' << (e ? format_real(*e) : "unreached");
    out << '\n';
  }
}

}  // namespace apt
