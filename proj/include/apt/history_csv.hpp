#pragma once

// Training-history CSV. One row per (epoch, layer) carrying bitwidth and Gavg
// EMA, then one aggregate row per epoch with layer_id -1 carrying the
// run-level columns. Columns that do not apply to a row are left empty.

#include <charconv>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "apt/trainer.hpp"

namespace apt {

inline constexpr std::string_view kHistoryHeader =
    "epoch,layer_id,bitwidth,gavg_ema,train_loss,test_acc,energy_norm,mem_norm,lr";

/// Shortest decimal form that parses back to the same double.
inline std::string format_real(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_history_csv(std::ostream& out, const std::vector<TrainRecord>& history) {
  out << kHistoryHeader << '\n';
  for (const TrainRecord& r : history) {
    for (std::size_t i = 0; i < r.layers.size(); ++i) {
      const LayerRecord& l = r.layers[i];
      out << r.epoch << ',' << i << ',' << l.bitwidth << ',' << (l.gavg_ema ? format_real(*l.gavg_ema) : "")
          << ",,,,,\n";
    }
    out << r.epoch << ",-1,,," << format_real(r.train_loss) << ',' << format_real(r.test_accuracy) << ','
        << format_real(r.energy_norm) << ',' << format_real(r.memory_norm) << ',' << format_real(r.lr) << '\n';
  }
}

inline std::string history_csv(const std::vector<TrainRecord>& history) {
  std::ostringstream s;
  write_history_csv(s, history);
  return s.str();
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_field(std::string_view s, std::size_t line_no) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw std::runtime_error("history line " + std::to_string(line_no) + ": bad field '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace detail

inline std::vector<TrainRecord> read_history_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kHistoryHeader) {
    throw std::runtime_error("history CSV header mismatch");
  }
  std::vector<TrainRecord> history;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 9) throw std::runtime_error("history line " + std::to_string(line_no) + ": expected 9 fields");
    const int epoch = detail::parse_field<int>(f[0], line_no);
    if (history.empty() || history.back().epoch != epoch) {
      history.emplace_back();
      history.back().epoch = epoch;
    }
    TrainRecord& r = history.back();
    const int layer_id = detail::parse_field<int>(f[1], line_no);
    if (layer_id < 0) {
      r.train_loss = detail::parse_field<double>(f[4], line_no);
      r.test_accuracy = detail::parse_field<double>(f[5], line_no);
      r.energy_norm = detail::parse_field<double>(f[6], line_no);
      r.memory_norm = detail::parse_field<double>(f[7], line_no);
      r.lr = detail::parse_field<double>(f[8], line_no);
    } else {
      if (static_cast<std::size_t>(layer_id) != r.layers.size()) {
        throw std::runtime_error("history line " + std::to_string(line_no) + ": layer rows out of order");
      }
      LayerRecord l;
      l.bitwidth = detail::parse_field<int>(f[2], line_no);
      if (!f[3].empty()) l.gavg_ema = detail::parse_field<double>(f[3], line_no);
      r.layers.push_back(l);
    }
  }
  return history;
}

}  // namespace apt
