#pragma once

// Bit-operation energy and parameter memory as functions of per-layer
// bitwidth. Absolute units are arbitrary; everything is reported as a ratio
// to the same model trained at 32 bits.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "apt/layers.hpp"

namespace apt {

enum class CostFn { bit_linear, bit_quadratic };

inline CostFn parse_cost_fn(std::string_view s) {
  if (s == "linear" || s == "bit-linear") return CostFn::bit_linear;
  if (s == "quadratic" || s == "bit-quadratic") return CostFn::bit_quadratic;
  throw std::invalid_argument("unknown cost function '" + std::string(s) + "'");
}

inline std::string_view to_string(CostFn f) { return f == CostFn::bit_linear ? "linear" : "quadratic"; }

/// Cost of one multiply-accumulate with k-bit weights.
inline double bit_cost(int k, CostFn fn) noexcept {
  const auto bits = static_cast<double>(k);
  return fn == CostFn::bit_linear ? bits : bits * bits;
}

/// Forward product plus the two backward products per MAC.
inline constexpr double kPassesPerIteration = 3.0;

/// Words of real-valued overhead per layer besides the bias (scale and zero point).
inline constexpr std::int64_t kQuantParamWords = 2;

inline double iteration_energy(std::span<const LayerState* const> layers, std::size_t batch, CostFn fn,
                               std::optional<int> override_bits = std::nullopt) {
  double e = 0.0;
  for (const LayerState* layer : layers) {
    const int k = override_bits.value_or(layer->bitwidth());
    e += kPassesPerIteration * static_cast<double>(layer->mac_count) * static_cast<double>(batch) *
         bit_cost(k, fn);
  }
  return e;
}

/// The same iteration with every layer at 32 bits.
inline double iteration_energy_32(std::span<const LayerState* const> layers, std::size_t batch, CostFn fn) {
  return iteration_energy(layers, batch, fn, kMaxBitwidth);
}

struct MemoryFootprint {
  std::int64_t bits = 0;
  std::int64_t bits_32 = 0;
  double normalized() const noexcept { return static_cast<double>(bits) / static_cast<double>(bits_32); }
};

/// Weight codes at their bitwidth plus bias and grid parameters at 32 bits.
inline MemoryFootprint memory_footprint(std::span<const LayerState* const> layers) {
  MemoryFootprint m;
  for (const LayerState* layer : layers) {
    const auto n = static_cast<std::int64_t>(layer->weight_count());
    const std::int64_t overhead = 32 * (static_cast<std::int64_t>(layer->bias.size()) + kQuantParamWords);
    m.bits += n * layer->bitwidth() + overhead;
    m.bits_32 += n * 32 + overhead;
  }
  return m;
}

/// Running energy totals for a training run.
class CostLedger {
 public:
  explicit CostLedger(CostFn fn = CostFn::bit_linear) : fn_(fn) {}

  /// Charges one iteration and returns its energy.
  double charge_iteration(std::span<const LayerState* const> layers, std::size_t batch) {
    const double e = iteration_energy(layers, batch, fn_);
    cumulative_ += e;
    cumulative_32_ += iteration_energy_32(layers, batch, fn_);
    return e;
  }

  void record_memory(std::span<const LayerState* const> layers) { memory_ = memory_footprint(layers); }

  CostFn cost_fn() const noexcept { return fn_; }
  double cumulative_energy() const noexcept { return cumulative_; }
  double cumulative_energy_32() const noexcept { return cumulative_32_; }
  double normalized_energy() const noexcept {
    return cumulative_32_ > 0.0 ? cumulative_ / cumulative_32_ : 0.0;
  }
  const MemoryFootprint& memory() const noexcept { return memory_; }

 private:
  CostFn fn_;
  double cumulative_ = 0.0;
  double cumulative_32_ = 0.0;
  MemoryFootprint memory_;
};

/// Cumulative energy at the first epoch whose accuracy reaches `target`, or
/// nullopt when no epoch does.
inline std::optional<double> energy_to_accuracy(std::span<const double> accuracy, std::span<const double> energy,
                                                double target) {
  if (accuracy.size() != energy.size()) throw std::invalid_argument("accuracy and energy lengths differ");
  for (std::size_t i = 0; i < accuracy.size(); ++i) {
    if (accuracy[i] >= target) return energy[i];
  }
  return std::nullopt;
}

}  // namespace apt
