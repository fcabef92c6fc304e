#pragma once

#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "apt/layers.hpp"

namespace apt {

class PolicyConfig {
 public:
  /// Throws std::invalid_argument unless t_min <= t_max and 2 <= k_min <= k_max <= 32.
  explicit PolicyConfig(double t_min = 6.0, double t_max = std::numeric_limits<double>::infinity(),
                        int k_min = kMinBitwidth, int k_max = kMaxBitwidth)
      : t_min_(t_min), t_max_(t_max), k_min_(k_min), k_max_(k_max) {
    if (std::isnan(t_min) || std::isnan(t_max) || t_min > t_max) {
      throw std::invalid_argument("t_min must not exceed t_max");
    }
    if (k_min < kMinBitwidth || k_max > kMaxBitwidth || k_min > k_max) {
      throw std::invalid_argument("bitwidth bounds must satisfy 2 <= k_min <= k_max <= 32");
    }
  }

  double t_min() const noexcept { return t_min_; }
  double t_max() const noexcept { return t_max_; }
  int k_min() const noexcept { return k_min_; }
  int k_max() const noexcept { return k_max_; }

 private:
  double t_min_;
  double t_max_;
  int k_min_;
  int k_max_;
};

/// One bit more when the layer underflows, one bit less when it has headroom.
inline int adjust(int k, double gavg, const PolicyConfig& cfg) {
  if (gavg < cfg.t_min() && k < cfg.k_max()) return k + 1;
  if (gavg > cfg.t_max() && k > cfg.k_min()) return k - 1;
  return k;
}

struct BitwidthChange {
  std::size_t layer_id = 0;
  int from = 0;
  int to = 0;
};

/// Applies `adjust` to every layer with a measured EMA and re-codes the
/// weights of each layer whose bitwidth changed.
inline std::vector<BitwidthChange> adjust_all(std::span<LayerState* const> layers, const PolicyConfig& cfg) {
  std::vector<BitwidthChange> changes;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    LayerState& layer = *layers[i];
    if (!layer.gavg_ema || layer.full_precision()) continue;
    const int from = layer.bitwidth();
    const int to = adjust(from, *layer.gavg_ema, cfg);
    if (to == from) continue;
    layer.set_bitwidth(to);
    changes.push_back({i, from, to});
  }
  return changes;
}

}  // namespace apt
