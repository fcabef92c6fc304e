#pragma once

// Quantization-underflow metric: the mean gradient magnitude of a weight
// tensor measured in units of that tensor's resolution, smoothed by an EMA
// over samples taken every `interval` iterations.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "apt/layers.hpp"

namespace apt {

struct GavgSample {
  std::size_t layer_id = 0;
  double value = 0.0;
  std::int64_t iteration = 0;
};

/// Mean of |g / eps| over the tensor. Zero means no weight would move.
inline double gavg(std::span<const double> grad_w, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("epsilon must be positive");
  if (grad_w.empty()) return 0.0;
  double sum = 0.0;
  for (double g : grad_w) {
    if (!std::isfinite(g)) throw std::invalid_argument("non-finite gradient");
    sum += std::abs(g);
  }
  return sum / eps / static_cast<double>(grad_w.size());
}

inline double ema_update(std::optional<double> prev, double sample, double beta) {
  if (!prev) return sample;
  return beta * *prev + (1.0 - beta) * sample;
}

/// A few samples per epoch: ceil(iterations / 8), at least 1.
inline std::int64_t default_interval(std::int64_t iterations_per_epoch) {
  return iterations_per_epoch <= 8 ? 1 : (iterations_per_epoch + 7) / 8;
}

inline bool is_collection_step(std::int64_t iter, std::int64_t interval) {
  if (interval < 1) throw std::invalid_argument("interval must be >= 1");
  return iter % interval == 0;
}

/// On collection iterations, measures Gavg of every layer against its
/// current resolution and folds it into the layer's EMA. Returns the raw
/// samples taken (empty on other iterations).
inline std::vector<GavgSample> maybe_collect(std::int64_t iter, std::int64_t interval,
                                             std::span<LayerState* const> layers,
                                             std::span<const LayerGradients> grads, double beta) {
  std::vector<GavgSample> samples;
  if (!is_collection_step(iter, interval)) return samples;
  if (layers.size() != grads.size()) throw std::invalid_argument("one gradient per layer required");
  samples.reserve(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const double value = gavg(grads[i].grad_w.data(), layers[i]->resolution());
    layers[i]->gavg_ema = ema_update(layers[i]->gavg_ema, value, beta);
    samples.push_back({i, value, iter});
  }
  return samples;
}

}  // namespace apt
