#pragma once

// Adaptive-precision training loop: minibatch SGD over k-bit weights, Gavg
// sampled every `interval` iterations into a per-layer EMA, and bitwidth
// adjustment at every epoch boundary.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "apt/cost_model.hpp"
#include "apt/data.hpp"
#include "apt/metrics.hpp"
#include "apt/network.hpp"
#include "apt/policy.hpp"

namespace apt {

enum class TrainMode { apt, fixed, fp32 };

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "apt") return TrainMode::apt;
  if (s == "fixed" || s == "fixed-k") return TrainMode::fixed;
  if (s == "fp32" || s == "fp32-reference") return TrainMode::fp32;
  throw std::invalid_argument("unknown mode '" + std::string(s) + "'");
}

inline std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::apt: return "apt";
    case TrainMode::fixed: return "fixed";
    case TrainMode::fp32: return "fp32";
  }
  return "?";
}

inline Rounding parse_rounding(std::string_view s) {
  if (s == "nearest") return Rounding::nearest;
  if (s == "floor") return Rounding::floor;
  throw std::invalid_argument("unknown rounding '" + std::string(s) + "'");
}

inline std::string_view to_string(Rounding r) { return r == Rounding::nearest ? "nearest" : "floor"; }

struct TrainConfig {
  TrainMode mode = TrainMode::apt;
  int initial_bitwidth = 6;
  PolicyConfig policy{6.0, std::numeric_limits<double>::infinity()};
  int epochs = 200;
  std::size_t batch_size = 128;
  double lr = 0.1;
  /// Epochs at which lr is multiplied by lr_decay. Unset means {epochs/2, 3*epochs/4}.
  std::optional<std::vector<int>> decay_epochs;
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::int64_t interval = 0;  // 0 picks default_interval(iterations per epoch)
  double ema_beta = 0.9;
  Rounding rounding = Rounding::nearest;
  std::uint64_t seed = 1;
  CostFn cost_fn = CostFn::bit_linear;

  /// 20-epoch recipe with decays at {10, 15}.
  static TrainConfig desk() {
    TrainConfig c;
    c.epochs = 20;
    return c;
  }

  std::vector<int> resolved_decay_epochs() const {
    if (decay_epochs) return *decay_epochs;
    return {epochs / 2, (3 * epochs) / 4};
  }

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    check_bitwidth(initial_bitwidth);
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be >= 0");
    if (ema_beta < 0.0 || ema_beta >= 1.0) throw std::invalid_argument("ema beta must be in [0, 1)");
    if (interval < 0) throw std::invalid_argument("interval must be >= 0");
    for (int e : resolved_decay_epochs()) {
      if (e < 0 || e >= epochs) throw std::invalid_argument("decay epoch " + std::to_string(e) + " out of range");
    }
  }

  WeightFormat weight_format() const {
    return mode == TrainMode::fp32 ? WeightFormat::full_precision() : WeightFormat::quantized(initial_bitwidth);
  }
};

/// Piecewise-constant schedule: lr times lr_decay per decay epoch reached.
inline double lr_at(int epoch, const TrainConfig& cfg) {
  double lr = cfg.lr;
  for (int e : cfg.resolved_decay_epochs()) {
    if (epoch >= e) lr *= cfg.lr_decay;
  }
  return lr;
}

struct LayerRecord {
  int bitwidth = 0;              // bitwidth in effect during the epoch
  std::optional<double> gavg_ema;  // EMA at the end of the epoch

  friend bool operator==(const LayerRecord&, const LayerRecord&) = default;
};

struct TrainRecord {
  int epoch = 0;
  std::vector<LayerRecord> layers;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  double energy_norm = 0.0;  // cumulative through this epoch
  double memory_norm = 0.0;  // footprint during this epoch
  double lr = 0.0;

  friend bool operator==(const TrainRecord&, const TrainRecord&) = default;
};

struct TrainEvent {
  enum class Kind { gavg_sample, bitwidth_change };
  Kind kind = Kind::gavg_sample;
  int epoch = 0;
  std::int64_t iteration = 0;  // global iterations completed before the event
  std::size_t layer_id = 0;
  double value = 0.0;   // Gavg sample
  int from_bits = 0;
  int to_bits = 0;
};

struct TrainResult {
  std::vector<TrainRecord> history;
  std::vector<TrainEvent> events;
  std::int64_t iterations_per_epoch = 0;
  std::optional<std::string> error;  // set when training aborted

  bool ok() const noexcept { return !error.has_value(); }
  const TrainRecord& final_record() const { return history.back(); }
};

/// Fraction of argmax-correct predictions.
inline double evaluate(const Network& net, const Dataset& test, std::size_t batch_size = 256) {
  if (test.size() == 0) throw std::invalid_argument("empty test set");
  BatchSampler sampler(test, batch_size, 0, false);
  sampler.start_epoch(0);
  std::size_t correct = 0;
  while (auto batch = sampler.next()) {
    const auto pred = predict(net.forward(batch->x));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch->y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

inline TrainResult run_training(const TrainConfig& cfg, Network& net, const Dataset& train, const Dataset& test) {
  cfg.validate();
  if (train.size() == 0) throw std::invalid_argument("empty training set");

  TrainResult result;
  auto layers = net.parametric();
  std::vector<const LayerState*> const_layers(layers.begin(), layers.end());
  BatchSampler sampler(train, cfg.batch_size, cfg.seed, true);
  const auto iters = static_cast<std::int64_t>(sampler.batches_per_epoch());
  const std::int64_t interval = cfg.interval > 0 ? cfg.interval : default_interval(iters);
  result.iterations_per_epoch = iters;
  CostLedger ledger(cfg.cost_fn);
  std::int64_t global_iter = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const SgdParams opt{lr_at(epoch, cfg), cfg.momentum, cfg.weight_decay};
    TrainRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.lr;
    for (const LayerState* l : const_layers) rec.layers.push_back({l->bitwidth(), std::nullopt});
    ledger.record_memory(const_layers);

    sampler.start_epoch(static_cast<std::size_t>(epoch));
    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::int64_t iter = 0;
    while (auto batch = sampler.next()) {
      StepResult step = net.loss_and_gradients(batch->x, batch->y);
      if (!std::isfinite(step.loss)) {
        result.error = "diverged: non-finite loss at epoch " + std::to_string(epoch) + " iteration " +
                       std::to_string(iter);
        return result;
      }
      try {
        for (const GavgSample& s : maybe_collect(iter, interval, layers, step.grads, cfg.ema_beta)) {
          result.events.push_back({TrainEvent::Kind::gavg_sample, epoch, global_iter, s.layer_id, s.value, 0, 0});
        }
        for (std::size_t i = 0; i < layers.size(); ++i) {
          sgd_step_quantized(*layers[i], step.grads[i].grad_w, step.grads[i].grad_b, opt, cfg.rounding);
        }
      } catch (const std::exception& e) {
        result.error = std::string("diverged: ") + e.what() + " at epoch " + std::to_string(epoch) +
                       " iteration " + std::to_string(iter);
        return result;
      }
      ledger.charge_iteration(const_layers, batch->y.size());
      loss_sum += step.loss * static_cast<double>(batch->y.size());
      seen += batch->y.size();
      ++iter;
      ++global_iter;
    }

    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.test_accuracy = evaluate(net, test);
    rec.energy_norm = ledger.normalized_energy();
    rec.memory_norm = ledger.memory().normalized();
    for (std::size_t i = 0; i < layers.size(); ++i) rec.layers[i].gavg_ema = layers[i]->gavg_ema;
    result.history.push_back(std::move(rec));

    if (cfg.mode == TrainMode::apt) {
      for (const BitwidthChange& c : adjust_all(layers, cfg.policy)) {
        result.events.push_back(
            {TrainEvent::Kind::bitwidth_change, epoch, global_iter, c.layer_id, 0.0, c.from, c.to});
      }
    }
    // Each epoch's decision sees only samples taken at its own precision.
    for (LayerState* l : layers) l->gavg_ema.reset();
  }
  return result;
}

}  // namespace apt
