#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <iterator>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "apt/layers.hpp"
#include "apt/random.hpp"

namespace apt {

struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  LayerState state;
};

struct Conv2dLayer {
  ConvShape shape;
  LayerState state;
};

struct ReluLayer {
  std::size_t features = 0;
};

using Layer = std::variant<DenseLayer, Conv2dLayer, ReluLayer>;

/// Weight storage for a freshly built network: k-bit codes, or real weights
/// for the unquantized reference baseline.
struct WeightFormat {
  std::optional<int> bitwidth;

  static WeightFormat quantized(int k) { return {k}; }
  static WeightFormat full_precision() { return {std::nullopt}; }
};

struct ForwardTrace {
  std::vector<Tensor> inputs;  // input seen by each layer
  Tensor logits;
};

struct StepResult {
  double loss = 0.0;
  std::vector<LayerGradients> grads;  // one per parametric layer, in order
  Tensor logits;
};

/// Ordered layer stack ending in softmax cross-entropy.
class Network {
 public:
  Network() = default;
  explicit Network(std::size_t input_features) : input_features_(input_features) {}

  std::size_t input_features() const noexcept { return input_features_; }
  std::size_t output_features() const noexcept { return output_features_or_input(); }

  /// He-normal fan-in init, then storage in `fmt`.
  Network& add_dense(std::size_t out, Rng& rng, WeightFormat fmt) {
    const std::size_t in = output_features_or_input();
    Tensor w(Shape{out, in});
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    for (double& v : w.data()) v = stddev * rng.normal();
    layers_.emplace_back(DenseLayer{in, out, make_layer_state(std::move(w), out,
                                                              static_cast<std::int64_t>(in * out), fmt.bitwidth)});
    return *this;
  }

  Network& add_conv2d(ConvShape shape, Rng& rng, WeightFormat fmt) {
    if (shape.input_features() != output_features_or_input()) {
      throw std::invalid_argument("shape mismatch: conv input does not match previous layer");
    }
    Tensor w(shape.weight_shape());
    const double fan_in = static_cast<double>(shape.in_channels * shape.kernel * shape.kernel);
    const double stddev = std::sqrt(2.0 / fan_in);
    for (double& v : w.data()) v = stddev * rng.normal();
    layers_.emplace_back(
        Conv2dLayer{shape, make_layer_state(std::move(w), shape.out_channels, shape.macs(), fmt.bitwidth)});
    return *this;
  }

  Network& add_relu() {
    layers_.emplace_back(ReluLayer{output_features_or_input()});
    return *this;
  }

  std::span<Layer> layers() noexcept { return layers_; }
  std::span<const Layer> layers() const noexcept { return layers_; }

  std::vector<LayerState*> parametric() {
    std::vector<LayerState*> out;
    for (auto& l : layers_) {
      if (auto* d = std::get_if<DenseLayer>(&l)) out.push_back(&d->state);
      if (auto* c = std::get_if<Conv2dLayer>(&l)) out.push_back(&c->state);
    }
    return out;
  }

  std::vector<const LayerState*> parametric() const {
    std::vector<const LayerState*> out;
    for (const auto& l : layers_) {
      if (const auto* d = std::get_if<DenseLayer>(&l)) out.push_back(&d->state);
      if (const auto* c = std::get_if<Conv2dLayer>(&l)) out.push_back(&c->state);
    }
    return out;
  }

  Tensor forward(const Tensor& x, ForwardTrace* trace = nullptr) const {
    if (x.row_width() != input_features_) {
      throw std::invalid_argument("shape mismatch: network input width " + std::to_string(x.row_width()));
    }
    Tensor h(Shape{x.rows(), x.row_width()}, x.values());
    if (trace) trace->inputs.clear();
    for (const auto& l : layers_) {
      if (trace) trace->inputs.push_back(h);
      h = std::visit([&](const auto& layer) { return forward_one(layer, h); }, l);
    }
    if (trace) trace->logits = h;
    return h;
  }

  /// Forward, loss and backward over one minibatch. Parameters are untouched.
  StepResult loss_and_gradients(const Tensor& x, std::span<const int> labels) const {
    ForwardTrace trace;
    forward(x, &trace);
    LossResult lr = softmax_xent(trace.logits, labels);
    StepResult r;
    r.loss = lr.loss;
    r.logits = std::move(trace.logits);

    Tensor grad = std::move(lr.grad_logits);
    std::vector<LayerGradients> reversed;
    for (std::size_t li = layers_.size(); li-- > 0;) {
      const Tensor& input = trace.inputs[li];
      const bool need_grad_x = li > 0;
      const Layer& l = layers_[li];
      if (const auto* d = std::get_if<DenseLayer>(&l)) {
        LayerGradients g = dense_backward(d->state, input, grad, need_grad_x);
        grad = std::move(g.grad_x);
        reversed.push_back(std::move(g));
      } else if (const auto* c = std::get_if<Conv2dLayer>(&l)) {
        LayerGradients g = conv2d_backward(c->shape, c->state, input, grad, need_grad_x);
        grad = std::move(g.grad_x);
        reversed.push_back(std::move(g));
      } else {
        grad = relu_backward(input, grad);
      }
    }
    r.grads.assign(std::make_move_iterator(reversed.rbegin()), std::make_move_iterator(reversed.rend()));
    return r;
  }

 private:
  std::size_t output_features_or_input() const noexcept {
    if (layers_.empty()) return input_features_;
    return std::visit(
        [](const auto& l) -> std::size_t {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, DenseLayer>) return l.out;
          else if constexpr (std::is_same_v<L, Conv2dLayer>) return l.shape.output_features();
          else return l.features;
        },
        layers_.back());
  }

  static Tensor forward_one(const DenseLayer& l, const Tensor& x) { return dense_forward(l.state, x); }
  static Tensor forward_one(const Conv2dLayer& l, const Tensor& x) { return conv2d_forward(l.shape, l.state, x); }
  static Tensor forward_one(const ReluLayer&, const Tensor& x) { return relu_forward(x); }

  std::size_t input_features_ = 0;
  std::vector<Layer> layers_;
};

/// Fully connected ReLU network; sizes = {input, hidden..., classes}.
inline Network make_mlp(std::span<const std::size_t> sizes, std::uint64_t seed, WeightFormat fmt) {
  if (sizes.size() < 2) throw std::invalid_argument("an MLP needs at least input and output sizes");
  Rng rng(seed);
  Network net(sizes.front());
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    net.add_dense(sizes[i], rng, fmt);
    if (i + 1 < sizes.size()) net.add_relu();
  }
  return net;
}

inline Network make_mlp(std::initializer_list<std::size_t> sizes, std::uint64_t seed, WeightFormat fmt) {
  return make_mlp(std::span<const std::size_t>(sizes.begin(), sizes.size()), seed, fmt);
}

/// conv(filters @ kernel x kernel, same padding) -> relu -> dense(classes).
inline Network make_small_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t filters,
                              std::size_t kernel, std::size_t classes, std::uint64_t seed, WeightFormat fmt) {
  Rng rng(seed);
  Network net(channels * height * width);
  net.add_conv2d(ConvShape{channels, filters, height, width, kernel}, rng, fmt);
  net.add_relu();
  net.add_dense(classes, rng, fmt);
  return net;
}

/// Index of the largest logit per row (first wins on ties).
inline std::vector<int> predict(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    const auto z = logits.row(b);
    out[b] = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

}  // namespace apt
