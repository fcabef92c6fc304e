#pragma once

// Layer kernels with hand-written backward passes. Parametric layers keep
// their weights as k-bit codes; every forward and backward pass works on a
// transient dequantized view, and no real-valued copy survives an iteration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "apt/quantizer.hpp"
#include "apt/tensor.hpp"

namespace apt {

enum class Rounding { nearest, floor };

/// Raised when an update receives NaN or infinite gradients.
class GradientBlowUp : public std::runtime_error {
 public:
  GradientBlowUp() : std::runtime_error("gradient blow-up") {}
};

struct SgdParams {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Weights, bias and optimizer state of one parametric layer.
///
/// `weights` holds k-bit codes for every quantized run. The real-valued
/// alternative exists only for the unquantized reference baseline.
struct LayerState {
  std::variant<QuantizedTensor, Tensor> weights;
  std::vector<double> bias;
  Tensor momentum_buf;
  std::vector<double> bias_momentum;
  std::optional<double> gavg_ema;
  std::int64_t mac_count = 0;  // multiply-accumulates per sample

  bool full_precision() const noexcept { return std::holds_alternative<Tensor>(weights); }

  const QuantizedTensor& quantized() const { return std::get<QuantizedTensor>(weights); }
  QuantizedTensor& quantized() { return std::get<QuantizedTensor>(weights); }

  /// Bits per stored weight; the reference baseline counts as 32.
  int bitwidth() const noexcept {
    if (const auto* q = std::get_if<QuantizedTensor>(&weights)) return q->params.bitwidth;
    return kMaxBitwidth;
  }

  const Shape& weight_shape() const noexcept {
    return std::visit([](const auto& w) -> const Shape& {
      if constexpr (std::is_same_v<std::decay_t<decltype(w)>, QuantizedTensor>) {
        return w.shape;
      } else {
        return w.shape();
      }
    }, weights);
  }

  std::size_t weight_count() const noexcept { return element_count(weight_shape()); }

  void real_weights_into(std::span<double> out) const {
    if (const auto* q = std::get_if<QuantizedTensor>(&weights)) {
      dequantize_into(*q, out);
    } else {
      const auto& w = std::get<Tensor>(weights);
      std::copy(w.data().begin(), w.data().end(), out.begin());
    }
  }

  Tensor real_weights() const {
    Tensor out(weight_shape());
    real_weights_into(out.data());
    return out;
  }

  /// The weight tensor's minimum resolution. For the unquantized baseline this
  /// is the resolution a 32-bit grid over the same range would have.
  double resolution() const {
    if (const auto* q = std::get_if<QuantizedTensor>(&weights)) return epsilon(*q);
    return fit_params(std::get<Tensor>(weights).data(), kMaxBitwidth).scale;
  }

  /// Re-codes the weights at bitwidth k. No-op for the reference baseline.
  void set_bitwidth(int k) {
    if (auto* q = std::get_if<QuantizedTensor>(&weights)) *q = requantize(*q, k);
  }
};

/// Builds a layer from real initial weights: quantized at `bitwidth`, or kept
/// real when `bitwidth` is empty (reference baseline).
inline LayerState make_layer_state(Tensor initial_weights, std::size_t bias_count, std::int64_t macs,
                                   std::optional<int> bitwidth) {
  LayerState s;
  s.momentum_buf = Tensor(initial_weights.shape());
  if (bitwidth) {
    s.weights = quantize(initial_weights, *bitwidth);
  } else {
    s.weights = std::move(initial_weights);
  }
  s.bias.assign(bias_count, 0.0);
  s.bias_momentum.assign(bias_count, 0.0);
  s.mac_count = macs;
  return s;
}

struct LayerGradients {
  Tensor grad_x;
  Tensor grad_w;
  Tensor grad_b;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("shape mismatch: " + what);
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) noexcept {
  const std::size_t n = y.size();
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  const std::size_t n = a.size();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

/// Dequantized weights of an {out, in} dense layer laid out as {in, out}.
inline std::vector<double> transposed_weights(const LayerState& layer, std::size_t out, std::size_t in) {
  std::vector<double> w(out * in);
  layer.real_weights_into(w);
  std::vector<double> t(out * in);
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) t[i * out + o] = w[o * in + i];
  }
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense: weights {out, in}, x {batch, in}, y {batch, out}; y = x W^T + b.

inline Tensor dense_forward(const LayerState& layer, const Tensor& x) {
  const Shape& ws = layer.weight_shape();
  detail::require(ws.size() == 2, "dense weights must be rank 2");
  const std::size_t out = ws[0], in = ws[1];
  detail::require(x.row_width() == in, "dense input width " + std::to_string(x.row_width()) +
                                           " vs weight columns " + std::to_string(in));
  detail::require(layer.bias.size() == out, "dense bias length");
  const std::vector<double> wt = detail::transposed_weights(layer, out, in);
  const std::size_t batch = x.rows();
  Tensor y(Shape{batch, out});
  for (std::size_t b = 0; b < batch; ++b) {
    auto yr = y.row(b);
    std::copy(layer.bias.begin(), layer.bias.end(), yr.begin());
    const auto xr = x.row(b);
    for (std::size_t i = 0; i < in; ++i) {
      if (xr[i] == 0.0) continue;
      detail::axpy(xr[i], std::span<const double>(wt).subspan(i * out, out), yr);
    }
  }
  return y;
}

/// Gradients of a dense layer. grad_w is the raw weight gradient g_ij; the
/// input gradient uses the dequantized weights and is skipped when not needed.
inline LayerGradients dense_backward(const LayerState& layer, const Tensor& x, const Tensor& grad_y,
                                     bool need_grad_x = true) {
  const Shape& ws = layer.weight_shape();
  detail::require(ws.size() == 2, "dense weights must be rank 2");
  const std::size_t out = ws[0], in = ws[1];
  const std::size_t batch = x.rows();
  detail::require(x.row_width() == in, "dense input width");
  detail::require(grad_y.rows() == batch && grad_y.row_width() == out, "dense grad_y shape");

  LayerGradients g;
  g.grad_b = Tensor(Shape{out});
  std::vector<double> gwt(in * out, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto gy = grad_y.row(b);
    detail::axpy(1.0, gy, g.grad_b.data());
    const auto xr = x.row(b);
    for (std::size_t i = 0; i < in; ++i) {
      if (xr[i] == 0.0) continue;
      detail::axpy(xr[i], gy, std::span<double>(gwt).subspan(i * out, out));
    }
  }
  g.grad_w = Tensor(Shape{out, in});
  for (std::size_t i = 0; i < in; ++i) {
    for (std::size_t o = 0; o < out; ++o) g.grad_w[o * in + i] = gwt[i * out + o];
  }

  if (need_grad_x) {
    const std::vector<double> wt = detail::transposed_weights(layer, out, in);
    g.grad_x = Tensor(x.shape());
    for (std::size_t b = 0; b < batch; ++b) {
      const auto gy = grad_y.row(b);
      auto gx = g.grad_x.row(b);
      for (std::size_t i = 0; i < in; ++i) {
        gx[i] = detail::dot(std::span<const double>(wt).subspan(i * out, out), gy);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Conv2d: stride 1, zero "same" padding, odd square kernels.
// weights {out_c, in_c, k, k}; activations are rows of in_c * height * width.

struct ConvShape {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t kernel = 3;

  std::size_t input_features() const noexcept { return in_channels * height * width; }
  std::size_t output_features() const noexcept { return out_channels * height * width; }
  std::int64_t macs() const noexcept {
    return static_cast<std::int64_t>(out_channels * in_channels * kernel * kernel * height * width);
  }
  Shape weight_shape() const { return {out_channels, in_channels, kernel, kernel}; }

  friend bool operator==(const ConvShape&, const ConvShape&) = default;
};

namespace detail {

inline void check_conv(const ConvShape& cs, const LayerState& layer, const Tensor& x) {
  require(cs.kernel % 2 == 1, "conv kernel must be odd");
  require(layer.weight_shape() == cs.weight_shape(), "conv weight shape " +
                                                         shape_string(layer.weight_shape()));
  require(layer.bias.size() == cs.out_channels, "conv bias length");
  require(x.row_width() == cs.input_features(), "conv input width " + std::to_string(x.row_width()));
}

/// Output columns [x0, x1) whose tap at horizontal offset dx stays inside the image.
inline std::pair<std::size_t, std::size_t> valid_span(std::ptrdiff_t dx, std::size_t width) {
  const auto w = static_cast<std::ptrdiff_t>(width);
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -dx);
  const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(w, w - dx);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

inline Tensor conv2d_forward(const ConvShape& cs, const LayerState& layer, const Tensor& x) {
  detail::check_conv(cs, layer, x);
  const Tensor w = layer.real_weights();
  const std::size_t batch = x.rows(), H = cs.height, W = cs.width, K = cs.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(K / 2);
  Tensor y(Shape{batch, cs.output_features()});
  for (std::size_t b = 0; b < batch; ++b) {
    const auto xr = x.row(b);
    auto yr = y.row(b);
    for (std::size_t co = 0; co < cs.out_channels; ++co) {
      auto plane = yr.subspan(co * H * W, H * W);
      std::fill(plane.begin(), plane.end(), layer.bias[co]);
      for (std::size_t ci = 0; ci < cs.in_channels; ++ci) {
        const auto in = xr.subspan(ci * H * W, H * W);
        for (std::size_t ky = 0; ky < K; ++ky) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
          for (std::size_t kx = 0; kx < K; ++kx) {
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const double wv = w[((co * cs.in_channels + ci) * K + ky) * K + kx];
            if (wv == 0.0) continue;
            const auto [x0, x1] = detail::valid_span(dx, W);
            for (std::size_t oy = 0; oy < H; ++oy) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(oy) + dy;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
              const double* src = in.data() + static_cast<std::size_t>(sy) * W;
              double* dst = plane.data() + oy * W;
              for (std::size_t ox = x0; ox < x1; ++ox) {
                dst[ox] += wv * src[static_cast<std::ptrdiff_t>(ox) + dx];
              }
            }
          }
        }
      }
    }
  }
  return y;
}

inline LayerGradients conv2d_backward(const ConvShape& cs, const LayerState& layer, const Tensor& x,
                                      const Tensor& grad_y, bool need_grad_x = true) {
  detail::check_conv(cs, layer, x);
  const std::size_t batch = x.rows(), H = cs.height, W = cs.width, K = cs.kernel;
  detail::require(grad_y.rows() == batch && grad_y.row_width() == cs.output_features(), "conv grad_y shape");
  const auto pad = static_cast<std::ptrdiff_t>(K / 2);
  const Tensor w = layer.real_weights();

  LayerGradients g;
  g.grad_w = Tensor(cs.weight_shape());
  g.grad_b = Tensor(Shape{cs.out_channels});
  if (need_grad_x) g.grad_x = Tensor(x.shape());

  for (std::size_t b = 0; b < batch; ++b) {
    const auto xr = x.row(b);
    const auto gyr = grad_y.row(b);
    for (std::size_t co = 0; co < cs.out_channels; ++co) {
      const auto gplane = gyr.subspan(co * H * W, H * W);
      for (double v : gplane) g.grad_b[co] += v;
      for (std::size_t ci = 0; ci < cs.in_channels; ++ci) {
        const auto in = xr.subspan(ci * H * W, H * W);
        for (std::size_t ky = 0; ky < K; ++ky) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
          for (std::size_t kx = 0; kx < K; ++kx) {
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const std::size_t widx = ((co * cs.in_channels + ci) * K + ky) * K + kx;
            const double wv = w[widx];
            const auto [x0, x1] = detail::valid_span(dx, W);
            double acc = 0.0;
            for (std::size_t oy = 0; oy < H; ++oy) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(oy) + dy;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
              const std::size_t src_off = static_cast<std::size_t>(sy) * W;
              const double* src = in.data() + src_off;
              const double* gy = gplane.data() + oy * W;
              for (std::size_t ox = x0; ox < x1; ++ox) acc += gy[ox] * src[static_cast<std::ptrdiff_t>(ox) + dx];
              if (need_grad_x && wv != 0.0) {
                double* gx = g.grad_x.row(b).data() + ci * H * W + src_off;
                for (std::size_t ox = x0; ox < x1; ++ox) gx[static_cast<std::ptrdiff_t>(ox) + dx] += wv * gy[ox];
              }
            }
            g.grad_w[widx] += acc;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

inline Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& grad_y) {
  detail::require(x.size() == grad_y.size(), "relu grad_y size");
  Tensor g = grad_y;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

struct LossResult {
  double loss = 0.0;  // mean over the batch
  Tensor grad_logits;
};

/// Softmax cross-entropy averaged over the batch, with max subtraction.
inline LossResult softmax_xent(const Tensor& logits, std::span<const int> labels) {
  const std::size_t batch = logits.rows(), classes = logits.row_width();
  detail::require(labels.size() == batch, "label count");
  LossResult r;
  r.grad_logits = Tensor(logits.shape());
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw std::invalid_argument("label " + std::to_string(label) + " out of range");
    }
    const auto z = logits.row(b);
    auto g = r.grad_logits.row(b);
    const double zmax = *std::max_element(z.begin(), z.end());
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      g[c] = std::exp(z[c] - zmax);
      denom += g[c];
    }
    // denom - 1 and denom - e_label are summed directly so that confident
    // predictions keep their relative precision.
    const auto top = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    double rest = 0.0, others = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (c != top) rest += g[c];
      if (c != static_cast<std::size_t>(label)) others += g[c];
    }
    r.loss += (std::log1p(rest) - (z[label] - zmax)) * inv_batch;
    for (std::size_t c = 0; c < classes; ++c) {
      g[c] = (static_cast<std::size_t>(label) == c ? -others / denom : g[c] / denom) * inv_batch;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

/// One SGD step with momentum and weight decay, applied to k-bit weights.
///
/// g_eff = momentum * buf + grad_w + weight_decay * w, and buf takes g_eff.
/// The step lr * g_eff is taken in whole code units on the current grid:
/// round-to-nearest in `nearest` mode, truncated magnitude in `floor` mode.
/// Steps below one code unit (half a unit when rounding) vanish, which is the
/// quantization underflow this library measures. When the stepped codes no
/// longer span the grid's previous extremes the grid is refit to the new
/// values; otherwise the codes are stored against the unchanged grid.
inline void sgd_step_quantized(LayerState& layer, const Tensor& grad_w, const Tensor& grad_b,
                               const SgdParams& opt, Rounding rounding = Rounding::nearest) {
  if (grad_w.size() != layer.weight_count() || grad_b.size() != layer.bias.size()) {
    throw std::invalid_argument("shape mismatch: gradient does not match layer");
  }
  if (!(opt.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!grad_w.all_finite() || !grad_b.all_finite()) throw GradientBlowUp();

  const std::size_t n = layer.weight_count();
  std::vector<double> w(n);
  layer.real_weights_into(w);

  auto& buf = layer.momentum_buf.values();
  for (std::size_t i = 0; i < n; ++i) {
    buf[i] = opt.momentum * buf[i] + grad_w[i] + opt.weight_decay * w[i];
  }
  for (std::size_t j = 0; j < layer.bias.size(); ++j) {
    layer.bias_momentum[j] = opt.momentum * layer.bias_momentum[j] + grad_b[j];
    layer.bias[j] -= opt.lr * layer.bias_momentum[j];
  }

  if (auto* fp = std::get_if<Tensor>(&layer.weights)) {
    for (std::size_t i = 0; i < n; ++i) (*fp)[i] -= opt.lr * buf[i];
    if (!fp->all_finite()) throw GradientBlowUp();
    return;
  }

  QuantizedTensor& q = layer.quantized();
  const QuantParams p = q.params;
  const double inv_scale = 1.0 / p.scale;
  constexpr double kMaxSteps = 0x1.0p52;
  std::vector<std::int64_t> stepped(n);
  std::int64_t old_lo = std::numeric_limits<std::int64_t>::max(), old_hi = -1;
  std::int64_t new_lo = std::numeric_limits<std::int64_t>::max();
  std::int64_t new_hi = std::numeric_limits<std::int64_t>::min();
  for (std::size_t i = 0; i < n; ++i) {
    const double step = opt.lr * buf[i];
    if (!std::isfinite(step)) throw GradientBlowUp();
    const double units = std::clamp(step * inv_scale, -kMaxSteps, kMaxSteps);
    const double delta = rounding == Rounding::nearest ? round_half_away(units) : std::trunc(units);
    const auto code = static_cast<std::int64_t>(q.codes[i]);
    stepped[i] = code - static_cast<std::int64_t>(delta);
    old_lo = std::min(old_lo, code);
    old_hi = std::max(old_hi, code);
    new_lo = std::min(new_lo, stepped[i]);
    new_hi = std::max(new_hi, stepped[i]);
  }

  if (new_lo == old_lo && new_hi == old_hi) {
    for (std::size_t i = 0; i < n; ++i) q.codes[i] = static_cast<Code>(stepped[i]);
    return;
  }
  for (std::size_t i = 0; i < n; ++i) w[i] = p.dequantize(stepped[i]);
  q = quantize(w, fit_params(w, p.bitwidth), q.shape);
}

}  // namespace apt
