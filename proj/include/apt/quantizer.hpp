#pragma once

// Per-tensor asymmetric affine quantization, real = scale * (code - zero_point),
// with unsigned codes in [0, 2^k - 1].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "apt/tensor.hpp"

namespace apt {

inline constexpr int kMinBitwidth = 2;
inline constexpr int kMaxBitwidth = 32;

/// Scale floor for tensors whose fitted range collapses to a point.
inline constexpr double kMinScale = 1e-8;

using Code = std::uint32_t;

inline void check_bitwidth(int k) {
  if (k < kMinBitwidth || k > kMaxBitwidth) {
    throw std::invalid_argument("bitwidth " + std::to_string(k) + " outside [2, 32]");
  }
}

/// Largest code at bitwidth k, i.e. 2^k - 1.
inline std::int64_t max_code(int k) noexcept { return (std::int64_t{1} << k) - 1; }

struct QuantParams {
  double scale = 1.0;
  std::int64_t zero_point = 0;
  int bitwidth = 8;

  std::int64_t max_code() const noexcept { return apt::max_code(bitwidth); }
  double dequantize(std::int64_t code) const noexcept {
    return scale * static_cast<double>(code - zero_point);
  }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

struct QuantizedTensor {
  std::vector<Code> codes;
  QuantParams params;
  Shape shape;

  std::size_t size() const noexcept { return codes.size(); }
  int bitwidth() const noexcept { return params.bitwidth; }

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

/// Round half away from zero. std::round has exactly these semantics and does
/// not depend on the current floating-point rounding mode.
inline double round_half_away(double v) noexcept { return std::round(v); }

/// Resolution of a k-bit grid spanning [lo, hi]: (hi - lo) / (2^k - 1).
inline double grid_resolution(double lo, double hi, int k) noexcept {
  return (hi - lo) / static_cast<double>(max_code(k));
}

namespace detail {

inline void check_values(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("empty tensor");
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite input");
  }
}

}  // namespace detail

/// Fits scale and zero point for a k-bit grid covering x.
///
/// The fitted range is [min(x, 0), max(x, 0)] so that 0.0 always falls inside
/// the grid; for the usual mixed-sign weight tensor this is exactly the data
/// range. The scale is that range over 2^k - 1 levels (kMinScale when the
/// range is empty or too narrow for a normal double), and the zero point is the code nearest to where 0.0 lands, which makes 0.0
/// exactly representable without changing the scale.
inline QuantParams fit_params(std::span<const double> x, int k) {
  check_bitwidth(k);
  detail::check_values(x);
  const auto [min_it, max_it] = std::minmax_element(x.begin(), x.end());
  const double lo = std::min(*min_it, 0.0);
  const double hi = std::max(*max_it, 0.0);

  QuantParams p;
  p.bitwidth = k;
  p.scale = grid_resolution(lo, hi, k);
  if (!(p.scale >= std::numeric_limits<double>::min())) p.scale = kMinScale;
  const double zero = round_half_away(-lo / p.scale);
  p.zero_point = std::clamp(static_cast<std::int64_t>(zero), std::int64_t{0}, max_code(k));
  return p;
}

/// Code for a single value: clamp(round(v / scale) + zero_point, 0, 2^k - 1).
inline Code quantize_value(double v, const QuantParams& p) noexcept {
  const double code = round_half_away(v / p.scale) + static_cast<double>(p.zero_point);
  return static_cast<Code>(std::clamp(code, 0.0, static_cast<double>(p.max_code())));
}

inline QuantizedTensor quantize(std::span<const double> x, const QuantParams& p, Shape shape) {
  check_bitwidth(p.bitwidth);
  if (!(p.scale > 0.0)) throw std::invalid_argument("scale must be positive");
  if (element_count(shape) != x.size()) {
    throw std::invalid_argument("shape " + shape_string(shape) + " does not match " +
                                std::to_string(x.size()) + " values");
  }
  QuantizedTensor q;
  q.params = p;
  q.shape = std::move(shape);
  q.codes.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw std::invalid_argument("non-finite input");
    q.codes[i] = quantize_value(x[i], p);
  }
  return q;
}

inline QuantizedTensor quantize(const Tensor& x, const QuantParams& p) {
  return quantize(x.data(), p, x.shape());
}

/// Fit at bitwidth k and quantize in one go.
inline QuantizedTensor quantize(const Tensor& x, int k) { return quantize(x, fit_params(x.data(), k)); }

inline void dequantize_into(const QuantizedTensor& q, std::span<double> out) {
  for (std::size_t i = 0; i < q.codes.size(); ++i) out[i] = q.params.dequantize(q.codes[i]);
}

inline Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape);
  dequantize_into(q, out.data());
  return out;
}

/// The tensor's minimum resolution: the real gap between adjacent codes.
inline double epsilon(const QuantizedTensor& q) noexcept { return q.params.scale; }

/// Re-codes q at a new bitwidth, refitting the grid to its current real values.
inline QuantizedTensor requantize(const QuantizedTensor& q, int k_new) {
  check_bitwidth(k_new);
  if (k_new == q.params.bitwidth) return q;
  const Tensor values = dequantize(q);
  return quantize(values, fit_params(values.data(), k_new));
}

}  // namespace apt
