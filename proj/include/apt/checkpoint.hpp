#pragma once

// Binary checkpoint: k-bit weight codes with their grid parameters and the
// real-valued biases. Byte layout is documented in docs/checkpoint_format.md.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "apt/network.hpp"
#include "apt/quantizer.hpp"

namespace apt {

inline constexpr char kCheckpointMagic[4] = {'A', 'P', 'T', '1'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointLayer {
  QuantizedTensor weights;
  std::vector<double> bias;

  friend bool operator==(const CheckpointLayer&, const CheckpointLayer&) = default;
};

/// Bytes per stored code at bitwidth k.
inline std::size_t code_bytes(int k) noexcept { return static_cast<std::size_t>((k + 7) / 8); }

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v, std::size_t bytes = sizeof(T)) {
  const auto u = static_cast<std::uint64_t>(v);
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t le(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw CheckpointError("truncated checkpoint");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += n;
    return v;
  }
  double f64() { return std::bit_cast<double>(le(8)); }
  bool done() const noexcept { return pos_ == bytes_.size(); }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(std::span<const CheckpointLayer> layers) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_le(out, static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    const QuantParams& p = l.weights.params;
    detail::put_le(out, static_cast<std::uint8_t>(p.bitwidth));
    detail::put_le(out, std::bit_cast<std::uint64_t>(p.scale));
    detail::put_le(out, p.zero_point);
    detail::put_le(out, static_cast<std::uint32_t>(l.weights.shape.size()));
    for (std::size_t d : l.weights.shape) detail::put_le(out, static_cast<std::uint32_t>(d));
    const std::size_t width = code_bytes(p.bitwidth);
    for (Code c : l.weights.codes) detail::put_le(out, c, width);
    detail::put_le(out, static_cast<std::uint32_t>(l.bias.size()));
    for (double b : l.bias) detail::put_le(out, std::bit_cast<std::uint64_t>(b));
  }
  return out;
}

inline std::vector<CheckpointLayer> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin())) {
    throw CheckpointError("not an APT1 checkpoint");
  }
  detail::ByteReader in(bytes.subspan(4));
  const auto count = in.le(4);
  std::vector<CheckpointLayer> layers;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointLayer l;
    QuantParams& p = l.weights.params;
    p.bitwidth = static_cast<int>(in.le(1));
    check_bitwidth(p.bitwidth);
    p.scale = in.f64();
    p.zero_point = static_cast<std::int64_t>(in.le(8));
    if (!(p.scale > 0.0) || p.zero_point < 0 || p.zero_point > p.max_code()) {
      throw CheckpointError("invalid grid parameters in layer " + std::to_string(i));
    }
    const auto rank = in.le(4);
    const std::size_t width = code_bytes(p.bitwidth);
    std::size_t n = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      l.weights.shape.push_back(in.le(4));
      n *= l.weights.shape.back();
      // Checked per dimension so the product cannot wrap around.
      if (n > in.remaining() / width) throw CheckpointError("truncated checkpoint");
    }
    l.weights.codes.resize(n);
    for (auto& c : l.weights.codes) {
      const auto v = in.le(width);
      if (static_cast<std::int64_t>(v) > p.max_code()) throw CheckpointError("code out of range");
      c = static_cast<Code>(v);
    }
    l.bias.resize(in.le(4));
    for (double& b : l.bias) b = in.f64();
    layers.push_back(std::move(l));
  }
  if (!in.done()) throw CheckpointError("trailing bytes in checkpoint");
  return layers;
}

/// Snapshot of a network's weights. Real-valued reference weights are stored
/// on a 32-bit grid.
inline std::vector<CheckpointLayer> checkpoint_layers(const Network& net) {
  std::vector<CheckpointLayer> out;
  for (const LayerState* s : net.parametric()) {
    CheckpointLayer l;
    l.weights = s->full_precision() ? quantize(std::get<Tensor>(s->weights), kMaxBitwidth) : s->quantized();
    l.bias = s->bias;
    out.push_back(std::move(l));
  }
  return out;
}

/// Replaces the weights and biases of `net` with checkpointed ones. Optimizer
/// state (momentum, Gavg EMA) is reset. Real-valued reference layers stay
/// real-valued.
inline void restore_checkpoint(Network& net, std::span<const CheckpointLayer> layers) {
  auto params = net.parametric();
  if (params.size() != layers.size()) throw CheckpointError("checkpoint layer count does not match network");
  for (std::size_t i = 0; i < params.size(); ++i) {
    LayerState& s = *params[i];
    if (layers[i].weights.shape != s.weight_shape() || layers[i].bias.size() != s.bias.size()) {
      throw CheckpointError("checkpoint layer " + std::to_string(i) + " shape does not match network");
    }
    if (s.full_precision()) {
      s.weights = dequantize(layers[i].weights);
    } else {
      s.weights = layers[i].weights;
    }
    s.bias = layers[i].bias;
    std::fill(s.momentum_buf.values().begin(), s.momentum_buf.values().end(), 0.0);
    std::fill(s.bias_momentum.begin(), s.bias_momentum.end(), 0.0);
    s.gavg_ema.reset();
  }
}

inline void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(checkpoint_layers(net));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write error in " + path.string());
}

inline std::vector<CheckpointLayer> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace apt
