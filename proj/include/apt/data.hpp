#pragma once

// Dataset ingestion: IDX image/label files (optionally gzip-compressed),
// synthetic Gaussian blobs, and seeded minibatch iteration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "apt/random.hpp"
#include "apt/tensor.hpp"

namespace apt {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Tensor images;            // {n, rows, cols} for IDX data, {n, dim} for blobs
  std::vector<int> labels;
  int class_count = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t features() const noexcept { return images.row_width(); }

  void validate() const {
    if (images.rows() != labels.size()) throw DataError("image count does not match label count");
    for (int l : labels) {
      if (l < 0 || l >= class_count) throw DataError("label " + std::to_string(l) + " out of range");
    }
  }

  /// Samples [first, first + count) as a new dataset.
  Dataset slice(std::size_t first, std::size_t count) const {
    if (first + count > size()) throw DataError("slice beyond dataset");
    Dataset out;
    Shape shape = images.shape();
    shape[0] = count;
    const auto width = features();
    std::vector<double> values(images.values().begin() + static_cast<std::ptrdiff_t>(first * width),
                               images.values().begin() + static_cast<std::ptrdiff_t>((first + count) * width));
    out.images = Tensor(std::move(shape), std::move(values));
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(first),
                      labels.begin() + static_cast<std::ptrdiff_t>(first + count));
    out.class_count = class_count;
    return out;
  }
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

/// Whole-file read; zlib passes uncompressed files through unchanged.
std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path);

/// Writes gzip when the path ends in .gz, plain bytes otherwise.
void write_maybe_gzip(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t offset) {
  if (offset + 4 > b.size()) throw DataError("truncated IDX header");
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

inline void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::span<const std::uint8_t> payload;
};

inline IdxArray parse_idx(std::span<const std::uint8_t> bytes, std::uint32_t magic, std::size_t rank,
                          const std::string& what) {
  if (read_be32(bytes, 0) != magic) throw DataError(what + ": not an IDX file");
  IdxArray a;
  std::size_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    a.dims.push_back(read_be32(bytes, 4 + 4 * d));
    count *= a.dims.back();
  }
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header + count) throw DataError(what + ": truncated IDX file");
  a.payload = bytes.subspan(header, count);
  return a;
}

}  // namespace detail

/// Loads an IDX3 image file and IDX1 label file. Pixel bytes map to [0, 1].
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto image_bytes = detail::read_maybe_gzip(images_path);
  const auto label_bytes = detail::read_maybe_gzip(labels_path);
  const auto img = detail::parse_idx(image_bytes, kIdxImageMagic, 3, images_path.string());
  const auto lab = detail::parse_idx(label_bytes, kIdxLabelMagic, 1, labels_path.string());
  if (img.dims[0] != lab.dims[0]) {
    throw DataError("image count " + std::to_string(img.dims[0]) + " does not match label count " +
                    std::to_string(lab.dims[0]));
  }
  Dataset ds;
  std::vector<double> pixels(img.payload.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = img.payload[i] / 255.0;
  ds.images = Tensor(Shape{img.dims[0], img.dims[1], img.dims[2]}, std::move(pixels));
  ds.labels.assign(lab.payload.begin(), lab.payload.end());
  ds.class_count = ds.labels.empty() ? 0 : *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  return ds;
}

/// Writes images (rank 3, values in [0, 1]) and labels as IDX. Paths ending
/// in .gz are compressed.
inline void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  const Shape& s = ds.images.shape();
  if (s.size() != 3) throw DataError("IDX images must be rank 3");
  std::vector<std::uint8_t> img;
  img.reserve(16 + ds.images.size());
  detail::append_be32(img, kIdxImageMagic);
  for (std::size_t d : s) detail::append_be32(img, static_cast<std::uint32_t>(d));
  for (double v : ds.images.data()) {
    img.push_back(static_cast<std::uint8_t>(std::clamp(std::round(v * 255.0), 0.0, 255.0)));
  }
  std::vector<std::uint8_t> lab;
  detail::append_be32(lab, kIdxLabelMagic);
  detail::append_be32(lab, static_cast<std::uint32_t>(ds.labels.size()));
  for (int l : ds.labels) lab.push_back(static_cast<std::uint8_t>(l));
  detail::write_maybe_gzip(images_path, img);
  detail::write_maybe_gzip(labels_path, lab);
}

namespace detail {

inline std::filesystem::path find_idx(const std::filesystem::path& dir, const std::string& stem) {
  for (const auto& candidate : {dir / stem, dir / (stem + ".gz")}) {
    if (std::filesystem::exists(candidate)) return candidate;
  }
  throw DataError("missing " + (dir / stem).string() + "[.gz]");
}

}  // namespace detail

/// Loads `<prefix>-images-idx3-ubyte[.gz]` and `<prefix>-labels-idx1-ubyte[.gz]`
/// from a directory; prefix is "train" or "t10k" in the MNIST layout.
inline Dataset load_idx_dir(const std::filesystem::path& dir, const std::string& prefix) {
  return load_idx(detail::find_idx(dir, prefix + "-images-idx3-ubyte"),
                  detail::find_idx(dir, prefix + "-labels-idx1-ubyte"));
}

/// Gaussian clusters with unit variance. With classes <= dim the class means
/// sit on distinct axes at pairwise distance `separation`; otherwise means are
/// random with per-axis spread `separation`. Labels cycle 0, 1, ..., classes-1.
inline Dataset synthetic_blobs(std::size_t n, std::size_t classes, std::size_t dim, std::uint64_t seed,
                               double separation = 6.0) {
  if (n == 0 || classes == 0 || dim == 0) throw std::invalid_argument("blobs need n, classes, dim >= 1");
  Rng rng(seed);
  std::vector<double> means(classes * dim, 0.0);
  if (classes <= dim) {
    for (std::size_t c = 0; c < classes; ++c) means[c * dim + c] = separation / std::sqrt(2.0);
  } else {
    for (double& m : means) m = separation * rng.normal();
  }
  Dataset ds;
  ds.class_count = static_cast<int>(classes);
  ds.images = Tensor(Shape{n, dim});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    ds.labels[i] = static_cast<int>(c);
    auto row = ds.images.row(i);
    for (std::size_t d = 0; d < dim; ++d) row[d] = means[c * dim + d] + rng.normal();
  }
  return ds;
}

struct Batch {
  Tensor x;
  std::vector<int> y;
  std::vector<std::size_t> indices;
};

/// Seeded minibatch iteration. Each epoch visits every sample once, in an
/// order reshuffled per epoch when `shuffle` is set; the final batch may be short.
class BatchSampler {
 public:
  BatchSampler(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, bool shuffle)
      : ds_(&ds), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
    if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  }

  std::size_t batches_per_epoch() const noexcept { return (ds_->size() + batch_size_ - 1) / batch_size_; }

  void start_epoch(std::size_t epoch) {
    order_.resize(ds_->size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (shuffle_) {
      Rng rng = Rng::derived(seed_, epoch);
      rng.shuffle(std::span<std::size_t>(order_));
    }
    cursor_ = 0;
  }

  std::optional<Batch> next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t count = std::min(batch_size_, order_.size() - cursor_);
    Batch b;
    b.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                     order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + count));
    cursor_ += count;
    const std::size_t width = ds_->features();
    b.x = Tensor(Shape{count, width});
    b.y.resize(count);
    for (std::size_t r = 0; r < count; ++r) {
      const auto src = ds_->images.row(b.indices[r]);
      std::copy(src.begin(), src.end(), b.x.row(r).begin());
      b.y[r] = ds_->labels[b.indices[r]];
    }
    return b;
  }

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace apt
