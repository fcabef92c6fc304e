#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace apt {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major real tensor. Data length always equals the shape product.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  /// Number of leading-axis rows; the product of the remaining axes is the row width.
  std::size_t rows() const noexcept { return shape_.empty() ? 1 : shape_.front(); }
  std::size_t row_width() const noexcept { return rows() == 0 ? 0 : data_.size() / rows(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) noexcept { return data().subspan(r * row_width(), row_width()); }
  std::span<const double> row(std::size_t r) const noexcept {
    return data().subspan(r * row_width(), row_width());
  }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  void reshape(Shape shape) {
    if (element_count(shape) != data_.size()) {
      throw std::invalid_argument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  bool all_finite() const noexcept {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace apt
