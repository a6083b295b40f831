#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedsparse {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles with an optional gradient buffer.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape_));
    return data_[0];
  }

  bool has_grad() const noexcept { return grad_.has_value(); }
  std::span<double> grad() {
    if (!grad_) throw std::logic_error("tensor has no gradient");
    return *grad_;
  }
  std::span<const double> grad() const {
    if (!grad_) throw std::logic_error("tensor has no gradient");
    return *grad_;
  }
  /// Allocates a zero gradient if absent and returns it.
  std::span<double> ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
    return *grad_;
  }
  void clear_grad() noexcept { grad_.reset(); }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

}  // namespace fedsparse
