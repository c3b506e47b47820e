#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mlab {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Base class for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to what an op requires.
class ShapeError : public Error {
 public:
  ShapeError(std::string op, std::string expected, const Shape& actual)
      : Error(op + ": expected " + expected + ", got " + mlab::to_string(actual)),
        op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// A loss or statistic came out NaN/Inf, or a numeric precondition failed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Dense row-major array of doubles. Rank-0 tensors hold one value.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (mlab::numel(shape_) != data_.size()) {
      throw ShapeError("tensor", std::to_string(data_.size()) + " elements",
                       shape_);
    }
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor full(Shape shape, double value) {
    const std::size_t n = mlab::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double value) { return Tensor({}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item", "one element", shape_);
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const {
    if (mlab::numel(shape) != data_.size()) {
      throw ShapeError("reshape", std::to_string(data_.size()) + " elements",
                       shape);
    }
    return Tensor(std::move(shape), data_);
  }

  /// Exact elementwise comparison of shape and payload.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Ordered map name -> tensor; the value-level twin of VarMap.
using ParamSet = std::map<std::string, Tensor>;

/// True when shapes match and payloads are identical bit for bit.
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data();
  const auto y = b.data();
  return std::equal(x.begin(), x.end(), y.begin(), [](double u, double v) {
    return std::bit_cast<std::uint64_t>(u) == std::bit_cast<std::uint64_t>(v);
  });
}

}  // namespace mlab
