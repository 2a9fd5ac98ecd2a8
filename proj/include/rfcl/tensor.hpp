#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rfcl/error.hpp"

namespace rfcl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major f64 array with an optional gradient slot.
///
/// A Tensor is a handle: copies share storage, so a parameter held by a model
/// and by an optimizer is the same object. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : storage_(std::make_shared<Storage>()) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    storage_->shape = std::move(shape);
    storage_->values = std::move(values);
    storage_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(storage_); }

  const Shape& shape() const { return get().shape; }
  std::size_t rank() const { return get().shape.size(); }
  std::size_t size() const { return get().values.size(); }
  std::size_t dim(std::size_t axis) const { return get().shape.at(axis); }

  /// Rows of a matrix view: all leading axes collapsed.
  std::size_t rows() const { return size() / cols(); }
  /// Extent of the last axis.
  std::size_t cols() const { return get().shape.back(); }

  std::span<const double> values() const { return get().values; }
  std::span<double> values() { return get().values; }
  double operator[](std::size_t i) const { return get().values[i]; }
  double at(std::size_t r, std::size_t c) const { return get().values[r * cols() + c]; }

  double item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_string(shape()));
    return get().values[0];
  }

  bool requires_grad() const { return get().requires_grad; }
  void set_requires_grad(bool flag) {
    get().requires_grad = flag;
    if (!flag) get().grad.clear();
  }

  bool has_grad() const { return !get().grad.empty(); }
  std::span<const double> grad() const { return get().grad; }
  // Gradient slots mutate shared storage, so they work through const handles.
  std::span<double> mutable_grad() const {
    ensure_grad();
    return get().grad;
  }
  void ensure_grad() const {
    if (get().grad.empty()) get().grad.assign(size(), 0.0);
  }
  void zero_grad() const { get().grad.assign(size(), 0.0); }
  void clear_grad() const { get().grad.clear(); }

  /// Gradient, or zeros if the slot was never written.
  std::vector<double> grad_or_zeros() const {
    if (has_grad()) return get().grad;
    return std::vector<double>(size(), 0.0);
  }

  /// Deep copy of values; the copy carries no gradient.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(get().shape, get().values, requires_grad);
  }

  bool shares_storage_with(const Tensor& other) const { return storage_ == other.storage_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  Storage& get() const {
    if (!storage_) throw StateError("use of an undefined tensor");
    return *storage_;
  }

  std::shared_ptr<Storage> storage_;
};

}  // namespace rfcl
