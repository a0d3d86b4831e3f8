#pragma once

#include "road/errors.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace road {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowMatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstRowMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major n-dimensional array with an optional gradient buffer.
///
/// Tensors own their storage and are the unit of persistence for model
/// parameters. Graph nodes refer to leaf tensors by address, so a tensor
/// registered with a graph must outlive that graph.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : shape_(std::move(shape)), data_(Buffer<Scalar>::Zero(checked_size(shape_))) {
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, Buffer<Scalar> data, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
    set_requires_grad(requires_grad);
  }

  static Tensor from(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false) {
    Buffer<Scalar> data(static_cast<Index>(values.size()));
    std::copy(values.begin(), values.end(), data.data());
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor filled(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  Index size() const { return data_.size(); }

  Buffer<Scalar>& data() { return data_; }
  const Buffer<Scalar>& data() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  bool requires_grad() const { return requires_grad_; }

  void set_requires_grad(bool flag) {
    requires_grad_ = flag;
    if (flag && grad_.size() != data_.size()) {
      grad_ = Buffer<Scalar>::Zero(data_.size());
    }
  }

  bool has_grad() const { return grad_.size() == data_.size() && data_.size() > 0; }

  /// Gradient buffer. Tensors that never required a gradient report zeros.
  Buffer<Scalar> grad() const {
    if (has_grad()) return grad_;
    return Buffer<Scalar>::Zero(data_.size());
  }

  const Buffer<Scalar>& grad_buffer() const { return grad_; }

  void accumulate_grad(const Buffer<Scalar>& g) {
    if (g.size() != data_.size()) throw ShapeError("gradient length mismatch");
    if (!has_grad()) grad_ = Buffer<Scalar>::Zero(data_.size());
    grad_ += g;
  }

  void zero_grad() {
    if (grad_.size() > 0) grad_.setZero();
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_, data_.template cast<Other>().eval(), requires_grad_);
    return out;
  }

 private:
  static Index checked_size(const Shape& shape) {
    for (Index d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    return shape_size(shape);
  }

  Shape shape_;
  Buffer<Scalar> data_;
  Buffer<Scalar> grad_;
  bool requires_grad_ = false;
};

}  // namespace road
