#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cdkt/error.hpp"

namespace cdkt {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// Dense n-dimensional array, row-major. The leading extent is the batch axis
// for activations; matrix() views the tensor as (leading extent) x (rest).
template <typename Scalar>
class BasicTensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_ = Vector::Zero(shape_size(shape_));
  }

  BasicTensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static BasicTensor from_matrix(const RowMatrix& m) {
    return BasicTensor({m.rows(), m.cols()}, Eigen::Map<const Vector>(m.data(), m.size()));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  Index dim(std::size_t axis) const { return shape_.at(axis); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Index rows() const { return shape_.empty() ? 0 : shape_[0]; }
  Index cols() const { return rows() == 0 ? 0 : size() / rows(); }

  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

  // Shape of one row, i.e. every extent after the leading one.
  Shape row_shape() const { return Shape(shape_.begin() + (shape_.empty() ? 0 : 1), shape_.end()); }

  BasicTensor reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  // Gathers rows in the given order into a new tensor.
  BasicTensor take_rows(std::span<const Index> rows) const {
    Shape out_shape = shape_;
    out_shape[0] = static_cast<Index>(rows.size());
    BasicTensor out(std::move(out_shape));
    auto src = matrix();
    auto dst = out.matrix();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= this->rows()) throw ShapeError("row index out of range");
      dst.row(static_cast<Index>(i)) = src.row(rows[i]);
    }
    return out;
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (Index e : shape_) {
      if (e < 0) throw ShapeError("negative extent in shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  Vector data_;
};

using Tensor = BasicTensor<double>;
using Vector = Tensor::Vector;
using RowMatrix = Tensor::RowMatrix;

template <typename Scalar>
void expect_same_shape(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace cdkt
