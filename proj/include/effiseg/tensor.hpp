#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "effiseg/errors.hpp"

namespace effiseg {

using Index = Eigen::Index;

/// Dimensions of an NCHW activation or an (out, in, kh, kw) kernel.
struct Shape4 {
  Index n = 1;
  Index c = 1;
  Index h = 1;
  Index w = 1;

  Index size() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
           std::to_string(w) + ")";
  }
};

template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

/// Dense NCHW array. Storage is a contiguous Eigen column array so whole-tensor
/// arithmetic can be written as Eigen array expressions.
template <typename Scalar_>
class Tensor4 {
 public:
  using Scalar = Scalar_;
  using Storage = ArrayX<Scalar>;
  using SampleMap = Eigen::Map<MatrixRM<Scalar>>;
  using ConstSampleMap = Eigen::Map<const MatrixRM<Scalar>>;

  Tensor4() = default;

  explicit Tensor4(const Shape4& shape) : shape_(shape) {
    check_shape(shape);
    data_ = Storage::Zero(shape.size());
  }

  Tensor4(const Shape4& shape, Scalar value) : shape_(shape) {
    check_shape(shape);
    data_ = Storage::Constant(shape.size(), value);
  }

  Tensor4(const Shape4& shape, Storage data) : shape_(shape), data_(std::move(data)) {
    check_shape(shape);
    if (data_.size() != shape.size()) {
      throw ShapeError("tensor data has " + std::to_string(data_.size()) + " values, shape " +
                       shape.str() + " needs " + std::to_string(shape.size()));
    }
  }

  static Tensor4 zeros(const Shape4& shape) { return Tensor4(shape); }
  static Tensor4 constant(const Shape4& shape, Scalar value) { return Tensor4(shape, value); }
  /// Column vector of per-channel values stored as (c, 1, 1, 1).
  static Tensor4 vector(const Storage& values) {
    return Tensor4(Shape4{values.size(), 1, 1, 1}, values);
  }

  const Shape4& shape() const { return shape_; }
  Index n() const { return shape_.n; }
  Index c() const { return shape_.c; }
  Index h() const { return shape_.h; }
  Index w() const { return shape_.w; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }

  /// Sample `i` viewed as a (channels, h*w) row-major matrix.
  SampleMap sample(Index i) {
    return SampleMap(data_.data() + i * shape_.c * shape_.plane(), shape_.c, shape_.plane());
  }
  ConstSampleMap sample(Index i) const {
    return ConstSampleMap(data_.data() + i * shape_.c * shape_.plane(), shape_.c, shape_.plane());
  }

  /// One (h, w) plane as a row-major matrix.
  SampleMap plane(Index n, Index c) {
    return SampleMap(data_.data() + offset(n, c, 0, 0), shape_.h, shape_.w);
  }
  ConstSampleMap plane(Index n, Index c) const {
    return ConstSampleMap(data_.data() + offset(n, c, 0, 0), shape_.h, shape_.w);
  }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor4<Other> cast() const {
    return Tensor4<Other>(shape_, data_.template cast<Other>());
  }

  /// Samples [first, first + count) as a new tensor.
  Tensor4 slice(Index first, Index count) const {
    if (first < 0 || count < 1 || first + count > shape_.n) {
      throw ShapeError("slice [" + std::to_string(first) + ", " + std::to_string(first + count) +
                       ") out of range for batch " + std::to_string(shape_.n));
    }
    const Index per = shape_.c * shape_.plane();
    return Tensor4(Shape4{count, shape_.c, shape_.h, shape_.w}, data_.segment(first * per, count * per));
  }

 private:
  static void check_shape(const Shape4& s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
      throw ShapeError("tensor shape entries must be >= 1, got " + s.str());
    }
  }

  Shape4 shape_{0, 0, 0, 0};
  Storage data_;
};

/// Concatenate along the batch axis.
template <typename Scalar>
Tensor4<Scalar> stack_batch(const std::vector<const Tensor4<Scalar>*>& parts) {
  if (parts.empty()) throw ShapeError("stack_batch needs at least one tensor");
  Shape4 s = parts.front()->shape();
  Index total = 0;
  for (const auto* p : parts) {
    const Shape4& ps = p->shape();
    if (ps.c != s.c || ps.h != s.h || ps.w != s.w) {
      throw ShapeError("stack_batch: " + ps.str() + " does not match " + s.str());
    }
    total += ps.n;
  }
  s.n = total;
  Tensor4<Scalar> out(s);
  Index at = 0;
  for (const auto* p : parts) {
    out.array().segment(at, p->size()) = p->array();
    at += p->size();
  }
  return out;
}

}  // namespace effiseg
