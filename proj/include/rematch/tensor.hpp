// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "rematch/errors.hpp"
#include "rematch/rng.hpp"

namespace rematch {

// Dense row-major tensor. Rank is dynamic but in practice everything here is
// rank 1 or 2; scalars are shape {1}. Templated on the element type so the
// whole stack can be instantiated in double for gradient checking.
template <class Real>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), Real(0));
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

  static TensorT full(std::vector<int> shape, Real v) {
    TensorT t(std::move(shape));
    for (Real& x : t.data_) x = v;
    return t;
  }

  static TensorT scalar(Real v) { return full({1}, v); }

  static TensorT from(std::vector<int> shape, std::vector<Real> data) {
    TensorT t;
    if (checked_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw ShapeError("tensor data size does not match shape " + shape_str(shape));
    }
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  // 2-D accessors; 1-D tensors count as a single row.
  int rows() const { return ndim() <= 1 ? 1 : dim(0); }
  int cols() const { return ndim() == 0 ? 0 : dim(ndim() - 1); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  Real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Real operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  Real& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  Real at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  void fill(Real v) {
    for (Real& x : data_) x = v;
  }

  void fill_gaussian(Rng& rng, Real stddev, Real mean = Real(0)) {
    for (Real& x : data_) x = mean + stddev * static_cast<Real>(rng.next_gaussian());
  }

  bool all_finite() const {
    for (Real x : data_) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  double l2_norm() const {
    double s = 0.0;
    for (Real x : data_) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
  }

  template <class R2>
  TensorT<R2> cast() const {
    std::vector<R2> d(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<R2>(data_[i]);
    return TensorT<R2>::from(shape_, std::move(d));
  }

  std::string shape_str() const { return shape_str(shape_); }

  static std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << 'x';
      os << shape[i];
    }
    os << ']';
    return os.str();
  }

 private:
  static std::int64_t checked_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<Real> data_;
};

using Tensor = TensorT<float>;

}  // namespace rematch
