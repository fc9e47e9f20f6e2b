#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>

#include <Eigen/Core>

#include "convshard/errors.hpp"

namespace convshard {

/// Four extents of a dense row-major array, outermost first.
struct Shape4 {
  std::size_t d0 = 0, d1 = 0, d2 = 0, d3 = 0;

  constexpr std::size_t size() const { return d0 * d1 * d2 * d3; }
  constexpr std::size_t operator[](std::size_t i) const {
    return std::array<std::size_t, 4>{d0, d1, d2, d3}[i];
  }
  constexpr bool all_positive() const { return d0 > 0 && d1 > 0 && d2 > 0 && d3 > 0; }
  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;

  std::string to_string() const {
    return std::to_string(d0) + "x" + std::to_string(d1) + "x" + std::to_string(d2) + "x" +
           std::to_string(d3);
  }
};

namespace detail {

// Shared storage for the two 4-D array kinds. Data lives in one contiguous
// Eigen column vector so that whole-array arithmetic stays an Eigen expression.
template <typename Scalar>
class Dense4 {
 public:
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  Dense4() = default;

  explicit Dense4(Shape4 shape) : shape_(shape), data_(Storage::Zero(check(shape).size())) {}

  Dense4(Shape4 shape, Storage data) : shape_(check(shape)), data_(std::move(data)) {
    if (static_cast<std::size_t>(data_.size()) != shape_.size())
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.to_string());
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
  bool empty() const { return data_.size() == 0; }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }
  std::span<Scalar> values() { return {data_.data(), size()}; }
  std::span<const Scalar> values() const { return {data_.data(), size()}; }

  /// Contiguous block of d2*d3 values at (i0, i1).
  Scalar* plane(std::size_t i0, std::size_t i1) {
    return data_.data() + (i0 * shape_.d1 + i1) * shape_.d2 * shape_.d3;
  }
  const Scalar* plane(std::size_t i0, std::size_t i1) const {
    return data_.data() + (i0 * shape_.d1 + i1) * shape_.d2 * shape_.d3;
  }

  Scalar& at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) {
    return data_[offset(i0, i1, i2, i3)];
  }
  const Scalar& at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const {
    return data_[offset(i0, i1, i2, i3)];
  }

  ArrayMap array() { return ArrayMap(data_.data(), data_.size()); }
  ConstArrayMap array() const { return ConstArrayMap(data_.data(), data_.size()); }

 protected:
  static const Shape4& check(const Shape4& s) {
    if (!s.all_positive()) throw DimensionError("all dimensions must be >= 1, got " + s.to_string());
    return s;
  }

  std::size_t offset(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const {
    return ((i0 * shape_.d1 + i1) * shape_.d2 + i2) * shape_.d3 + i3;
  }

  Shape4 shape_{};
  Storage data_;
};

}  // namespace detail

/// Batch of feature maps laid out as (n, c, h, w).
template <typename Scalar>
class BasicTensor4 : public detail::Dense4<Scalar> {
  using Base = detail::Dense4<Scalar>;

 public:
  using Base::Base;
  BasicTensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w)
      : Base(Shape4{n, c, h, w}) {}

  std::size_t n() const { return this->shape_.d0; }
  std::size_t c() const { return this->shape_.d1; }
  std::size_t h() const { return this->shape_.d2; }
  std::size_t w() const { return this->shape_.d3; }

  Scalar& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return this->at(n, c, y, x);
  }
  const Scalar& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return this->at(n, c, y, x);
  }

  friend bool operator==(const BasicTensor4& a, const BasicTensor4& b) {
    return a.shape() == b.shape() && a.data() == b.data();
  }
};

/// Convolution kernels laid out as (outMaps, inCh, kH, kW). Kernel j
/// produces output feature map j.
template <typename Scalar>
class BasicKernelBank : public detail::Dense4<Scalar> {
  using Base = detail::Dense4<Scalar>;

 public:
  using Base::Base;
  BasicKernelBank(std::size_t outMaps, std::size_t inCh, std::size_t kH, std::size_t kW)
      : Base(Shape4{outMaps, inCh, kH, kW}) {}

  std::size_t out_maps() const { return this->shape_.d0; }
  std::size_t in_channels() const { return this->shape_.d1; }
  std::size_t kernel_h() const { return this->shape_.d2; }
  std::size_t kernel_w() const { return this->shape_.d3; }

  Scalar& operator()(std::size_t j, std::size_t c, std::size_t ky, std::size_t kx) {
    return this->at(j, c, ky, kx);
  }
  const Scalar& operator()(std::size_t j, std::size_t c, std::size_t ky, std::size_t kx) const {
    return this->at(j, c, ky, kx);
  }

  friend bool operator==(const BasicKernelBank& a, const BasicKernelBank& b) {
    return a.shape() == b.shape() && a.data() == b.data();
  }
};

using Tensor4 = BasicTensor4<double>;
using KernelBank = BasicKernelBank<double>;

/// Copies channels [begin, end) of every sample.
template <typename Scalar>
BasicTensor4<Scalar> slice_channels(const BasicTensor4<Scalar>& t, std::size_t begin,
                                    std::size_t end) {
  if (begin >= end || end > t.c())
    throw DimensionError("channel range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + t.shape().to_string());
  BasicTensor4<Scalar> out(t.n(), end - begin, t.h(), t.w());
  const std::size_t plane = t.h() * t.w();
  for (std::size_t n = 0; n < t.n(); ++n)
    std::copy_n(t.plane(n, begin), (end - begin) * plane, out.plane(n, 0));
  return out;
}

/// Copies kernels [begin, end).
template <typename Scalar>
BasicKernelBank<Scalar> slice_kernels(const BasicKernelBank<Scalar>& k, std::size_t begin,
                                      std::size_t end) {
  if (begin >= end || end > k.out_maps())
    throw DimensionError("kernel range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + k.shape().to_string());
  const std::size_t per = k.in_channels() * k.kernel_h() * k.kernel_w();
  BasicKernelBank<Scalar> out(end - begin, k.in_channels(), k.kernel_h(), k.kernel_w());
  std::copy_n(k.data().data() + begin * per, (end - begin) * per, out.data().data());
  return out;
}

/// Copies input channels [begin, end) of every kernel.
template <typename Scalar>
BasicKernelBank<Scalar> slice_kernel_channels(const BasicKernelBank<Scalar>& k, std::size_t begin,
                                              std::size_t end) {
  if (begin >= end || end > k.in_channels())
    throw DimensionError("kernel channel range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + k.shape().to_string());
  const std::size_t area = k.kernel_h() * k.kernel_w();
  BasicKernelBank<Scalar> out(k.out_maps(), end - begin, k.kernel_h(), k.kernel_w());
  for (std::size_t j = 0; j < k.out_maps(); ++j)
    std::copy_n(k.plane(j, begin), (end - begin) * area, out.plane(j, 0));
  return out;
}

}  // namespace convshard
