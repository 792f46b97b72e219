#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace scenemixer {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Extents of a dense row-major array. A default-constructed shape is the
/// "unset" placeholder carried by empty tensors; every other shape has rank
/// >= 1 and extents >= 1.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.empty()) throw ShapeError("shape must have rank >= 1");
    for (std::size_t d : dims_) {
      if (d == 0) throw ShapeError("shape " + str() + " has a zero extent");
    }
  }

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  bool empty() const { return dims_.empty(); }

  std::size_t numel() const {
    if (dims_.empty()) return 0;
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
  }

  std::vector<std::size_t> strides() const {
    std::vector<std::size_t> s(dims_.size(), 1);
    for (std::size_t i = dims_.size(); i-- > 1;) s[i - 1] = s[i] * dims_[i];
    return s;
  }

  std::size_t flat_index(std::span<const std::size_t> coords) const {
    if (coords.size() != dims_.size()) {
      throw ShapeError("coordinate rank " + std::to_string(coords.size()) + " does not match shape " + str());
    }
    std::size_t flat = 0;
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (coords[i] >= dims_[i]) throw ShapeError("coordinate out of range for shape " + str());
      flat = flat * dims_[i] + coords[i];
    }
    return flat;
  }

  std::vector<std::size_t> coords(std::size_t flat) const {
    if (flat >= numel()) throw ShapeError("flat index out of range for shape " + str());
    std::vector<std::size_t> c(dims_.size());
    for (std::size_t i = dims_.size(); i-- > 0;) {
      c[i] = flat % dims_[i];
      flat /= dims_[i];
    }
    return c;
  }

  std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

  bool operator==(const Shape&) const = default;

 private:
  std::vector<std::size_t> dims_;
};

enum class DType { f32, f64 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "tensors hold f32 or f64");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Dense row-major array. Image batches use (n, y, x, c) layout.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T value = T{}) : shape_(std::move(shape)), data_(shape_.numel(), value) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("buffer of " + std::to_string(data_.size()) + " elements does not fit shape " + shape_.str());
    }
  }

  static constexpr DType dtype() { return dtype_of<T>(); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() & { return data_; }
  std::span<const T> data() const& { return data_; }
  // A span into a temporary would dangle.
  void data() && = delete;
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> coords) {
    return data_[shape_.flat_index(std::span<const std::size_t>(coords.begin(), coords.size()))];
  }
  const T& at(std::initializer_list<std::size_t> coords) const {
    return data_[shape_.flat_index(std::span<const std::size_t>(coords.begin(), coords.size()))];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  BasicTensor reshaped(Shape shape) const {
    if (shape.numel() != data_.size()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return BasicTensor(std::move(shape), data_);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename T>
BasicTensor<T> tensor_fill(const Shape& shape, T value) {
  if (shape.empty()) throw ShapeError("tensor_fill needs a non-empty shape");
  return BasicTensor<T>(shape, value);
}

template <typename T>
BasicTensor<T> zeros_like(const BasicTensor<T>& x) {
  return BasicTensor<T>(x.shape(), T{0});
}

template <typename T>
BasicTensor<T> ones_like(const BasicTensor<T>& x) {
  return BasicTensor<T>(x.shape(), T{1});
}

enum class ElementwiseOp { add, sub, mul };

template <typename T>
BasicTensor<T> elementwise(ElementwiseOp op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("elementwise shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
  }
  BasicTensor<T> c(a.shape());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* pc = c.ptr();
  const std::size_t n = a.size();
  switch (op) {
    case ElementwiseOp::add:
      for (std::size_t i = 0; i < n; ++i) pc[i] = pa[i] + pb[i];
      break;
    case ElementwiseOp::sub:
      for (std::size_t i = 0; i < n; ++i) pc[i] = pa[i] - pb[i];
      break;
    case ElementwiseOp::mul:
      for (std::size_t i = 0; i < n; ++i) pc[i] = pa[i] * pb[i];
      break;
  }
  return c;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseOp::add, a, b);
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseOp::sub, a, b);
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseOp::mul, a, b);
}

/// Mean over the listed axes, which are removed from the result. Reducing
/// every axis yields shape [1]. Sums accumulate in double, in row-major order
/// of the reduced coordinates.
template <typename T>
BasicTensor<T> reduce_mean(const BasicTensor<T>& x, std::vector<std::size_t> axes) {
  const std::size_t rank = x.rank();
  std::vector<bool> reduced(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank) throw ShapeError("reduce_mean axis " + std::to_string(a) + " out of range for " + x.shape().str());
    if (reduced[a]) throw ShapeError("reduce_mean axis " + std::to_string(a) + " listed twice");
    reduced[a] = true;
  }
  if (axes.empty()) return x;

  std::vector<std::size_t> kept_dims;
  std::vector<std::size_t> red_dims;
  for (std::size_t i = 0; i < rank; ++i) (reduced[i] ? red_dims : kept_dims).push_back(x.dim(i));
  const Shape out_shape = kept_dims.empty() ? Shape{1} : Shape(kept_dims);
  const std::size_t count = std::accumulate(red_dims.begin(), red_dims.end(), std::size_t{1}, std::multiplies<>());

  std::vector<double> sums(out_shape.numel(), 0.0);
  const auto strides = x.shape().strides();
  std::vector<std::size_t> coord(rank, 0);
  // Walk input in row-major order; per output slot this visits reduced
  // coordinates in row-major order as well.
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t out_flat = 0;
    for (std::size_t i = 0; i < rank; ++i) {
      if (!reduced[i]) out_flat = out_flat * x.dim(i) + coord[i];
    }
    sums[out_flat] += static_cast<double>(x[flat]);
    for (std::size_t i = rank; i-- > 0;) {
      if (++coord[i] < x.dim(i)) break;
      coord[i] = 0;
    }
  }
  BasicTensor<T> out(out_shape);
  for (std::size_t i = 0; i < sums.size(); ++i) out[i] = static_cast<T>(sums[i] / static_cast<double>(count));
  return out;
}

template <typename T>
T max_abs(const BasicTensor<T>& x) {
  T m{0};
  for (T v : x.data()) m = std::max(m, std::abs(v));
  return m;
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
inline Tensor64 finite_diff_grad(const std::function<double(const Tensor64&)>& f, const Tensor64& x, double h) {
  Tensor64 probe = x;
  Tensor64 g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw Error("finite_diff_grad: function returned a non-finite value at coordinate " + std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace scenemixer
