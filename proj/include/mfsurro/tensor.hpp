#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mfsurro/error.hpp"

namespace mfsurro {

/// (batch, channels, height, width)
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + ")";
}

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s.size(), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size())
      throw ShapeError("tensor data size does not match shape " + to_string(shape));
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape.c + c) * shape.h + h) * shape.w + w;
  }
  T& at(int n, int c, int h, int w) { return data[index(n, c, h, w)]; }
  T at(int n, int c, int h, int w) const { return data[index(n, c, h, w)]; }

  T* plane(int n, int c) { return data.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    std::transform(data.begin(), data.end(), out.data.begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Trainable array with its gradient accumulator.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { grad.fill(T(0)); }
};

/// Channels [begin, end) of every batch item.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end) {
  if (begin < 0 || end > x.shape.c || begin > end) throw ShapeError("channel slice out of range");
  Tensor<T> out({x.shape.n, end - begin, x.shape.h, x.shape.w});
  const std::size_t plane = x.shape.plane();
  for (int n = 0; n < x.shape.n; ++n)
    std::copy(x.plane(n, begin), x.plane(n, begin) + plane * (end - begin), out.plane(n, 0));
  return out;
}

}  // namespace mfsurro
