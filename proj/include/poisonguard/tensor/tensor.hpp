#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace poisonguard {

using Shape = std::vector<std::size_t>;

/// Element storage aligned for the widest enabled SIMD width. Vectorized
/// kernels pick their peeling by address, so a fixed alignment keeps float
/// results identical from run to run.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major n-d array. `grad` is empty until a backward pass (or an
/// explicit allocation) gives it the same length as `data`.
template <typename T>
struct Tensor {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T{0})
      : shape(std::move(s)), data(shape_numel(shape), fill) {
    check_shape();
  }

  Tensor(Shape s, Buffer<T> values) : shape(std::move(s)), data(std::move(values)) {
    check_length();
  }

  Tensor(Shape s, std::initializer_list<T> values)
      : shape(std::move(s)), data(values.begin(), values.end()) {
    check_length();
  }

  Tensor(Shape s, const std::vector<T>& values)
      : shape(std::move(s)), data(values.begin(), values.end()) {
    check_length();
  }

  std::size_t numel() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }
  bool has_grad() const { return !grad.empty(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), T{0});
  }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, Buffer<U>(data.begin(), data.end()));
  }

 private:
  void check_length() const {
    check_shape();
    if (data.size() != shape_numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
  }

  void check_shape() const {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape));
    }
  }
};

template <typename T>
using Var = std::shared_ptr<Tensor<T>>;

template <typename T>
Var<T> make_var(Tensor<T> t, bool requires_grad = false) {
  auto v = std::make_shared<Tensor<T>>(std::move(t));
  v->requires_grad = requires_grad;
  return v;
}

template <typename T>
Var<T> make_param(Shape shape, T fill = T{0}) {
  return make_var(Tensor<T>(std::move(shape), fill), true);
}

inline void expect_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " +
                     std::to_string(rank) + ", got " + shape_str(s));
  }
}

inline void expect_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
  }
}

}  // namespace poisonguard
