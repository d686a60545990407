#pragma once

// Dense row-major 64-bit float tensor. Ranks 0..2 are what the estimators
// use; the invariant product(shape) == data.size() is checked on
// construction and reshape.

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "rd/common.hpp"

namespace rd {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw ShapeError("Tensor: shape/data size mismatch");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<std::size_t> s, double value) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, value));
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  static Tensor row(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
    return Tensor({r, c}, std::move(v));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const {
    if (rank() != 2) throw ShapeError("Tensor::rows: rank != 2");
    return shape[0];
  }
  std::size_t cols() const {
    if (rank() != 2) throw ShapeError("Tensor::cols: rank != 2");
    return shape[1];
  }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const {
    return data[i * shape[1] + j];
  }

  const double* row_ptr(std::size_t i) const { return data.data() + i * shape[1]; }
  double* row_ptr(std::size_t i) { return data.data() + i * shape[1]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool finite() const {
    for (double x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }
};

}  // namespace rd
