// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "moltenflow/error.hpp"
#include "moltenflow/rng.hpp"

namespace moltenflow {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense row-major array of doubles. A scalar has shape {}.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(shape_size(shape_) == data_.size(),
            "Tensor: shape " + shape_str(shape_) + " does not match " +
                std::to_string(data_.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0); }
  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (auto& v : t.data_) v = stddev * rng.normal();
    return t;
  }
  static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
    require(!rows.empty(), "from_rows: no rows");
    Tensor t(Shape{rows.size(), rows[0].size()});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i].size() == rows[0].size(), "from_rows: ragged rows");
      for (std::size_t j = 0; j < rows[i].size(); ++j) t(i, j) = rows[i][j];
    }
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  // Matrix view helpers: rank-1 tensors are treated as a single row.
  std::size_t rows() const { return rank() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& vec() noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    require(data_.size() == 1, "item: tensor has " + std::to_string(data_.size()) + " values");
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    require(shape_size(s) == data_.size(), "reshape: size mismatch " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double squared_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return s;
  }
  double norm() const { return std::sqrt(squared_norm()); }
  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

  Tensor& operator+=(const Tensor& o) {
    require(o.data_.size() == data_.size(), "+=: size mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(double c) {
    for (auto& v : data_) v *= c;
    return *this;
  }
  // this += c * o
  Tensor& axpy(double c, const Tensor& o) {
    require(o.data_.size() == data_.size(), "axpy: size mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += c * o.data_[i];
    return *this;
  }

  Tensor row(std::size_t r) const {
    Tensor out(Shape{cols()});
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r * cols()), cols(), out.data_.begin());
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator-(Tensor a, const Tensor& b) { return a.axpy(-1.0, b); }
inline Tensor operator*(double c, Tensor a) { return a *= c; }

}  // namespace moltenflow
