/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hifimamba/error.hpp"

namespace hifi {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor of doubles. The last dimension is contiguous.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeMismatch("data length " + std::to_string(data_.size()) + " vs shape " +
                          shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  const double& operator[](std::size_t i) const noexcept { return data_[i]; }

  template <typename... Idx>
  double& at(Idx... idx) {
    return data_[offset(idx...)];
  }
  template <typename... Idx>
  double at(Idx... idx) const {
    return data_[offset(idx...)];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size())
      throw ShapeMismatch("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    require_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double a) {
    for (auto& v : data_) v *= a;
    return *this;
  }
  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, double s) { return a *= s; }
  friend Tensor operator*(double s, Tensor a) { return a *= s; }

  void require_same(const Tensor& o) const {
    if (shape_ != o.shape_) throw ShapeMismatch(shape_str(shape_) + " vs " + shape_str(o.shape_));
  }

 private:
  template <typename... Idx>
  std::size_t offset(Idx... idx) const {
    const std::size_t ids[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizeof...(Idx); ++i) off = off * shape_[i] + ids[i];
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  a.require_same(b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double sum_sq(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

inline double l2_norm(const Tensor& a) { return std::sqrt(sum_sq(a)); }

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

inline Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, stddev);
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

inline Tensor rand_uniform(Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> ud(lo, hi);
  for (auto& v : t.data()) v = ud(rng);
  return t;
}

}  // namespace hifi
