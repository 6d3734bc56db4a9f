#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <vector>

#include "qg/common.hpp"

namespace qg {

// Dense row-major tensor of reals. Shapes are dynamic; rank is small (<= 4).
struct Tensor {
  std::vector<size_t> shape;
  std::vector<real> v;

  Tensor() = default;
  explicit Tensor(std::vector<size_t> s) : shape(std::move(s)) {
    v.assign(count(shape), real(0));
  }
  Tensor(std::vector<size_t> s, std::vector<real> vals)
      : shape(std::move(s)), v(std::move(vals)) {
    if (v.size() != count(shape)) throw runtime_error("tensor value count does not match shape");
  }

  static size_t count(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
  }

  static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<size_t> s, real x) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }

  static Tensor normal(std::vector<size_t> s, real stddev, std::mt19937_64& rng) {
    Tensor t(std::move(s));
    std::normal_distribution<real> d(0.0, stddev);
    for (auto& x : t.v) x = d(rng);
    return t;
  }

  size_t size() const { return v.size(); }
  size_t dim(size_t i) const { return shape[i]; }
  size_t rank() const { return shape.size(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (real x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  real l2_norm() const {
    real s = 0;
    for (real x : v) s += x * x;
    return std::sqrt(s);
  }
};

}  // namespace qg
