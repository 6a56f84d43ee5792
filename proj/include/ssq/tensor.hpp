#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ssq/errors.hpp"

namespace ssq {

// Dense row-major real tensor. Rank is the length of `shape`; scalars use
// shape {1}. Gradients, when tracked, live in a tensor of the same shape.
template <typename Real>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<Real> data;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), Real(0));
  }
  Tensor(std::vector<int64_t> s, std::vector<Real> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw ShapeMismatch("tensor data length does not match shape");
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
  int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  Real& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * cols() + j)]; }
  Real at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * cols() + j)]; }
  Real& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  Real operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int64_t> s, Real v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(Real v) { return Tensor({1}, {v}); }
  static Tensor identity(int64_t n) {
    Tensor t({n, n});
    for (int64_t i = 0; i < n; ++i) t.at(i, i) = Real(1);
    return t;
  }
};

// Deterministic seed splitting: derive independent stream seeds from one
// master seed. splitmix64 finalizer.
inline uint64_t split_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed, uint64_t stream = 0) { return Rng(split_seed(seed, stream)); }

template <typename Real>
Tensor<Real> randn(std::vector<int64_t> shape, Rng& rng, Real stddev = Real(1)) {
  Tensor<Real> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.data) v = static_cast<Real>(dist(rng) * static_cast<double>(stddev));
  return t;
}

template <typename Real>
Tensor<Real> rand_uniform(std::vector<int64_t> shape, Rng& rng, Real lo, Real hi) {
  Tensor<Real> t(std::move(shape));
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (auto& v : t.data) v = static_cast<Real>(dist(rng));
  return t;
}

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace ssq
