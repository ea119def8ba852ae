// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "mote/error.hpp"

namespace mote {

/// Dense row-major tensor of 64-bit floats with an optional gradient slot.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless allocated; same length as data

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
  }

  static std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out += "x";
      out += std::to_string(s[i]);
    }
    return out + ")";
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  void alloc_grad() { grad.assign(data.size(), 0.0); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  static Tensor vec(std::vector<double> d) {
    std::size_t n = d.size();
    return Tensor({n}, std::move(d));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> d) {
    return Tensor({r, c}, std::move(d));
  }
  static Tensor zeros(std::size_t r, std::size_t c) { return Tensor({r, c}); }
  static Tensor full(std::vector<std::size_t> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

namespace detail {

// C[m x n] += A[m x k] * B[k x n]. The p-ascending accumulation order per
// output element is part of the contract: oracles replay the same order.
inline void matmul_acc(const double* a, const double* b, double* c,
                       std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void matmul_nt_acc(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void matmul_tn_acc(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void layer_norm_row(const double* x, const double* gain,
                           const double* bias, double eps, std::size_t d,
                           double* y) {
  double mean = 0.0;
  for (std::size_t j = 0; j < d; ++j) mean += x[j];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double c = x[j] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);  // biased variance
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t j = 0; j < d; ++j)
    y[j] = (x[j] - mean) * inv * gain[j] + bias[j];
}

inline void softmax_row(const double* x, std::size_t n, double* y) {
  double mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
}

// GELU, tanh approximation. Fixed constants: sqrt(2/pi) and 0.044715.
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline double l2_norm(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += x[j] * x[j];
  return std::sqrt(s);
}

}  // namespace detail

/// Standard matrix product. Throws ShapeError naming both shapes.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
    throw ShapeError("matmul: incompatible shapes " + Tensor::shape_str(a.shape) +
                     " and " + Tensor::shape_str(b.shape));
  Tensor c = Tensor::zeros(a.shape[0], b.shape[1]);
  detail::matmul_acc(a.data.data(), b.data.data(), c.data.data(), a.shape[0],
                     a.shape[1], b.shape[1]);
  return c;
}

/// Row-wise layer normalization with biased variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps) {
  const std::size_t d = x.cols();
  if (d == 0) throw ShapeError("layer_norm: empty normalization axis");
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias length " +
                     std::to_string(gain.numel()) + "/" +
                     std::to_string(bias.numel()) + " does not match width " +
                     std::to_string(d));
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.rows(); ++i)
    detail::layer_norm_row(x.data.data() + i * d, gain.data.data(),
                           bias.data.data(), eps, d, y.data.data() + i * d);
  return y;
}

/// Numerically stable softmax of a vector.
inline Tensor softmax(const Tensor& v) {
  if (v.numel() == 0) throw ShapeError("softmax: empty input");
  Tensor y(v.shape);
  detail::softmax_row(v.data.data(), v.numel(), y.data.data());
  return y;
}

/// Cosine similarity of two equal-length vectors, clamped to [-1, 1].
inline double cosine_similarity(const Tensor& u, const Tensor& v) {
  if (u.numel() != v.numel())
    throw ShapeError("cosine_similarity: lengths " + std::to_string(u.numel()) +
                     " and " + std::to_string(v.numel()) + " differ");
  const double nu = detail::l2_norm(u.data.data(), u.numel());
  const double nv = detail::l2_norm(v.data.data(), v.numel());
  if (nu == 0.0 || nv == 0.0)
    throw DegenerateInputError("cosine_similarity: zero-norm vector");
  double dot = 0.0;
  for (std::size_t i = 0; i < u.numel(); ++i) dot += u.data[i] * v.data[i];
  return std::clamp(dot / (nu * nv), -1.0, 1.0);
}

}  // namespace mote
