// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace relaykv {

// Dense row-major float32 tensor. Shape is a list of extents; data holds
// product(shape) values. All kernels below use a fixed left-to-right
// reduction order so repeated runs are bit-identical.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s);
  Tensor(std::initializer_list<std::size_t> s) : Tensor(std::vector<std::size_t>(s)) {}

  std::size_t numel() const { return data.size(); }
  bool empty() const { return data.empty(); }

  // 2-D helpers; trailing dims beyond the first are flattened into "cols".
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const;

  float& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;

  // Bitwise comparison (distinguishes -0.0f, treats NaN payloads literally).
  bool bit_equal(const Tensor& other) const;
};

// C = A @ B for A [m x k], B [k x n]. Per output element the k-sum runs
// left to right. Throws std::invalid_argument with a dimension report on
// shape mismatch.
Tensor matmul(const Tensor& a, const Tensor& b);

// Row-wise softmax with per-row max subtraction. Input must be finite.
Tensor softmax_rows(const Tensor& x);
void softmax_inplace(std::span<float> row);

// x * 1/sqrt(mean(x^2) + eps), elementwise times gain.
void rms_norm(std::span<const float> x, std::span<const float> gain, float eps,
              std::span<float> out);
std::vector<float> rms_norm(std::span<const float> x, std::span<const float> gain, float eps);

// Rotary embedding over adjacent pairs (2i, 2i+1): pair i is rotated by
// angle position * theta_base^(-2i/d). Angles and sin/cos are evaluated in
// double so large positions keep the relative-position identity
// dot(rot(q,m+D), rot(k,n+D)) == dot(rot(q,m), rot(k,n)) well below 1e-5;
// results are rounded back to float. Negative positions invert.
void rope_rotate(std::span<float> x, std::int64_t position, float theta_base);
std::vector<float> rope_rotated(std::span<const float> x, std::int64_t position, float theta_base);

// Cosine similarity in [-1, 1]. Near-zero vectors (norm < 1e-12) yield 0.
// Bit-identical inputs yield exactly 1 so bit-equal caches report exactly
// zero deviation downstream.
float cosine(std::span<const float> a, std::span<const float> b);

// Throws std::runtime_error if any value is not finite.
void ensure_finite(std::span<const float> values, const char* what);

}  // namespace relaykv
