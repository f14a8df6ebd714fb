// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include "relaykv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace relaykv {

namespace {

std::size_t product(const std::vector<std::size_t>& extents) {
  std::size_t n = 1;
  for (std::size_t e : extents) n *= e;
  return extents.empty() ? 0 : n;
}

std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
  data.assign(product(shape), 0.0f);
}

std::size_t Tensor::cols() const {
  if (shape.size() < 2) return shape.size() == 1 ? 1 : 0;
  std::size_t c = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
  return c;
}

std::span<float> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return {data.data() + r * c, c};
}

std::span<const float> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return {data.data() + r * c, c};
}

bool Tensor::bit_equal(const Tensor& other) const {
  return shape == other.shape &&
         std::memcmp(data.data(), other.data.data(), data.size() * sizeof(float)) == 0;
}

void ensure_finite(std::span<const float> values, const char* what) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(what) + ": non-finite value");
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape) + " x " +
                                shape_str(b.shape));
  }
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out({m, n});
  // i-k-j loop: per output element the k accumulation is still strictly
  // left to right, matching the naive i-j-k triple loop bit for bit.
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a.data.data() + i * k;
    float* orow = out.data.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = arow[kk];
      const float* brow = b.data.data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  ensure_finite(out.data, "matmul");
  return out;
}

void softmax_inplace(std::span<float> row) {
  if (row.empty()) return;
  float mx = row[0];
  for (float v : row) mx = std::max(mx, v);
  float sum = 0.0f;
  for (float& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (float& v : row) v /= sum;
}

Tensor softmax_rows(const Tensor& x) {
  ensure_finite(x.data, "softmax_rows input");
  Tensor out = x;
  const std::size_t r = out.rows();
  for (std::size_t i = 0; i < r; ++i) softmax_inplace(out.row(i));
  ensure_finite(out.data, "softmax_rows");
  return out;
}

void rms_norm(std::span<const float> x, std::span<const float> gain, float eps,
              std::span<float> out) {
  if (x.empty() || x.size() != gain.size() || x.size() != out.size()) {
    throw std::invalid_argument("rms_norm: length mismatch");
  }
  float ms = 0.0f;
  for (float v : x) ms += v * v;
  ms /= static_cast<float>(x.size());
  const float inv = 1.0f / std::sqrt(ms + eps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

std::vector<float> rms_norm(std::span<const float> x, std::span<const float> gain, float eps) {
  std::vector<float> out(x.size());
  rms_norm(x, gain, eps, out);
  ensure_finite(out, "rms_norm");
  return out;
}

void rope_rotate(std::span<float> x, std::int64_t position, float theta_base) {
  if (x.size() % 2 != 0) {
    throw std::invalid_argument("rope_rotate: dimension must be even, got " +
                                std::to_string(x.size()));
  }
  const double d = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size() / 2; ++i) {
    const double freq = std::pow(static_cast<double>(theta_base),
                                 -2.0 * static_cast<double>(i) / d);
    const double angle = static_cast<double>(position) * freq;
    const double c = std::cos(angle), s = std::sin(angle);
    const double x0 = x[2 * i], x1 = x[2 * i + 1];
    x[2 * i] = static_cast<float>(c * x0 - s * x1);
    x[2 * i + 1] = static_cast<float>(s * x0 + c * x1);
  }
}

std::vector<float> rope_rotated(std::span<const float> x, std::int64_t position,
                                float theta_base) {
  std::vector<float> out(x.begin(), x.end());
  rope_rotate(out, position, theta_base);
  ensure_finite(out, "rope_rotate");
  return out;
}

float cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine: length mismatch " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
  float dot = 0.0f, na = 0.0f, nb = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  constexpr float kZeroNorm = 1e-12f;
  if (std::sqrt(na) < kZeroNorm || std::sqrt(nb) < kZeroNorm) return 0.0f;
  if (std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0) return 1.0f;
  const float c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0f, 1.0f);
}

}  // namespace relaykv
