#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace arlab::nn {

using Shape = std::vector<std::size_t>;

// Raised when a primitive produces NaN/Inf. Callers treat this as divergence.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// Dense row-major tensor of doubles. Rank-1 tensors behave as a single row
// for the matrix primitives; higher ranks fold leading extents into rows.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(extent_product(), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != extent_product()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }
  std::size_t extent_product() const {
    return std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                           std::multiplies<>());
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Dense kernels. All accumulate into the destination.
namespace kernel {

// Packed 4x16 register-tile GEMM. A and B are copied into zero-padded
// panels, so every output element is produced by the same instruction
// sequence (accumulate from zero in ascending inner index, then add to C)
// whatever its position. Row results never depend on how many rows share a
// call, which keeps prefix/window recomputation bit-identical.
using vec8 = double __attribute__((vector_size(64)));

inline vec8 load8(const double* p) {
  vec8 v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c) {
  constexpr std::size_t kRows = 4, kCols = 16;
  const std::size_t panels = (n + kCols - 1) / kCols;
  std::vector<double> bpack(panels * k * kCols, 0.0);
  for (std::size_t jp = 0; jp < panels; ++jp) {
    const std::size_t j0 = jp * kCols, width = std::min(kCols, n - j0);
    double* dst = bpack.data() + jp * k * kCols;
    for (std::size_t p = 0; p < k; ++p) std::memcpy(dst + p * kCols, b + p * n + j0, width * sizeof(double));
  }
  std::vector<double> apack(k * kRows);
  for (std::size_t i0 = 0; i0 < m; i0 += kRows) {
    const std::size_t height = std::min(kRows, m - i0);
    std::fill(apack.begin(), apack.end(), 0.0);
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t p = 0; p < k; ++p) apack[p * kRows + r] = a[(i0 + r) * k + p];
    }
    for (std::size_t jp = 0; jp < panels; ++jp) {
      const double* bp = bpack.data() + jp * k * kCols;
      const double* ap = apack.data();
      vec8 c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      for (std::size_t p = 0; p < k; ++p) {
        const vec8 b0 = load8(bp + p * kCols), b1 = load8(bp + p * kCols + 8);
        const double a0 = ap[p * kRows], a1 = ap[p * kRows + 1], a2 = ap[p * kRows + 2],
                     a3 = ap[p * kRows + 3];
        c00 += a0 * b0;
        c01 += a0 * b1;
        c10 += a1 * b0;
        c11 += a1 * b1;
        c20 += a2 * b0;
        c21 += a2 * b1;
        c30 += a3 * b0;
        c31 += a3 * b1;
      }
      double tile[kRows][kCols];
      std::memcpy(tile[0], &c00, sizeof(vec8));
      std::memcpy(tile[0] + 8, &c01, sizeof(vec8));
      std::memcpy(tile[1], &c10, sizeof(vec8));
      std::memcpy(tile[1] + 8, &c11, sizeof(vec8));
      std::memcpy(tile[2], &c20, sizeof(vec8));
      std::memcpy(tile[2] + 8, &c21, sizeof(vec8));
      std::memcpy(tile[3], &c30, sizeof(vec8));
      std::memcpy(tile[3] + 8, &c31, sizeof(vec8));
      const std::size_t j0 = jp * kCols, width = std::min(kCols, n - j0);
      for (std::size_t r = 0; r < height; ++r) {
        double* cr = c + (i0 + r) * n + j0;
        for (std::size_t q = 0; q < width; ++q) cr[q] += tile[r][q];
      }
    }
  }
}

inline std::vector<double> transposed(std::size_t rows, std::size_t cols, const double* x) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  }
  return t;
}

// C[m x k] += G[m x n] * B^T, with B stored as [k x n]
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* g,
                    const double* b, double* c) {
  const std::vector<double> bt = transposed(k, n, b);
  gemm_nn(m, n, k, g, bt.data(), c);
}

// C[k x n] += A^T * G, with A stored as [m x k] and G as [m x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* g, double* c) {
  // Chunked over the shared extent so each slice of G stays cache resident.
  constexpr std::size_t kChunk = 64;
  for (std::size_t i0 = 0; i0 < m; i0 += kChunk) {
    const std::size_t len = std::min(kChunk, m - i0);
    const std::vector<double> at = transposed(len, k, a + i0 * k);
    gemm_nn(k, len, n, at.data(), g + i0 * n, c);
  }
}

}  // namespace kernel

}  // namespace arlab::nn
