// Dense row-major 64-bit tensor used throughout the library.
// Rank is 1 (row vector) or 2 (matrix); scalars are 1x1.
#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dds {

class Tensor {
 public:
  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), v_(rows * cols, fill) {}

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.v_[0] = v;
    return t;
  }

  static Tensor row(std::vector<double> v) {
    Tensor t;
    t.rows_ = 1;
    t.cols_ = v.size();
    t.v_ = std::move(v);
    return t;
  }

  static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> v) {
    if (rows * cols != v.size())
      throw std::invalid_argument("Tensor::from: shape does not match value count");
    Tensor t;
    t.rows_ = rows;
    t.cols_ = cols;
    t.v_ = std::move(v);
    return t;
  }

  // Rejects non-finite values; used at API boundaries.
  static Tensor checked(std::size_t rows, std::size_t cols, std::vector<double> v) {
    Tensor t = from(rows, cols, std::move(v));
    if (!t.all_finite())
      throw std::invalid_argument("Tensor::checked: non-finite value");
    return t;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return v_.size(); }

  double& at(std::size_t i, std::size_t j) { return v_[i * cols_ + j]; }
  double at(std::size_t i, std::size_t j) const { return v_[i * cols_ + j]; }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double item() const {
    if (size() != 1) throw std::logic_error("Tensor::item: not a scalar");
    return v_[0];
  }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  void fill(double x) {
    for (double& y : v_) y = x;
  }

  Tensor transposed() const {
    Tensor t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t.at(j, i) = at(i, j);
    return t;
  }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> v_;
};

// C (+)= A * B with A: m x k, B: k x n. The ikj order keeps the inner loop
// contiguous in both C and B so the compiler can vectorize it.
inline void matmul_nn(double* c, const double* a, const double* b, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (+)= A * B^T with A: m x k, B: n x k.
inline void matmul_nt(double* c, const double* a, const double* b, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      if (accumulate)
        crow[j] += s;
      else
        crow[j] = s;
    }
  }
}

// C (+)= A^T * B with A: k x m, B: k x n.
inline void matmul_tn(double* c, const double* a, const double* b, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* arow = a + kk * m;
    const double* brow = b + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace dds
