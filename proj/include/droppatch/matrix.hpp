#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "droppatch/random.hpp"

namespace droppatch {

/// Row-major dense matrix without autodiff; the value type of the analysis code.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> v);

  static Matrix identity(std::size_t n);
  static Matrix gaussian(std::size_t r, std::size_t c, double stddev, Rng& rng);

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }

  Matrix transpose() const;
  bool operator==(const Matrix&) const = default;
};

Matrix operator*(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);

double frobenius_norm(const Matrix& a);

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& a);

}  // namespace droppatch
