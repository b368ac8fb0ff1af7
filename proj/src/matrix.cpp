#include "droppatch/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "droppatch/error.hpp"

namespace droppatch {

namespace {

void require_same(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw DimensionError(std::string(op) + ": " + std::to_string(a.rows) + "x" +
                         std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                         std::to_string(b.cols));
  }
}

}  // namespace

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> v)
    : rows(r), cols(c), values(std::move(v)) {
  if (values.size() != r * c) {
    throw DimensionError("matrix " + std::to_string(r) + "x" + std::to_string(c) + " given " +
                         std::to_string(values.size()) + " values");
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::gaussian(std::size_t r, std::size_t c, double stddev, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.values) v = stddev * standard_normal(rng);
  return m;
}

Matrix Matrix::transpose() const {
  Matrix t(cols, rows);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
  }
  return t;
}

Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw DimensionError("matrix product: " + std::to_string(a.rows) + "x" +
                         std::to_string(a.cols) + " times " + std::to_string(b.rows) + "x" +
                         std::to_string(b.cols));
  }
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double av = a(i, k);
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += av * b(k, j);
    }
  }
  return out;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  require_same(a, b, "matrix sum");
  Matrix out = a;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += b.values[i];
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  require_same(a, b, "matrix difference");
  Matrix out = a;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= b.values[i];
  return out;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix out = a;
  for (double& v : out.values) v *= s;
  return out;
}

double frobenius_norm(const Matrix& a) {
  double acc = 0.0;
  for (double v : a.values) acc += v * v;
  return std::sqrt(acc);
}

Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double mx = a(i, 0);
    for (std::size_t j = 1; j < a.cols; ++j) mx = std::max(mx, a(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) {
      out(i, j) = std::exp(a(i, j) - mx);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < a.cols; ++j) out(i, j) /= z;
  }
  return out;
}

}  // namespace droppatch
