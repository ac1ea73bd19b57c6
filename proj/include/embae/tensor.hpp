#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "embae/errors.hpp"

namespace embae {

// Dense row-major matrix. Vectors are stored as 1 x n. Arithmetic on the
// contents is done by the callers; every reduction in this library
// accumulates in double regardless of T.
template <typename T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c, T fill = T(0))
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  T* row_ptr(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const T* row_ptr(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool operator==(const Matrix&) const = default;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

template <typename To, typename From>
Matrix<To> cast_matrix(const Matrix<From>& m) {
  Matrix<To> out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = static_cast<To>(m.data[i]);
  return out;
}

template <typename T>
void require_shape(const Matrix<T>& m, int rows, int cols, const std::string& what) {
  if (m.rows != rows || m.cols != cols) {
    throw ContractError(what + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                        ", got " + std::to_string(m.rows) + "x" + std::to_string(m.cols));
  }
}

}  // namespace embae
