#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace epic {

// Dense row-major matrix. Small enough that we do not need expression
// templates; all hot loops are written out in tape.hpp.
template <typename T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {}

  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  const T& at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  T* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const T* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

  size_t size() const { return data.size(); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  static Matrix zeros(int r, int c) { return Matrix(r, c); }

  static Matrix row_vector(const std::vector<T>& v) {
    Matrix m(1, static_cast<int>(v.size()));
    m.data = v;
    return m;
  }
};

// C += or = op(A) * op(B). Plain loops; the nn/nt cases are the hot ones and
// vectorize cleanly at -O3.
template <typename T>
void matmul_into(const Matrix<T>& a, bool ta, const Matrix<T>& b, bool tb,
                 Matrix<T>& c, bool accumulate) {
  const int m = ta ? a.cols : a.rows;
  const int k = ta ? a.rows : a.cols;
  const int kb = tb ? b.cols : b.rows;
  const int n = tb ? b.rows : b.cols;
  if (k != kb) throw std::invalid_argument("matmul: inner dimensions differ");
  if (c.rows != m || c.cols != n) c = Matrix<T>(m, n);
  if (!accumulate) c.fill(T(0));

  if (!ta && !tb) {
    for (int i = 0; i < m; ++i) {
      T* crow = c.row_ptr(i);
      const T* arow = a.row_ptr(i);
      for (int p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b.row_ptr(p);
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (int i = 0; i < m; ++i) {
      const T* arow = a.row_ptr(i);
      T* crow = c.row_ptr(i);
      for (int j = 0; j < n; ++j) {
        const T* brow = b.row_ptr(j);
        T acc = T(0);
        for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  } else if (ta && !tb) {
    for (int p = 0; p < k; ++p) {
      const T* arow = a.row_ptr(p);
      const T* brow = b.row_ptr(p);
      for (int i = 0; i < m; ++i) {
        const T av = arow[i];
        T* crow = c.row_ptr(i);
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      T* crow = c.row_ptr(i);
      for (int j = 0; j < n; ++j) {
        T acc = T(0);
        for (int p = 0; p < k; ++p) acc += a.at(p, i) * b.at(j, p);
        crow[j] += acc;
      }
    }
  }
}

}  // namespace epic
