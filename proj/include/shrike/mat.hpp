#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "shrike/error.hpp"
#include "shrike/rng.hpp"

namespace shrike {

// Dense row-major matrix of doubles. Vectors are 1xN or Nx1 as convenient.
class Mat {
 public:
  Mat() = default;
  Mat(int rows, int cols) : rows_(rows), cols_(cols), a_(static_cast<std::size_t>(rows) * cols, 0.0) {
    assert(rows >= 0 && cols >= 0);
  }

  static Mat zeros(int rows, int cols) { return Mat(rows, cols); }

  static Mat identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Mat filled(int rows, int cols, double v) {
    Mat m(rows, cols);
    for (auto& x : m.a_) x = v;
    return m;
  }

  static Mat uniform(int rows, int cols, double lo, double hi, Rng& rng) {
    Mat m(rows, cols);
    for (auto& x : m.a_) x = rng.uniform(lo, hi);
    return m;
  }

  static Mat normal(int rows, int cols, double mean, double stddev, Rng& rng) {
    Mat m(rows, cols);
    for (auto& x : m.a_) x = rng.normal(mean, stddev);
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return a_.size(); }
  bool empty() const { return a_.empty(); }

  double& operator()(int r, int c) {
    assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
    return a_[static_cast<std::size_t>(r) * cols_ + c];
  }
  double operator()(int r, int c) const {
    assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
    return a_[static_cast<std::size_t>(r) * cols_ + c];
  }

  double* data() { return a_.data(); }
  const double* data() const { return a_.data(); }

  double* row_ptr(int r) { return a_.data() + static_cast<std::size_t>(r) * cols_; }
  const double* row_ptr(int r) const { return a_.data() + static_cast<std::size_t>(r) * cols_; }

  std::span<double> row(int r) { return {row_ptr(r), static_cast<std::size_t>(cols_)}; }
  std::span<const double> row(int r) const { return {row_ptr(r), static_cast<std::size_t>(cols_)}; }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (double x : a_) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }

  void fill(double v) {
    for (auto& x : a_) x = v;
  }

  Mat& operator+=(const Mat& o) {
    assert(same_shape(o));
    for (std::size_t i = 0; i < a_.size(); ++i) a_[i] += o.a_[i];
    return *this;
  }

  Mat& operator*=(double s) {
    for (auto& x : a_) x *= s;
    return *this;
  }

  friend bool operator==(const Mat& a, const Mat& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.a_ == b.a_;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> a_;
};

// c += a * b
inline void matmul_acc(const Mat& a, const Mat& b, Mat& c) {
  assert(a.cols() == b.rows() && c.rows() == a.rows() && c.cols() == b.cols());
  const int n = a.rows(), k = a.cols(), m = b.cols();
  for (int i = 0; i < n; ++i) {
    const double* ai = a.row_ptr(i);
    double* ci = c.row_ptr(i);
    for (int p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b.row_ptr(p);
      for (int j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) throw InvalidInputError("matmul: inner dimensions differ");
  Mat c(a.rows(), b.cols());
  matmul_acc(a, b, c);
  return c;
}

// c += a * b^T
inline void matmul_nt_acc(const Mat& a, const Mat& b, Mat& c) {
  assert(a.cols() == b.cols() && c.rows() == a.rows() && c.cols() == b.rows());
  const int n = a.rows(), k = a.cols(), m = b.rows();
  for (int i = 0; i < n; ++i) {
    const double* ai = a.row_ptr(i);
    double* ci = c.row_ptr(i);
    for (int j = 0; j < m; ++j) {
      const double* bj = b.row_ptr(j);
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

inline Mat matmul_nt(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols()) throw InvalidInputError("matmul_nt: inner dimensions differ");
  Mat c(a.rows(), b.rows());
  matmul_nt_acc(a, b, c);
  return c;
}

// c += a^T * b
inline void matmul_tn_acc(const Mat& a, const Mat& b, Mat& c) {
  assert(a.rows() == b.rows() && c.rows() == a.cols() && c.cols() == b.cols());
  const int n = a.cols(), k = a.rows(), m = b.cols();
  for (int p = 0; p < k; ++p) {
    const double* ap = a.row_ptr(p);
    const double* bp = b.row_ptr(p);
    for (int i = 0; i < n; ++i) {
      const double api = ap[i];
      double* ci = c.row_ptr(i);
      for (int j = 0; j < m; ++j) ci[j] += api * bp[j];
    }
  }
}

inline Mat matmul_tn(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows()) throw InvalidInputError("matmul_tn: inner dimensions differ");
  Mat c(a.cols(), b.cols());
  matmul_tn_acc(a, b, c);
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Mat add(const Mat& a, const Mat& b) {
  if (!a.same_shape(b)) throw InvalidInputError("add: shape mismatch");
  Mat c = a;
  c += b;
  return c;
}

inline Mat scale(const Mat& a, double s) {
  Mat c = a;
  c *= s;
  return c;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  assert(a.same_shape(b));
  double m = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
  return m;
}

}  // namespace shrike
