#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace cbmlab {

// Dense row-major matrix of doubles. Desk-scale on purpose: no views, no BLAS.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    assert(r < rows_);
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    assert(r < rows_);
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void matvec(const Matrix& a, std::span<const double> x, std::span<double> out) {
  assert(x.size() == a.cols() && out.size() == a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = a.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
}

inline std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  std::vector<double> out(a.rows());
  matvec(a, x, out);
  return out;
}

// out = A^T y
inline void matvec_t(const Matrix& a, std::span<const double> y, std::span<double> out) {
  assert(y.size() == a.rows() && out.size() == a.cols());
  for (std::size_t c = 0; c < a.cols(); ++c) out[c] = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = a.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c] * y[r];
  }
}

// A += alpha * u v^T
inline void add_outer(Matrix& a, double alpha, std::span<const double> u,
                      std::span<const double> v) {
  assert(u.size() == a.rows() && v.size() == a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = a.row(r);
    const double s = alpha * u[r];
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += s * v[c];
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double sq_norm(std::span<const double> a) { return dot(a, a); }

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  assert(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale(std::span<double> x, double alpha) {
  for (double& v : x) v *= alpha;
}

}  // namespace cbmlab
