#pragma once

// Dense row-major matrices in double precision plus the Cholesky and
// least-squares kernels the quantizer is built on. Weights are stored as
// f32 on disk but every computation here runs in 64-bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rpiq/error.hpp"

namespace rpiq {

class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (!std::isfinite(fill)) throw NumericError("matrix fill value is not finite");
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw NumericError("matrix constructed with non-finite entry");
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diagonal(std::span<const double> diag) {
    Matrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Bytes owned by the payload; used for retained-memory accounting.
  std::size_t bytes() const noexcept { return data_.size() * sizeof(double); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct CholeskyFactor {
  Matrix lower;

  std::size_t dim() const noexcept { return lower.rows(); }
};

namespace detail {

inline void require_finite(const Matrix& m, const char* op) {
  for (double v : m.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace detail

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + detail::shape_str(a) + " * " + detail::shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  detail::require_finite(out, "matmul");
  return out;
}

// a * b^T without materializing the transpose. This is the layer forward
// pass f(X; W) = X W^T.
inline Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_transposed: " + detail::shape_str(a) + " * (" +
                     detail::shape_str(b) + ")^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  detail::require_finite(out, "matmul_transposed");
  return out;
}

// a^T * b.
inline Matrix transposed_matmul(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("transposed_matmul: (" + detail::shape_str(a) + ")^T * " +
                     detail::shape_str(b));
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto a_row = a.row(k);
    auto b_row = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      if (aki == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aki * b_row[j];
    }
  }
  detail::require_finite(out, "transposed_matmul");
  return out;
}

// x^T x, computed on the upper triangle and mirrored so the result is
// exactly symmetric.
inline Matrix gram(const Matrix& x) {
  const std::size_t n = x.cols();
  Matrix out(n, n);
  for (std::size_t k = 0; k < x.rows(); ++k) {
    auto x_row = x.row(k);
    for (std::size_t i = 0; i < n; ++i) {
      const double xi = x_row[i];
      if (xi == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t j = i; j < n; ++j) out_row[j] += xi * x_row[j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) out(i, j) = out(j, i);
  }
  detail::require_finite(out, "gram");
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "add");
  Matrix out = a;
  auto ov = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
  detail::require_finite(out, "add");
  return out;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto ov = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] -= bv[i];
  detail::require_finite(out, "subtract");
  return out;
}

inline Matrix scaled(const Matrix& a, double factor) {
  Matrix out = a;
  for (double& v : out.values()) v *= factor;
  detail::require_finite(out, "scaled");
  return out;
}

inline double frobenius_sq(const Matrix& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v * v;
  return acc;
}

inline double frobenius(const Matrix& a) { return std::sqrt(frobenius_sq(a)); }

// ||a - b||_F / max(||b||_F, tiny).
inline double relative_error(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "relative_error");
  double num = 0.0;
  double den = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    num += d * d;
    den += bv[i] * bv[i];
  }
  if (den == 0.0) return std::sqrt(num);
  return std::sqrt(num / den);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

// Columns [c1, c2) of a.
inline Matrix column_slice(const Matrix& a, std::size_t c1, std::size_t c2) {
  if (c1 > c2 || c2 > a.cols()) {
    throw ShapeError("column_slice [" + std::to_string(c1) + "," + std::to_string(c2) +
                     ") out of range for " + detail::shape_str(a));
  }
  Matrix out(a.rows(), c2 - c1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto src = a.row(i).subspan(c1, c2 - c1);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline void assign_columns(Matrix& dst, std::size_t c1, const Matrix& src) {
  if (src.rows() != dst.rows() || c1 + src.cols() > dst.cols()) {
    throw ShapeError("assign_columns: " + detail::shape_str(src) + " at column " +
                     std::to_string(c1) + " into " + detail::shape_str(dst));
  }
  for (std::size_t i = 0; i < dst.rows(); ++i) {
    auto s = src.row(i);
    std::copy(s.begin(), s.end(), dst.row(i).begin() + static_cast<std::ptrdiff_t>(c1));
  }
}

// a[c1:c2, c1:c2].
inline Matrix principal_submatrix(const Matrix& a, std::size_t c1, std::size_t c2) {
  if (a.rows() != a.cols() || c1 > c2 || c2 > a.rows()) {
    throw ShapeError("principal_submatrix out of range for " + detail::shape_str(a));
  }
  Matrix out(c2 - c1, c2 - c1);
  for (std::size_t i = c1; i < c2; ++i) {
    for (std::size_t j = c1; j < c2; ++j) out(i - c1, j - c1) = a(i, j);
  }
  return out;
}

inline bool is_symmetric(const Matrix& h, double tol = 1e-9) {
  if (h.rows() != h.cols()) return false;
  for (std::size_t i = 0; i < h.rows(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double scale = std::max({1.0, std::abs(h(i, j)), std::abs(h(j, i))});
      if (std::abs(h(i, j) - h(j, i)) > tol * scale) return false;
    }
  }
  return true;
}

// Unpivoted Cholesky, h = L L^T. Throws FactorizationError with the index of
// the first non-positive pivot.
inline CholeskyFactor cholesky(const Matrix& h) {
  if (h.rows() != h.cols()) throw ShapeError("cholesky: matrix is " + detail::shape_str(h));
  if (!is_symmetric(h)) throw ArgumentError("cholesky: matrix is not symmetric");
  const std::size_t n = h.rows();
  Matrix lower(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = h(j, j);
    auto lj = lower.row(j);
    for (std::size_t k = 0; k < j; ++k) diag -= lj[k] * lj[k];
    if (!(diag > 0.0)) {
      throw FactorizationError(j, "cholesky: non-positive pivot at index " + std::to_string(j));
    }
    const double ljj = std::sqrt(diag);
    lj[j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      auto li = lower.row(i);
      double acc = h(i, j);
      for (std::size_t k = 0; k < j; ++k) acc -= li[k] * lj[k];
      li[j] = acc / ljj;
    }
  }
  return CholeskyFactor{std::move(lower)};
}

// Solves (L L^T) X = rhs column by column.
inline Matrix spd_solve(const CholeskyFactor& factor, const Matrix& rhs) {
  const std::size_t n = factor.dim();
  if (rhs.rows() != n) {
    throw ShapeError("spd_solve: factor dim " + std::to_string(n) + " vs rhs " +
                     detail::shape_str(rhs));
  }
  const Matrix& l = factor.lower;
  Matrix x = rhs;
  for (std::size_t c = 0; c < rhs.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = x(i, c);
      for (std::size_t k = 0; k < i; ++k) acc -= l(i, k) * x(k, c);
      x(i, c) = acc / l(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double acc = x(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) acc -= l(k, ii) * x(k, c);
      x(ii, c) = acc / l(ii, ii);
    }
  }
  detail::require_finite(x, "spd_solve");
  return x;
}

inline Matrix spd_inverse(const CholeskyFactor& factor) {
  return spd_solve(factor, Matrix::identity(factor.dim()));
}

// Pivots below this fraction of the largest diagonal entry are treated as
// numerically rank deficient by least_squares.
inline constexpr double kSingularPivotRatio = 1e-13;

// Returns B (target.cols x x.cols) minimizing ||target - x B^T||_F^2 via the
// normal equations. B is laid out like a weight block, i.e. transposed
// relative to the textbook (x^T x)^{-1} x^T target.
inline Matrix least_squares(const Matrix& x, const Matrix& target) {
  if (x.rows() != target.rows()) {
    throw ShapeError("least_squares: design " + detail::shape_str(x) + " vs target " +
                     detail::shape_str(target));
  }
  const Matrix g = gram(x);
  double max_diag = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i) max_diag = std::max(max_diag, g(i, i));
  if (max_diag == 0.0) throw SingularError("least_squares: design matrix is zero");
  CholeskyFactor factor;
  try {
    factor = cholesky(g);
  } catch (const FactorizationError& e) {
    throw SingularError("least_squares: normal equations are rank deficient (pivot " +
                        std::to_string(e.pivot()) + ")");
  }
  for (std::size_t i = 0; i < factor.dim(); ++i) {
    const double pivot = factor.lower(i, i);
    if (pivot * pivot < kSingularPivotRatio * max_diag) {
      throw SingularError("least_squares: normal equations are rank deficient (pivot " +
                          std::to_string(i) + ")");
    }
  }
  return transpose(spd_solve(factor, transposed_matmul(x, target)));
}

}  // namespace rpiq
