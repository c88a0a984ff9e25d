#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

extern "C" {
void cblas_dgemm(int order, int transa, int transb, int m, int n, int k,
                 double alpha, const double* a, int lda, const double* b,
                 int ldb, double beta, double* c, int ldc);
void openblas_set_num_threads(int n);
}

namespace bowfree {

class error : public std::runtime_error {
 public:
  explicit error(const std::string& what) : std::runtime_error(what) {}
};

// Pins BLAS to one thread. Each trainer/simulation job is single threaded by
// contract; parallelism happens across jobs.
inline void use_single_threaded_blas() { openblas_set_num_threads(1); }

// Dense row-major matrix of doubles. The only matrix type in the project;
// graphs are small so everything is dense.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw error("Matrix: negative dimension");
  }

  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }

  double& operator()(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

inline void check_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b))
    throw error(std::string(op) + ": shape mismatch (" + a.shape_str() + " vs " +
                b.shape_str() + ")");
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  check_same_shape("add", a, b);
  Matrix r = a;
  for (size_t i = 0; i < r.size(); ++i) r.data()[i] += b.data()[i];
  return r;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  check_same_shape("sub", a, b);
  Matrix r = a;
  for (size_t i = 0; i < r.size(); ++i) r.data()[i] -= b.data()[i];
  return r;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  check_same_shape("mul", a, b);
  Matrix r = a;
  for (size_t i = 0; i < r.size(); ++i) r.data()[i] *= b.data()[i];
  return r;
}

inline Matrix scaled(const Matrix& a, double c) {
  Matrix r = a;
  for (size_t i = 0; i < r.size(); ++i) r.data()[i] *= c;
  return r;
}

inline void axpy(double c, const Matrix& x, Matrix& y) {
  check_same_shape("axpy", x, y);
  for (size_t i = 0; i < y.size(); ++i) y.data()[i] += c * x.data()[i];
}

enum class Trans { No, Yes };

// c = alpha * op(a) * op(b) + beta * c, row-major dgemm.
inline void gemm(Trans ta, Trans tb, double alpha, const Matrix& a,
                 const Matrix& b, double beta, Matrix& c) {
  const int m = (ta == Trans::No) ? a.rows() : a.cols();
  const int k = (ta == Trans::No) ? a.cols() : a.rows();
  const int kb = (tb == Trans::No) ? b.rows() : b.cols();
  const int n = (tb == Trans::No) ? b.cols() : b.rows();
  if (k != kb)
    throw error("matmul: shape mismatch (" + a.shape_str() + " vs " + b.shape_str() + ")");
  if (c.rows() != m || c.cols() != n)
    throw error("matmul: bad output shape " + c.shape_str());
  // CblasRowMajor=101, CblasNoTrans=111, CblasTrans=112
  cblas_dgemm(101, ta == Trans::No ? 111 : 112, tb == Trans::No ? 111 : 112, m, n,
              k, alpha, a.data(), a.cols(), b.data(), b.cols(), beta, c.data(),
              c.cols());
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  gemm(Trans::No, Trans::No, 1.0, a, b, 0.0, c);
  return c;
}

inline Matrix transposed(const Matrix& a) {
  Matrix r(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) r(j, i) = a(i, j);
  return r;
}

inline double trace_of(const Matrix& a) {
  if (a.rows() != a.cols()) throw error("trace: non-square input " + a.shape_str());
  double t = 0.0;
  for (int i = 0; i < a.rows(); ++i) t += a(i, i);
  return t;
}

inline double sum_of(const Matrix& a) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  return s;
}

inline double frobenius_sq(const Matrix& a) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a.data()[i] * a.data()[i];
  return s;
}

inline double max_abs(const Matrix& a) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s = std::max(s, std::abs(a.data()[i]));
  return s;
}

// Scaled Taylor series with repeated squaring; terms truncated once their
// Frobenius norm drops below 1e-12.
inline Matrix matrix_exp(const Matrix& a) {
  if (a.rows() != a.cols()) throw error("matrix_exp: non-square input " + a.shape_str());
  const int n = a.rows();
  int squarings = 0;
  double nrm = max_abs(a) * n;
  while (nrm > 0.5 && squarings < 40) {
    nrm /= 2.0;
    ++squarings;
  }
  Matrix b = scaled(a, 1.0 / static_cast<double>(1ull << squarings));
  Matrix e = Matrix::identity(n) + b;
  Matrix term = b;
  for (int k = 2; k <= 60; ++k) {
    term = scaled(matmul(term, b), 1.0 / k);
    e = e + term;
    if (std::sqrt(frobenius_sq(term)) < 1e-12) break;
  }
  for (int s = 0; s < squarings; ++s) e = matmul(e, e);
  return e;
}

// Solves (a + ridge*I) x = b for symmetric positive definite a, in-place
// Cholesky. Used by the kernel regression; a is overwritten.
inline Matrix cholesky_solve(Matrix a, const Matrix& b, double ridge) {
  const int n = a.rows();
  if (a.cols() != n) throw error("cholesky_solve: non-square input " + a.shape_str());
  if (b.rows() != n) throw error("cholesky_solve: rhs rows " + b.shape_str());
  for (int i = 0; i < n; ++i) a(i, i) += ridge;
  // lower Cholesky
  for (int j = 0; j < n; ++j) {
    double d = a(j, j);
    for (int k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (d <= 0.0) throw error("cholesky_solve: matrix not positive definite");
    d = std::sqrt(d);
    a(j, j) = d;
    for (int i = j + 1; i < n; ++i) {
      double s = a(i, j);
      const double* ri = &a(i, 0);
      const double* rj = &a(j, 0);
      for (int k = 0; k < j; ++k) s -= ri[k] * rj[k];
      a(i, j) = s / d;
    }
  }
  Matrix x = b;
  const int m = b.cols();
  // forward then backward substitution
  for (int c = 0; c < m; ++c) {
    for (int i = 0; i < n; ++i) {
      double s = x(i, c);
      for (int k = 0; k < i; ++k) s -= a(i, k) * x(k, c);
      x(i, c) = s / a(i, i);
    }
    for (int i = n - 1; i >= 0; --i) {
      double s = x(i, c);
      for (int k = i + 1; k < n; ++k) s -= a(k, i) * x(k, c);
      x(i, c) = s / a(i, i);
    }
  }
  return x;
}

}  // namespace bowfree
