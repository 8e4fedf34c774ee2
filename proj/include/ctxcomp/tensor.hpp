#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "ctxcomp/errors.hpp"
#include "ctxcomp/rng.hpp"

namespace ctxcomp {

// Row-major matrix. Vectors are 1 x n. This is deliberately minimal: the
// training loop needs contiguous storage and GEMM, nothing fancier.
template <typename T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, T(0)) {}

  T* row(int i) { return data.data() + static_cast<std::size_t>(i) * cols; }
  const T* row(int i) const { return data.data() + static_cast<std::size_t>(i) * cols; }
  T& at(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
  T at(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }
  std::size_t size() const { return data.size(); }

  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  void resize(int r, int c) {
    rows = r;
    cols = c;
    data.assign(static_cast<std::size_t>(r) * c, T(0));
  }

  void ensure(int r, int c) {
    if (rows != r || cols != c) resize(r, c);
  }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  void fill_gaussian(Rng& rng, double stddev) {
    for (T& v : data) v = static_cast<T>(rng.gaussian() * stddev);
  }

  template <typename U>
  Mat<U> cast() const {
    Mat<U> out(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// C = alpha * op(A) @ op(B) + beta * C, row-major with explicit leading
// dimensions so attention heads can be addressed without copies. Backed by
// BLAS for float/double.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
          int lda, const float* b, int ldb, float beta, float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc);

// Whole-matrix convenience: c = a @ b (+ c if accumulate).
template <typename T>
void matmul(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false) {
  if (a.cols != b.rows) throw ContractError("matmul: inner dimensions disagree");
  c.ensure(a.rows, b.cols);
  gemm(false, false, a.rows, b.cols, a.cols, T(1), a.data.data(), a.cols, b.data.data(),
       b.cols, accumulate ? T(1) : T(0), c.data.data(), c.cols);
}

// Fixed BLAS thread count; call once at startup. Training determinism
// depends on a stable reduction order inside GEMM.
void set_compute_threads(int n);

}  // namespace ctxcomp
