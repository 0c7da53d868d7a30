#include "rgflow/kernels.hpp"

#include <cmath>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace rgflow::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1 << 15;

inline double logistic(double v) {
  // Split by sign so exp never overflows.
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// C = A * B with A m x k, B k x n, all row-major.
void gemm_nn_rows(std::size_t row_begin, std::size_t row_end, std::size_t n,
                  std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = row_begin; i < row_end; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C = A^T * B with A stored k x m.
void gemm_tn_rows(std::size_t row_begin, std::size_t row_end, std::size_t m,
                  std::size_t n, std::size_t k, const double* a,
                  const double* b, double* c) {
  for (std::size_t i = row_begin; i < row_end; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p * m + i];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

std::vector<double> transpose_copy(const double* src, std::size_t rows,
                                   std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

template <bool Parallel>
void gemm_impl(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
               std::span<const double> a, std::span<const double> b,
               std::span<double> c, bool accumulate) {
  if (!accumulate) {
    for (auto& v : c) v = 0.0;
  }
  if (m == 0 || n == 0 || k == 0) return;

  // Materialize B untransposed: B is usually a small weight matrix.
  std::vector<double> bt;
  const double* bp = b.data();
  if (tb == Trans::Yes) {
    bt = transpose_copy(b.data(), n, k);
    bp = bt.data();
  }
  const double* ap = a.data();
  double* cp = c.data();
  const bool use_threads = Parallel && m * n * k >= kParallelWork && m > 1;
  const auto rows = static_cast<std::ptrdiff_t>(m);

  if (ta == Trans::No) {
    if (use_threads) {
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t i = 0; i < rows; ++i)
        gemm_nn_rows(i, i + 1, n, k, ap, bp, cp);
    } else {
      gemm_nn_rows(0, m, n, k, ap, bp, cp);
    }
  } else {
    if (use_threads) {
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t i = 0; i < rows; ++i)
        gemm_tn_rows(i, i + 1, m, n, k, ap, bp, cp);
    } else {
      gemm_tn_rows(0, m, m, n, k, ap, bp, cp);
    }
  }
}

}  // namespace

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate) {
  gemm_impl<true>(ta, tb, m, n, k, a, b, c, accumulate);
}

void tanh(std::span<const double> x, std::span<double> y) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static) if (x.size() >= kParallelWork)
  for (std::ptrdiff_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

void sigmoid(std::span<const double> x, std::span<double> y) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static) if (x.size() >= kParallelWork)
  for (std::ptrdiff_t i = 0; i < n; ++i) y[i] = logistic(x[i]);
}

void mul_rows(std::span<const double> x, std::span<const double> mask,
              std::size_t rows, std::size_t cols, std::span<double> y) {
  const auto r = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (std::ptrdiff_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * cols;
    double* yi = y.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) yi[j] = xi[j] * mask[j];
  }
}

int max_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#if defined(_OPENMP)
  omp_set_num_threads(n);
#else
  (void)n;
#endif
}

namespace serial {

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta == Trans::No ? a[i * k + p] : a[p * m + i];
        const double bv = tb == Trans::No ? b[p * n + j] : b[j * k + p];
        s += av * bv;
      }
      c[i * n + j] = s;
    }
  }
}

void tanh(std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
}

void sigmoid(std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = logistic(x[i]);
}

void mul_rows(std::span<const double> x, std::span<const double> mask,
              std::size_t rows, std::size_t cols, std::span<double> y) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      y[i * cols + j] = x[i * cols + j] * mask[j];
}

}  // namespace serial

}  // namespace rgflow::kernels
