#pragma once

#include <cstddef>
#include <span>

// Data-parallel inner loops. The default entry points split work across
// OpenMP threads; every output element is produced by exactly one thread in a
// fixed accumulation order, so results do not depend on the thread count.
// The serial namespace keeps plain reference loops for testing and benchmarks.
namespace rgflow::kernels {

enum class Trans { No, Yes };

// C[m x n] = op(A) * op(B) (+ C when accumulate). op(A) is m x k, op(B) is k x n.
// A is stored m x k (or k x m when transposed), B is k x n (or n x k).
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate = false);

void tanh(std::span<const double> x, std::span<double> y);
void sigmoid(std::span<const double> x, std::span<double> y);

// y = x * mask, with mask broadcast along rows: x, y are rows x cols, mask is cols.
void mul_rows(std::span<const double> x, std::span<const double> mask,
              std::size_t rows, std::size_t cols, std::span<double> y);

// Number of threads the parallel kernels would use.
int max_threads();
void set_threads(int n);

namespace serial {

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const double> a, std::span<const double> b,
          std::span<double> c, bool accumulate = false);
void tanh(std::span<const double> x, std::span<double> y);
void sigmoid(std::span<const double> x, std::span<double> y);
void mul_rows(std::span<const double> x, std::span<const double> mask,
              std::size_t rows, std::size_t cols, std::span<double> y);

}  // namespace serial

}  // namespace rgflow::kernels
