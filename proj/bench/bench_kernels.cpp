// Serial reference vs OpenMP kernels. Prints one row per kernel and size:
// best-of-N wall time for each path, speedup, and whether outputs match.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "rgflow/kernels.hpp"
#include "rgflow/rng.hpp"

namespace k = rgflow::kernels;

namespace {

std::vector<double> random_vec(rgflow::Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = 2.0 * rng.uniform() - 1.0;
  return v;
}

double best_ms(const std::function<void()>& fn, int reps) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

void report(const char* name, std::size_t size, double serial, double parallel, bool same) {
  std::printf("%-10s %8zu %12.3f %12.3f %8.2fx %s\n", name, size, serial, parallel,
              serial / parallel, same ? "match" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
  const int reps = argc > 1 ? std::max(1, std::atoi(argv[1])) : 5;
  rgflow::Rng rng(42);
  std::printf("threads %d, best of %d\n", k::max_threads(), reps);
  std::printf("%-10s %8s %12s %12s %9s\n", "kernel", "size", "serial_ms", "openmp_ms", "speedup");

  for (std::size_t n : {64, 128, 256, 512}) {
    const auto a = random_vec(rng, n * n);
    const auto b = random_vec(rng, n * n);
    std::vector<double> cs(n * n), cp(n * n);
    for (auto [ta, tb, name] : {std::tuple{k::Trans::No, k::Trans::No, "gemm_nn"},
                                std::tuple{k::Trans::No, k::Trans::Yes, "gemm_nt"},
                                std::tuple{k::Trans::Yes, k::Trans::No, "gemm_tn"}}) {
      const double s = best_ms([&] { k::serial::gemm(ta, tb, n, n, n, a, b, cs); }, reps);
      const double p = best_ms([&] { k::gemm(ta, tb, n, n, n, a, b, cp); }, reps);
      report(name, n, s, p, cs == cp);
    }
  }

  for (std::size_t n : {std::size_t{1} << 16, std::size_t{1} << 20, std::size_t{1} << 22}) {
    const auto x = random_vec(rng, n);
    std::vector<double> ys(n), yp(n);
    double s = best_ms([&] { k::serial::tanh(x, ys); }, reps);
    double p = best_ms([&] { k::tanh(x, yp); }, reps);
    report("tanh", n, s, p, ys == yp);
    s = best_ms([&] { k::serial::sigmoid(x, ys); }, reps);
    p = best_ms([&] { k::sigmoid(x, yp); }, reps);
    report("sigmoid", n, s, p, ys == yp);
    const std::size_t cols = 64, rows = n / cols;
    const auto mask = random_vec(rng, cols);
    s = best_ms([&] { k::serial::mul_rows(x, mask, rows, cols, ys); }, reps);
    p = best_ms([&] { k::mul_rows(x, mask, rows, cols, yp); }, reps);
    report("mul_rows", n, s, p, ys == yp);
  }
  return 0;
}
