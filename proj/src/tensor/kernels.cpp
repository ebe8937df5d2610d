#include "kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace mpvit::kernels {

namespace {

constexpr std::int64_t kParallelThreshold = 1 << 18;
constexpr std::int64_t kBlockK = 128;
constexpr std::int64_t kBlockN = 512;

int read_thread_count() {
  if (const char* env = std::getenv("MPVIT_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v >= 1) return v;
    } catch (...) {
    }
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Row i of C accumulates a[i,p] * b[p,:] in increasing p.
template <typename T>
void gemm_nn_rows(std::int64_t r0, std::int64_t r1, std::int64_t n, std::int64_t k, const T* a, std::int64_t lda,
                  const T* b, std::int64_t ldb, T* c, std::int64_t ldc) {
  for (std::int64_t j0 = 0; j0 < n; j0 += kBlockN) {
    const std::int64_t j1 = std::min(n, j0 + kBlockN);
    for (std::int64_t p0 = 0; p0 < k; p0 += kBlockK) {
      const std::int64_t p1 = std::min(k, p0 + kBlockK);
      for (std::int64_t i = r0; i < r1; ++i) {
        T* __restrict crow = c + i * ldc;
        const T* arow = a + i * lda;
        for (std::int64_t p = p0; p < p1; ++p) {
          const T av = arow[p];
          const T* __restrict brow = b + p * ldb;
          for (std::int64_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

// A stored K x M; row i of C accumulates a[p,i] * b[p,:] in increasing p.
template <typename T>
void gemm_tn_rows(std::int64_t r0, std::int64_t r1, std::int64_t n, std::int64_t k, const T* a, std::int64_t lda,
                  const T* b, std::int64_t ldb, T* c, std::int64_t ldc) {
  for (std::int64_t j0 = 0; j0 < n; j0 += kBlockN) {
    const std::int64_t j1 = std::min(n, j0 + kBlockN);
    for (std::int64_t p0 = 0; p0 < k; p0 += kBlockK) {
      const std::int64_t p1 = std::min(k, p0 + kBlockK);
      for (std::int64_t i = r0; i < r1; ++i) {
        T* __restrict crow = c + i * ldc;
        for (std::int64_t p = p0; p < p1; ++p) {
          const T av = a[p * lda + i];
          const T* __restrict brow = b + p * ldb;
          for (std::int64_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

}  // namespace

int thread_count() {
  static const int count = read_thread_count();
  return count;
}

void parallel_rows(std::int64_t rows, std::int64_t work_per_row,
                   const std::function<void(std::int64_t, std::int64_t)>& fn) {
  const int threads = thread_count();
  if (threads <= 1 || rows < 2 || rows * work_per_row < kParallelThreshold) {
    fn(0, rows);
    return;
  }
  const std::int64_t workers = std::min<std::int64_t>(threads, rows);
  const std::int64_t chunk = (rows + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers - 1));
  for (std::int64_t w = 1; w < workers; ++w) {
    const std::int64_t b = w * chunk;
    const std::int64_t e = std::min(rows, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min(rows, chunk));
  for (auto& t : pool) t.join();
}

template <typename T>
void transpose(const T* src, std::int64_t rows, std::int64_t cols, T* dst) {
  constexpr std::int64_t kTile = 32;
  for (std::int64_t i0 = 0; i0 < rows; i0 += kTile) {
    const std::int64_t i1 = std::min(rows, i0 + kTile);
    for (std::int64_t j0 = 0; j0 < cols; j0 += kTile) {
      const std::int64_t j1 = std::min(cols, j0 + kTile);
      for (std::int64_t i = i0; i < i1; ++i) {
        for (std::int64_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
      }
    }
  }
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a, std::int64_t lda,
          const T* b, std::int64_t ldb, T* c, std::int64_t ldc, bool accumulate) {
  if (!accumulate) {
    for (std::int64_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T(0));
  }
  if (m == 0 || n == 0 || k == 0) return;

  std::vector<T> bt;
  if (trans_b) {
    // Materialise op(B) as K x N so the inner loop stays contiguous.
    bt.resize(static_cast<std::size_t>(k * n));
    for (std::int64_t j = 0; j < n; ++j) {
      for (std::int64_t p = 0; p < k; ++p) bt[static_cast<std::size_t>(p * n + j)] = b[j * ldb + p];
    }
    b = bt.data();
    ldb = n;
  }
  parallel_rows(m, n * k, [&](std::int64_t r0, std::int64_t r1) {
    if (trans_a) {
      gemm_tn_rows(r0, r1, n, k, a, lda, b, ldb, c, ldc);
    } else {
      gemm_nn_rows(r0, r1, n, k, a, lda, b, ldb, c, ldc);
    }
  });
}

template void gemm<float>(bool, bool, std::int64_t, std::int64_t, std::int64_t, const float*, std::int64_t,
                          const float*, std::int64_t, float*, std::int64_t, bool);
template void gemm<double>(bool, bool, std::int64_t, std::int64_t, std::int64_t, const double*, std::int64_t,
                           const double*, std::int64_t, double*, std::int64_t, bool);
template void transpose<float>(const float*, std::int64_t, std::int64_t, float*);
template void transpose<double>(const double*, std::int64_t, std::int64_t, double*);

}  // namespace mpvit::kernels
