#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

namespace mpvit::kernels {

// Number of worker threads honoured by parallel_rows: MPVIT_THREADS when set,
// otherwise the hardware concurrency.
int thread_count();

// Runs fn(begin, end) over a fixed partition of [0, rows). Each row is owned
// by exactly one worker, so results never depend on the thread count.
void parallel_rows(std::int64_t rows, std::int64_t work_per_row,
                   const std::function<void(std::int64_t, std::int64_t)>& fn);

// C[M,N] (+)= op(A) * op(B) with row-major storage and explicit leading dims.
// op(A) is M x K; op(B) is K x N. Reduction order over K is fixed.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
          std::int64_t lda, const T* b, std::int64_t ldb, T* c, std::int64_t ldc, bool accumulate);

template <typename T>
void transpose(const T* src, std::int64_t rows, std::int64_t cols, T* dst);

}  // namespace mpvit::kernels
