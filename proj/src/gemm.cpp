#include "gemm.hpp"

#include <cblas.h>

#include <mutex>

#include "retro/ops.hpp"

namespace retro {

namespace {
std::once_flag g_default_threads;
void ensure_default_threads() {
  std::call_once(g_default_threads, [] { openblas_set_num_threads(1); });
}
}  // namespace

void set_compute_threads(int threads) {
  ensure_default_threads();
  openblas_set_num_threads(threads < 1 ? 1 : threads);
}

namespace detail {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
          int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  ensure_default_threads();
  if (m == 0 || n == 0) return;
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c,
              ldc);
}

}  // namespace detail
}  // namespace retro
