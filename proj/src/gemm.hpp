#pragma once

namespace retro::detail {

// Row-major C[m,n] = alpha * op(A) op(B) + beta * C.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
          int lda, const float* b, int ldb, float beta, float* c, int ldc);

}  // namespace retro::detail
