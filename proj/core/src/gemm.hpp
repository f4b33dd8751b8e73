#pragma once

#include <cstdint>

namespace docparser::detail {

// C (m x n) = alpha * op(A) * op(B) + beta * C, row-major, no aliasing.
// op transposes when the corresponding flag is set; lda/ldb/ldc are row
// strides of the stored (untransposed) matrices.
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n,
          std::int64_t k, double alpha, const double* a, std::int64_t lda,
          const double* b, std::int64_t ldb, double beta, double* c,
          std::int64_t ldc);

}  // namespace docparser::detail
