#include "gemm.hpp"

#include <Eigen/Core>

namespace docparser::detail {

namespace {
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedMap = Eigen::Map<const Mat, Eigen::Unaligned, Eigen::OuterStride<>>;
using MutStridedMap = Eigen::Map<Mat, Eigen::Unaligned, Eigen::OuterStride<>>;
using PlainMap = Eigen::Map<const Mat>;
using MutPlainMap = Eigen::Map<Mat>;

template <typename MA, typename MB, typename MC>
void product(bool trans_a, bool trans_b, double alpha, const MA& A, const MB& B,
             double beta, MC& C) {
  if (beta == 0.0) {
    if (!trans_a && !trans_b)
      C.noalias() = alpha * (A * B);
    else if (!trans_a && trans_b)
      C.noalias() = alpha * (A * B.transpose());
    else if (trans_a && !trans_b)
      C.noalias() = alpha * (A.transpose() * B);
    else
      C.noalias() = alpha * (A.transpose() * B.transpose());
  } else {
    if (beta != 1.0) C *= beta;
    if (!trans_a && !trans_b)
      C.noalias() += alpha * (A * B);
    else if (!trans_a && trans_b)
      C.noalias() += alpha * (A * B.transpose());
    else if (trans_a && !trans_b)
      C.noalias() += alpha * (A.transpose() * B);
    else
      C.noalias() += alpha * (A.transpose() * B.transpose());
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n,
          std::int64_t k, double alpha, const double* a, std::int64_t lda,
          const double* b, std::int64_t ldb, double beta, double* c,
          std::int64_t ldc) {
  const std::int64_t a_rows = trans_a ? k : m, a_cols = trans_a ? m : k;
  const std::int64_t b_rows = trans_b ? n : k, b_cols = trans_b ? k : n;
  // Dense operands take Eigen's fastest path; strides fall back to maps.
  if (lda == a_cols && ldb == b_cols && ldc == n) {
    PlainMap A(a, a_rows, a_cols);
    PlainMap B(b, b_rows, b_cols);
    MutPlainMap C(c, m, n);
    product(trans_a, trans_b, alpha, A, B, beta, C);
    return;
  }
  StridedMap A(a, a_rows, a_cols, Eigen::OuterStride<>(lda));
  StridedMap B(b, b_rows, b_cols, Eigen::OuterStride<>(ldb));
  MutStridedMap C(c, m, n, Eigen::OuterStride<>(ldc));
  product(trans_a, trans_b, alpha, A, B, beta, C);
}

}  // namespace docparser::detail
