#pragma once

#include <Eigen/Core>

namespace ddpore::ndgrad::detail {

// Row-major C = alpha * op(A) * op(B) + beta * C, backed by Eigen's
// single-threaded GEMM so results do not depend on thread scheduling.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  using ConstMap = Eigen::Map<const Mat, 0, Stride>;
  Eigen::Map<Mat, 0, Stride> cm(c, m, n, Stride(ldc));

  const int a_rows = trans_a ? k : m;
  const int a_cols = trans_a ? m : k;
  const int b_rows = trans_b ? n : k;
  const int b_cols = trans_b ? k : n;
  ConstMap am(a, a_rows, a_cols, Stride(lda));
  ConstMap bm(b, b_rows, b_cols, Stride(ldb));

  if (beta == T(0)) {
    cm.setZero();
  } else if (beta != T(1)) {
    cm *= beta;
  }
  if (!trans_a && !trans_b) {
    cm.noalias() += alpha * am * bm;
  } else if (!trans_a && trans_b) {
    cm.noalias() += alpha * am * bm.transpose();
  } else if (trans_a && !trans_b) {
    cm.noalias() += alpha * am.transpose() * bm;
  } else {
    cm.noalias() += alpha * am.transpose() * bm.transpose();
  }
}

}  // namespace ddpore::ndgrad::detail
