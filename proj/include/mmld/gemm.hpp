#pragma once

#include <Eigen/Core>

namespace mmld {

// C[M,N] = alpha * op(A) op(B) + (accumulate ? C : 0), all row-major.
// op(A) is [M,K]; with trans_a the stored A is [K,M].
template <typename T>
void gemm(bool trans_a, bool trans_b, Eigen::Index m, Eigen::Index n, Eigen::Index k, const T* a, const T* b, T* c,
          bool accumulate, T alpha = T(1)) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const Mat>;
    Eigen::Map<Mat> cm(c, m, n);
    if (!accumulate) cm.setZero();
    CMap am(a, trans_a ? k : m, trans_a ? m : k);
    CMap bm(b, trans_b ? n : k, trans_b ? k : n);
    if (trans_a && trans_b)
        cm.noalias() += alpha * (am.transpose() * bm.transpose());
    else if (trans_a)
        cm.noalias() += alpha * (am.transpose() * bm);
    else if (trans_b)
        cm.noalias() += alpha * (am * bm.transpose());
    else
        cm.noalias() += alpha * (am * bm);
}

}  // namespace mmld
