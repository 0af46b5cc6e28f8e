#pragma once

// Matrix products used by the conv/dense kernels. Eigen does the inner
// arithmetic; the wrappers split work into fixed-size row blocks so the
// result is bit-identical no matter how many OpenMP threads run them.

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

namespace empir {

namespace detail {
constexpr int kGemmGrain = 256;  // output rows per block; fixed, never thread-dependent

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
}  // namespace detail

// C(MxN) = A(MxK) * B(KxN)
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    detail::ConstMatMap<T> bm(b, k, n);
    const int grain = detail::kGemmGrain;
#pragma omp parallel for schedule(static)
    for (int r0 = 0; r0 < m; r0 += grain) {
        int rows = std::min(grain, m - r0);
        detail::ConstMatMap<T> am(a + static_cast<size_t>(r0) * k, rows, k);
        detail::MatMap<T> cm(c + static_cast<size_t>(r0) * n, rows, n);
        cm.noalias() = am * bm;
    }
}

// C(MxN) = A(MxK) * B(NxK)^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    detail::ConstMatMap<T> bm(b, n, k);
    const int grain = detail::kGemmGrain;
#pragma omp parallel for schedule(static)
    for (int r0 = 0; r0 < m; r0 += grain) {
        int rows = std::min(grain, m - r0);
        detail::ConstMatMap<T> am(a + static_cast<size_t>(r0) * k, rows, k);
        detail::MatMap<T> cm(c + static_cast<size_t>(r0) * n, rows, n);
        cm.noalias() = am * bm.transpose();
    }
}

// C(MxN) = A(KxM)^T * B(KxN); the reduction over K stays whole per block.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
    detail::ConstMatMap<T> am(a, k, m);
    detail::ConstMatMap<T> bm(b, k, n);
    const int grain = detail::kGemmGrain;
#pragma omp parallel for schedule(static)
    for (int r0 = 0; r0 < m; r0 += grain) {
        int rows = std::min(grain, m - r0);
        detail::MatMap<T> cm(c + static_cast<size_t>(r0) * n, rows, n);
        cm.noalias() = am.middleCols(r0, rows).transpose() * bm;
    }
}

}  // namespace empir
