#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <type_traits>

#ifdef BHN_USE_CBLAS
#include <cblas.h>
#endif

namespace bhn::detail {

/// C[m x n] (+)= op(A) * op(B), all row-major.
/// A is stored [k x m] when ta, else [m x k]; B is [n x k] when tb, else [k x n].
/// Accumulation order per output element is fixed, so results are
/// reproducible for a given build and thread count.
template <typename T>
void gemm(bool ta, bool tb, int m, int n, int k, const T* A, const T* B, T* C,
          bool accumulate) {
#ifdef BHN_USE_CBLAS
    if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
        const int lda = ta ? m : k;
        const int ldb = tb ? k : n;
        const T beta = accumulate ? T(1) : T(0);
        if constexpr (std::is_same_v<T, float>) {
            cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                        tb ? CblasTrans : CblasNoTrans, m, n, k, 1.0f, A, lda, B, ldb,
                        beta, C, n);
        } else {
            cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                        tb ? CblasTrans : CblasNoTrans, m, n, k, 1.0, A, lda, B, ldb,
                        beta, C, n);
        }
        return;
    }
#endif
    if (!accumulate) std::memset(C, 0, sizeof(T) * static_cast<std::size_t>(m) * n);
    auto a_at = [&](int i, int p) { return ta ? A[static_cast<std::size_t>(p) * m + i]
                                              : A[static_cast<std::size_t>(i) * k + p]; };
    // Blocked i-k-j with an axpy inner loop; B rows are contiguous when !tb.
    constexpr int KB = 64;
    for (int i = 0; i < m; ++i) {
        T* c_row = C + static_cast<std::size_t>(i) * n;
        for (int k0 = 0; k0 < k; k0 += KB) {
            const int k1 = std::min(k, k0 + KB);
            if (!tb) {
                for (int p = k0; p < k1; ++p) {
                    const T a = a_at(i, p);
                    if (a == T(0)) continue;
                    const T* b_row = B + static_cast<std::size_t>(p) * n;
                    for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
                }
            } else {
                for (int j = 0; j < n; ++j) {
                    const T* b_row = B + static_cast<std::size_t>(j) * k;
                    T acc = 0;
                    for (int p = k0; p < k1; ++p) acc += a_at(i, p) * b_row[p];
                    c_row[j] += acc;
                }
            }
        }
    }
}

}  // namespace bhn::detail
