#pragma once

#include <cstring>
#include <vector>

#include "qdiff/tensor.hpp"
#include "qdiff/threadpool.hpp"

namespace qdiff {

// Row-major f32 GEMM, C[M,N] = A[M,K] * B[K,N]. B is packed with columns
// zero-padded to a multiple of 32 so the microkernel always sees full tiles.
// Each output row is produced by exactly one worker with a fixed k order,
// so results are bit-identical for any thread count.

struct PackedBf32 {
    int k = 0;
    int n = 0;
    int n_padded = 0;
    std::vector<float> data;  // [k, n_padded]
};

inline PackedBf32 pack_b_f32(const float* b, int k, int n) {
    PackedBf32 p;
    p.k = k;
    p.n = n;
    p.n_padded = (n + 31) / 32 * 32;
    p.data.assign(static_cast<size_t>(k) * p.n_padded, 0.0f);
    for (int i = 0; i < k; ++i) {
        std::memcpy(p.data.data() + static_cast<size_t>(i) * p.n_padded,
                    b + static_cast<size_t>(i) * n, sizeof(float) * static_cast<size_t>(n));
    }
    return p;
}

namespace detail {

template <int MR>
inline void gemm_f32_micro(const float* __restrict a, size_t lda, const float* __restrict b,
                           size_t ldb, int kdim, float* __restrict c, size_t ldc, int ncols) {
    float acc[MR][32] = {};
    for (int k = 0; k < kdim; ++k) {
        const float* brow = b + static_cast<size_t>(k) * ldb;
        for (int i = 0; i < MR; ++i) {
            float av = a[static_cast<size_t>(i) * lda + k];
            for (int j = 0; j < 32; ++j) acc[i][j] += av * brow[j];
        }
    }
    if (ncols == 32) {
        for (int i = 0; i < MR; ++i)
            for (int j = 0; j < 32; ++j) c[static_cast<size_t>(i) * ldc + j] = acc[i][j];
    } else {
        for (int i = 0; i < MR; ++i)
            for (int j = 0; j < ncols; ++j) c[static_cast<size_t>(i) * ldc + j] = acc[i][j];
    }
}

inline void gemm_f32_rows(const float* a, const PackedBf32& b, float* c, int row0, int row1, int kdim) {
    const size_t lda = static_cast<size_t>(kdim);
    const size_t ldb = static_cast<size_t>(b.n_padded);
    const size_t ldc = static_cast<size_t>(b.n);
    int m = row0;
    for (; m + 6 <= row1; m += 6) {
        for (int n0 = 0; n0 < b.n; n0 += 32) {
            gemm_f32_micro<6>(a + m * lda, lda, b.data.data() + n0, ldb, kdim,
                              c + m * ldc + n0, ldc, std::min(32, b.n - n0));
        }
    }
    const int rem = row1 - m;
    if (rem > 0) {
        for (int n0 = 0; n0 < b.n; n0 += 32) {
            const int ncols = std::min(32, b.n - n0);
            const float* ap = a + m * lda;
            float* cp = c + m * ldc + n0;
            switch (rem) {
                case 1: gemm_f32_micro<1>(ap, lda, b.data.data() + n0, ldb, kdim, cp, ldc, ncols); break;
                case 2: gemm_f32_micro<2>(ap, lda, b.data.data() + n0, ldb, kdim, cp, ldc, ncols); break;
                case 3: gemm_f32_micro<3>(ap, lda, b.data.data() + n0, ldb, kdim, cp, ldc, ncols); break;
                case 4: gemm_f32_micro<4>(ap, lda, b.data.data() + n0, ldb, kdim, cp, ldc, ncols); break;
                default: gemm_f32_micro<5>(ap, lda, b.data.data() + n0, ldb, kdim, cp, ldc, ncols); break;
            }
        }
    }
}

}  // namespace detail

inline void gemm_f32(const float* a, const PackedBf32& b, float* c, int m, WorkerPool* pool) {
    if (pool && pool->size() > 1 && m >= 2 * 6) {
        const int blocks = (m + 5) / 6;
        pool->parallel_for(0, blocks, [&](int64_t b0, int64_t b1) {
            detail::gemm_f32_rows(a, b, c, static_cast<int>(b0) * 6,
                                  std::min(m, static_cast<int>(b1) * 6), b.k);
        });
    } else {
        detail::gemm_f32_rows(a, b, c, 0, m, b.k);
    }
}

inline void gemm_f32(const float* a, const float* b, float* c, int m, int k, int n, WorkerPool* pool = nullptr) {
    PackedBf32 packed = pack_b_f32(b, k, n);
    gemm_f32(a, packed, c, m, pool);
}

// C[M,N] = A[M,K] * B[N,K]^T. Dot-product form, used for attention scores and
// backward passes where operand sizes are small.
inline void gemm_nt_f32(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* ar = a + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            const float* br = b + static_cast<size_t>(j) * k;
            float s = 0.0f;
            for (int kk = 0; kk < k; ++kk) s += ar[kk] * br[kk];
            c[static_cast<size_t>(i) * n + j] = s;
        }
    }
}

// C[K,N] = A[M,K]^T * B[M,N]. Used for weight gradients.
inline void gemm_tn_f32(const float* a, const float* b, float* c, int m, int k, int n) {
    std::memset(c, 0, sizeof(float) * static_cast<size_t>(k) * n);
    for (int i = 0; i < m; ++i) {
        const float* ar = a + static_cast<size_t>(i) * k;
        const float* br = b + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            float av = ar[kk];
            float* cr = c + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

}  // namespace qdiff
