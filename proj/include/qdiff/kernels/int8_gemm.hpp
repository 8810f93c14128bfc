#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

#if defined(__AVX512VNNI__) || defined(__AVX2__)
#include <immintrin.h>
#endif

#include "qdiff/numerics.hpp"
#include "qdiff/tensor.hpp"
#include "qdiff/threadpool.hpp"

namespace qdiff::kernels {

// INT8 matrix multiply with 32-bit integer accumulation:
//   C[M,N] = (A int8 [M,K]) * (B int8 [K,N]), then scaled by
//   scale_a * scale_b (per-tensor) or scale_a * scale_b[n] (B per-channel
//   along its columns). Accumulation is exact, so every execution path below
//   produces identical integer results.

inline Tensor int8_gemm(const QuantizedTensor& qa, const QuantizedTensor& qb, const QuantParams& pa,
                        const QuantParams& pb) {
    if (qa.shape.size() != 2 || qb.shape.size() != 2) {
        throw std::invalid_argument("int8_gemm: expected 2-d operands");
    }
    const int m = qa.shape[0], k = qa.shape[1];
    const int kb = qb.shape[0], n = qb.shape[1];
    if (k != kb) {
        throw std::invalid_argument("int8_gemm: inner dimensions differ, " + std::to_string(k) + " vs " +
                                    std::to_string(kb));
    }
    if (pa.granularity != QuantGranularity::PerTensor) {
        throw std::invalid_argument("int8_gemm: activation params must be per-tensor");
    }
    const bool per_channel = pb.granularity == QuantGranularity::PerChannel;
    if (per_channel && static_cast<int>(pb.scales.size()) != n) {
        throw std::invalid_argument("int8_gemm: per-channel B params carry " + std::to_string(pb.scales.size()) +
                                    " scales for " + std::to_string(n) + " columns");
    }

    Tensor c({m, n});
    const float sa = pa.scale();
    for (int i = 0; i < m; ++i) {
        const int8_t* ar = qa.data.data() + static_cast<size_t>(i) * k;
        float* cr = c.ptr() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            int32_t acc = 0;
            const int8_t* bp = qb.data.data() + j;
            for (int kk = 0; kk < k; ++kk) acc += static_cast<int32_t>(ar[kk]) * bp[static_cast<size_t>(kk) * n];
            const float sb = per_channel ? pb.scales[static_cast<size_t>(j)] : pb.scale();
            cr[j] = static_cast<float>(acc) * (sa * sb);
        }
    }
    return c;
}

// ---- packed fast path -------------------------------------------------------
//
// B is prepacked as [N/16 tiles][K/2][16 columns][2 k] int16 (int8 values
// widened once at pack time), the layout consumed by vpdpwssd / vpmaddwd.
// A rows are int16-stored int8 values so k-pairs load as one int32.

struct PackedBInt8 {
    int k = 0;
    int n = 0;
    int k_padded = 0;  // even
    int n_tiles = 0;   // ceil(n / 16)
    std::vector<int16_t> data;
    std::vector<float> scales;  // one per column (broadcast if per-tensor)

    const int16_t* tile(int t) const { return data.data() + static_cast<size_t>(t) * k_padded * 16; }
};

inline PackedBInt8 pack_b_int8(const int8_t* b, int k, int n, const QuantParams& pb) {
    PackedBInt8 p;
    p.k = k;
    p.n = n;
    p.k_padded = (k + 1) & ~1;
    p.n_tiles = (n + 15) / 16;
    p.data.assign(static_cast<size_t>(p.n_tiles) * p.k_padded * 16, 0);
    for (int j = 0; j < n; ++j) {
        const int t = j / 16, jc = j % 16;
        int16_t* dst = p.data.data() + static_cast<size_t>(t) * p.k_padded * 16;
        for (int kk = 0; kk < k; ++kk) {
            // [kk/2][col][kk%2] within the tile
            dst[(static_cast<size_t>(kk / 2) * 16 + jc) * 2 + (kk % 2)] = b[static_cast<size_t>(kk) * n + j];
        }
    }
    p.scales.resize(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        p.scales[static_cast<size_t>(j)] =
            pb.granularity == QuantGranularity::PerChannel ? pb.scales[static_cast<size_t>(j)] : pb.scale();
    }
    return p;
}

namespace detail {

#if defined(__AVX512VNNI__)
template <int MR>
inline void int8_micro(const int16_t* a, size_t lda, const int16_t* bp, int k2, int32_t* c, size_t ldc) {
    __m512i acc[MR];
    for (int i = 0; i < MR; ++i) acc[i] = _mm512_setzero_si512();
    for (int kk = 0; kk < k2; ++kk) {
        const __m512i bv = _mm512_loadu_si512(bp + static_cast<size_t>(kk) * 32);
        for (int i = 0; i < MR; ++i) {
            int32_t pair;
            std::memcpy(&pair, a + static_cast<size_t>(i) * lda + 2 * kk, 4);
            acc[i] = _mm512_dpwssd_epi32(acc[i], _mm512_set1_epi32(pair), bv);
        }
    }
    for (int i = 0; i < MR; ++i) _mm512_storeu_si512(c + static_cast<size_t>(i) * ldc, acc[i]);
}
#elif defined(__AVX2__)
template <int MR>
inline void int8_micro(const int16_t* a, size_t lda, const int16_t* bp, int k2, int32_t* c, size_t ldc) {
    __m256i acc[MR][2];
    for (int i = 0; i < MR; ++i) acc[i][0] = acc[i][1] = _mm256_setzero_si256();
    for (int kk = 0; kk < k2; ++kk) {
        const __m256i b0 = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(bp + static_cast<size_t>(kk) * 32));
        const __m256i b1 = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(bp + static_cast<size_t>(kk) * 32 + 16));
        for (int i = 0; i < MR; ++i) {
            int32_t pair;
            std::memcpy(&pair, a + static_cast<size_t>(i) * lda + 2 * kk, 4);
            const __m256i av = _mm256_set1_epi32(pair);
            acc[i][0] = _mm256_add_epi32(acc[i][0], _mm256_madd_epi16(av, b0));
            acc[i][1] = _mm256_add_epi32(acc[i][1], _mm256_madd_epi16(av, b1));
        }
    }
    for (int i = 0; i < MR; ++i) {
        _mm256_storeu_si256(reinterpret_cast<__m256i*>(c + static_cast<size_t>(i) * ldc), acc[i][0]);
        _mm256_storeu_si256(reinterpret_cast<__m256i*>(c + static_cast<size_t>(i) * ldc + 8), acc[i][1]);
    }
}
#else
template <int MR>
inline void int8_micro(const int16_t* a, size_t lda, const int16_t* bp, int k2, int32_t* c, size_t ldc) {
    int32_t acc[MR][16] = {};
    for (int kk = 0; kk < k2; ++kk) {
        const int16_t* bv = bp + static_cast<size_t>(kk) * 32;
        for (int i = 0; i < MR; ++i) {
            const int32_t a0 = a[static_cast<size_t>(i) * lda + 2 * kk];
            const int32_t a1 = a[static_cast<size_t>(i) * lda + 2 * kk + 1];
            for (int j = 0; j < 16; ++j) acc[i][j] += a0 * bv[2 * j] + a1 * bv[2 * j + 1];
        }
    }
    for (int i = 0; i < MR; ++i)
        for (int j = 0; j < 16; ++j) c[static_cast<size_t>(i) * ldc + j] = acc[i][j];
}
#endif

inline void int8_gemm_rows(const int16_t* a, int k, const PackedBInt8& b, int32_t* acc_rows, int row0,
                           int row1) {
    const size_t lda = static_cast<size_t>((k + 1) & ~1);
    const int k2 = b.k_padded / 2;
    const size_t ldacc = static_cast<size_t>(b.n_tiles) * 16;
    int m = row0;
    for (; m + 4 <= row1; m += 4) {
        for (int t = 0; t < b.n_tiles; ++t) {
            int8_micro<4>(a + static_cast<size_t>(m) * lda, lda, b.tile(t), k2,
                          acc_rows + static_cast<size_t>(m) * ldacc + static_cast<size_t>(t) * 16, ldacc);
        }
    }
    for (; m < row1; ++m) {
        for (int t = 0; t < b.n_tiles; ++t) {
            int8_micro<1>(a + static_cast<size_t>(m) * lda, lda, b.tile(t), k2,
                          acc_rows + static_cast<size_t>(m) * ldacc + static_cast<size_t>(t) * 16, ldacc);
        }
    }
}

}  // namespace detail

// A is given as int16-stored int8 values, row-major [M, K] with rows padded to
// even K (pad value 0). Output C[M,N] = acc * (scale_a * col_scale) + bias.
// acc_scratch must hold M * n_tiles * 16 int32.
inline void int8_gemm_packed(const int16_t* a, int m, int k, const PackedBInt8& b, float scale_a,
                             const float* bias, float* c, int32_t* acc_scratch, WorkerPool* pool) {
    const size_t ldacc = static_cast<size_t>(b.n_tiles) * 16;
    auto run = [&](int row0, int row1) {
        detail::int8_gemm_rows(a, k, b, acc_scratch, row0, row1);
        for (int i = row0; i < row1; ++i) {
            const int32_t* ar = acc_scratch + static_cast<size_t>(i) * ldacc;
            float* cr = c + static_cast<size_t>(i) * b.n;
            for (int j = 0; j < b.n; ++j) {
                cr[j] = static_cast<float>(ar[j]) * (scale_a * b.scales[static_cast<size_t>(j)]) +
                        (bias ? bias[j] : 0.0f);
            }
        }
    };
    if (pool && pool->size() > 1 && m >= 8) {
        const int blocks = (m + 3) / 4;
        pool->parallel_for(0, blocks, [&](int64_t b0, int64_t b1) {
            run(static_cast<int>(b0) * 4, std::min(m, static_cast<int>(b1) * 4));
        });
    } else {
        run(0, m);
    }
}

}  // namespace qdiff::kernels
