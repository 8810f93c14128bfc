#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "qdiff/tensor.hpp"
#include "qdiff/threadpool.hpp"

namespace qdiff::kernels {

// Fused multi-head attention: softmax(Q K^T / sqrt(d)) V for [N, h, L, d]
// operands. One pass per query row with streaming max / sum-exp accumulation;
// the L x L score matrix is never materialized. Work is partitioned over
// (sample, head, query row), so outputs are bit-identical for any thread count.
//
// With `row_sums` set, the kernel also exposes the post-normalization weight
// sum of every implicit attention row (softmax rows must sum to 1).
inline void fused_mha_raw(const float* q, const float* k, const float* v, float* out, int n, int h, int l,
                          int d, WorkerPool& pool, std::vector<float>* row_sums = nullptr) {
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
    if (row_sums) row_sums->assign(static_cast<size_t>(n) * h * l, 0.0f);

    const int64_t rows = static_cast<int64_t>(n) * h * l;
    pool.parallel_for(0, rows, [&](int64_t r0, int64_t r1) {
        std::vector<float> acc(static_cast<size_t>(d));
        for (int64_t r = r0; r < r1; ++r) {
            const int64_t nh = r / l;
            const int64_t qi = r % l;
            const float* qrow = q + (nh * l + qi) * d;
            const float* kbase = k + nh * l * d;
            const float* vbase = v + nh * l * d;

            float running_max = -std::numeric_limits<float>::infinity();
            float denom = 0.0f;
            std::fill(acc.begin(), acc.end(), 0.0f);
            for (int j = 0; j < l; ++j) {
                const float* krow = kbase + static_cast<int64_t>(j) * d;
                float s = 0.0f;
                for (int t = 0; t < d; ++t) s += qrow[t] * krow[t];
                s *= inv_sqrt_d;
                if (s > running_max) {
                    const float corr = (denom == 0.0f) ? 0.0f : std::exp(running_max - s);
                    denom *= corr;
                    for (int t = 0; t < d; ++t) acc[static_cast<size_t>(t)] *= corr;
                    running_max = s;
                }
                const float wgt = std::exp(s - running_max);
                denom += wgt;
                const float* vrow = vbase + static_cast<int64_t>(j) * d;
                for (int t = 0; t < d; ++t) acc[static_cast<size_t>(t)] += wgt * vrow[t];
            }
            float* orow = out + (nh * l + qi) * d;
            const float inv_denom = 1.0f / denom;
            for (int t = 0; t < d; ++t) orow[t] = acc[static_cast<size_t>(t)] * inv_denom;
            if (row_sums) {
                // Instrumentation: replay the weights to expose the row sum the
                // streaming pass never stores.
                float s2 = 0.0f;
                for (int j = 0; j < l; ++j) {
                    const float* krow = kbase + static_cast<int64_t>(j) * d;
                    float s = 0.0f;
                    for (int t = 0; t < d; ++t) s += qrow[t] * krow[t];
                    s2 += std::exp(s * inv_sqrt_d - running_max);
                }
                (*row_sums)[static_cast<size_t>(r)] = s2 * inv_denom;
            }
        }
    });
}

inline Tensor fused_mha(const Tensor& q, const Tensor& k, const Tensor& v, WorkerPool& pool,
                        std::vector<float>* row_sums = nullptr) {
    if (q.ndim() != 4) {
        throw std::invalid_argument("fused_mha: expected [N,h,L,d] operands, got " + Tensor::shape_str(q.shape));
    }
    require_same_shape(q, k, "fused_mha(q,k)");
    require_same_shape(q, v, "fused_mha(q,v)");
    Tensor out(q.shape);
    fused_mha_raw(q.ptr(), k.ptr(), v.ptr(), out.ptr(), q.dim(0), q.dim(1), q.dim(2), q.dim(3), pool, row_sums);
    return out;
}

}  // namespace qdiff::kernels
