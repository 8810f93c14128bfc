#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "qdiff/tensor.hpp"
#include "qdiff/threadpool.hpp"

namespace qdiff::kernels {

struct GroupNormSpec {
    int channels = 0;
    int groups = 1;
    float eps = 1e-5f;
    const float* gamma = nullptr;  // [channels], optional
    const float* beta = nullptr;   // [channels], optional

    void validate() const {
        if (groups < 1 || channels < 1 || channels % groups != 0) {
            throw std::invalid_argument("groupnorm: channels " + std::to_string(channels) +
                                        " not divisible by groups " + std::to_string(groups));
        }
        if (!(eps > 0.0f)) throw std::invalid_argument("groupnorm: eps must be > 0");
    }
};

// Per-channel first and second moments. Accumulated in double so the group
// statistic does not depend on which implementation summed the pixels.
struct ChannelMoments {
    double sum = 0.0;
    double sum_sq = 0.0;
    int64_t count = 0;
};

struct GroupStats {
    std::vector<float> mean;  // [N * G]
    std::vector<float> rstd;  // [N * G]
};

namespace detail {

inline ChannelMoments channel_moments(const float* p, int64_t hw) {
    ChannelMoments m;
    double s0 = 0.0, s1 = 0.0, q0 = 0.0, q1 = 0.0;
    int64_t i = 0;
    for (; i + 2 <= hw; i += 2) {
        double a = p[i], b = p[i + 1];
        s0 += a;
        s1 += b;
        q0 += a * a;
        q1 += b * b;
    }
    if (i < hw) {
        double a = p[i];
        s0 += a;
        q0 += a * a;
    }
    m.sum = s0 + s1;
    m.sum_sq = q0 + q1;
    m.count = hw;
    return m;
}

inline void normalize_channel(const float* x, float* y, int64_t hw, float mean, float rstd,
                              const float* gamma, const float* beta, int c) {
    const float g = gamma ? gamma[c] : 1.0f;
    const float b = beta ? beta[c] : 0.0f;
    const float scale = g * rstd;
    const float shift = b - scale * mean;
    for (int64_t i = 0; i < hw; ++i) y[i] = x[i] * scale + shift;
}

inline void group_stat(double sum, double sum_sq, double count, float eps, float* mean, float* rstd) {
    const double mu = sum / count;
    double var = sum_sq / count - mu * mu;
    if (var < 0.0) var = 0.0;  // cancellation guard
    *mean = static_cast<float>(mu);
    *rstd = 1.0f / std::sqrt(static_cast<float>(var) + eps);
}

}  // namespace detail

// Baseline of Fig. 3: work is divided by group index, one group (across the
// whole batch) per worker. With fewer groups than workers the surplus workers
// idle, which is the utilization problem the optimized kernel removes.
inline void groupnorm_baseline_raw(const float* x, float* y, int n, int c, int64_t hw,
                                   const GroupNormSpec& spec, WorkerPool& pool, GroupStats* stats = nullptr) {
    spec.validate();
    const int g = spec.groups, d = c / g;
    if (stats) {
        stats->mean.assign(static_cast<size_t>(n) * g, 0.0f);
        stats->rstd.assign(static_cast<size_t>(n) * g, 0.0f);
    }
    pool.parallel_for(0, g, [&](int64_t g0, int64_t g1) {
        for (int64_t gi = g0; gi < g1; ++gi) {
            for (int ni = 0; ni < n; ++ni) {
                const float* xg = x + (static_cast<int64_t>(ni) * c + gi * d) * hw;
                double sum = 0.0, sum_sq = 0.0;
                for (int ci = 0; ci < d; ++ci) {
                    auto m = detail::channel_moments(xg + ci * hw, hw);
                    sum += m.sum;
                    sum_sq += m.sum_sq;
                }
                float mean, rstd;
                detail::group_stat(sum, sum_sq, static_cast<double>(d) * static_cast<double>(hw), spec.eps, &mean, &rstd);
                if (stats) {
                    stats->mean[static_cast<size_t>(ni) * g + gi] = mean;
                    stats->rstd[static_cast<size_t>(ni) * g + gi] = rstd;
                }
                float* yg = y + (static_cast<int64_t>(ni) * c + gi * d) * hw;
                for (int ci = 0; ci < d; ++ci) {
                    detail::normalize_channel(xg + ci * hw, yg + ci * hw, hw, mean, rstd, spec.gamma, spec.beta,
                                              static_cast<int>(gi * d + ci));
                }
            }
        }
    });
}

// Optimized kernel of Fig. 4, three phases:
//   1. every worker computes ChannelMoments for its channel range;
//   2. group statistics are formed by summing channel moments in ascending
//      channel order (serial, so the result is independent of worker count);
//   3. every worker normalizes its channel range independently.
inline void groupnorm_channel_parallel_raw(const float* x, float* y, int n, int c, int64_t hw,
                                           const GroupNormSpec& spec, WorkerPool& pool,
                                           GroupStats* stats = nullptr) {
    spec.validate();
    const int g = spec.groups, d = c / g;
    const int64_t nc = static_cast<int64_t>(n) * c;

    std::vector<ChannelMoments> moments(static_cast<size_t>(nc));
    pool.parallel_for(0, nc, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) moments[static_cast<size_t>(i)] = detail::channel_moments(x + i * hw, hw);
    });

    std::vector<float> mean(static_cast<size_t>(n) * g), rstd(static_cast<size_t>(n) * g);
    for (int ni = 0; ni < n; ++ni) {
        for (int gi = 0; gi < g; ++gi) {
            double sum = 0.0, sum_sq = 0.0;
            for (int ci = 0; ci < d; ++ci) {
                const auto& m = moments[static_cast<size_t>(ni) * c + gi * d + ci];
                sum += m.sum;
                sum_sq += m.sum_sq;
            }
            detail::group_stat(sum, sum_sq, static_cast<double>(d) * static_cast<double>(hw), spec.eps,
                               &mean[static_cast<size_t>(ni) * g + gi], &rstd[static_cast<size_t>(ni) * g + gi]);
        }
    }
    if (stats) {
        stats->mean = mean;
        stats->rstd = rstd;
    }

    pool.parallel_for(0, nc, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            const int ni = static_cast<int>(i / c);
            const int ci = static_cast<int>(i % c);
            detail::normalize_channel(x + i * hw, y + i * hw, hw, mean[static_cast<size_t>(ni) * g + ci / d],
                                      rstd[static_cast<size_t>(ni) * g + ci / d], spec.gamma, spec.beta, ci);
        }
    });
}

namespace detail {
inline void check_input(const Tensor& x, const GroupNormSpec& spec) {
    if (x.ndim() != 4) throw std::invalid_argument("groupnorm: expected NCHW input, got " + Tensor::shape_str(x.shape));
    if (x.dim(1) != spec.channels) {
        throw std::invalid_argument("groupnorm: input has " + std::to_string(x.dim(1)) + " channels, spec has " +
                                    std::to_string(spec.channels));
    }
}
}  // namespace detail

inline Tensor groupnorm_baseline(const Tensor& x, const GroupNormSpec& spec, WorkerPool& pool,
                                 GroupStats* stats = nullptr) {
    detail::check_input(x, spec);
    Tensor y(x.shape);
    groupnorm_baseline_raw(x.ptr(), y.ptr(), x.dim(0), x.dim(1), static_cast<int64_t>(x.dim(2)) * x.dim(3),
                           spec, pool, stats);
    return y;
}

inline Tensor groupnorm_channel_parallel(const Tensor& x, const GroupNormSpec& spec, WorkerPool& pool,
                                         GroupStats* stats = nullptr) {
    detail::check_input(x, spec);
    Tensor y(x.shape);
    groupnorm_channel_parallel_raw(x.ptr(), y.ptr(), x.dim(0), x.dim(1),
                                   static_cast<int64_t>(x.dim(2)) * x.dim(3), spec, pool, stats);
    return y;
}

}  // namespace qdiff::kernels
