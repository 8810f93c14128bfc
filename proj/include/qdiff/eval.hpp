#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdiff/diffusion.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff {

// ---- toy dataset --------------------------------------------------------------

// Procedural 16x16 image distribution standing in for a real dataset: Gaussian
// blobs with random center/width mixed with binary checkerboards. Pixels are
// in [-1, 1]; a seed fully determines the sample set.
struct ToyDataset {
    uint64_t seed = 0;
    int count = 0;
    int size = 16;

    Tensor generate() const {
        Tensor out({count, 1, size, size});
        Rng rng(seed);
        for (int n = 0; n < count; ++n) {
            float* img = out.ptr() + static_cast<int64_t>(n) * size * size;
            if (rng.next_u64() & 1) {
                // blob
                const float cx = rng.uniform(0.25f, 0.75f) * static_cast<float>(size);
                const float cy = rng.uniform(0.25f, 0.75f) * static_cast<float>(size);
                const float sigma = rng.uniform(0.10f, 0.28f) * static_cast<float>(size);
                for (int i = 0; i < size; ++i)
                    for (int j = 0; j < size; ++j) {
                        const float dx = (static_cast<float>(j) + 0.5f) - cx;
                        const float dy = (static_cast<float>(i) + 0.5f) - cy;
                        const float v = std::exp(-(dx * dx + dy * dy) / (2.0f * sigma * sigma));
                        img[i * size + j] = 2.0f * v - 1.0f;
                    }
            } else {
                // checkerboard
                const int cell = (rng.next_u64() & 1) ? 2 : 4;
                const int ox = static_cast<int>(rng.next_index(cell));
                const int oy = static_cast<int>(rng.next_index(cell));
                const float pol = (rng.next_u64() & 1) ? 1.0f : -1.0f;
                for (int i = 0; i < size; ++i)
                    for (int j = 0; j < size; ++j) {
                        const int par = ((i + oy) / cell + (j + ox) / cell) & 1;
                        img[i * size + j] = par ? pol : -pol;
                    }
            }
        }
        return out;
    }
};

// ---- features -------------------------------------------------------------------

// Fixed seeded random projection of flattened pixels; the stand-in for a
// trained feature network. Linear, deterministic, and serializable so that
// separate processes score against identical features.
class FeatureProjector {
public:
    static constexpr uint64_t kProjectionSeed = 0x5EEDFACEull;

    FeatureProjector() = default;

    static FeatureProjector create(int input_dim, int feature_dim = 32) {
        FeatureProjector p;
        p.proj_ = Tensor({input_dim, feature_dim});
        Rng rng(kProjectionSeed);
        const float scale = 1.0f / std::sqrt(static_cast<float>(feature_dim));
        for (auto& v : p.proj_.data) v = rng.gaussian() * scale;
        return p;
    }

    int input_dim() const { return proj_.dim(0); }
    int feature_dim() const { return proj_.dim(1); }

    // images [N,C,H,W] with C*H*W == input_dim -> [N, feature_dim]
    Tensor apply(const Tensor& images) const {
        const int64_t flat = images.numel() / images.dim(0);
        if (flat != proj_.dim(0)) {
            throw std::invalid_argument("features: image size " + std::to_string(flat) +
                                        " does not match projection input " + std::to_string(proj_.dim(0)));
        }
        Tensor out({images.dim(0), proj_.dim(1)});
        gemm_f32(images.ptr(), proj_.ptr(), out.ptr(), images.dim(0), proj_.dim(0), proj_.dim(1), nullptr);
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("features: cannot write " + path);
        const int32_t dims[2] = {proj_.dim(0), proj_.dim(1)};
        os.write(reinterpret_cast<const char*>(dims), 8);
        os.write(reinterpret_cast<const char*>(proj_.ptr()), static_cast<std::streamsize>(proj_.numel() * 4));
    }

    static FeatureProjector load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("features: cannot read " + path);
        int32_t dims[2];
        is.read(reinterpret_cast<char*>(dims), 8);
        FeatureProjector p;
        p.proj_ = Tensor({dims[0], dims[1]});
        is.read(reinterpret_cast<char*>(p.proj_.ptr()), static_cast<std::streamsize>(p.proj_.numel() * 4));
        if (!is) throw std::runtime_error("features: truncated projection file " + path);
        return p;
    }

    const Tensor& matrix() const { return proj_; }

private:
    Tensor proj_;
};

// ---- Frechet distance -------------------------------------------------------------

struct FrechetStats {
    int dim = 0;
    int64_t count = 0;
    std::vector<double> mean;  // [dim]
    std::vector<double> cov;   // [dim, dim], symmetric

    static FrechetStats from_features(const Tensor& f, bool warn_rank = true) {
        FrechetStats s;
        s.dim = f.dim(1);
        s.count = f.dim(0);
        if (s.count < 2) throw std::invalid_argument("frechet: need at least 2 samples");
        if (warn_rank && s.count < s.dim + 1) {
            std::cerr << "warning: covariance from " << s.count << " samples of dimension " << s.dim
                      << " is rank-deficient\n";
        }
        const int d = s.dim;
        s.mean.assign(static_cast<size_t>(d), 0.0);
        s.cov.assign(static_cast<size_t>(d) * d, 0.0);
        for (int64_t n = 0; n < s.count; ++n) {
            const float* row = f.ptr() + n * d;
            for (int i = 0; i < d; ++i) s.mean[static_cast<size_t>(i)] += row[i];
        }
        for (auto& m : s.mean) m /= static_cast<double>(s.count);
        for (int64_t n = 0; n < s.count; ++n) {
            const float* row = f.ptr() + n * d;
            for (int i = 0; i < d; ++i) {
                const double di = row[i] - s.mean[static_cast<size_t>(i)];
                for (int j = i; j < d; ++j) {
                    s.cov[static_cast<size_t>(i) * d + j] += di * (row[j] - s.mean[static_cast<size_t>(j)]);
                }
            }
        }
        const double norm = 1.0 / static_cast<double>(s.count - 1);  // unbiased
        for (int i = 0; i < d; ++i)
            for (int j = i; j < d; ++j) {
                const double v = s.cov[static_cast<size_t>(i) * d + j] * norm;
                s.cov[static_cast<size_t>(i) * d + j] = v;
                s.cov[static_cast<size_t>(j) * d + i] = v;
            }
        return s;
    }
};

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. a is overwritten;
// eigenvalues land in w. Plenty for the 32x32 covariance matrices used here.
inline void jacobi_eigen(std::vector<double>& a, int n, std::vector<double>* w,
                         std::vector<double>* vectors = nullptr) {
    if (vectors) {
        vectors->assign(static_cast<size_t>(n) * n, 0.0);
        for (int i = 0; i < n; ++i) (*vectors)[static_cast<size_t>(i) * n + i] = 1.0;
    }
    auto at = [&](int i, int j) -> double& { return a[static_cast<size_t>(i) * n + j]; };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0, diag = 0.0;
        for (int i = 0; i < n; ++i) {
            diag += at(i, i) * at(i, i);
            for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
        }
        if (off <= 1e-28 * (diag + off) || off == 0.0) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = at(p, q);
                if (apq == 0.0) continue;
                const double app = at(p, p), aqq = at(q, q);
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int i = 0; i < n; ++i) {
                    const double aip = at(i, p), aiq = at(i, q);
                    at(i, p) = c * aip - s * aiq;
                    at(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const double api = at(p, i), aqi = at(q, i);
                    at(p, i) = c * api - s * aqi;
                    at(q, i) = s * api + c * aqi;
                }
                if (vectors) {
                    for (int i = 0; i < n; ++i) {
                        const double vip = (*vectors)[static_cast<size_t>(i) * n + p];
                        const double viq = (*vectors)[static_cast<size_t>(i) * n + q];
                        (*vectors)[static_cast<size_t>(i) * n + p] = c * vip - s * viq;
                        (*vectors)[static_cast<size_t>(i) * n + q] = s * vip + c * viq;
                    }
                }
            }
        }
    }
    w->resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) (*w)[static_cast<size_t>(i)] = at(i, i);
}

inline double clamp_eigenvalue(double lambda, const char* what) {
    if (lambda < -1e-8) {
        throw NumericalError(std::string("frechet: ") + what + " has eigenvalue " + std::to_string(lambda) +
                             " below -1e-8; covariance is not PSD");
    }
    return lambda < 0.0 ? 0.0 : lambda;
}

// B = sqrt(A) for symmetric PSD A via eigendecomposition.
inline std::vector<double> sqrt_psd(std::vector<double> a, int n, const char* what) {
    std::vector<double> w, v;
    jacobi_eigen(a, n, &w, &v);
    for (auto& lambda : w) lambda = std::sqrt(clamp_eigenvalue(lambda, what));
    std::vector<double> out(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int k = 0; k < n; ++k)
                acc += v[static_cast<size_t>(i) * n + k] * w[static_cast<size_t>(k)] * v[static_cast<size_t>(j) * n + k];
            out[static_cast<size_t>(i) * n + j] = acc;
        }
    return out;
}

}  // namespace detail

// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)), the square root computed
// through the symmetric product Sa^(1/2) Sb Sa^(1/2).
inline double frechet_distance(const FrechetStats& a, const FrechetStats& b) {
    if (a.dim != b.dim) {
        throw std::invalid_argument("frechet: dimension mismatch " + std::to_string(a.dim) + " vs " +
                                    std::to_string(b.dim));
    }
    const int d = a.dim;
    double mean_term = 0.0, tr_a = 0.0, tr_b = 0.0;
    for (int i = 0; i < d; ++i) {
        const double diff = a.mean[static_cast<size_t>(i)] - b.mean[static_cast<size_t>(i)];
        mean_term += diff * diff;
        tr_a += a.cov[static_cast<size_t>(i) * d + i];
        tr_b += b.cov[static_cast<size_t>(i) * d + i];
    }

    const std::vector<double> sqrt_a = detail::sqrt_psd(a.cov, d, "first covariance");
    // M = sqrt(Sa) Sb sqrt(Sa), symmetrized against roundoff.
    std::vector<double> tmp(static_cast<size_t>(d) * d, 0.0), m(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) {
            const double v = sqrt_a[static_cast<size_t>(i) * d + k];
            if (v == 0.0) continue;
            for (int j = 0; j < d; ++j) tmp[static_cast<size_t>(i) * d + j] += v * b.cov[static_cast<size_t>(k) * d + j];
        }
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) {
            const double v = tmp[static_cast<size_t>(i) * d + k];
            if (v == 0.0) continue;
            for (int j = 0; j < d; ++j) m[static_cast<size_t>(i) * d + j] += v * sqrt_a[static_cast<size_t>(k) * d + j];
        }
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            const double v = 0.5 * (m[static_cast<size_t>(i) * d + j] + m[static_cast<size_t>(j) * d + i]);
            m[static_cast<size_t>(i) * d + j] = v;
            m[static_cast<size_t>(j) * d + i] = v;
        }
    std::vector<double> w;
    detail::jacobi_eigen(m, d, &w);
    double tr_sqrt = 0.0;
    for (double lambda : w) tr_sqrt += std::sqrt(detail::clamp_eigenvalue(lambda, "product matrix"));

    double fd = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    if (fd < -1e-6) throw NumericalError("frechet: distance " + std::to_string(fd) + " below -1e-6");
    return fd < 0.0 ? 0.0 : fd;
}

// ---- evaluation + latency harness ---------------------------------------------------

struct EvalRow {
    std::string label;
    std::string mix;
    int steps = 0;
    int boundary = 0;
    double frechet = 0.0;
};

inline double evaluate_config(Sampler& sampler, const PrecisionPolicy& policy, const FrechetStats& reference,
                              const FeatureProjector& projector, int n_images, int height, int width,
                              uint64_t seed) {
    Tensor samples = sampler.sample(policy, n_images, height, width, seed);
    Tensor feats = projector.apply(samples);
    return frechet_distance(FrechetStats::from_features(feats), reference);
}

struct BenchRow {
    std::string label;
    std::string mix;
    int steps = 0;
    int boundary = 0;
    double median_ms = 0.0;
    double p10_ms = 0.0;
    double p90_ms = 0.0;
    double frechet = std::numeric_limits<double>::quiet_NaN();
};

inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

// Wall-clock of one full n-step sample per repeat; median plus p10/p90.
inline BenchRow bench_policy_latency(Sampler& sampler, const PrecisionPolicy& policy, int height, int width,
                                     int repeats = 20, int warmup = 3, uint64_t seed = 7) {
    policy.validate();
    if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
    for (int i = 0; i < warmup; ++i) sampler.sample(policy, 1, height, width, seed + static_cast<uint64_t>(i));
    std::vector<double> times;
    times.reserve(static_cast<size_t>(repeats));
    for (int i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        sampler.sample(policy, 1, height, width, seed + 100 + static_cast<uint64_t>(i));
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    BenchRow row;
    row.label = policy.label();
    row.mix = format_name(policy.high) + "+" + format_name(policy.low);
    row.steps = policy.steps;
    row.boundary = policy.boundary;
    row.median_ms = quantile_sorted(times, 0.5);
    row.p10_ms = quantile_sorted(times, 0.1);
    row.p90_ms = quantile_sorted(times, 0.9);
    return row;
}

struct KernelBenchRow {
    std::string kernel;
    std::string config;
    int threads = 0;
    double median_ns = 0.0;
    double p10_ns = 0.0;
    double p90_ns = 0.0;
};

inline KernelBenchRow bench_kernel(const std::string& kernel, const std::string& config, int threads,
                                   const std::function<void()>& fn, int repeats = 20, int warmup = 3) {
    for (int i = 0; i < warmup; ++i) fn();
    std::vector<double> times;
    times.reserve(static_cast<size_t>(repeats));
    for (int i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
    }
    std::sort(times.begin(), times.end());
    return KernelBenchRow{kernel, config, threads, quantile_sorted(times, 0.5), quantile_sorted(times, 0.1),
                          quantile_sorted(times, 0.9)};
}

// ---- report writers ----------------------------------------------------------------

inline void write_kernel_bench_csv(const std::string& path, const std::vector<KernelBenchRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("bench: cannot write " + path);
    os << "kernel,config,threads,median_ns,p10_ns,p90_ns\n";
    for (const auto& r : rows) {
        os << r.kernel << "," << r.config << "," << r.threads << "," << static_cast<int64_t>(r.median_ns) << ","
           << static_cast<int64_t>(r.p10_ns) << "," << static_cast<int64_t>(r.p90_ns) << "\n";
    }
}

inline void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("eval: cannot write " + path);
    os << "config,precision_mix,steps,boundary,frechet\n";
    for (const auto& r : rows) {
        os << r.label << "," << r.mix << "," << r.steps << "," << r.boundary << "," << r.frechet << "\n";
    }
}

inline void write_eval_markdown(const std::string& path, const std::vector<EvalRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("eval: cannot write " + path);
    os << "| Precision |";
    for (const auto& r : rows) os << " " << r.label << " |";
    os << "\n|---|";
    for (size_t i = 0; i < rows.size(); ++i) os << "---|";
    os << "\n| Frechet distance |";
    for (const auto& r : rows) {
        std::ostringstream v;
        v.precision(4);
        v << std::fixed << r.frechet;
        os << " " << v.str() << " |";
    }
    os << "\n";
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("bench: cannot write " + path);
    os << "config,precision_mix,steps,boundary,median_ms,p10_ms,p90_ms,frechet\n";
    for (const auto& r : rows) {
        os << r.label << "," << r.mix << "," << r.steps << "," << r.boundary << "," << r.median_ms << ","
           << r.p10_ms << "," << r.p90_ms << ",";
        if (std::isfinite(r.frechet)) os << r.frechet;
        os << "\n";
    }
}

inline void write_bench_markdown(const std::string& path, const std::vector<BenchRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("bench: cannot write " + path);
    os << "| Precision |";
    for (const auto& r : rows) os << " " << r.label << " |";
    os << "\n|---|";
    for (size_t i = 0; i < rows.size(); ++i) os << "---|";
    os << "\n| Latency (ms) |";
    for (const auto& r : rows) {
        std::ostringstream v;
        v.precision(1);
        v << std::fixed << r.median_ms;
        os << " " << v.str() << " |";
    }
    os << "\n";
}

}  // namespace qdiff
