#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdiff/tensor.hpp"

namespace qdiff {

enum class PrecisionFormat { FP32, BF16, INT8 };

inline std::string format_name(PrecisionFormat f) {
    switch (f) {
        case PrecisionFormat::FP32: return "fp32";
        case PrecisionFormat::BF16: return "bf16";
        case PrecisionFormat::INT8: return "int8";
    }
    return "fp32";
}

inline PrecisionFormat format_from_name(const std::string& s) {
    if (s == "fp32") return PrecisionFormat::FP32;
    if (s == "bf16") return PrecisionFormat::BF16;
    if (s == "int8") return PrecisionFormat::INT8;
    throw std::invalid_argument("unknown precision format '" + s + "' (expected fp32|bf16|int8)");
}

enum class QuantGranularity { PerTensor, PerChannel };

// Symmetric INT8 parameters: values live in [-127, 127], zero_point is 0.
// Per-channel params carry one scale per slice along `axis`.
struct QuantParams {
    QuantGranularity granularity = QuantGranularity::PerTensor;
    int axis = 0;
    std::vector<float> scales;  // size 1 for per-tensor

    float scale() const { return scales.at(0); }

    static QuantParams per_tensor(float s) {
        QuantParams p;
        p.scales = {s};
        return p;
    }
    static QuantParams per_channel(int axis, std::vector<float> s) {
        QuantParams p;
        p.granularity = QuantGranularity::PerChannel;
        p.axis = axis;
        p.scales = std::move(s);
        return p;
    }
};

struct QuantizedTensor {
    std::vector<int> shape;
    std::vector<int8_t> data;
    int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

constexpr float kMinScale = 1e-12f;

// Round f32 to the nearest BF16 (8 exponent bits, 7 stored significand bits),
// ties to even, result widened back to f32. NaN/Inf pass through.
inline float bf16_round_scalar(float x) {
    uint32_t u;
    std::memcpy(&u, &x, 4);
    if ((u & 0x7F800000u) == 0x7F800000u) return x;  // NaN or Inf
    uint32_t rounded = (u + 0x7FFFu + ((u >> 16) & 1u)) & 0xFFFF0000u;
    float y;
    std::memcpy(&y, &rounded, 4);
    return y;
}

inline void bf16_round_inplace(float* x, int64_t n) {
    for (int64_t i = 0; i < n; ++i) x[i] = bf16_round_scalar(x[i]);
}

inline Tensor bf16_round(const Tensor& x) {
    Tensor y = x;
    bf16_round_inplace(y.ptr(), y.numel());
    return y;
}

// q = clamp(round_half_even(x / scale), -127, 127). The quotient is formed in
// double so the rounding decision matches the exact quotient.
inline int8_t quantize_scalar(float x, float scale) {
    double q = std::nearbyint(static_cast<double>(x) / static_cast<double>(scale));
    if (q > 127.0) q = 127.0;
    if (q < -127.0) q = -127.0;
    return static_cast<int8_t>(q);
}

inline float max_abs(const float* x, int64_t n) {
    float m = 0.0f;
    for (int64_t i = 0; i < n; ++i) {
        float a = std::fabs(x[i]);
        if (a > m) m = a;
    }
    return m;
}

inline float scale_from_max(float amax) {
    float s = amax / 127.0f;
    return s < kMinScale ? kMinScale : s;
}

// Symmetric calibration: scale = max|x| / 127 per tensor or per channel slice.
inline QuantParams calibrate(const Tensor& x, QuantGranularity g, int axis = 0) {
    if (x.numel() == 0) throw std::invalid_argument("calibrate: empty tensor");
    if (g == QuantGranularity::PerTensor) {
        return QuantParams::per_tensor(scale_from_max(max_abs(x.ptr(), x.numel())));
    }
    if (axis < 0 || axis >= x.ndim()) {
        throw std::invalid_argument("calibrate: axis " + std::to_string(axis) + " out of range for shape " +
                                    Tensor::shape_str(x.shape));
    }
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
    const int channels = x.dim(axis);
    std::vector<float> scales(static_cast<size_t>(channels));
    for (int c = 0; c < channels; ++c) {
        float m = 0.0f;
        for (int64_t o = 0; o < outer; ++o) {
            const float* p = x.ptr() + (o * channels + c) * inner;
            float mm = max_abs(p, inner);
            if (mm > m) m = mm;
        }
        scales[static_cast<size_t>(c)] = scale_from_max(m);
    }
    return QuantParams::per_channel(axis, std::move(scales));
}

namespace detail {
inline void quant_slice(const float* x, int8_t* q, int64_t n, float scale) {
    const double s = static_cast<double>(scale);
    for (int64_t i = 0; i < n; ++i) {
        double v = std::nearbyint(static_cast<double>(x[i]) / s);
        if (v > 127.0) v = 127.0;
        if (v < -127.0) v = -127.0;
        q[i] = static_cast<int8_t>(v);
    }
}
}  // namespace detail

inline QuantizedTensor quantize_int8(const Tensor& x, const QuantParams& p) {
    QuantizedTensor q;
    q.shape = x.shape;
    q.data.resize(static_cast<size_t>(x.numel()));
    if (p.granularity == QuantGranularity::PerTensor) {
        detail::quant_slice(x.ptr(), q.data.data(), x.numel(), p.scale());
    } else {
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < p.axis; ++i) outer *= x.dim(i);
        for (int i = p.axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
        const int channels = x.dim(p.axis);
        if (static_cast<size_t>(channels) != p.scales.size()) {
            throw std::invalid_argument("quantize_int8: params carry " + std::to_string(p.scales.size()) +
                                        " scales but axis has " + std::to_string(channels) + " slices");
        }
        for (int64_t o = 0; o < outer; ++o) {
            for (int c = 0; c < channels; ++c) {
                int64_t off = (o * channels + c) * inner;
                detail::quant_slice(x.ptr() + off, q.data.data() + off, inner, p.scales[static_cast<size_t>(c)]);
            }
        }
    }
    return q;
}

inline Tensor dequantize(const QuantizedTensor& q, const QuantParams& p) {
    Tensor x(q.shape);
    if (p.granularity == QuantGranularity::PerTensor) {
        const float s = p.scale();
        for (int64_t i = 0; i < q.numel(); ++i) x.data[static_cast<size_t>(i)] = static_cast<float>(q.data[static_cast<size_t>(i)]) * s;
    } else {
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < p.axis; ++i) outer *= q.shape[static_cast<size_t>(i)];
        for (size_t i = static_cast<size_t>(p.axis) + 1; i < q.shape.size(); ++i) inner *= q.shape[i];
        const int channels = q.shape[static_cast<size_t>(p.axis)];
        for (int64_t o = 0; o < outer; ++o) {
            for (int c = 0; c < channels; ++c) {
                const float s = p.scales[static_cast<size_t>(c)];
                int64_t off = (o * channels + c) * inner;
                for (int64_t i = 0; i < inner; ++i) x.data[static_cast<size_t>(off + i)] = static_cast<float>(q.data[static_cast<size_t>(off + i)]) * s;
            }
        }
    }
    return x;
}

// Forward of fake quantization: dequantize(quantize_int8(x)). The tape op in
// autodiff.hpp adds the clipped straight-through gradient.
inline Tensor fake_quant_forward(const Tensor& x, const QuantParams& p) {
    return dequantize(quantize_int8(x, p), p);
}

// Moving max-magnitude observer for activation calibration during QAT.
// First observation seeds the state; afterwards
//   running_max <- m * running_max + (1 - m) * max|x|,  m = 0.99.
struct MinMaxObserver {
    float running_max = 0.0f;
    bool seeded = false;
    float momentum = 0.99f;

    void observe(const float* x, int64_t n) {
        float m = max_abs(x, n);
        if (!seeded) {
            running_max = m;
            seeded = true;
        } else {
            running_max = momentum * running_max + (1.0f - momentum) * m;
        }
    }
    void observe(const Tensor& x) { observe(x.ptr(), x.numel()); }

    QuantParams params() const { return QuantParams::per_tensor(scale_from_max(running_max)); }
};

}  // namespace qdiff
