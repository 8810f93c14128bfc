#pragma once

#include <cstring>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdiff/kernels/attention.hpp"
#include "qdiff/kernels/buffer_plan.hpp"
#include "qdiff/kernels/groupnorm.hpp"
#include "qdiff/kernels/int8_gemm.hpp"
#include "qdiff/unet.hpp"

namespace qdiff {

// Inference executor for one (model, format) pair. Conv/linear weights are
// packed once per layer; activations are served from a traced-then-planned
// workspace so repeated forwards reuse a fixed arena set.
//
// Format dispatch per quantized layer:
//   FP32  - packed f32 GEMM
//   BF16  - weights pre-rounded to BF16, activations rounded while building
//           the im2col panel, f32 accumulation
//   INT8  - activations quantized with the frozen per-tensor scale, weights
//           quantized per output channel, int32 accumulation
class UnetEngine {
public:
    UnetEngine(UnetModel& model, PrecisionFormat fmt, WorkerPool& pool)
        : model_(&model), fmt_(fmt), pool_(&pool) {
        model.cfg.validate();
        if (fmt == PrecisionFormat::INT8) {
            bool any = false;
            for (const auto& q : model.quant) {
                if (q.quantized) {
                    any = true;
                    if (!q.frozen) {
                        throw std::runtime_error("unet: INT8 forward requested but layer '" + q.layer +
                                                 "' has no frozen QuantParams; run calibration or QAT first");
                    }
                }
            }
            if (!any) {
                throw std::runtime_error("unet: INT8 forward requested but the model has no quantized layers");
            }
        }
    }

    PrecisionFormat format() const { return fmt_; }

    Tensor forward(const Tensor& x, const std::vector<int>& tsteps) {
        const UnetConfig& cfg = model_->cfg;
        if (x.ndim() != 4 || x.dim(1) != cfg.in_channels) {
            throw std::invalid_argument("unet: input must be [N," + std::to_string(cfg.in_channels) +
                                        ",H,W], got " + Tensor::shape_str(x.shape));
        }
        if (static_cast<size_t>(x.dim(0)) != tsteps.size()) {
            throw std::invalid_argument("unet: batch size " + std::to_string(x.dim(0)) + " but " +
                                        std::to_string(tsteps.size()) + " timesteps");
        }
        const int down_factor = 1 << (cfg.levels() - 1);
        if (x.dim(2) % down_factor != 0 || x.dim(3) % down_factor != 0) {
            throw std::invalid_argument("unet: spatial dims must be divisible by " + std::to_string(down_factor));
        }

        kernels::Workspace& ws = workspace(x.dim(0), x.dim(2), x.dim(3));
        ws.begin_pass();
        Tensor out = run(ws, x, tsteps);
        if (!ws.replay()) ws.finalize();
        return out;
    }

    // Introspection for tests: the traced plan for a given input shape.
    const kernels::Workspace* workspace_for(int n, int h, int w) const {
        auto it = workspaces_.find(shape_key(n, h, w));
        return it == workspaces_.end() ? nullptr : it->second.get();
    }

private:
    struct View {
        float* p = nullptr;
        int n = 0, c = 0, h = 0, w = 0;
        int64_t hw() const { return static_cast<int64_t>(h) * w; }
        int64_t numel() const { return static_cast<int64_t>(n) * c * hw(); }
    };

    struct ConvPack {
        int cin = 0, cout = 0, kh = 0, kw = 0, stride = 1, pad = 0;
        bool int8_path = false;
        PackedBf32 wf;             // fp32 / bf16 path
        std::vector<float> bias;   // possibly bf16-rounded
        kernels::PackedBInt8 wq;   // int8 path
        float act_scale = 0.0f;
    };

    struct LinPack {
        int din = 0, dout = 0;
        bool int8_path = false;
        PackedBf32 wf;
        std::vector<float> bias;
        kernels::PackedBInt8 wq;
        float act_scale = 0.0f;
    };

    static int64_t shape_key(int n, int h, int w) {
        return (static_cast<int64_t>(n) << 40) | (static_cast<int64_t>(h) << 20) | w;
    }

    kernels::Workspace& workspace(int n, int h, int w) {
        auto& slot = workspaces_[shape_key(n, h, w)];
        if (!slot) slot = std::make_unique<kernels::Workspace>();
        return *slot;
    }

    View acquire(kernels::Workspace& ws, int n, int c, int h, int w) {
        return View{ws.acquire(static_cast<int64_t>(n) * c * h * w), n, c, h, w};
    }

    // ---- packing ------------------------------------------------------------

    const ConvPack& conv_pack(const unet_detail::ConvRef& c) {
        auto it = conv_packs_.find(c.w);
        if (it != conv_packs_.end()) return it->second;
        const Tensor& wv = model_->params[static_cast<size_t>(c.w)].value;
        const Tensor& bv = model_->params[static_cast<size_t>(c.b)].value;
        ConvPack pk;
        pk.cout = wv.dim(0);
        pk.cin = wv.dim(1);
        pk.kh = wv.dim(2);
        pk.kw = wv.dim(3);
        pk.stride = c.stride;
        pk.pad = c.pad;
        const LayerQuant* q = c.qslot >= 0 ? &model_->quant_slot(c.qslot) : nullptr;
        pk.int8_path = fmt_ == PrecisionFormat::INT8 && q && q->quantized;
        const int64_t k = static_cast<int64_t>(pk.cin) * pk.kh * pk.kw;
        if (pk.int8_path) {
            QuantizedTensor qw = quantize_int8(wv, QuantParams::per_channel(0, q->weight_scales));
            // weight [O,K] -> column-major-by-output [K,O] for the packed layout
            std::vector<int8_t> wt(static_cast<size_t>(k) * pk.cout);
            for (int o = 0; o < pk.cout; ++o)
                for (int64_t kk = 0; kk < k; ++kk)
                    wt[static_cast<size_t>(kk) * pk.cout + o] = qw.data[static_cast<size_t>(o * k + kk)];
            pk.wq = kernels::pack_b_int8(wt.data(), static_cast<int>(k), pk.cout,
                                         QuantParams::per_channel(1, q->weight_scales));
            pk.act_scale = q->act_scale;
            pk.bias.assign(bv.data.begin(), bv.data.end());
        } else {
            std::vector<float> wt(static_cast<size_t>(k) * pk.cout);
            for (int o = 0; o < pk.cout; ++o)
                for (int64_t kk = 0; kk < k; ++kk) {
                    float v = wv.ptr()[o * k + kk];
                    if (fmt_ == PrecisionFormat::BF16) v = bf16_round_scalar(v);
                    wt[static_cast<size_t>(kk) * pk.cout + o] = v;
                }
            pk.wf = pack_b_f32(wt.data(), static_cast<int>(k), pk.cout);
            pk.bias.assign(bv.data.begin(), bv.data.end());
            if (fmt_ == PrecisionFormat::BF16) bf16_round_inplace(pk.bias.data(), static_cast<int64_t>(pk.bias.size()));
        }
        return conv_packs_.emplace(c.w, std::move(pk)).first->second;
    }

    const LinPack& lin_pack(const unet_detail::LinRef& l) {
        auto it = lin_packs_.find(l.w);
        if (it != lin_packs_.end()) return it->second;
        const Tensor& wv = model_->params[static_cast<size_t>(l.w)].value;
        const Tensor& bv = model_->params[static_cast<size_t>(l.b)].value;
        LinPack pk;
        pk.din = wv.dim(0);
        pk.dout = wv.dim(1);
        const LayerQuant* q = l.qslot >= 0 ? &model_->quant_slot(l.qslot) : nullptr;
        pk.int8_path = fmt_ == PrecisionFormat::INT8 && q && q->quantized;
        if (pk.int8_path) {
            // weight scales were calibrated along axis 0 of [O,...]-shaped conv
            // weights; for linear [D,E] the output axis is 1.
            QuantizedTensor qw = quantize_int8(wv, QuantParams::per_channel(1, q->weight_scales));
            pk.wq = kernels::pack_b_int8(qw.data.data(), pk.din, pk.dout,
                                         QuantParams::per_channel(1, q->weight_scales));
            pk.act_scale = q->act_scale;
            pk.bias.assign(bv.data.begin(), bv.data.end());
        } else {
            std::vector<float> wt(wv.data.begin(), wv.data.end());
            if (fmt_ == PrecisionFormat::BF16) bf16_round_inplace(wt.data(), static_cast<int64_t>(wt.size()));
            pk.wf = pack_b_f32(wt.data(), pk.din, pk.dout);
            pk.bias.assign(bv.data.begin(), bv.data.end());
            if (fmt_ == PrecisionFormat::BF16) bf16_round_inplace(pk.bias.data(), static_cast<int64_t>(pk.bias.size()));
        }
        return lin_packs_.emplace(l.w, std::move(pk)).first->second;
    }

    // ---- primitive executors --------------------------------------------------

    template <typename F>
    static void im2col_f32_t(const float* x, const ops::Conv2dDims& d, float* col, F f, WorkerPool* pool) {
        const int64_t hw = static_cast<int64_t>(d.h) * d.w;
        const int64_t chw = d.c * hw;
        const int64_t cols = d.cols();
        auto run = [&](int64_t r0, int64_t r1) {
            for (int64_t r = r0; r < r1; ++r) {
                const int64_t ni = r / (static_cast<int64_t>(d.oh) * d.ow);
                const int64_t rest = r % (static_cast<int64_t>(d.oh) * d.ow);
                const int oi = static_cast<int>(rest / d.ow);
                const int oj = static_cast<int>(rest % d.ow);
                float* dst = col + r * cols;
                const float* xs = x + ni * chw;
                for (int c = 0; c < d.c; ++c) {
                    for (int ki = 0; ki < d.kh; ++ki) {
                        const int ii = oi * d.stride - d.pad + ki;
                        if (ii < 0 || ii >= d.h) {
                            for (int kj = 0; kj < d.kw; ++kj) *dst++ = 0.0f;
                            continue;
                        }
                        const float* row = xs + c * hw + static_cast<int64_t>(ii) * d.w;
                        for (int kj = 0; kj < d.kw; ++kj) {
                            const int jj = oj * d.stride - d.pad + kj;
                            *dst++ = (jj < 0 || jj >= d.w) ? 0.0f : f(row[jj]);
                        }
                    }
                }
            }
        };
        if (pool && pool->size() > 1 && d.rows() >= 256) {
            pool->parallel_for(0, d.rows(), run);
        } else {
            run(0, d.rows());
        }
    }

    static void im2col_i16(const int16_t* x, const ops::Conv2dDims& d, int16_t* col, int64_t ldcol,
                           WorkerPool* pool) {
        const int64_t hw = static_cast<int64_t>(d.h) * d.w;
        const int64_t chw = d.c * hw;
        auto run = [&](int64_t r0, int64_t r1) {
            for (int64_t r = r0; r < r1; ++r) {
                const int64_t ni = r / (static_cast<int64_t>(d.oh) * d.ow);
                const int64_t rest = r % (static_cast<int64_t>(d.oh) * d.ow);
                const int oi = static_cast<int>(rest / d.ow);
                const int oj = static_cast<int>(rest % d.ow);
                int16_t* dst = col + r * ldcol;
                int16_t* dst0 = dst;
                const int16_t* xs = x + ni * chw;
                for (int c = 0; c < d.c; ++c) {
                    for (int ki = 0; ki < d.kh; ++ki) {
                        const int ii = oi * d.stride - d.pad + ki;
                        if (ii < 0 || ii >= d.h) {
                            for (int kj = 0; kj < d.kw; ++kj) *dst++ = 0;
                            continue;
                        }
                        const int16_t* row = xs + c * hw + static_cast<int64_t>(ii) * d.w;
                        for (int kj = 0; kj < d.kw; ++kj) {
                            const int jj = oj * d.stride - d.pad + kj;
                            *dst++ = (jj < 0 || jj >= d.w) ? static_cast<int16_t>(0) : row[jj];
                        }
                    }
                }
                while (dst - dst0 < ldcol) *dst++ = 0;  // pad odd K
            }
        };
        if (pool && pool->size() > 1 && d.rows() >= 256) {
            pool->parallel_for(0, d.rows(), run);
        } else {
            run(0, d.rows());
        }
    }

    void quantize_to_i16(const float* x, int16_t* q, int64_t count, float scale) {
        const double s = static_cast<double>(scale);
        auto run = [&](int64_t i0, int64_t i1) {
            for (int64_t i = i0; i < i1; ++i) {
                double v = std::nearbyint(static_cast<double>(x[i]) / s);
                if (v > 127.0) v = 127.0;
                if (v < -127.0) v = -127.0;
                q[i] = static_cast<int16_t>(v);
            }
        };
        if (pool_->size() > 1 && count >= 1 << 14) {
            pool_->parallel_for(0, count, run);
        } else {
            run(0, count);
        }
    }

    View conv(kernels::Workspace& ws, const unet_detail::ConvRef& c, View x) {
        const ConvPack& pk = conv_pack(c);
        ops::Conv2dDims d = ops::conv2d_dims({x.n, x.c, x.h, x.w}, {pk.cout, pk.cin, pk.kh, pk.kw}, pk.stride, pk.pad);
        View out = acquire(ws, x.n, pk.cout, d.oh, d.ow);
        const int64_t m = d.rows();
        const int64_t k = d.cols();
        if (pk.int8_path) {
            const int64_t kp = (k + 1) & ~int64_t{1};
            int16_t* qx = reinterpret_cast<int16_t*>(ws.acquire((x.numel() + 1) / 2));
            quantize_to_i16(x.p, qx, x.numel(), pk.act_scale);
            int16_t* col = reinterpret_cast<int16_t*>(ws.acquire((m * kp + 1) / 2));
            im2col_i16(qx, d, col, kp, pool_);
            ws.release(reinterpret_cast<float*>(qx));
            int32_t* acc = reinterpret_cast<int32_t*>(ws.acquire(m * pk.wq.n_tiles * 16));
            float* rows = ws.acquire(m * pk.cout);
            kernels::int8_gemm_packed(col, static_cast<int>(m), static_cast<int>(k), pk.wq, pk.act_scale,
                                      pk.bias.data(), rows, acc, pool_);
            ws.release(reinterpret_cast<float*>(col));
            ws.release(reinterpret_cast<float*>(acc));
            ops::rows_to_nchw(rows, d, nullptr, out.p);
            ws.release(rows);
        } else {
            float* col = ws.acquire(m * k);
            if (fmt_ == PrecisionFormat::BF16) {
                im2col_f32_t(x.p, d, col, [](float v) { return bf16_round_scalar(v); }, pool_);
            } else {
                im2col_f32_t(x.p, d, col, [](float v) { return v; }, pool_);
            }
            float* rows = ws.acquire(m * pk.cout);
            gemm_f32(col, pk.wf, rows, static_cast<int>(m), pool_);
            ws.release(col);
            ops::rows_to_nchw(rows, d, pk.bias.data(), out.p);
            ws.release(rows);
        }
        return out;
    }

    Tensor linear_apply(const unet_detail::LinRef& l, const Tensor& in) {
        const LinPack& pk = lin_pack(l);
        const int n = in.dim(0);
        if (in.ndim() != 2 || in.dim(1) != pk.din) {
            throw std::invalid_argument("unet: time-embedding linear expects [N," + std::to_string(pk.din) + "]");
        }
        Tensor out({n, pk.dout});
        if (pk.int8_path) {
            const int kp = (pk.din + 1) & ~1;
            std::vector<int16_t> q(static_cast<size_t>(n) * kp, 0);
            for (int i = 0; i < n; ++i) {
                const float* src = in.ptr() + static_cast<int64_t>(i) * pk.din;
                int16_t* dst = q.data() + static_cast<int64_t>(i) * kp;
                const double s = pk.act_scale;
                for (int j = 0; j < pk.din; ++j) {
                    double v = std::nearbyint(static_cast<double>(src[j]) / s);
                    if (v > 127.0) v = 127.0;
                    if (v < -127.0) v = -127.0;
                    dst[j] = static_cast<int16_t>(v);
                }
            }
            std::vector<int32_t> acc(static_cast<size_t>(n) * pk.wq.n_tiles * 16);
            kernels::int8_gemm_packed(q.data(), n, pk.din, pk.wq, pk.act_scale, pk.bias.data(), out.ptr(),
                                      acc.data(), nullptr);
        } else {
            const float* src = in.ptr();
            std::vector<float> rounded;
            if (fmt_ == PrecisionFormat::BF16) {
                rounded.assign(in.data.begin(), in.data.end());
                bf16_round_inplace(rounded.data(), static_cast<int64_t>(rounded.size()));
                src = rounded.data();
            }
            gemm_f32(src, pk.wf, out.ptr(), n, nullptr);
            for (int i = 0; i < n; ++i) {
                float* r = out.ptr() + static_cast<int64_t>(i) * pk.dout;
                for (int j = 0; j < pk.dout; ++j) r[j] += pk.bias[static_cast<size_t>(j)];
            }
        }
        return out;
    }

    View groupnorm(kernels::Workspace& ws, const unet_detail::NormRef& nr, View x) {
        kernels::GroupNormSpec spec;
        spec.channels = x.c;
        spec.groups = model_->cfg.groups;
        spec.gamma = model_->params[static_cast<size_t>(nr.gamma)].value.ptr();
        spec.beta = model_->params[static_cast<size_t>(nr.beta)].value.ptr();
        View out = acquire(ws, x.n, x.c, x.h, x.w);
        kernels::groupnorm_channel_parallel_raw(x.p, out.p, x.n, x.c, x.hw(), spec, *pool_);
        return out;
    }

    static void silu_inplace(View v) {
        for (int64_t i = 0; i < v.numel(); ++i) {
            const float x = v.p[i];
            v.p[i] = x / (1.0f + std::exp(-x));
        }
    }

    static void add_inplace(View dst, const View& src) {
        for (int64_t i = 0; i < dst.numel(); ++i) dst.p[i] += src.p[i];
    }

    static void add_bias_hw_inplace(View x, const Tensor& s) {
        for (int ni = 0; ni < x.n; ++ni)
            for (int ci = 0; ci < x.c; ++ci) {
                const float b = s.ptr()[static_cast<int64_t>(ni) * x.c + ci];
                float* p = x.p + (static_cast<int64_t>(ni) * x.c + ci) * x.hw();
                for (int64_t i = 0; i < x.hw(); ++i) p[i] += b;
            }
    }

    View resblock(kernels::Workspace& ws, const unet_detail::ResBlockRef& r, View x, const Tensor& emb_act) {
        View g1 = groupnorm(ws, r.n1, x);
        silu_inplace(g1);
        View h1 = conv(ws, r.c1, g1);
        ws.release(g1.p);
        add_bias_hw_inplace(h1, linear_apply(r.temb, emb_act));
        View g2 = groupnorm(ws, r.n2, h1);
        ws.release(h1.p);
        silu_inplace(g2);
        View h2 = conv(ws, r.c2, g2);
        ws.release(g2.p);
        if (r.has_skip) {
            View sk = conv(ws, r.skip, x);
            add_inplace(h2, sk);
            ws.release(sk.p);
        } else {
            add_inplace(h2, x);
        }
        return h2;
    }

    View attention_block(kernels::Workspace& ws, View x) {
        const auto& a = model_->attn;
        const int heads = model_->cfg.attn_heads;
        const int dh = x.c / heads;
        const int64_t l = x.hw();
        View g = groupnorm(ws, a.norm, x);
        View qkv = conv(ws, a.qkv, g);
        ws.release(g.p);

        const int64_t head_elems = static_cast<int64_t>(x.n) * heads * l * dh;
        float* qh = ws.acquire(head_elems);
        float* kh = ws.acquire(head_elems);
        float* vh = ws.acquire(head_elems);
        float* parts[3] = {qh, kh, vh};
        for (int part = 0; part < 3; ++part) {
            for (int ni = 0; ni < x.n; ++ni)
                for (int ci = 0; ci < x.c; ++ci) {
                    const int hd = ci / dh, dc = ci % dh;
                    const float* src = qkv.p + ((static_cast<int64_t>(ni) * 3 + part) * x.c + ci) * l;
                    float* dst = parts[part] + ((static_cast<int64_t>(ni) * heads + hd) * l) * dh + dc;
                    for (int64_t p = 0; p < l; ++p) dst[p * dh] = src[p];
                }
        }
        ws.release(qkv.p);

        float* ao = ws.acquire(head_elems);
        kernels::fused_mha_raw(qh, kh, vh, ao, x.n, heads, static_cast<int>(l), dh, *pool_);
        ws.release(qh);
        ws.release(kh);
        ws.release(vh);

        View back = acquire(ws, x.n, x.c, x.h, x.w);
        for (int ni = 0; ni < x.n; ++ni)
            for (int ci = 0; ci < x.c; ++ci) {
                const int hd = ci / dh, dc = ci % dh;
                float* dst = back.p + (static_cast<int64_t>(ni) * x.c + ci) * l;
                const float* src = ao + ((static_cast<int64_t>(ni) * heads + hd) * l) * dh + dc;
                for (int64_t p = 0; p < l; ++p) dst[p] = src[p * dh];
            }
        ws.release(ao);

        View proj = conv(ws, a.proj, back);
        ws.release(back.p);
        add_inplace(proj, x);
        return proj;
    }

    Tensor run(kernels::Workspace& ws, const Tensor& x, const std::vector<int>& tsteps) {
        const UnetConfig& cfg = model_->cfg;

        Tensor emb = timestep_embedding(tsteps, cfg.temb_dim);
        emb = linear_apply(model_->tm1, emb);
        for (auto& v : emb.data) v = v / (1.0f + std::exp(-v));
        emb = linear_apply(model_->tm2, emb);
        for (auto& v : emb.data) v = v / (1.0f + std::exp(-v));

        View h0 = acquire(ws, x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        std::memcpy(h0.p, x.ptr(), sizeof(float) * static_cast<size_t>(x.numel()));
        View h = conv(ws, model_->stem, h0);
        ws.release(h0.p);

        std::vector<View> skips;
        for (int li = 0; li < cfg.levels(); ++li) {
            View nh = resblock(ws, model_->down[static_cast<size_t>(li)], h, emb);
            ws.release(h.p);
            skips.push_back(nh);
            h = nh;
            if (li + 1 < cfg.levels()) {
                // the skip stays live; do not release h here
                h = conv(ws, model_->down_samp[static_cast<size_t>(li)], h);
            }
        }

        View m = resblock(ws, model_->mid1, h, emb);
        if (h.p != skips.back().p) ws.release(h.p);
        h = m;
        if (cfg.attention) {
            View am = attention_block(ws, h);
            ws.release(h.p);
            h = am;
        }
        m = resblock(ws, model_->mid2, h, emb);
        ws.release(h.p);
        h = m;

        for (int li = cfg.levels() - 1; li >= 0; --li) {
            View sk = skips[static_cast<size_t>(li)];
            View cat = acquire(ws, h.n, h.c + sk.c, h.h, h.w);
            for (int ni = 0; ni < h.n; ++ni) {
                std::memcpy(cat.p + static_cast<int64_t>(ni) * (h.c + sk.c) * h.hw(),
                            h.p + static_cast<int64_t>(ni) * h.c * h.hw(),
                            sizeof(float) * static_cast<size_t>(h.c * h.hw()));
                std::memcpy(cat.p + (static_cast<int64_t>(ni) * (h.c + sk.c) + h.c) * h.hw(),
                            sk.p + static_cast<int64_t>(ni) * sk.c * sk.hw(),
                            sizeof(float) * static_cast<size_t>(sk.c * sk.hw()));
            }
            ws.release(h.p);
            ws.release(sk.p);
            h = resblock(ws, model_->up[static_cast<size_t>(li)], cat, emb);
            ws.release(cat.p);
            if (li > 0) {
                View up = acquire(ws, h.n, h.c, 2 * h.h, 2 * h.w);
                for (int64_t nc = 0; nc < static_cast<int64_t>(h.n) * h.c; ++nc) {
                    const float* src = h.p + nc * h.hw();
                    float* dst = up.p + nc * 4 * h.hw();
                    for (int i = 0; i < h.h; ++i)
                        for (int j = 0; j < h.w; ++j) {
                            const float v = src[static_cast<int64_t>(i) * h.w + j];
                            float* dd = dst + static_cast<int64_t>(2 * i) * 2 * h.w + 2 * j;
                            dd[0] = v;
                            dd[1] = v;
                            dd[2 * h.w] = v;
                            dd[2 * h.w + 1] = v;
                        }
                }
                ws.release(h.p);
                h = conv(ws, model_->up_samp[static_cast<size_t>(li - 1)], up);
                ws.release(up.p);
            }
        }

        View g = groupnorm(ws, model_->out_norm, h);
        ws.release(h.p);
        silu_inplace(g);
        View out = conv(ws, model_->head, g);
        ws.release(g.p);

        Tensor result({x.dim(0), cfg.in_channels, x.dim(2), x.dim(3)});
        std::memcpy(result.ptr(), out.p, sizeof(float) * static_cast<size_t>(result.numel()));
        ws.release(out.p);
        return result;
    }

    UnetModel* model_;
    PrecisionFormat fmt_;
    WorkerPool* pool_;
    std::map<int, ConvPack> conv_packs_;
    std::map<int, LinPack> lin_packs_;
    std::map<int64_t, std::unique_ptr<kernels::Workspace>> workspaces_;
};

// The spec-level forward: one call with an explicit precision format.
inline Tensor unet_forward(UnetModel& model, const Tensor& x, const std::vector<int>& tsteps,
                           PrecisionFormat fmt, WorkerPool& pool) {
    UnetEngine engine(model, fmt, pool);
    return engine.forward(x, tsteps);
}

}  // namespace qdiff
