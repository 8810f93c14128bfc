#pragma once

#include <cstring>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdiff/autodiff.hpp"
#include "qdiff/checkpoint.hpp"
#include "qdiff/kernels/attention.hpp"
#include "qdiff/kernels/buffer_plan.hpp"
#include "qdiff/kernels/groupnorm.hpp"
#include "qdiff/kernels/int8_gemm.hpp"
#include "qdiff/numerics.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff {

struct UnetConfig {
    int in_channels = 1;
    int base_channels = 16;
    std::vector<int> channel_mult = {1, 2};
    int groups = 4;
    bool attention = true;
    int temb_dim = 32;
    int attn_heads = 2;
    int image_size = 16;

    int levels() const { return static_cast<int>(channel_mult.size()); }
    int channels_at(int level) const { return base_channels * channel_mult[static_cast<size_t>(level)]; }
    int time_mlp_dim() const { return 2 * temb_dim; }

    void validate() const {
        if (in_channels < 1 || base_channels < 1 || channel_mult.empty()) {
            throw std::invalid_argument("unet config: channel settings must be positive");
        }
        if (temb_dim % 2 != 0) throw std::invalid_argument("unet config: temb_dim must be even");
        for (int li = 0; li < levels(); ++li) {
            if (channels_at(li) % groups != 0) {
                throw std::invalid_argument("unet config: level " + std::to_string(li) + " has " +
                                            std::to_string(channels_at(li)) + " channels, not divisible by " +
                                            std::to_string(groups) + " groups");
            }
        }
        const int bottleneck = channels_at(levels() - 1);
        if (attention && bottleneck % attn_heads != 0) {
            throw std::invalid_argument("unet config: bottleneck channels not divisible by attention heads");
        }
        const int down = 1 << (levels() - 1);
        if (image_size % down != 0) {
            throw std::invalid_argument("unet config: image size " + std::to_string(image_size) +
                                        " not divisible by downsampling factor " + std::to_string(down));
        }
    }
};

enum class Role { Teacher, Student };

inline std::string role_name(Role r) { return r == Role::Teacher ? "teacher" : "student"; }
inline Role role_from_name(const std::string& s) {
    if (s == "teacher") return Role::Teacher;
    if (s == "student") return Role::Student;
    throw std::invalid_argument("unknown model role '" + s + "'");
}

// How student quantizers behave during a tape forward.
enum class QuantMode {
    Off,      // quantizers bypassed entirely
    Observe,  // observers watch clean activations, no quantization applied (PTQ calibration)
    Qat,      // observers updated, fake quantization from live statistics
    Frozen,   // fake quantization from the frozen checkpoint scales
};

struct Param {
    std::string name;
    Tensor value;
};

// Per quantizable layer: assignment flag, activation observer and frozen scales.
struct LayerQuant {
    std::string layer;
    bool quantized = false;
    MinMaxObserver observer;
    bool frozen = false;
    float act_scale = 0.0f;
    std::vector<float> weight_scales;  // per output channel
};

namespace unet_detail {

struct ConvRef {
    int w = -1, b = -1;
    int stride = 1, pad = 0;
    int qslot = -1;
};
struct LinRef {
    int w = -1, b = -1;
    int qslot = -1;
};
struct NormRef {
    int gamma = -1, beta = -1;
};
struct ResBlockRef {
    NormRef n1;
    ConvRef c1;
    LinRef temb;
    NormRef n2;
    ConvRef c2;
    ConvRef skip;
    bool has_skip = false;
};
struct AttnRef {
    NormRef norm;
    ConvRef qkv;
    ConvRef proj;
};

}  // namespace unet_detail

// Toy denoising Unet: conv blocks with GroupNorm/SiLU, optional self-attention
// at the bottleneck, skip connections, sinusoidal timestep embedding.
struct UnetModel {
    UnetConfig cfg;
    Role role = Role::Teacher;
    std::vector<Param> params;
    std::vector<LayerQuant> quant;

    unet_detail::ConvRef stem;
    std::vector<unet_detail::ResBlockRef> down;
    std::vector<unet_detail::ConvRef> down_samp;
    unet_detail::ResBlockRef mid1, mid2;
    unet_detail::AttnRef attn;
    std::vector<unet_detail::ResBlockRef> up;  // index = level, applied in reverse
    std::vector<unet_detail::ConvRef> up_samp;
    unet_detail::NormRef out_norm;
    unet_detail::ConvRef head;
    unet_detail::LinRef tm1, tm2;

    int param_index(const std::string& name) const {
        for (size_t i = 0; i < params.size(); ++i)
            if (params[i].name == name) return static_cast<int>(i);
        throw std::invalid_argument("unet: no parameter named '" + name + "'");
    }

    LayerQuant& quant_slot(int idx) { return quant[static_cast<size_t>(idx)]; }
    const LayerQuant& quant_slot(int idx) const { return quant[static_cast<size_t>(idx)]; }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& p : params) n += p.value.numel();
        return n;
    }

    std::string parameter_hash() const {
        Sha256 h;
        for (const auto& p : params) {
            h.update(p.name.data(), p.name.size());
            h.update(p.value.ptr(), static_cast<size_t>(p.value.numel()) * 4);
        }
        Sha256 copy = h;
        return copy.hex_digest();
    }

    // Enables fake quantization on every conv/linear layer (the student
    // assignment); observers start fresh.
    void enable_quantization() {
        role = Role::Student;
        for (auto& q : quant) {
            q.quantized = true;
            q.observer = MinMaxObserver{};
            q.frozen = false;
        }
    }

    // Output-channel axis of a weight tensor: conv weights are [O,C,kh,kw],
    // linear weights are [D,E].
    static int weight_out_axis(const Tensor& w) { return w.ndim() == 2 ? 1 : 0; }

    // Derives final QuantParams: activation scales from the observers, weight
    // scales per output channel from the current weights.
    void freeze_quantization() {
        for (auto& q : quant) {
            if (!q.quantized) continue;
            if (!q.observer.seeded) {
                throw std::runtime_error("unet: layer '" + q.layer + "' has no observed activations; run calibration or QAT first");
            }
            q.act_scale = q.observer.params().scale();
            const Tensor& w = params[static_cast<size_t>(param_index(q.layer + ".w"))].value;
            q.weight_scales = calibrate(w, QuantGranularity::PerChannel, weight_out_axis(w)).scales;
            q.frozen = true;
        }
    }

    bool calibrated() const {
        for (const auto& q : quant)
            if (q.quantized && !q.frozen) return false;
        return !quant.empty() && quant[0].quantized;
    }

    static UnetModel init(const UnetConfig& cfg, uint64_t seed, Role role = Role::Teacher);
};

namespace unet_detail {

inline int add_param(UnetModel& m, const std::string& name, Tensor t) {
    m.params.push_back({name, std::move(t)});
    return static_cast<int>(m.params.size()) - 1;
}

inline Tensor randn_scaled(Rng& rng, std::vector<int> shape, float scale) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.gaussian() * scale;
    return t;
}

inline ConvRef make_conv(UnetModel& m, Rng& rng, const std::string& name, int cin, int cout, int k,
                         int stride, int pad, bool zero_init = false) {
    ConvRef c;
    const float scale = std::sqrt(2.0f / static_cast<float>(cin * k * k));
    c.w = add_param(m, name + ".w",
                    zero_init ? Tensor({cout, cin, k, k}) : randn_scaled(rng, {cout, cin, k, k}, scale));
    c.b = add_param(m, name + ".b", Tensor({cout}));
    c.stride = stride;
    c.pad = pad;
    m.quant.push_back(LayerQuant{name, false, MinMaxObserver{}, false, 0.0f, {}});
    c.qslot = static_cast<int>(m.quant.size()) - 1;
    return c;
}

inline LinRef make_linear(UnetModel& m, Rng& rng, const std::string& name, int din, int dout) {
    LinRef l;
    l.w = add_param(m, name + ".w", randn_scaled(rng, {din, dout}, std::sqrt(1.0f / static_cast<float>(din))));
    l.b = add_param(m, name + ".b", Tensor({dout}));
    m.quant.push_back(LayerQuant{name, false, MinMaxObserver{}, false, 0.0f, {}});
    l.qslot = static_cast<int>(m.quant.size()) - 1;
    return l;
}

inline NormRef make_norm(UnetModel& m, const std::string& name, int c) {
    NormRef n;
    n.gamma = add_param(m, name + ".g", Tensor::full({c}, 1.0f));
    n.beta = add_param(m, name + ".b", Tensor({c}));
    return n;
}

inline ResBlockRef make_resblock(UnetModel& m, Rng& rng, const std::string& name, int cin, int cout, int temb) {
    ResBlockRef r;
    r.n1 = make_norm(m, name + ".n1", cin);
    r.c1 = make_conv(m, rng, name + ".c1", cin, cout, 3, 1, 1);
    r.temb = make_linear(m, rng, name + ".temb", temb, cout);
    r.n2 = make_norm(m, name + ".n2", cout);
    r.c2 = make_conv(m, rng, name + ".c2", cout, cout, 3, 1, 1);
    if (cin != cout) {
        r.skip = make_conv(m, rng, name + ".skip", cin, cout, 1, 1, 0);
        r.has_skip = true;
    }
    return r;
}

}  // namespace unet_detail

inline UnetModel UnetModel::init(const UnetConfig& cfg, uint64_t seed, Role role) {
    cfg.validate();
    using namespace unet_detail;
    UnetModel m;
    m.cfg = cfg;
    m.role = role;
    Rng rng(seed);
    const int temb = cfg.time_mlp_dim();

    m.tm1 = make_linear(m, rng, "time.l1", cfg.temb_dim, temb);
    m.tm2 = make_linear(m, rng, "time.l2", temb, temb);
    m.stem = make_conv(m, rng, "stem", cfg.in_channels, cfg.channels_at(0), 3, 1, 1);

    for (int li = 0; li < cfg.levels(); ++li) {
        m.down.push_back(make_resblock(m, rng, "down" + std::to_string(li), cfg.channels_at(li), cfg.channels_at(li), temb));
        if (li + 1 < cfg.levels()) {
            m.down_samp.push_back(make_conv(m, rng, "downsamp" + std::to_string(li), cfg.channels_at(li),
                                            cfg.channels_at(li + 1), 3, 2, 1));
        }
    }
    const int cb = cfg.channels_at(cfg.levels() - 1);
    m.mid1 = make_resblock(m, rng, "mid1", cb, cb, temb);
    if (cfg.attention) {
        m.attn.norm = make_norm(m, "attn.norm", cb);
        m.attn.qkv = make_conv(m, rng, "attn.qkv", cb, 3 * cb, 1, 1, 0);
        m.attn.proj = make_conv(m, rng, "attn.proj", cb, cb, 1, 1, 0);
    }
    m.mid2 = make_resblock(m, rng, "mid2", cb, cb, temb);

    m.up.resize(static_cast<size_t>(cfg.levels()));
    m.up_samp.resize(static_cast<size_t>(cfg.levels() - 1));
    for (int li = cfg.levels() - 1; li >= 0; --li) {
        m.up[static_cast<size_t>(li)] =
            make_resblock(m, rng, "up" + std::to_string(li), 2 * cfg.channels_at(li), cfg.channels_at(li), temb);
        if (li > 0) {
            m.up_samp[static_cast<size_t>(li - 1)] = make_conv(m, rng, "upsamp" + std::to_string(li - 1),
                                                               cfg.channels_at(li), cfg.channels_at(li - 1), 3, 1, 1);
        }
    }
    m.out_norm = make_norm(m, "out.norm", cfg.channels_at(0));
    m.head = make_conv(m, rng, "head", cfg.channels_at(0), cfg.in_channels, 3, 1, 1, /*zero_init=*/true);
    return m;
}

// ---- tape forward (training path) -------------------------------------------

struct UnetTapeForward {
    int out = -1;
    std::vector<int> param_leaf;  // per model param; -1 when unused
};

namespace unet_detail {

struct TapeCtx {
    UnetModel* model;
    Tape* tape;
    QuantMode qm;
    bool train;
    std::vector<int> leaf;

    int p(int idx) {
        if (leaf[static_cast<size_t>(idx)] < 0) {
            leaf[static_cast<size_t>(idx)] = tape->leaf(model->params[static_cast<size_t>(idx)].value, train);
        }
        return leaf[static_cast<size_t>(idx)];
    }

    bool quant_assigned(int qslot) const {
        return qm != QuantMode::Off && qslot >= 0 && model->quant[static_cast<size_t>(qslot)].quantized;
    }

    QuantParams act_params(int qslot, int x) {
        LayerQuant& q = model->quant[static_cast<size_t>(qslot)];
        if (qm == QuantMode::Frozen) {
            if (!q.frozen) throw std::runtime_error("unet: layer '" + q.layer + "' requested frozen scales before calibration");
            return QuantParams::per_tensor(q.act_scale);
        }
        q.observer.observe(tape->value(x));
        return q.observer.params();
    }

    QuantParams weight_params(int qslot, int w) {
        LayerQuant& q = model->quant[static_cast<size_t>(qslot)];
        const Tensor& wv = tape->value(w);
        if (qm == QuantMode::Frozen) {
            if (!q.frozen) throw std::runtime_error("unet: layer '" + q.layer + "' requested frozen scales before calibration");
            return QuantParams::per_channel(UnetModel::weight_out_axis(wv), q.weight_scales);
        }
        return calibrate(wv, QuantGranularity::PerChannel, UnetModel::weight_out_axis(wv));
    }

    // Returns the (possibly fake-quantized) activation and weight node pair.
    std::pair<int, int> quantize_pair(int qslot, int x, int w) {
        if (!quant_assigned(qslot)) return {x, w};
        if (qm == QuantMode::Observe) {
            model->quant[static_cast<size_t>(qslot)].observer.observe(tape->value(x));
            return {x, w};
        }
        const QuantParams ap = act_params(qslot, x);
        const QuantParams wp = weight_params(qslot, w);
        return {ops::fake_quant(*tape, x, ap), ops::fake_quant(*tape, w, wp)};
    }

    int conv(const ConvRef& c, int x) {
        auto [xq, wq] = quantize_pair(c.qslot, x, p(c.w));
        return ops::conv2d(*tape, xq, wq, p(c.b), c.stride, c.pad);
    }

    int lin(const LinRef& l, int x) {
        auto [xq, wq] = quantize_pair(l.qslot, x, p(l.w));
        return ops::linear(*tape, xq, wq, p(l.b));
    }

    int norm(const NormRef& n, int x) {
        return ops::groupnorm(*tape, x, p(n.gamma), p(n.beta), model->cfg.groups);
    }

    int resblock(const ResBlockRef& r, int x, int emb_act) {
        int h = norm(r.n1, x);
        h = ops::silu(*tape, h);
        h = conv(r.c1, h);
        int shift = lin(r.temb, emb_act);
        h = ops::add_bias_hw(*tape, h, shift);
        h = norm(r.n2, h);
        h = ops::silu(*tape, h);
        h = conv(r.c2, h);
        int res = r.has_skip ? conv(r.skip, x) : x;
        return ops::add(*tape, h, res);
    }

    int attention(const AttnRef& a, int x) {
        const Tensor& xv = tape->value(x);
        const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        const int heads = model->cfg.attn_heads;
        int hn = norm(a.norm, x);
        int qkv = conv(a.qkv, hn);
        int q = ops::slice_channels(*tape, qkv, 0, c);
        int k = ops::slice_channels(*tape, qkv, c, 2 * c);
        int v = ops::slice_channels(*tape, qkv, 2 * c, 3 * c);
        q = ops::to_heads(*tape, q, heads);
        k = ops::to_heads(*tape, k, heads);
        v = ops::to_heads(*tape, v, heads);
        int scores = ops::bmm(*tape, q, k, /*trans_b=*/true);
        scores = ops::mul_scalar(*tape, scores, 1.0f / std::sqrt(static_cast<float>(c / heads)));
        int probs = ops::softmax(*tape, scores, -1);
        int o = ops::bmm(*tape, probs, v);
        o = ops::from_heads(*tape, o, n, h, w);
        o = conv(a.proj, o);
        return ops::add(*tape, o, x);
    }
};

}  // namespace unet_detail

// Forward over the tape. Used for training (teacher/student) and as the
// fake-quant simulation reference for the INT8 kernel path.
inline UnetTapeForward unet_forward_tape(UnetModel& model, Tape& tape, const Tensor& x,
                                         const std::vector<int>& tsteps, QuantMode qm, bool train_params) {
    model.cfg.validate();
    if (x.ndim() != 4 || x.dim(1) != model.cfg.in_channels) {
        throw std::invalid_argument("unet: input must be [N," + std::to_string(model.cfg.in_channels) +
                                    ",H,W], got " + Tensor::shape_str(x.shape));
    }
    if (static_cast<size_t>(x.dim(0)) != tsteps.size()) {
        throw std::invalid_argument("unet: batch size " + std::to_string(x.dim(0)) + " but " +
                                    std::to_string(tsteps.size()) + " timesteps");
    }
    const int down_factor = 1 << (model.cfg.levels() - 1);
    if (x.dim(2) % down_factor != 0 || x.dim(3) % down_factor != 0) {
        throw std::invalid_argument("unet: spatial dims must be divisible by " + std::to_string(down_factor));
    }

    unet_detail::TapeCtx ctx{&model, &tape, qm, train_params, std::vector<int>(model.params.size(), -1)};

    int emb = tape.leaf(timestep_embedding(tsteps, model.cfg.temb_dim));
    emb = ctx.lin(model.tm1, emb);
    emb = ops::silu(tape, emb);
    emb = ctx.lin(model.tm2, emb);
    int emb_act = ops::silu(tape, emb);

    int h = ctx.conv(model.stem, tape.leaf(x));
    std::vector<int> skips;
    for (int li = 0; li < model.cfg.levels(); ++li) {
        h = ctx.resblock(model.down[static_cast<size_t>(li)], h, emb_act);
        skips.push_back(h);
        if (li + 1 < model.cfg.levels()) h = ctx.conv(model.down_samp[static_cast<size_t>(li)], h);
    }
    h = ctx.resblock(model.mid1, h, emb_act);
    if (model.cfg.attention) h = ctx.attention(model.attn, h);
    h = ctx.resblock(model.mid2, h, emb_act);
    for (int li = model.cfg.levels() - 1; li >= 0; --li) {
        h = ops::concat_channels(tape, h, skips[static_cast<size_t>(li)]);
        h = ctx.resblock(model.up[static_cast<size_t>(li)], h, emb_act);
        if (li > 0) {
            h = ops::upsample_nearest2(tape, h);
            h = ctx.conv(model.up_samp[static_cast<size_t>(li - 1)], h);
        }
    }
    h = ctx.norm(model.out_norm, h);
    h = ops::silu(tape, h);
    h = ctx.conv(model.head, h);

    return UnetTapeForward{h, std::move(ctx.leaf)};
}

}  // namespace qdiff
