#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdiff/gemm.hpp"
#include "qdiff/numerics.hpp"
#include "qdiff/tensor.hpp"
#include "qdiff/threadpool.hpp"
#include "qdiff/kernels/groupnorm.hpp"

namespace qdiff {

// Reverse-mode tape over the fixed op set the Unet needs. Nodes hold values;
// gradients are allocated lazily and accumulated in execution-reverse order,
// so two backward passes over identical inputs are bit-identical.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    WorkerPool* pool = nullptr;  // optional kernel-internal parallelism

    int leaf(Tensor value, bool requires_grad = false) {
        return emit(std::move(value), requires_grad, nullptr);
    }

    int emit(Tensor value, bool requires_grad, std::function<void(Tape&)> backward) {
        nodes_.push_back(Node{std::move(value), Tensor{}, std::move(backward), requires_grad, false});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int size() const { return static_cast<int>(nodes_.size()); }

    const Tensor& value(int id) const { return node(id).value; }
    bool requires_grad(int id) const { return node(id).requires_grad; }
    bool has_grad(int id) const { return node(id).grad_allocated; }

    const Tensor& grad(int id) const {
        const Node& n = node(id);
        if (!n.grad_allocated) throw std::logic_error("tape: gradient of node " + std::to_string(id) + " was never produced");
        return n.grad;
    }

    Tensor& grad_buffer(int id) {
        Node& n = node(id);
        if (!n.grad_allocated) {
            n.grad = Tensor(n.value.shape);
            n.grad_allocated = true;
        }
        return n.grad;
    }

    void accumulate(int id, const float* g, int64_t count) {
        Tensor& buf = grad_buffer(id);
        if (buf.numel() != count) throw std::logic_error("tape: gradient size mismatch on accumulate");
        float* p = buf.ptr();
        for (int64_t i = 0; i < count; ++i) p[i] += g[i];
    }

    // Seeds d(loss)/d(loss) = 1 and walks the tape in exact reverse execution
    // order. `loss` must be a scalar node of this tape.
    void backward(int loss) {
        if (loss < 0 || loss >= size()) {
            throw std::invalid_argument("tape: loss node " + std::to_string(loss) + " is not on this tape");
        }
        Node& ln = nodes_[static_cast<size_t>(loss)];
        if (ln.value.numel() != 1) {
            throw std::invalid_argument("tape: loss must be scalar, got shape " + Tensor::shape_str(ln.value.shape));
        }
        grad_buffer(loss).data[0] = 1.0f;
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.backward && n.grad_allocated && n.requires_grad) n.backward(*this);
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&)> backward;
        bool requires_grad = false;
        bool grad_allocated = false;
    };

    const Node& node(int id) const {
        if (id < 0 || id >= size()) throw std::invalid_argument("tape: node id " + std::to_string(id) + " out of range");
        return nodes_[static_cast<size_t>(id)];
    }
    Node& node(int id) {
        if (id < 0 || id >= size()) throw std::invalid_argument("tape: node id " + std::to_string(id) + " out of range");
        return nodes_[static_cast<size_t>(id)];
    }

    std::vector<Node> nodes_;
};

namespace ops {

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// ---- conv plumbing ----------------------------------------------------------

struct Conv2dDims {
    int n, c, h, w;   // input
    int oc, kh, kw;   // weight
    int stride, pad;
    int oh, ow;
    int64_t rows() const { return static_cast<int64_t>(n) * oh * ow; }
    int64_t cols() const { return static_cast<int64_t>(c) * kh * kw; }
};

inline Conv2dDims conv2d_dims(const std::vector<int>& xs, const std::vector<int>& ws, int stride, int pad) {
    if (xs.size() != 4) throw std::invalid_argument("conv2d: input must be [N,C,H,W], got " + Tensor::shape_str(xs));
    if (ws.size() != 4) throw std::invalid_argument("conv2d: weight must be [O,C,kh,kw], got " + Tensor::shape_str(ws));
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
    Conv2dDims d{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad, 0, 0};
    if (ws[1] != d.c) {
        throw std::invalid_argument("conv2d: input channels " + std::to_string(d.c) +
                                    " do not match weight channels " + std::to_string(ws[1]));
    }
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.oh < 1 || d.ow < 1) {
        throw std::invalid_argument("conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
                                    " does not fit input " + std::to_string(d.h) + "x" + std::to_string(d.w) +
                                    " with padding " + std::to_string(pad));
    }
    return d;
}

// col is [rows, cols] with rows = (n, oh, ow) and cols = (c, kh, kw).
inline void im2col(const float* x, const Conv2dDims& d, float* col, WorkerPool* pool) {
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
                        *dst++ = (jj < 0 || jj >= d.w) ? 0.0f : row[jj];
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

inline void col2im(const float* col, const Conv2dDims& d, float* x) {
    const int64_t hw = static_cast<int64_t>(d.h) * d.w;
    const int64_t chw = d.c * hw;
    std::fill(x, x + static_cast<int64_t>(d.n) * chw, 0.0f);
    for (int64_t r = 0; r < d.rows(); ++r) {
        const int64_t ni = r / (static_cast<int64_t>(d.oh) * d.ow);
        const int64_t rest = r % (static_cast<int64_t>(d.oh) * d.ow);
        const int oi = static_cast<int>(rest / d.ow);
        const int oj = static_cast<int>(rest % d.ow);
        const float* src = col + r * d.cols();
        float* xs = x + ni * chw;
        for (int c = 0; c < d.c; ++c) {
            for (int ki = 0; ki < d.kh; ++ki) {
                const int ii = oi * d.stride - d.pad + ki;
                if (ii < 0 || ii >= d.h) {
                    src += d.kw;
                    continue;
                }
                float* row = xs + c * hw + static_cast<int64_t>(ii) * d.w;
                for (int kj = 0; kj < d.kw; ++kj) {
                    const int jj = oj * d.stride - d.pad + kj;
                    if (jj >= 0 && jj < d.w) row[jj] += *src;
                    ++src;
                }
            }
        }
    }
}

// [rows, oc] -> [n, oc, oh*ow] (+ optional bias), and back.
inline void rows_to_nchw(const float* rows, const Conv2dDims& d, const float* bias, float* out) {
    const int64_t ohw = static_cast<int64_t>(d.oh) * d.ow;
    for (int64_t ni = 0; ni < d.n; ++ni) {
        for (int64_t p = 0; p < ohw; ++p) {
            const float* src = rows + (ni * ohw + p) * d.oc;
            float* dst = out + ni * d.oc * ohw + p;
            for (int o = 0; o < d.oc; ++o) dst[o * ohw] = src[o] + (bias ? bias[o] : 0.0f);
        }
    }
}

inline void nchw_to_rows(const float* x, const Conv2dDims& d, float* rows) {
    const int64_t ohw = static_cast<int64_t>(d.oh) * d.ow;
    for (int64_t ni = 0; ni < d.n; ++ni) {
        for (int64_t p = 0; p < ohw; ++p) {
            float* dst = rows + (ni * ohw + p) * d.oc;
            const float* src = x + ni * d.oc * ohw + p;
            for (int o = 0; o < d.oc; ++o) dst[o] = src[o * ohw];
        }
    }
}

// ---- ops --------------------------------------------------------------------

// Cross-correlation with bias, differentiable in input, weight and bias.
inline int conv2d(Tape& t, int x, int w, int b, int stride = 1, int pad = 0) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    const Tensor& bv = t.value(b);
    const Conv2dDims d = conv2d_dims(xv.shape, wv.shape, stride, pad);
    if (bv.ndim() != 1 || bv.dim(0) != d.oc) {
        throw std::invalid_argument("conv2d: bias shape " + Tensor::shape_str(bv.shape) + " does not match " +
                                    std::to_string(d.oc) + " output channels");
    }

    auto col = std::make_shared<std::vector<float>>(static_cast<size_t>(d.rows() * d.cols()));
    im2col(xv.ptr(), d, col->data(), t.pool);

    std::vector<float> wt(static_cast<size_t>(d.cols()) * d.oc);  // [K,O]
    for (int o = 0; o < d.oc; ++o)
        for (int64_t k = 0; k < d.cols(); ++k)
            wt[static_cast<size_t>(k) * d.oc + o] = wv.ptr()[o * d.cols() + k];
    PackedBf32 packed = pack_b_f32(wt.data(), static_cast<int>(d.cols()), d.oc);

    std::vector<float> rows(static_cast<size_t>(d.rows()) * d.oc);
    gemm_f32(col->data(), packed, rows.data(), static_cast<int>(d.rows()), t.pool);

    Tensor out({d.n, d.oc, d.oh, d.ow});
    rows_to_nchw(rows.data(), d, bv.ptr(), out.ptr());

    const bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, w, b, d, col](Tape& tp) {
        const Tensor& g = tp.grad(id);
        std::vector<float> grows(static_cast<size_t>(d.rows()) * d.oc);
        nchw_to_rows(g.ptr(), d, grows.data());
        if (tp.requires_grad(b)) {
            std::vector<float> db(static_cast<size_t>(d.oc), 0.0f);
            for (int64_t r = 0; r < d.rows(); ++r)
                for (int o = 0; o < d.oc; ++o) db[static_cast<size_t>(o)] += grows[static_cast<size_t>(r * d.oc + o)];
            tp.accumulate(b, db.data(), d.oc);
        }
        if (tp.requires_grad(w)) {
            // dW[O,K] = grows^T [O,rows] * col [rows,K]
            std::vector<float> dw(static_cast<size_t>(d.oc) * d.cols());
            gemm_tn_f32(grows.data(), col->data(), dw.data(), static_cast<int>(d.rows()),
                        d.oc, static_cast<int>(d.cols()));
            tp.accumulate(w, dw.data(), static_cast<int64_t>(dw.size()));
        }
        if (tp.requires_grad(x)) {
            // dCol [rows,K] = grows [rows,O] * w [O,K], scattered back by col2im
            const Tensor& wv2 = tp.value(w);
            std::vector<float> dcol(static_cast<size_t>(d.rows() * d.cols()));
            gemm_f32(grows.data(), wv2.ptr(), dcol.data(), static_cast<int>(d.rows()), d.oc,
                     static_cast<int>(d.cols()), tp.pool);
            std::vector<float> dx(static_cast<size_t>(d.n) * d.c * d.h * d.w);
            col2im(dcol.data(), d, dx.data());
            tp.accumulate(x, dx.data(), static_cast<int64_t>(dx.size()));
        }
    });
}

// y[N,E] = x[N,D] * w[D,E] + b[E]
inline int linear(Tape& t, int x, int w, int b) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    const Tensor& bv = t.value(b);
    if (xv.ndim() != 2 || wv.ndim() != 2) {
        throw std::invalid_argument("linear: expected 2-d input and weight, got " + Tensor::shape_str(xv.shape) +
                                    " and " + Tensor::shape_str(wv.shape));
    }
    const int n = xv.dim(0), dd = xv.dim(1), e = wv.dim(1);
    if (wv.dim(0) != dd) {
        throw std::invalid_argument("linear: inner dimensions differ, input " + std::to_string(dd) +
                                    " vs weight " + std::to_string(wv.dim(0)));
    }
    if (bv.ndim() != 1 || bv.dim(0) != e) {
        throw std::invalid_argument("linear: bias shape " + Tensor::shape_str(bv.shape) + " does not match " +
                                    std::to_string(e) + " outputs");
    }
    Tensor out({n, e});
    gemm_f32(xv.ptr(), wv.ptr(), out.ptr(), n, dd, e, t.pool);
    for (int i = 0; i < n; ++i) {
        float* r = out.ptr() + static_cast<int64_t>(i) * e;
        for (int j = 0; j < e; ++j) r[j] += bv.ptr()[j];
    }
    const bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, w, b, n, dd, e](Tape& tp) {
        const Tensor& g = tp.grad(id);
        if (tp.requires_grad(b)) {
            std::vector<float> db(static_cast<size_t>(e), 0.0f);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < e; ++j) db[static_cast<size_t>(j)] += g.ptr()[static_cast<int64_t>(i) * e + j];
            tp.accumulate(b, db.data(), e);
        }
        if (tp.requires_grad(w)) {
            std::vector<float> dw(static_cast<size_t>(dd) * e);
            gemm_tn_f32(tp.value(x).ptr(), g.ptr(), dw.data(), n, dd, e);
            tp.accumulate(w, dw.data(), static_cast<int64_t>(dw.size()));
        }
        if (tp.requires_grad(x)) {
            std::vector<float> dx(static_cast<size_t>(n) * dd);
            gemm_nt_f32(g.ptr(), tp.value(w).ptr(), dx.data(), n, e, dd);
            tp.accumulate(x, dx.data(), static_cast<int64_t>(dx.size()));
        }
    });
}

inline int groupnorm(Tape& t, int x, int gamma, int beta, int groups, float eps = 1e-5f) {
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gamma);
    const Tensor& bv = t.value(beta);
    kernels::GroupNormSpec spec;
    spec.channels = xv.ndim() == 4 ? xv.dim(1) : 0;
    spec.groups = groups;
    spec.eps = eps;
    spec.gamma = gv.ptr();
    spec.beta = bv.ptr();
    if (gv.numel() != spec.channels || bv.numel() != spec.channels) {
        throw std::invalid_argument("groupnorm: affine parameters must have one entry per channel");
    }
    WorkerPool fallback(1);
    auto stats = std::make_shared<kernels::GroupStats>();
    Tensor out = kernels::groupnorm_channel_parallel(xv, spec, t.pool ? *t.pool : fallback, stats.get());

    const bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, gamma, beta, groups, stats](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& xv2 = tp.value(x);
        const Tensor& gamma_v = tp.value(gamma);
        const int n = xv2.dim(0), c = xv2.dim(1);
        const int64_t hw = static_cast<int64_t>(xv2.dim(2)) * xv2.dim(3);
        const int dpg = c / groups;
        const int64_t m = dpg * hw;

        std::vector<float> dgamma(static_cast<size_t>(c), 0.0f), dbeta(static_cast<size_t>(c), 0.0f);
        std::vector<float> dx(static_cast<size_t>(xv2.numel()), 0.0f);
        for (int ni = 0; ni < n; ++ni) {
            for (int gi = 0; gi < groups; ++gi) {
                const float mean = stats->mean[static_cast<size_t>(ni) * groups + gi];
                const float rstd = stats->rstd[static_cast<size_t>(ni) * groups + gi];
                // First pass: per-group sums of gamma*dy and gamma*dy*xhat.
                double sum_u = 0.0, sum_ux = 0.0;
                for (int ci = 0; ci < dpg; ++ci) {
                    const int cc = gi * dpg + ci;
                    const float* xp = xv2.ptr() + (static_cast<int64_t>(ni) * c + cc) * hw;
                    const float* gp = g.ptr() + (static_cast<int64_t>(ni) * c + cc) * hw;
                    const float ga = gamma_v.ptr()[cc];
                    double su = 0.0, sux = 0.0, sdy = 0.0, sdyx = 0.0;
                    for (int64_t i = 0; i < hw; ++i) {
                        const float xhat = (xp[i] - mean) * rstd;
                        const float dy = gp[i];
                        su += static_cast<double>(ga) * dy;
                        sux += static_cast<double>(ga) * dy * xhat;
                        sdy += dy;
                        sdyx += static_cast<double>(dy) * xhat;
                    }
                    sum_u += su;
                    sum_ux += sux;
                    dbeta[static_cast<size_t>(cc)] += static_cast<float>(sdy);
                    dgamma[static_cast<size_t>(cc)] += static_cast<float>(sdyx);
                }
                const float mean_u = static_cast<float>(sum_u / static_cast<double>(m));
                const float mean_ux = static_cast<float>(sum_ux / static_cast<double>(m));
                for (int ci = 0; ci < dpg; ++ci) {
                    const int cc = gi * dpg + ci;
                    const float* xp = xv2.ptr() + (static_cast<int64_t>(ni) * c + cc) * hw;
                    const float* gp = g.ptr() + (static_cast<int64_t>(ni) * c + cc) * hw;
                    float* dp = dx.data() + (static_cast<int64_t>(ni) * c + cc) * hw;
                    const float ga = gamma_v.ptr()[cc];
                    for (int64_t i = 0; i < hw; ++i) {
                        const float xhat = (xp[i] - mean) * rstd;
                        dp[i] = rstd * (ga * gp[i] - mean_u - xhat * mean_ux);
                    }
                }
            }
        }
        if (tp.requires_grad(x)) tp.accumulate(x, dx.data(), static_cast<int64_t>(dx.size()));
        if (tp.requires_grad(gamma)) tp.accumulate(gamma, dgamma.data(), c);
        if (tp.requires_grad(beta)) tp.accumulate(beta, dbeta.data(), c);
    });
}

inline int silu(Tape& t, int x) {
    const Tensor& xv = t.value(x);
    Tensor out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) {
        const float v = xv.ptr()[i];
        out.ptr()[i] = v * sigmoidf(v);
    }
    const bool rg = t.requires_grad(x);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& xv2 = tp.value(x);
        std::vector<float> dx(static_cast<size_t>(xv2.numel()));
        for (int64_t i = 0; i < xv2.numel(); ++i) {
            const float v = xv2.ptr()[i];
            const float s = sigmoidf(v);
            dx[static_cast<size_t>(i)] = g.ptr()[i] * s * (1.0f + v * (1.0f - s));
        }
        tp.accumulate(x, dx.data(), xv2.numel());
    });
}

// Softmax along `axis` (negative counts from the back).
inline int softmax(Tape& t, int x, int axis = -1) {
    const Tensor& xv = t.value(x);
    const int nd = xv.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw std::invalid_argument("softmax: axis out of range");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
    for (int i = axis + 1; i < nd; ++i) inner *= xv.dim(i);
    const int64_t len = xv.dim(axis);

    Tensor out(xv.shape);
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const float* xp = xv.ptr() + o * len * inner + in;
            float* yp = out.ptr() + o * len * inner + in;
            float mx = xp[0];
            for (int64_t k = 1; k < len; ++k) mx = std::max(mx, xp[k * inner]);
            float denom = 0.0f;
            for (int64_t k = 0; k < len; ++k) {
                const float e = std::exp(xp[k * inner] - mx);
                yp[k * inner] = e;
                denom += e;
            }
            const float inv = 1.0f / denom;
            for (int64_t k = 0; k < len; ++k) yp[k * inner] *= inv;
        }
    }
    const bool rg = t.requires_grad(x);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, outer, inner, len](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& yv = tp.value(id);
        std::vector<float> dx(static_cast<size_t>(yv.numel()));
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const float* yp = yv.ptr() + o * len * inner + in;
                const float* gp = g.ptr() + o * len * inner + in;
                float dot = 0.0f;
                for (int64_t k = 0; k < len; ++k) dot += yp[k * inner] * gp[k * inner];
                float* dp = dx.data() + o * len * inner + in;
                for (int64_t k = 0; k < len; ++k) dp[k * inner] = yp[k * inner] * (gp[k * inner] - dot);
            }
        }
        tp.accumulate(x, dx.data(), yv.numel());
    });
}

inline int add(Tape& t, int a, int b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, "add");
    Tensor out(av.shape);
    for (int64_t i = 0; i < av.numel(); ++i) out.ptr()[i] = av.ptr()[i] + bv.ptr()[i];
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, a, b](Tape& tp) {
        const Tensor& g = tp.grad(id);
        if (tp.requires_grad(a)) tp.accumulate(a, g.ptr(), g.numel());
        if (tp.requires_grad(b)) tp.accumulate(b, g.ptr(), g.numel());
    });
}

inline int mul_scalar(Tape& t, int x, float s) {
    const Tensor& xv = t.value(x);
    Tensor out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out.ptr()[i] = xv.ptr()[i] * s;
    const bool rg = t.requires_grad(x);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, s](Tape& tp) {
        const Tensor& g = tp.grad(id);
        std::vector<float> dx(static_cast<size_t>(g.numel()));
        for (int64_t i = 0; i < g.numel(); ++i) dx[static_cast<size_t>(i)] = g.ptr()[i] * s;
        tp.accumulate(x, dx.data(), g.numel());
    });
}

// Mean squared error; the reduction runs in double so the scalar is stable
// enough for finite-difference checks.
inline int mse_loss(Tape& t, int a, int b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, "mse_loss");
    double acc = 0.0;
    for (int64_t i = 0; i < av.numel(); ++i) {
        const double dd = static_cast<double>(av.ptr()[i]) - static_cast<double>(bv.ptr()[i]);
        acc += dd * dd;
    }
    Tensor out({1}, {static_cast<float>(acc / static_cast<double>(av.numel()))});
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, a, b](Tape& tp) {
        const float gs = tp.grad(id).ptr()[0];
        const Tensor& av2 = tp.value(a);
        const Tensor& bv2 = tp.value(b);
        const float k = 2.0f / static_cast<float>(av2.numel());
        std::vector<float> d(static_cast<size_t>(av2.numel()));
        for (int64_t i = 0; i < av2.numel(); ++i) d[static_cast<size_t>(i)] = gs * k * (av2.ptr()[i] - bv2.ptr()[i]);
        if (tp.requires_grad(a)) tp.accumulate(a, d.data(), av2.numel());
        if (tp.requires_grad(b)) {
            for (auto& v : d) v = -v;
            tp.accumulate(b, d.data(), av2.numel());
        }
    });
}

// Scalar projection sum(x * w); gives tests and probes full control of the
// upstream gradient (d/dx = w).
inline int weighted_sum(Tape& t, int x, Tensor w) {
    const Tensor& xv = t.value(x);
    require_same_shape(xv, w, "weighted_sum");
    double acc = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i) acc += static_cast<double>(xv.ptr()[i]) * static_cast<double>(w.ptr()[i]);
    const bool rg = t.requires_grad(x);
    const int id = t.size();
    auto wp = std::make_shared<Tensor>(std::move(w));
    Tensor out({1}, {static_cast<float>(acc)});
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, wp](Tape& tp) {
        const float gs = tp.grad(id).ptr()[0];
        std::vector<float> d(static_cast<size_t>(wp->numel()));
        for (int64_t i = 0; i < wp->numel(); ++i) d[static_cast<size_t>(i)] = gs * wp->ptr()[i];
        tp.accumulate(x, d.data(), wp->numel());
    });
}

inline int sum(Tape& t, int x) {
    const Tensor& xv = t.value(x);
    double acc = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i) acc += static_cast<double>(xv.ptr()[i]);
    const bool rg = t.requires_grad(x);
    const int id = t.size();
    Tensor out({1}, {static_cast<float>(acc)});
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x](Tape& tp) {
        const float gs = tp.grad(id).ptr()[0];
        const Tensor& xv2 = tp.value(x);
        std::vector<float> d(static_cast<size_t>(xv2.numel()), gs);
        tp.accumulate(x, d.data(), xv2.numel());
    });
}

// Concatenate along the channel axis of NCHW tensors.
inline int concat_channels(Tape& t, int a, int b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.ndim() != 4 || bv.ndim() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
        av.dim(3) != bv.dim(3)) {
        throw std::invalid_argument("concat: incompatible shapes " + Tensor::shape_str(av.shape) + " and " +
                                    Tensor::shape_str(bv.shape));
    }
    const int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
    const int64_t hw = static_cast<int64_t>(av.dim(2)) * av.dim(3);
    Tensor out({n, ca + cb, av.dim(2), av.dim(3)});
    for (int ni = 0; ni < n; ++ni) {
        std::memcpy(out.ptr() + static_cast<int64_t>(ni) * (ca + cb) * hw,
                    av.ptr() + static_cast<int64_t>(ni) * ca * hw, sizeof(float) * static_cast<size_t>(ca * hw));
        std::memcpy(out.ptr() + (static_cast<int64_t>(ni) * (ca + cb) + ca) * hw,
                    bv.ptr() + static_cast<int64_t>(ni) * cb * hw, sizeof(float) * static_cast<size_t>(cb * hw));
    }
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, a, b, n, ca, cb, hw](Tape& tp) {
        const Tensor& g = tp.grad(id);
        if (tp.requires_grad(a)) {
            std::vector<float> da(static_cast<size_t>(n) * ca * hw);
            for (int ni = 0; ni < n; ++ni)
                std::memcpy(da.data() + static_cast<int64_t>(ni) * ca * hw,
                            g.ptr() + static_cast<int64_t>(ni) * (ca + cb) * hw,
                            sizeof(float) * static_cast<size_t>(ca * hw));
            tp.accumulate(a, da.data(), static_cast<int64_t>(da.size()));
        }
        if (tp.requires_grad(b)) {
            std::vector<float> db(static_cast<size_t>(n) * cb * hw);
            for (int ni = 0; ni < n; ++ni)
                std::memcpy(db.data() + static_cast<int64_t>(ni) * cb * hw,
                            g.ptr() + (static_cast<int64_t>(ni) * (ca + cb) + ca) * hw,
                            sizeof(float) * static_cast<size_t>(cb * hw));
            tp.accumulate(b, db.data(), static_cast<int64_t>(db.size()));
        }
    });
}

// Batched matmul: a[B,M,K] * b[B,K,N], or a[B,M,K] * b[B,N,K]^T when trans_b.
inline int bmm(Tape& t, int a, int b, bool trans_b = false) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0)) {
        throw std::invalid_argument("bmm: expected matching 3-d operands, got " + Tensor::shape_str(av.shape) +
                                    " and " + Tensor::shape_str(bv.shape));
    }
    const int bs = av.dim(0), m = av.dim(1), k = av.dim(2);
    const int n = trans_b ? bv.dim(1) : bv.dim(2);
    const int kb = trans_b ? bv.dim(2) : bv.dim(1);
    if (k != kb) {
        throw std::invalid_argument("bmm: inner dimensions differ, " + std::to_string(k) + " vs " + std::to_string(kb));
    }
    Tensor out({bs, m, n});
    for (int bi = 0; bi < bs; ++bi) {
        const float* ap = av.ptr() + static_cast<int64_t>(bi) * m * k;
        const float* bp = bv.ptr() + static_cast<int64_t>(bi) * k * n;
        float* cp = out.ptr() + static_cast<int64_t>(bi) * m * n;
        if (trans_b) {
            gemm_nt_f32(ap, bp, cp, m, k, n);
        } else {
            gemm_f32(ap, bp, cp, m, k, n, nullptr);
        }
    }
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, a, b, bs, m, k, n, trans_b](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& av2 = tp.value(a);
        const Tensor& bv2 = tp.value(b);
        if (tp.requires_grad(a)) {
            std::vector<float> da(static_cast<size_t>(bs) * m * k);
            for (int bi = 0; bi < bs; ++bi) {
                const float* gp = g.ptr() + static_cast<int64_t>(bi) * m * n;
                const float* bp = bv2.ptr() + static_cast<int64_t>(bi) * k * n;
                float* dp = da.data() + static_cast<int64_t>(bi) * m * k;
                if (trans_b) {
                    gemm_f32(gp, bp, dp, m, n, k, nullptr);  // dA = g * b
                } else {
                    gemm_nt_f32(gp, bp, dp, m, n, k);  // dA = g * b^T
                }
            }
            tp.accumulate(a, da.data(), static_cast<int64_t>(da.size()));
        }
        if (tp.requires_grad(b)) {
            std::vector<float> db(static_cast<size_t>(bs) * k * n);
            for (int bi = 0; bi < bs; ++bi) {
                const float* gp = g.ptr() + static_cast<int64_t>(bi) * m * n;
                const float* ap = av2.ptr() + static_cast<int64_t>(bi) * m * k;
                float* dp = db.data() + static_cast<int64_t>(bi) * k * n;
                if (trans_b) {
                    gemm_tn_f32(gp, ap, dp, m, n, k);  // dB[N,K] = g^T * a
                } else {
                    gemm_tn_f32(ap, gp, dp, m, k, n);  // dB[K,N] = a^T * g
                }
            }
            tp.accumulate(b, db.data(), static_cast<int64_t>(db.size()));
        }
    });
}

// [N,C,H,W] -> [N*heads, H*W, C/heads]
inline int to_heads(Tape& t, int x, int heads) {
    const Tensor& xv = t.value(x);
    if (xv.ndim() != 4) throw std::invalid_argument("to_heads: expected NCHW input");
    const int n = xv.dim(0), c = xv.dim(1);
    const int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    if (c % heads != 0) {
        throw std::invalid_argument("to_heads: channels " + std::to_string(c) + " not divisible by heads " +
                                    std::to_string(heads));
    }
    const int dh = c / heads;
    Tensor out({n * heads, static_cast<int>(hw), dh});
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const int hd = ci / dh, dc = ci % dh;
            const float* src = xv.ptr() + (static_cast<int64_t>(ni) * c + ci) * hw;
            float* dst = out.ptr() + ((static_cast<int64_t>(ni) * heads + hd) * hw) * dh + dc;
            for (int64_t p = 0; p < hw; ++p) dst[p * dh] = src[p];
        }
    const bool rg = t.requires_grad(x);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, n, c, hw, dh, heads](Tape& tp) {
        const Tensor& g = tp.grad(id);
        std::vector<float> dx(static_cast<size_t>(n) * c * hw);
        for (int ni = 0; ni < n; ++ni)
            for (int ci = 0; ci < c; ++ci) {
                const int hd = ci / dh, dc = ci % dh;
                float* dst = dx.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
                const float* src = g.ptr() + ((static_cast<int64_t>(ni) * heads + hd) * hw) * dh + dc;
                for (int64_t p = 0; p < hw; ++p) dst[p] = src[p * dh];
            }
        tp.accumulate(x, dx.data(), static_cast<int64_t>(dx.size()));
    });
}

// [N*heads, H*W, C/heads] -> [N,C,H,W]
inline int from_heads(Tape& t, int x, int n, int h, int w) {
    const Tensor& xv = t.value(x);
    if (xv.ndim() != 3 || xv.dim(0) % n != 0) throw std::invalid_argument("from_heads: bad input shape");
    const int heads = xv.dim(0) / n;
    const int dh = xv.dim(2);
    const int c = heads * dh;
    const int64_t hw = static_cast<int64_t>(h) * w;
    if (xv.dim(1) != hw) throw std::invalid_argument("from_heads: spatial size mismatch");
    Tensor out({n, c, h, w});
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const int hd = ci / dh, dc = ci % dh;
            float* dst = out.ptr() + (static_cast<int64_t>(ni) * c + ci) * hw;
            const float* src = xv.ptr() + ((static_cast<int64_t>(ni) * heads + hd) * hw) * dh + dc;
            for (int64_t p = 0; p < hw; ++p) dst[p] = src[p * dh];
        }
    const bool rg = t.requires_grad(x);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, n, c, hw, dh, heads](Tape& tp) {
        const Tensor& g = tp.grad(id);
        std::vector<float> dx(static_cast<size_t>(n) * heads * hw * dh);
        for (int ni = 0; ni < n; ++ni)
            for (int ci = 0; ci < c; ++ci) {
                const int hd = ci / dh, dc = ci % dh;
                const float* src = g.ptr() + (static_cast<int64_t>(ni) * c + ci) * hw;
                float* dst = dx.data() + ((static_cast<int64_t>(ni) * heads + hd) * hw) * dh + dc;
                for (int64_t p = 0; p < hw; ++p) dst[p * dh] = src[p];
            }
        tp.accumulate(x, dx.data(), static_cast<int64_t>(dx.size()));
    });
}

// Slice channels [c0, c1) of an NCHW tensor.
inline int slice_channels(Tape& t, int x, int c0, int c1) {
    const Tensor& xv = t.value(x);
    if (xv.ndim() != 4 || c0 < 0 || c1 > xv.dim(1) || c0 >= c1) {
        throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                    ") for shape " + Tensor::shape_str(xv.shape));
    }
    const int n = xv.dim(0), c = xv.dim(1), cs = c1 - c0;
    const int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    Tensor out({n, cs, xv.dim(2), xv.dim(3)});
    for (int ni = 0; ni < n; ++ni)
        std::memcpy(out.ptr() + static_cast<int64_t>(ni) * cs * hw,
                    xv.ptr() + (static_cast<int64_t>(ni) * c + c0) * hw, sizeof(float) * static_cast<size_t>(cs * hw));
    const bool rg = t.requires_grad(x);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, n, c, c0, cs, hw](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor& gx = tp.grad_buffer(x);
        for (int ni = 0; ni < n; ++ni) {
            const float* src = g.ptr() + static_cast<int64_t>(ni) * cs * hw;
            float* dst = gx.ptr() + (static_cast<int64_t>(ni) * c + c0) * hw;
            for (int64_t i = 0; i < cs * hw; ++i) dst[i] += src[i];
        }
    });
}

// x[N,C,H,W] + s[N,C] broadcast over the spatial dims.
inline int add_bias_hw(Tape& t, int x, int s) {
    const Tensor& xv = t.value(x);
    const Tensor& sv = t.value(s);
    if (xv.ndim() != 4 || sv.ndim() != 2 || sv.dim(0) != xv.dim(0) || sv.dim(1) != xv.dim(1)) {
        throw std::invalid_argument("add_bias_hw: shapes " + Tensor::shape_str(xv.shape) + " and " +
                                    Tensor::shape_str(sv.shape) + " do not broadcast");
    }
    const int n = xv.dim(0), c = xv.dim(1);
    const int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    Tensor out(xv.shape);
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const float bias = sv.ptr()[static_cast<int64_t>(ni) * c + ci];
            const float* src = xv.ptr() + (static_cast<int64_t>(ni) * c + ci) * hw;
            float* dst = out.ptr() + (static_cast<int64_t>(ni) * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
        }
    const bool rg = t.requires_grad(x) || t.requires_grad(s);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, s, n, c, hw](Tape& tp) {
        const Tensor& g = tp.grad(id);
        if (tp.requires_grad(x)) tp.accumulate(x, g.ptr(), g.numel());
        if (tp.requires_grad(s)) {
            std::vector<float> ds(static_cast<size_t>(n) * c, 0.0f);
            for (int ni = 0; ni < n; ++ni)
                for (int ci = 0; ci < c; ++ci) {
                    const float* gp = g.ptr() + (static_cast<int64_t>(ni) * c + ci) * hw;
                    double acc = 0.0;
                    for (int64_t i = 0; i < hw; ++i) acc += gp[i];
                    ds[static_cast<size_t>(ni) * c + ci] = static_cast<float>(acc);
                }
            tp.accumulate(s, ds.data(), static_cast<int64_t>(ds.size()));
        }
    });
}

// Nearest-neighbour 2x upsample.
inline int upsample_nearest2(Tape& t, int x) {
    const Tensor& xv = t.value(x);
    if (xv.ndim() != 4) throw std::invalid_argument("upsample_nearest2: expected NCHW input");
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    Tensor out({n, c, 2 * h, 2 * w});
    for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
        const float* src = xv.ptr() + nc * h * w;
        float* dst = out.ptr() + nc * 4 * h * w;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const float v = src[static_cast<int64_t>(i) * w + j];
                float* d = dst + (static_cast<int64_t>(2 * i) * 2 * w) + 2 * j;
                d[0] = v;
                d[1] = v;
                d[2 * w] = v;
                d[2 * w + 1] = v;
            }
    }
    const bool rg = t.requires_grad(x);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, n, c, h, w](Tape& tp) {
        const Tensor& g = tp.grad(id);
        std::vector<float> dx(static_cast<size_t>(n) * c * h * w);
        for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
            const float* src = g.ptr() + nc * 4 * h * w;
            float* dst = dx.data() + nc * h * w;
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    const float* s = src + (static_cast<int64_t>(2 * i) * 2 * w) + 2 * j;
                    dst[static_cast<int64_t>(i) * w + j] = s[0] + s[1] + s[2 * w] + s[2 * w + 1];
                }
        }
        tp.accumulate(x, dx.data(), static_cast<int64_t>(dx.size()));
    });
}

// Fake quantization with the clipped straight-through estimator: forward is
// dequantize(quantize(x)); the gradient passes through unchanged where
// |x| <= 127 * scale and is zero elsewhere.
inline int fake_quant(Tape& t, int x, const QuantParams& p) {
    const Tensor& xv = t.value(x);
    Tensor out = fake_quant_forward(xv, p);
    const bool rg = t.requires_grad(x);
    const int id = t.size();
    return t.emit(std::move(out), rg, !rg ? std::function<void(Tape&)>{} : [id, x, p](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& xv2 = tp.value(x);
        std::vector<float> dx(static_cast<size_t>(xv2.numel()));
        if (p.granularity == QuantGranularity::PerTensor) {
            const float clip = 127.0f * p.scale();
            for (int64_t i = 0; i < xv2.numel(); ++i)
                dx[static_cast<size_t>(i)] = std::fabs(xv2.ptr()[i]) <= clip ? g.ptr()[i] : 0.0f;
        } else {
            int64_t outer = 1, inner = 1;
            for (int i = 0; i < p.axis; ++i) outer *= xv2.dim(i);
            for (int i = p.axis + 1; i < xv2.ndim(); ++i) inner *= xv2.dim(i);
            const int channels = xv2.dim(p.axis);
            for (int64_t o = 0; o < outer; ++o)
                for (int ci = 0; ci < channels; ++ci) {
                    const float clip = 127.0f * p.scales[static_cast<size_t>(ci)];
                    const int64_t off = (o * channels + ci) * inner;
                    for (int64_t i = 0; i < inner; ++i)
                        dx[static_cast<size_t>(off + i)] = std::fabs(xv2.ptr()[off + i]) <= clip ? g.ptr()[off + i] : 0.0f;
                }
        }
        tp.accumulate(x, dx.data(), xv2.numel());
    });
}

}  // namespace ops

// Sinusoidal timestep embedding: concat(sin(t * w_i), cos(t * w_i)) with
// frequencies geometric from 1 down to 1/10000.
inline Tensor timestep_embedding(const std::vector<int>& t_steps, int dim) {
    if (dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even, got " + std::to_string(dim));
    const int half = dim / 2;
    Tensor out({static_cast<int>(t_steps.size()), dim});
    for (size_t n = 0; n < t_steps.size(); ++n) {
        float* row = out.ptr() + n * static_cast<size_t>(dim);
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double a = static_cast<double>(t_steps[n]) * freq;
            row[i] = static_cast<float>(std::sin(a));
            row[half + i] = static_cast<float>(std::cos(a));
        }
    }
    return out;
}

}  // namespace qdiff
