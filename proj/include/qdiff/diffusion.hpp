#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdiff/engine.hpp"
#include "qdiff/numerics.hpp"
#include "qdiff/tensor.hpp"
#include "qdiff/unet.hpp"

namespace qdiff {

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Linear beta schedule; cumulative products kept in double so the monotonicity
// invariants hold exactly at T = 1000.
struct NoiseSchedule {
    int t_train = 1000;
    float beta_start = 1e-4f;
    float beta_end = 0.02f;
    std::vector<float> beta;
    std::vector<float> alpha;
    std::vector<double> alpha_bar;

    static NoiseSchedule linear(int t_train = 1000, float beta_start = 1e-4f, float beta_end = 0.02f) {
        if (t_train < 1) throw std::invalid_argument("schedule: t_train must be >= 1");
        if (!(beta_start > 0.0f) || !(beta_end < 1.0f) || !(beta_start <= beta_end)) {
            throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
        }
        NoiseSchedule s;
        s.t_train = t_train;
        s.beta_start = beta_start;
        s.beta_end = beta_end;
        s.beta.resize(static_cast<size_t>(t_train));
        s.alpha.resize(static_cast<size_t>(t_train));
        s.alpha_bar.resize(static_cast<size_t>(t_train));
        double prod = 1.0;
        for (int t = 0; t < t_train; ++t) {
            const double frac = t_train == 1 ? 0.0 : static_cast<double>(t) / (t_train - 1);
            const double b = beta_start + (static_cast<double>(beta_end) - beta_start) * frac;
            s.beta[static_cast<size_t>(t)] = static_cast<float>(b);
            s.alpha[static_cast<size_t>(t)] = static_cast<float>(1.0 - b);
            prod *= 1.0 - b;
            s.alpha_bar[static_cast<size_t>(t)] = prod;
        }
        return s;
    }

    void check_t(int t) const {
        if (t < 0 || t >= t_train) {
            throw std::invalid_argument("schedule: timestep " + std::to_string(t) + " outside [0," +
                                        std::to_string(t_train) + ")");
        }
    }
};

// q(x_t | x_0): x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per-sample t.
inline Tensor forward_diffuse(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                              const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "forward_diffuse");
    if (x0.ndim() != 4 || static_cast<size_t>(x0.dim(0)) != t.size()) {
        throw std::invalid_argument("forward_diffuse: batch size mismatch");
    }
    Tensor out(x0.shape);
    const int64_t chw = x0.numel() / x0.dim(0);
    for (size_t n = 0; n < t.size(); ++n) {
        sched.check_t(t[n]);
        const double ab = sched.alpha_bar[static_cast<size_t>(t[n])];
        const float sa = static_cast<float>(std::sqrt(ab));
        const float sn = static_cast<float>(std::sqrt(1.0 - ab));
        const float* xp = x0.ptr() + static_cast<int64_t>(n) * chw;
        const float* ep = eps.ptr() + static_cast<int64_t>(n) * chw;
        float* op = out.ptr() + static_cast<int64_t>(n) * chw;
        for (int64_t i = 0; i < chw; ++i) op[i] = sa * xp[i] + sn * ep[i];
    }
    return out;
}

// The paper's time-dependent schedule: n total steps, the first k and last k
// run at `high` precision, everything between at `low`.
struct PrecisionPolicy {
    int steps = 50;     // n
    int boundary = 3;   // k
    PrecisionFormat high = PrecisionFormat::BF16;
    PrecisionFormat low = PrecisionFormat::INT8;

    void validate() const {
        if (steps < 1) throw std::invalid_argument("policy: steps must be >= 1");
        const int half_up = (steps + 1) / 2;
        if (boundary < 0 || boundary > half_up) {
            throw std::invalid_argument("policy: boundary " + std::to_string(boundary) + " outside [0," +
                                        std::to_string(half_up) + "] for " + std::to_string(steps) + " steps");
        }
    }

    std::string label() const {
        if (boundary == 0) return format_name(low);
        if (2 * boundary >= steps) return format_name(high);
        return format_name(high) + "(" + std::to_string(2 * boundary) + ")/" + format_name(low);
    }
};

// Step i of [0,n): high iff i < k or i >= n-k. Step 0 is the noisiest step.
inline PrecisionFormat precision_for_step(const PrecisionPolicy& p, int i) {
    p.validate();
    if (i < 0 || i >= p.steps) {
        throw std::invalid_argument("policy: step " + std::to_string(i) + " outside [0," +
                                    std::to_string(p.steps) + ")");
    }
    return (i < p.boundary || i >= p.steps - p.boundary) ? p.high : p.low;
}

// ---- optimizer ----------------------------------------------------------------

class Adam {
public:
    explicit Adam(float lr = 1e-3f, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    float learning_rate() const { return lr_; }
    void set_learning_rate(float lr) { lr_ = lr; }
    int64_t steps_taken() const { return t_; }

    // grads[i] may be null (parameter untouched this step: moments still decay).
    void step(std::vector<Param>& params, const std::vector<const Tensor*>& grads) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                m_[i] = Tensor(params[i].value.shape);
                v_[i] = Tensor(params[i].value.shape);
            }
        }
        if (grads.size() != params.size()) throw std::invalid_argument("adam: gradient list size mismatch");
        ++t_;
        const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
        const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            float* m = m_[i].ptr();
            float* v = v_[i].ptr();
            float* p = params[i].value.ptr();
            const int64_t n = params[i].value.numel();
            const float* g = grads[i] ? grads[i]->ptr() : nullptr;
            for (int64_t j = 0; j < n; ++j) {
                const float gj = g ? g[j] : 0.0f;
                m[j] = beta1_ * m[j] + (1.0f - beta1_) * gj;
                v[j] = beta2_ * v[j] + (1.0f - beta2_) * gj * gj;
                const float mhat = m[j] / bc1;
                const float vhat = v[j] / bc2;
                p[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    float lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

// Cosine learning-rate decay from lr_max to lr_min across `total` steps.
inline float cosine_lr(int step, int total, float lr_max, float lr_min) {
    if (total <= 1 || lr_min >= lr_max) return lr_max;
    const double progress = static_cast<double>(step - 1) / (total - 1);
    return static_cast<float>(lr_min + 0.5 * (static_cast<double>(lr_max) - lr_min) *
                                           (1.0 + std::cos(3.14159265358979323846 * progress)));
}

// ---- training ------------------------------------------------------------------

// Draws (t, eps) for one batch. Shared by plain training and QAT so that both
// consume the RNG identically.
inline void sample_noise_pair(Rng& rng, const NoiseSchedule& sched, const Tensor& x0,
                              std::vector<int>* t, Tensor* eps) {
    const int n = x0.dim(0);
    t->resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) (*t)[static_cast<size_t>(i)] = static_cast<int>(rng.next_index(sched.t_train));
    *eps = Tensor(x0.shape);
    rng.fill_gaussian(*eps);
}

// One eps-prediction step: loss = mse(eps_hat, eps), one optimizer update.
inline float train_step(UnetModel& model, const Tensor& batch_x0, const NoiseSchedule& sched, Adam& opt,
                        Rng& rng, WorkerPool& pool, QuantMode qm = QuantMode::Off) {
    std::vector<int> t;
    Tensor eps;
    sample_noise_pair(rng, sched, batch_x0, &t, &eps);
    Tensor x_t = forward_diffuse(batch_x0, t, eps, sched);

    Tape tape;
    tape.pool = &pool;
    UnetTapeForward fw = unet_forward_tape(model, tape, x_t, t, qm, /*train_params=*/true);
    const int target = tape.leaf(eps);
    const int loss = ops::mse_loss(tape, fw.out, target);
    const float loss_v = tape.value(loss).ptr()[0];
    if (!std::isfinite(loss_v)) {
        throw NumericalError("training: non-finite loss at optimizer step " + std::to_string(opt.steps_taken() + 1));
    }
    tape.backward(loss);

    std::vector<const Tensor*> grads(model.params.size(), nullptr);
    for (size_t i = 0; i < model.params.size(); ++i) {
        const int leaf = fw.param_leaf[i];
        if (leaf >= 0 && tape.has_grad(leaf)) grads[i] = &tape.grad(leaf);
    }
    opt.step(model.params, grads);
    return loss_v;
}

inline Tensor gather_batch(const Tensor& dataset, const std::vector<int64_t>& idx) {
    const int64_t chw = dataset.numel() / dataset.dim(0);
    Tensor out({static_cast<int>(idx.size()), dataset.dim(1), dataset.dim(2), dataset.dim(3)});
    for (size_t i = 0; i < idx.size(); ++i) {
        std::memcpy(out.ptr() + static_cast<int64_t>(i) * chw, dataset.ptr() + idx[i] * chw,
                    sizeof(float) * static_cast<size_t>(chw));
    }
    return out;
}

// ---- sampling ------------------------------------------------------------------

// Uniform stride over the training grid, i = 0 noisiest: tau_0 = T-1 down to 0.
inline std::vector<int> strided_timesteps(int n, int t_train) {
    if (n < 1 || n > t_train) {
        throw std::invalid_argument("sample: step count " + std::to_string(n) + " outside [1," +
                                    std::to_string(t_train) + "]");
    }
    std::vector<int> tau(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        tau[static_cast<size_t>(i)] =
            n == 1 ? t_train - 1
                   : static_cast<int>(std::llround(static_cast<double>(t_train - 1) *
                                                   (static_cast<double>(n - 1 - i) / (n - 1))));
    }
    return tau;
}

// Ancestral DDPM sampling with the time-dependent precision policy. The model
// executing step i is chosen by format: INT8 runs the quantized student, FP32
// and BF16 run the full-precision model. Noise depends only on
// (seed, image index, step), so results are independent of batch chunking.
class Sampler {
public:
    Sampler(UnetModel* full_precision, UnetModel* quantized, const NoiseSchedule& sched, WorkerPool& pool)
        : full_(full_precision), quant_(quantized), sched_(sched), pool_(&pool) {}

    Tensor sample(const PrecisionPolicy& policy, int count, int height, int width, uint64_t seed,
                  bool stochastic = true, std::vector<PrecisionFormat>* step_formats = nullptr,
                  int batch_limit = 128) {
        policy.validate();
        const std::vector<int> tau = strided_timesteps(policy.steps, sched_.t_train);
        std::vector<PrecisionFormat> fmts(static_cast<size_t>(policy.steps));
        for (int i = 0; i < policy.steps; ++i) fmts[static_cast<size_t>(i)] = precision_for_step(policy, i);
        if (step_formats) *step_formats = fmts;
        for (auto f : fmts) (void)engine(f);  // validate availability up front

        UnetModel* any = full_ ? full_ : quant_;
        const int c = any->cfg.in_channels;
        Tensor out({count, c, height, width});
        const int64_t chw = static_cast<int64_t>(c) * height * width;

        for (int chunk0 = 0; chunk0 < count; chunk0 += batch_limit) {
            const int bs = std::min(batch_limit, count - chunk0);
            Tensor x({bs, c, height, width});
            for (int b = 0; b < bs; ++b) {
                Rng r(Rng::derive(seed, static_cast<uint64_t>(chunk0 + b), 0));
                for (int64_t i = 0; i < chw; ++i) x.ptr()[static_cast<int64_t>(b) * chw + i] = r.gaussian();
            }
            for (int i = 0; i < policy.steps; ++i) {
                const int t = tau[static_cast<size_t>(i)];
                const double ab = sched_.alpha_bar[static_cast<size_t>(t)];
                const double ab_prev = (i + 1 < policy.steps)
                                           ? sched_.alpha_bar[static_cast<size_t>(tau[static_cast<size_t>(i + 1)])]
                                           : 1.0;
                const double alpha_eff = ab / ab_prev;
                const double beta_eff = 1.0 - alpha_eff;
                const float eps_coef = static_cast<float>(beta_eff / std::sqrt(1.0 - ab));
                const float inv_sqrt_alpha = static_cast<float>(1.0 / std::sqrt(alpha_eff));
                const double beta_tilde = (1.0 - ab_prev) / (1.0 - ab) * beta_eff;
                const float sigma = stochastic ? static_cast<float>(std::sqrt(std::max(0.0, beta_tilde))) : 0.0f;

                const std::vector<int> tvec(static_cast<size_t>(bs), t);
                Tensor eps_hat = engine(fmts[static_cast<size_t>(i)])->forward(x, tvec);
                for (int b = 0; b < bs; ++b) {
                    float* xp = x.ptr() + static_cast<int64_t>(b) * chw;
                    const float* ep = eps_hat.ptr() + static_cast<int64_t>(b) * chw;
                    if (sigma > 0.0f) {
                        Rng r(Rng::derive(seed, static_cast<uint64_t>(chunk0 + b), 1 + static_cast<uint64_t>(i)));
                        for (int64_t j = 0; j < chw; ++j) {
                            xp[j] = (xp[j] - eps_coef * ep[j]) * inv_sqrt_alpha + sigma * r.gaussian();
                        }
                    } else {
                        for (int64_t j = 0; j < chw; ++j) xp[j] = (xp[j] - eps_coef * ep[j]) * inv_sqrt_alpha;
                    }
                }
            }
            std::memcpy(out.ptr() + static_cast<int64_t>(chunk0) * chw, x.ptr(),
                        sizeof(float) * static_cast<size_t>(bs) * chw);
        }
        return out;
    }

private:
    UnetEngine* engine(PrecisionFormat f) {
        auto it = engines_.find(f);
        if (it != engines_.end()) return it->second.get();
        UnetModel* m = (f == PrecisionFormat::INT8) ? quant_ : full_;
        if (!m) {
            throw std::invalid_argument("sample: policy requests " + format_name(f) +
                                        " but no model for that format was provided");
        }
        auto eng = std::make_unique<UnetEngine>(*m, f, *pool_);
        return engines_.emplace(f, std::move(eng)).first->second.get();
    }

    UnetModel* full_;
    UnetModel* quant_;
    NoiseSchedule sched_;
    WorkerPool* pool_;
    std::map<PrecisionFormat, std::unique_ptr<UnetEngine>> engines_;
};

}  // namespace qdiff
