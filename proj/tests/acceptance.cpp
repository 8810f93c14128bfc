// Acceptance suite: one check per release criterion, each printing a PASS or
// FAIL line with the measured numbers. Heavy artifacts (trained checkpoints,
// per-seed quality scores) are cached in --work-dir so later criteria reuse
// earlier work.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qdiff/config.hpp"
#include "qdiff/engine.hpp"
#include "qdiff/eval.hpp"
#include "qdiff/model_io.hpp"
#include "qdiff/qat.hpp"
#include "reference_ops.hpp"

namespace fs = std::filesystem;
using namespace qdiff;

namespace {

struct CriterionResult {
    bool pass = false;
    std::string detail;
};

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << std::fixed << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// criterion 1: channel-parallel output matches the baseline on 100 random
// configurations within relative error 1e-5, in under 30 s.
CriterionResult criterion1() {
    const double t0 = now_seconds();
    WorkerPool pool(4);
    Rng rng(20240101);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        const int ratios[] = {1, 2, 4, 8};
        const int dpg = ratios[rep % 4];
        const int g = 1 + static_cast<int>(rng.next_index(8));
        const int c = g * dpg;
        const int n = 1 + static_cast<int>(rng.next_index(4));
        const int h = 1 + static_cast<int>(rng.next_index(64));
        const int w = 1 + static_cast<int>(rng.next_index(64));
        Tensor x({n, c, h, w});
        rng.fill_gaussian(x);
        for (auto& v : x.data) v = v * 3.0f + 1.5f;
        Tensor gamma({c}), beta({c});
        rng.fill_gaussian(gamma);
        rng.fill_gaussian(beta);
        kernels::GroupNormSpec spec;
        spec.channels = c;
        spec.groups = g;
        spec.gamma = gamma.ptr();
        spec.beta = beta.ptr();
        Tensor yb = kernels::groupnorm_baseline(x, spec, pool);
        Tensor yc = kernels::groupnorm_channel_parallel(x, spec, pool);
        worst = std::max(worst, refops::norm_rel_error(yb, yc));
    }
    const double elapsed = now_seconds() - t0;
    CriterionResult r;
    r.pass = worst <= 1e-5 && elapsed < 30.0;
    r.detail = "worst relative error " + fmt(worst, 9) + " over 100 configs in " + fmt(elapsed, 1) + " s";
    return r;
}

// criterion 2: bit-identical outputs for worker counts 1/2/4/8 on 20 inputs.
CriterionResult criterion2() {
    Rng rng(20240102);
    bool all_equal = true;
    for (int rep = 0; rep < 20 && all_equal; ++rep) {
        const int g = 1 + static_cast<int>(rng.next_index(6));
        const int dpg = 1 << rng.next_index(4);
        const int c = g * dpg;
        const int n = 1 + static_cast<int>(rng.next_index(3));
        const int h = 1 + static_cast<int>(rng.next_index(32));
        const int w = 1 + static_cast<int>(rng.next_index(32));
        Tensor x({n, c, h, w});
        rng.fill_gaussian(x);
        kernels::GroupNormSpec spec;
        spec.channels = c;
        spec.groups = g;
        std::vector<float> ref;
        for (int t : {1, 2, 4, 8}) {
            WorkerPool pool(t);
            Tensor y = kernels::groupnorm_channel_parallel(x, spec, pool);
            if (ref.empty()) {
                ref = y.data;
            } else if (y.data != ref) {
                all_equal = false;
            }
        }
    }
    CriterionResult r;
    r.pass = all_equal;
    r.detail = all_equal ? "20 inputs identical across worker counts {1,2,4,8}" : "outputs diverged across worker counts";
    return r;
}

// criterion 3: utilization benchmark, C=64 G=4 input 8x64x128x128, 8 workers;
// channel-parallel median <= 0.67 x group-parallel median over 20 runs.
CriterionResult criterion3() {
    WorkerPool pool(8);
    Rng rng(20240103);
    Tensor x({8, 64, 128, 128});
    rng.fill_gaussian(x);
    Tensor y(x.shape);
    kernels::GroupNormSpec spec;
    spec.channels = 64;
    spec.groups = 4;

    auto time_runs = [&](auto&& fn) {
        std::vector<double> times;
        for (int i = 0; i < 3; ++i) fn();  // warmup
        for (int i = 0; i < 20; ++i) {
            const double t0 = now_seconds();
            fn();
            times.push_back(now_seconds() - t0);
        }
        std::sort(times.begin(), times.end());
        return times[times.size() / 2];
    };
    const double group_median = time_runs([&] {
        kernels::groupnorm_baseline_raw(x.ptr(), y.ptr(), 8, 64, 128l * 128, spec, pool);
    });
    const double channel_median = time_runs([&] {
        kernels::groupnorm_channel_parallel_raw(x.ptr(), y.ptr(), 8, 64, 128l * 128, spec, pool);
    });
    const double ratio = channel_median / group_median;

    // Diagnostic only: the same utilization premise (G < workers <= physical
    // cores, C >= workers) scaled to this machine's core count.
    const int cores = static_cast<int>(std::max(2u, std::thread::hardware_concurrency()));
    double scaled_ratio = 0.0;
    {
        WorkerPool scaled_pool(cores);
        kernels::GroupNormSpec spec1;
        spec1.channels = 64;
        spec1.groups = 1;
        const double g1 = time_runs([&] {
            kernels::groupnorm_baseline_raw(x.ptr(), y.ptr(), 8, 64, 128l * 128, spec1, scaled_pool);
        });
        const double c1 = time_runs([&] {
            kernels::groupnorm_channel_parallel_raw(x.ptr(), y.ptr(), 8, 64, 128l * 128, spec1, scaled_pool);
        });
        scaled_ratio = c1 / g1;
    }

    CriterionResult r;
    r.pass = ratio <= 0.67;
    r.detail = "channel-parallel " + fmt(channel_median * 1e3, 2) + " ms vs group-parallel " +
               fmt(group_median * 1e3, 2) + " ms, ratio " + fmt(ratio, 3) +
               " (need <= 0.67 with 8 workers; premise expects >= 8 physical cores, " +
               std::to_string(std::thread::hardware_concurrency()) +
               " available; diagnostic G=1,T=" + std::to_string(cores) + " ratio " + fmt(scaled_ratio, 3) + ")";
    return r;
}

// ---------------------------------------------------------------------------
// criterion 4: gradient correctness, op-level at 1e-3 and full student at 1e-2.

struct GradCheck {
    std::string name;
    double err;
};

double op_fd_error(const std::vector<Tensor>& inputs,
                   const std::function<int(Tape&, const std::vector<int>&)>& build,
                   const std::function<double(const std::vector<Tensor>&)>& reference_loss) {
    Tape tape;
    std::vector<int> ids;
    for (const auto& t : inputs) ids.push_back(tape.leaf(t, true));
    tape.backward(build(tape, ids));
    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        std::vector<Tensor> probe = inputs;
        Tensor fd = refops::finite_difference(
            inputs[i],
            [&](const Tensor& theta) {
                probe[i] = theta;
                return reference_loss(probe);
            },
            1e-3);
        worst = std::max(worst, refops::norm_rel_error(tape.grad(ids[i]), fd));
    }
    return worst;
}

Tensor rnd(std::vector<int> shape, uint64_t seed, float scale = 1.0f) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (auto& v : t.data) v = rng.gaussian() * scale;
    return t;
}

double dotw(const refops::DVec& a, const Tensor& w) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * static_cast<double>(w.ptr()[static_cast<int64_t>(i)]);
    return acc;
}

std::vector<GradCheck> op_level_checks(uint64_t seed) {
    std::vector<GradCheck> out;
    {
        const Tensor w = rnd({1, 3, 4, 5}, seed + 1);
        out.push_back({"conv2d", op_fd_error(
            {rnd({1, 2, 4, 5}, seed + 2), rnd({3, 2, 3, 3}, seed + 3, 0.5f), rnd({3}, seed + 4)},
            [&](Tape& t, const std::vector<int>& id) {
                return ops::weighted_sum(t, ops::conv2d(t, id[0], id[1], id[2], 1, 1), w);
            },
            [&](const std::vector<Tensor>& v) {
                return dotw(refops::conv2d(refops::to_double(v[0]), 1, 2, 4, 5, refops::to_double(v[1]), 3, 3,
                                           3, refops::to_double(v[2]), 1, 1),
                            w);
            })});
    }
    {
        const Tensor w = rnd({3, 5}, seed + 5);
        out.push_back({"linear", op_fd_error(
            {rnd({3, 4}, seed + 6), rnd({4, 5}, seed + 7), rnd({5}, seed + 8)},
            [&](Tape& t, const std::vector<int>& id) {
                return ops::weighted_sum(t, ops::linear(t, id[0], id[1], id[2]), w);
            },
            [&](const std::vector<Tensor>& v) {
                return dotw(refops::linear(refops::to_double(v[0]), 3, 4, refops::to_double(v[1]), 5,
                                           refops::to_double(v[2])),
                            w);
            })});
    }
    {
        const Tensor w = rnd({2, 4, 3, 3}, seed + 9);
        out.push_back({"groupnorm", op_fd_error(
            {rnd({2, 4, 3, 3}, seed + 10), rnd({4}, seed + 11), rnd({4}, seed + 12)},
            [&](Tape& t, const std::vector<int>& id) {
                return ops::weighted_sum(t, ops::groupnorm(t, id[0], id[1], id[2], 2), w);
            },
            [&](const std::vector<Tensor>& v) {
                return dotw(refops::groupnorm(refops::to_double(v[0]), 2, 4, 3, 3, 2, 1e-5,
                                              refops::to_double(v[1]), refops::to_double(v[2])),
                            w);
            })});
    }
    {
        const Tensor w = rnd({4, 6}, seed + 13);
        out.push_back({"silu", op_fd_error(
            {rnd({4, 6}, seed + 14)},
            [&](Tape& t, const std::vector<int>& id) { return ops::weighted_sum(t, ops::silu(t, id[0]), w); },
            [&](const std::vector<Tensor>& v) { return dotw(refops::silu(refops::to_double(v[0])), w); })});
        out.push_back({"softmax", op_fd_error(
            {rnd({4, 6}, seed + 15)},
            [&](Tape& t, const std::vector<int>& id) {
                return ops::weighted_sum(t, ops::softmax(t, id[0], -1), w);
            },
            [&](const std::vector<Tensor>& v) {
                return dotw(refops::softmax_lastdim(refops::to_double(v[0]), 4, 6), w);
            })});
        out.push_back({"add", op_fd_error(
            {rnd({4, 6}, seed + 16), rnd({4, 6}, seed + 17)},
            [&](Tape& t, const std::vector<int>& id) {
                return ops::weighted_sum(t, ops::add(t, id[0], id[1]), w);
            },
            [&](const std::vector<Tensor>& v) {
                refops::DVec s = refops::to_double(v[0]);
                const refops::DVec s2 = refops::to_double(v[1]);
                for (size_t i = 0; i < s.size(); ++i) s[i] += s2[i];
                return dotw(s, w);
            })});
        out.push_back({"mul_scalar", op_fd_error(
            {rnd({4, 6}, seed + 18)},
            [&](Tape& t, const std::vector<int>& id) {
                return ops::weighted_sum(t, ops::mul_scalar(t, id[0], -1.7f), w);
            },
            [&](const std::vector<Tensor>& v) {
                refops::DVec s = refops::to_double(v[0]);
                for (auto& x : s) x *= -1.7;
                return dotw(s, w);
            })});
    }
    out.push_back({"mse_loss", op_fd_error(
        {rnd({3, 4}, seed + 19), rnd({3, 4}, seed + 20)},
        [&](Tape& t, const std::vector<int>& id) { return ops::mse_loss(t, id[0], id[1]); },
        [&](const std::vector<Tensor>& v) {
            return refops::mse(refops::to_double(v[0]), refops::to_double(v[1]));
        })});
    {
        const Tensor w = rnd({2, 3, 4}, seed + 21);
        out.push_back({"bmm", op_fd_error(
            {rnd({2, 3, 5}, seed + 22), rnd({2, 5, 4}, seed + 23)},
            [&](Tape& t, const std::vector<int>& id) {
                return ops::weighted_sum(t, ops::bmm(t, id[0], id[1], false), w);
            },
            [&](const std::vector<Tensor>& v) {
                refops::DVec o(2 * 3 * 4, 0.0);
                for (int b = 0; b < 2; ++b)
                    for (int i = 0; i < 3; ++i)
                        for (int j = 0; j < 4; ++j) {
                            double acc = 0.0;
                            for (int k = 0; k < 5; ++k)
                                acc += static_cast<double>(v[0].ptr()[(b * 3 + i) * 5 + k]) *
                                       v[1].ptr()[(b * 5 + k) * 4 + j];
                            o[static_cast<size_t>((b * 3 + i) * 4 + j)] = acc;
                        }
                return dotw(o, w);
            })});
    }
    {
        const Tensor w = rnd({2, 5, 2, 2}, seed + 24);
        out.push_back({"concat", op_fd_error(
            {rnd({2, 3, 2, 2}, seed + 25), rnd({2, 2, 2, 2}, seed + 26)},
            [&](Tape& t, const std::vector<int>& id) {
                return ops::weighted_sum(t, ops::concat_channels(t, id[0], id[1]), w);
            },
            [&](const std::vector<Tensor>& v) {
                refops::DVec o;
                for (int n = 0; n < 2; ++n) {
                    for (int i = 0; i < 12; ++i) o.push_back(v[0].ptr()[n * 12 + i]);
                    for (int i = 0; i < 8; ++i) o.push_back(v[1].ptr()[n * 8 + i]);
                }
                return dotw(o, w);
            })});
    }
    {
        const Tensor w = rnd({1, 2, 4, 4}, seed + 27);
        out.push_back({"upsample", op_fd_error(
            {rnd({1, 2, 2, 2}, seed + 28)},
            [&](Tape& t, const std::vector<int>& id) {
                return ops::weighted_sum(t, ops::upsample_nearest2(t, id[0]), w);
            },
            [&](const std::vector<Tensor>& v) {
                refops::DVec o(32);
                for (int c = 0; c < 2; ++c)
                    for (int i = 0; i < 4; ++i)
                        for (int j = 0; j < 4; ++j)
                            o[static_cast<size_t>(c * 16 + i * 4 + j)] = v[0].ptr()[c * 4 + (i / 2) * 2 + j / 2];
                return dotw(o, w);
            })});
        const Tensor wb = rnd({1, 2, 4, 4}, seed + 29);
        out.push_back({"add_bias_hw", op_fd_error(
            {rnd({1, 2, 4, 4}, seed + 30), rnd({1, 2}, seed + 31)},
            [&](Tape& t, const std::vector<int>& id) {
                return ops::weighted_sum(t, ops::add_bias_hw(t, id[0], id[1]), wb);
            },
            [&](const std::vector<Tensor>& v) {
                refops::DVec o(32);
                for (int c = 0; c < 2; ++c)
                    for (int p = 0; p < 16; ++p)
                        o[static_cast<size_t>(c * 16 + p)] =
                            static_cast<double>(v[0].ptr()[c * 16 + p]) + v[1].ptr()[c];
                return dotw(o, wb);
            })});
    }
    return out;
}

CriterionResult criterion4() {
    double worst_op = 0.0;
    std::string worst_name = "-";
    for (uint64_t seed = 0; seed < 10; ++seed) {
        for (const auto& check : op_level_checks(7000 + 97 * seed)) {
            if (check.err > worst_op) {
                worst_op = check.err;
                worst_name = check.name;
            }
        }
    }

    // full student network with KD loss on a 4x4 input
    WorkerPool pool(2);
    UnetConfig cfg;
    cfg.base_channels = 8;
    cfg.groups = 2;
    cfg.image_size = 4;
    UnetModel student = UnetModel::init(cfg, 404);
    Rng hr(405);
    for (auto& v : student.params[static_cast<size_t>(student.param_index("head.w"))].value.data)
        v = hr.gaussian() * 0.2f;

    Tensor x({1, 1, 4, 4});
    Rng rng(406);
    rng.fill_gaussian(x);
    Tensor target(x.shape);
    rng.fill_gaussian(target);
    const std::vector<int> tsteps = {512};

    Tensor o_t;
    {
        UnetModel teacher = student;
        Rng tr(407);
        for (auto& p : teacher.params)
            for (auto& v : p.value.data) v += tr.gaussian() * 0.01f;
        Tape tt;
        tt.pool = &pool;
        o_t = tt.value(unet_forward_tape(teacher, tt, x, tsteps, QuantMode::Off, false).out);
    }
    auto loss_value = [&](UnetModel& model) {
        Tape t;
        t.pool = &pool;
        auto fw = unet_forward_tape(model, t, x, tsteps, QuantMode::Off, false);
        const int task = ops::mse_loss(t, fw.out, t.leaf(target));
        const int kd = ops::mse_loss(t, fw.out, t.leaf(o_t));
        return static_cast<double>(t.value(ops::add(t, task, ops::mul_scalar(t, kd, 1.0f))).ptr()[0]);
    };
    Tape tape;
    tape.pool = &pool;
    auto fw = unet_forward_tape(student, tape, x, tsteps, QuantMode::Off, true);
    {
        const int task = ops::mse_loss(tape, fw.out, tape.leaf(target));
        const int kd = ops::mse_loss(tape, fw.out, tape.leaf(o_t));
        tape.backward(ops::add(tape, task, ops::mul_scalar(tape, kd, 1.0f)));
    }

    double worst_net = 0.0;
    std::string worst_param = "-";
    Rng pick(408);
    for (size_t pi = 0; pi < student.params.size(); ++pi) {
        const int leaf = fw.param_leaf[pi];
        if (leaf < 0 || !tape.has_grad(leaf)) continue;
        const Tensor analytic = tape.grad(leaf);
        Tensor& theta = student.params[pi].value;
        const int probes = theta.numel() <= 8 ? static_cast<int>(theta.numel()) : 8;
        std::vector<float> av, fv;
        for (int probe = 0; probe < probes; ++probe) {
            const int64_t i = theta.numel() <= 8 ? probe : pick.next_index(theta.numel());
            const float orig = theta.ptr()[i];
            const double h = 1e-2 * std::max(1.0, std::fabs(static_cast<double>(orig)));
            theta.ptr()[i] = static_cast<float>(orig + h);
            const double up = loss_value(student);
            theta.ptr()[i] = static_cast<float>(orig - h);
            const double down = loss_value(student);
            theta.ptr()[i] = orig;
            av.push_back(analytic.ptr()[i]);
            fv.push_back(static_cast<float>((up - down) / (2.0 * h)));
        }
        Tensor at({probes}, std::vector<float>(av));
        Tensor ft({probes}, std::vector<float>(fv));
        const double err = refops::norm_rel_error(at, ft);
        if (err > worst_net) {
            worst_net = err;
            worst_param = student.params[pi].name;
        }
    }

    CriterionResult r;
    r.pass = worst_op <= 1e-3 && worst_net <= 1e-2;
    r.detail = "worst op-level error " + fmt(worst_op, 6) + " (" + worst_name + "), worst network error " +
               fmt(worst_net, 6) + " (" + worst_param + ")";
    return r;
}

// ---------------------------------------------------------------------------
// criterion 5: quantization math bundle.
CriterionResult criterion5() {
    bool pass = true;
    std::ostringstream detail;

    {  // round-trip bound over 1e5 random values
        Rng rng(20240105);
        const float scale = 0.0173f;
        const float lim = 127.0f * scale;
        auto p = QuantParams::per_tensor(scale);
        Tensor x({100000});
        for (auto& v : x.data) v = rng.uniform(-lim, lim);
        Tensor back = dequantize(quantize_int8(x, p), p);
        double worst = 0.0;
        for (int64_t i = 0; i < x.numel(); ++i)
            worst = std::max(worst, std::fabs(static_cast<double>(x.ptr()[i]) - back.ptr()[i]));
        const bool ok = worst <= 0.5 * scale * (1.0 + 1e-6);
        pass = pass && ok;
        detail << "roundtrip worst " << fmt(worst / scale, 6) << "*scale" << (ok ? "" : " FAIL") << "; ";
    }
    {  // bf16 exact bit-oracle
        Rng rng(20240106);
        bool ok = true;
        for (int i = 0; i < 100000 && ok; ++i) {
            const float x = rng.gaussian() * std::exp(rng.gaussian() * 6.0f);
            ok = bf16_round_scalar(x) == refops::bf16_oracle(x);
        }
        pass = pass && ok;
        detail << "bf16 bit-oracle " << (ok ? "exact" : "MISMATCH") << "; ";
    }
    {  // fused attention vs composed oracle
        WorkerPool pool(4);
        Rng rng(20240107);
        double worst = 0.0;
        for (int rep = 0; rep < 10; ++rep) {
            const int n = 1 + static_cast<int>(rng.next_index(2));
            const int h = 1 + static_cast<int>(rng.next_index(3));
            const int l = 2 + static_cast<int>(rng.next_index(48));
            const int d = 1 + static_cast<int>(rng.next_index(24));
            Tensor q({n, h, l, d}), k({n, h, l, d}), v({n, h, l, d});
            rng.fill_gaussian(q);
            rng.fill_gaussian(k);
            rng.fill_gaussian(v);
            Tensor out = kernels::fused_mha(q, k, v, pool);
            auto ref = refops::attention(refops::to_double(q), refops::to_double(k), refops::to_double(v), n, h, l, d);
            worst = std::max(worst, refops::max_rel_diff(out, ref));
        }
        pass = pass && worst <= 1e-5;
        detail << "fused_mha worst " << fmt(worst, 8) << (worst <= 1e-5 ? "" : " FAIL") << "; ";
    }
    {  // int8 gemm vs dequantized f32 oracle
        Rng rng(20240108);
        double worst = 0.0;
        for (int rep = 0; rep < 10; ++rep) {
            const int m = 16, k = 16, n = 16;
            QuantizedTensor qa, qb;
            qa.shape = {m, k};
            qb.shape = {k, n};
            qa.data.resize(static_cast<size_t>(m) * k);
            qb.data.resize(static_cast<size_t>(k) * n);
            for (auto& v : qa.data) v = static_cast<int8_t>(static_cast<int>(rng.next_index(255)) - 127);
            for (auto& v : qb.data) v = static_cast<int8_t>(static_cast<int>(rng.next_index(255)) - 127);
            auto pa = QuantParams::per_tensor(0.009f + 0.01f * static_cast<float>(rng.next_double()));
            std::vector<float> scales;
            for (int i = 0; i < n; ++i) scales.push_back(0.004f + 0.02f * static_cast<float>(rng.next_double()));
            auto pb = QuantParams::per_channel(1, scales);
            Tensor c = kernels::int8_gemm(qa, qb, pa, pb);
            Tensor da = dequantize(qa, pa), db = dequantize(qb, pb);
            auto ref = refops::linear(refops::to_double(da), m, k, refops::to_double(db), n, {});
            for (int64_t i = 0; i < c.numel(); ++i)
                worst = std::max(worst, std::fabs(static_cast<double>(c.ptr()[i]) - ref[static_cast<size_t>(i)]));
        }
        pass = pass && worst <= 1e-4;
        detail << "int8_gemm worst abs " << fmt(worst, 8) << (worst <= 1e-4 ? "" : " FAIL");
    }

    return {pass, detail.str()};
}

// criterion 6: policy exactness at the paper configurations.
CriterionResult criterion6() {
    PrecisionPolicy p3{50, 3, PrecisionFormat::BF16, PrecisionFormat::INT8};
    std::vector<int> high;
    for (int i = 0; i < 50; ++i)
        if (precision_for_step(p3, i) == PrecisionFormat::BF16) high.push_back(i);
    const bool ok3 = high == std::vector<int>{0, 1, 2, 47, 48, 49};

    PrecisionPolicy p5{50, 5, PrecisionFormat::BF16, PrecisionFormat::INT8};
    int count5 = 0;
    std::vector<int> high5;
    for (int i = 0; i < 50; ++i)
        if (precision_for_step(p5, i) == PrecisionFormat::BF16) {
            ++count5;
            high5.push_back(i);
        }
    const bool ok5 = count5 == 10 && high5 == std::vector<int>{0, 1, 2, 3, 4, 45, 46, 47, 48, 49};

    CriterionResult r;
    r.pass = ok3 && ok5;
    r.detail = std::string("n=50 k=3 high steps {0,1,2,47,48,49}: ") + (ok3 ? "exact" : "WRONG") +
               "; n=50 k=5 high count " + std::to_string(count5);
    return r;
}

// ---------------------------------------------------------------------------
// shared heavy artifacts for criteria 7-10

constexpr int kPipelineSeeds = 5;

struct Artifacts {
    RunConfig cfg;
    UnetModel model;
    std::vector<UnetModel> students;  // one QAT run per pipeline seed
    std::vector<UnetModel> ptqs;      // paired calibration-only baselines
    Tensor dataset;
    FeatureProjector proj;
    FrechetStats ref;
    double build_seconds = 0.0;
};

RunConfig acceptance_config() {
    RunConfig cfg = RunConfig::from_json(nlohmann::json::object());
    cfg.train.steps = 2000;
    cfg.train.batch_size = 16;
    cfg.train.seed = 1001;
    cfg.qat.max_steps = 500;
    cfg.qat.batch_size = 16;
    cfg.dataset.seed = 7777;
    cfg.dataset.count = 2000;
    cfg.eval.gen_images = 500;
    return cfg;
}

Artifacts build_artifacts(const fs::path& work, WorkerPool& pool) {
    fs::create_directories(work);
    Artifacts a;
    a.cfg = acceptance_config();
    ToyDataset ds{a.cfg.dataset.seed, a.cfg.dataset.count, a.cfg.model.image_size};
    a.dataset = ds.generate();
    a.proj = FeatureProjector::create(static_cast<int>(a.dataset.numel() / a.dataset.dim(0)),
                                      a.cfg.eval.feature_dim);
    a.ref = FrechetStats::from_features(a.proj.apply(a.dataset));
    NoiseSchedule sched = a.cfg.make_schedule();

    const fs::path model_path = work / "model.qdc";
    const fs::path meta_path = work / "build_meta.json";
    auto student_path = [&](int i) { return work / ("student_" + std::to_string(i) + ".qdc"); };
    auto ptq_path = [&](int i) { return work / ("student_ptq_" + std::to_string(i) + ".qdc"); };

    bool cached = fs::exists(model_path) && fs::exists(meta_path);
    for (int i = 0; i < kPipelineSeeds && cached; ++i) {
        cached = fs::exists(student_path(i)) && fs::exists(ptq_path(i));
    }
    if (cached) {
        a.model = load_model(model_path.string());
        for (int i = 0; i < kPipelineSeeds; ++i) {
            a.students.push_back(load_model(student_path(i).string()));
            a.ptqs.push_back(load_model(ptq_path(i).string()));
        }
        std::ifstream is(meta_path);
        a.build_seconds = nlohmann::json::parse(is).at("build_seconds").get<double>();
        return a;
    }

    const double t0 = now_seconds();
    std::cout << "  [artifacts] training " << a.cfg.train.steps << " steps..." << std::endl;
    a.model = UnetModel::init(a.cfg.model, a.cfg.train.seed);
    {
        Adam opt(a.cfg.train.lr);
        Rng rng(a.cfg.train.seed + 1);
        for (int step = 1; step <= a.cfg.train.steps; ++step) {
            opt.set_learning_rate(cosine_lr(step, a.cfg.train.steps, a.cfg.train.lr, a.cfg.train.lr_min));
            std::vector<int64_t> idx(static_cast<size_t>(a.cfg.train.batch_size));
            for (auto& i : idx) i = rng.next_index(a.dataset.dim(0));
            const float loss = train_step(a.model, gather_batch(a.dataset, idx), sched, opt, rng, pool);
            if (step % 500 == 0) std::cout << "  [artifacts] train step " << step << " loss " << loss << std::endl;
        }
    }
    for (int i = 0; i < kPipelineSeeds; ++i) {
        std::cout << "  [artifacts] QAT run " << i << " (" << a.cfg.qat.max_steps << " steps) + paired PTQ..."
                  << std::endl;
        QatConfig qc = a.cfg.qat;
        qc.seed = 2002 + static_cast<uint64_t>(i);
        QatState st = init_qat(a.model, qc);
        run_qat(st, a.dataset, qc.max_steps, pool, sched);
        if (st.teacher.parameter_hash() != st.teacher_hash) {
            throw std::runtime_error("acceptance: teacher drifted during QAT");
        }
        a.students.push_back(std::move(st.student));
        a.ptqs.push_back(calibrate_ptq(a.model, a.dataset, a.cfg.qat.calibration_batches, a.cfg.qat.batch_size,
                                       3003 + static_cast<uint64_t>(i), sched, pool));
    }
    a.build_seconds = now_seconds() - t0;

    save_model(a.model, model_path.string());
    for (int i = 0; i < kPipelineSeeds; ++i) {
        save_model(a.students[static_cast<size_t>(i)], student_path(i).string());
        save_model(a.ptqs[static_cast<size_t>(i)], ptq_path(i).string());
    }
    std::ofstream(meta_path) << nlohmann::json{{"build_seconds", a.build_seconds}}.dump(2) << "\n";
    return a;
}

// Per-config scores over the paired pipeline seeds: run i uses QAT/PTQ seed i
// and sampling seed 11+i, so the medians marginalize the training lottery as
// well as the metric noise. The fp32/bf16 rows rerun the fixed teacher on the
// same sampling seeds. Cached in the work dir.
nlohmann::json quality_scores(Artifacts& a, const fs::path& work, WorkerPool& pool) {
    const fs::path path = work / "quality_scores.json";
    if (fs::exists(path)) {
        std::ifstream is(path);
        return nlohmann::json::parse(is);
    }
    NoiseSchedule sched = a.cfg.make_schedule();
    const int n = a.cfg.policy.steps;
    const int hw = a.cfg.model.image_size;

    struct Entry {
        std::string name;
        PrecisionPolicy policy;
        bool ptq_model;  // use the paired PTQ baseline instead of the QAT student
        bool in_budget;  // counted toward the criterion-7 runtime budget
    };
    std::vector<Entry> entries = {
        {"fp32", {n, 0, PrecisionFormat::BF16, PrecisionFormat::FP32}, false, true},
        {"bf16", {n, 0, PrecisionFormat::BF16, PrecisionFormat::BF16}, false, false},
        {"int8", {n, 0, PrecisionFormat::BF16, PrecisionFormat::INT8}, false, true},
        {"mixed6", {n, 3, PrecisionFormat::BF16, PrecisionFormat::INT8}, false, false},
        {"mixed10", {n, 5, PrecisionFormat::BF16, PrecisionFormat::INT8}, false, true},
        {"int8_ptq", {n, 0, PrecisionFormat::BF16, PrecisionFormat::INT8}, true, false},
    };
    nlohmann::json out = nlohmann::json::object();
    double budget_seconds = 0.0;
    const double t0 = now_seconds();
    for (auto& e : entries) {
        const double te = now_seconds();
        std::vector<double> fds;
        for (int i = 0; i < kPipelineSeeds; ++i) {
            UnetModel* low = e.ptq_model ? &a.ptqs[static_cast<size_t>(i)] : &a.students[static_cast<size_t>(i)];
            Sampler sampler(&a.model, low, sched, pool);
            const uint64_t seed = 11 + static_cast<uint64_t>(i);
            const double fd = evaluate_config(sampler, e.policy, a.ref, a.proj, a.cfg.eval.gen_images, hw, hw, seed);
            fds.push_back(fd);
            std::cout << "  [quality] " << e.name << " run " << i << " frechet " << fmt(fd) << std::endl;
        }
        out[e.name] = fds;
        if (e.in_budget) budget_seconds += now_seconds() - te;
    }
    out["eval_seconds"] = now_seconds() - t0;
    out["budget_eval_seconds"] = budget_seconds;
    std::ofstream(path) << out.dump(2) << "\n";
    return out;
}

double median_of(const nlohmann::json& arr) {
    std::vector<double> v = arr.get<std::vector<double>>();
    std::sort(v.begin(), v.end());
    return quantile_sorted(v, 0.5);
}

// criterion 7: quality trend FD(FP32) <= FD(mixed10)+tau, FD(mixed10) <= FD(int8).
CriterionResult criterion7(const fs::path& work) {
    WorkerPool pool(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
    Artifacts a = build_artifacts(work, pool);
    nlohmann::json scores = quality_scores(a, work, pool);
    const double fp32 = median_of(scores.at("fp32"));
    const double bf16 = median_of(scores.at("bf16"));
    const double int8 = median_of(scores.at("int8"));
    const double mixed6 = median_of(scores.at("mixed6"));
    const double mixed10 = median_of(scores.at("mixed10"));
    const double tau = 0.10 * fp32;
    const double total_s = a.build_seconds + scores.at("budget_eval_seconds").get<double>();

    const bool trend1 = fp32 <= mixed10 + tau;
    const bool trend2 = mixed10 <= int8;
    const bool budget = total_s <= 30.0 * 60.0;
    CriterionResult r;
    r.pass = trend1 && trend2 && budget;
    std::string pairs;
    {
        const auto m10 = scores.at("mixed10").get<std::vector<double>>();
        const auto i8 = scores.at("int8").get<std::vector<double>>();
        for (size_t i = 0; i < m10.size(); ++i) pairs += (i ? "," : "") + fmt(m10[i] - i8[i], 2);
    }
    r.detail = "median frechet: fp32 " + fmt(fp32) + ", bf16 " + fmt(bf16) + ", mixed10 " + fmt(mixed10) +
               ", mixed6 " + fmt(mixed6) + ", int8 " + fmt(int8) + "; fp32<=mixed10+tau(" + fmt(tau) + "): " +
               (trend1 ? "yes" : "NO") + ", mixed10<=int8: " + (trend2 ? "yes" : "NO") +
               " (paired mixed10-int8 diffs: " + pairs + "), runtime " + fmt(total_s / 60.0, 1) + " min";
    return r;
}

// criterion 8: QAT'd student beats the PTQ baseline in median over paired seeds.
CriterionResult criterion8(const fs::path& work) {
    WorkerPool pool(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
    Artifacts a = build_artifacts(work, pool);
    nlohmann::json scores = quality_scores(a, work, pool);
    const double qat = median_of(scores.at("int8"));
    const double ptq = median_of(scores.at("int8_ptq"));
    CriterionResult r;
    r.pass = qat <= ptq;
    std::string pairs;
    {
        const auto q = scores.at("int8").get<std::vector<double>>();
        const auto p = scores.at("int8_ptq").get<std::vector<double>>();
        for (size_t i = 0; i < q.size(); ++i) pairs += (i ? "," : "") + fmt(q[i] - p[i], 2);
    }
    r.detail = "median frechet qat-int8 " + fmt(qat) + " vs ptq-int8 " + fmt(ptq) + " (paired qat-ptq diffs: " +
               pairs + ")";
    return r;
}

// criterion 9: latency ordering all-low <= mixed(k=5) <= all-high on the
// GEMM-dominated benchmark shape, 20 repeats each.
CriterionResult criterion9(const fs::path& work) {
    WorkerPool pool(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
    fs::create_directories(work);
    RunConfig cfg = acceptance_config();
    UnetConfig bench_cfg = cfg.model;
    bench_cfg.image_size = cfg.bench.image_size;
    bench_cfg.base_channels = cfg.bench.base_channels;
    UnetModel full = UnetModel::init(bench_cfg, 909);
    NoiseSchedule sched = cfg.make_schedule();
    Tensor data = ToyDataset{4, 256, bench_cfg.image_size}.generate();
    UnetModel student = calibrate_ptq(full, data, 8, 8, 910, sched, pool);
    Sampler sampler(&full, &student, sched, pool);

    const int n = 50;
    PrecisionPolicy low{n, 0, PrecisionFormat::BF16, PrecisionFormat::INT8};
    PrecisionPolicy mixed{n, 5, PrecisionFormat::BF16, PrecisionFormat::INT8};
    PrecisionPolicy high{n, 25, PrecisionFormat::BF16, PrecisionFormat::INT8};
    BenchRow rl = bench_policy_latency(sampler, low, bench_cfg.image_size, bench_cfg.image_size, 20, 3);
    BenchRow rm = bench_policy_latency(sampler, mixed, bench_cfg.image_size, bench_cfg.image_size, 20, 3);
    BenchRow rh = bench_policy_latency(sampler, high, bench_cfg.image_size, bench_cfg.image_size, 20, 3);

    std::vector<BenchRow> rows = {rh, rm, rl};
    write_bench_csv((work / "latency_report.csv").string(), rows);
    write_bench_markdown((work / "latency_report.md").string(), rows);

    CriterionResult r;
    r.pass = rl.median_ms <= rm.median_ms && rm.median_ms <= rh.median_ms;
    r.detail = "median ms per 50-step sample: int8 " + fmt(rl.median_ms, 1) + " <= mixed10 " +
               fmt(rm.median_ms, 1) + " <= bf16 " + fmt(rh.median_ms, 1) + " (speedup all-high/all-low " +
               fmt(rh.median_ms / rl.median_ms, 2) + "x, reported not asserted)";
    return r;
}

// criterion 10: teacher immutability through QAT plus byte-reproducible
// fixed-seed end-to-end runs.
CriterionResult criterion10() {
    WorkerPool pool(2);
    UnetConfig cfg;
    cfg.base_channels = 8;
    cfg.groups = 2;
    cfg.image_size = 8;
    NoiseSchedule sched = NoiseSchedule::linear();
    Tensor data = ToyDataset{555, 128, 8}.generate();

    auto pipeline = [&]() {
        UnetModel model = UnetModel::init(cfg, 1111);
        Adam opt(1e-3f);
        Rng rng(1112);
        for (int step = 0; step < 40; ++step) {
            std::vector<int64_t> idx(8);
            for (auto& i : idx) i = rng.next_index(data.dim(0));
            train_step(model, gather_batch(data, idx), sched, opt, rng, pool);
        }
        QatConfig qc;
        qc.max_steps = 15;
        qc.batch_size = 8;
        qc.seed = 1113;
        QatState st = init_qat(model, qc);
        const std::string teacher_before = st.teacher.parameter_hash();
        run_qat(st, data, 15, pool, sched);
        const bool teacher_ok = st.teacher.parameter_hash() == teacher_before;

        Sampler sampler(&model, &st.student, sched, pool);
        PrecisionPolicy policy{10, 2, PrecisionFormat::BF16, PrecisionFormat::INT8};
        Tensor samples = sampler.sample(policy, 4, 8, 8, 2024);

        std::stringstream model_bytes, student_bytes;
        {
            std::vector<const Tensor*> tv;
            for (const auto& p : model.params) tv.push_back(&p.value);
            write_checkpoint_blob(model_bytes, nlohmann::json{{"k", 1}}, tv);
            std::vector<const Tensor*> sv;
            for (const auto& p : st.student.params) sv.push_back(&p.value);
            write_checkpoint_blob(student_bytes, nlohmann::json{{"k", 1}}, sv);
        }
        return std::tuple{teacher_ok, model_bytes.str(), student_bytes.str(), samples.data};
    };

    auto [ok1, m1, s1, img1] = pipeline();
    auto [ok2, m2, s2, img2] = pipeline();
    CriterionResult r;
    const bool repro = m1 == m2 && s1 == s2 && img1 == img2;
    r.pass = ok1 && ok2 && repro;
    r.detail = std::string("teacher hash constant: ") + (ok1 && ok2 ? "yes" : "NO") +
               "; end-to-end byte reproducibility: " + (repro ? "yes" : "NO");
    return r;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria runner"};
    int criterion = 0;  // 0 = all
    std::string work_dir = "acceptance_work";
    app.add_option("--criterion", criterion, "run a single criterion (1-10)");
    app.add_option("--work-dir", work_dir, "cache directory for trained artifacts");
    CLI11_PARSE(app, argc, argv);

    const fs::path work(work_dir);
    std::vector<int> to_run;
    if (criterion == 0) {
        for (int i = 1; i <= 10; ++i) to_run.push_back(i);
    } else {
        to_run.push_back(criterion);
    }

    bool all_pass = true;
    for (int c : to_run) {
        CriterionResult res;
        const double t0 = now_seconds();
        try {
            switch (c) {
                case 1: res = criterion1(); break;
                case 2: res = criterion2(); break;
                case 3: res = criterion3(); break;
                case 4: res = criterion4(); break;
                case 5: res = criterion5(); break;
                case 6: res = criterion6(); break;
                case 7: res = criterion7(work); break;
                case 8: res = criterion8(work); break;
                case 9: res = criterion9(work); break;
                case 10: res = criterion10(); break;
                default:
                    std::cerr << "error: unknown criterion " << c << std::endl;
                    return 2;
            }
        } catch (const std::exception& e) {
            res.pass = false;
            res.detail = std::string("exception: ") + e.what();
        }
        const double dt = now_seconds() - t0;
        std::cout << "criterion " << c << ": " << (res.pass ? "PASS" : "FAIL") << " - " << res.detail << " ["
                  << fmt(dt, 1) << " s]" << std::endl;
        all_pass = all_pass && res.pass;
    }
    return all_pass ? 0 : 1;
}
