#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdiff/diffusion.hpp"
#include "qdiff/tensor.hpp"
#include "qdiff/unet.hpp"

namespace qdiff {

struct QatConfig {
    int max_steps = 500;  // N
    float lambda_kd = 1.0f;
    float lr = 5e-5f;  // fine-tuning rate, well below the training rate
    int batch_size = 16;
    std::string kd_loss = "mse";
    int calibration_batches = 64;
    uint64_t seed = 1;

    void validate() const {
        if (max_steps < 1) throw std::invalid_argument("qat: max_steps must be >= 1");
        if (lambda_kd < 0.0f) throw std::invalid_argument("qat: lambda_kd must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("qat: batch_size must be >= 1");
        if (kd_loss != "mse") throw std::invalid_argument("qat: unsupported kd_loss '" + kd_loss + "'");
    }
};

struct StepLosses {
    float task = 0.0f;
    float kd = 0.0f;
    float total = 0.0f;
};

// Teacher/student pair plus the training state that advances them.
struct QatState {
    UnetModel teacher;  // frozen full-precision copy
    UnetModel student;  // fake-quantized copy under training
    QatConfig cfg;
    Adam opt;
    Rng rng;
    int step = 0;
    std::string teacher_hash;

    QatState(UnetModel t, UnetModel s, const QatConfig& c)
        : teacher(std::move(t)), student(std::move(s)), cfg(c), opt(c.lr), rng(c.seed) {
        teacher_hash = teacher.parameter_hash();
    }
};

// Teacher = deep copy without quantizers; student = same weights with fake
// quantization enabled on the designated layers. With quantization disabled
// the two are bit-identical.
inline QatState init_qat(const UnetModel& pretrained, const QatConfig& cfg) {
    UnetModel teacher = pretrained;
    teacher.role = Role::Teacher;
    for (auto& q : teacher.quant) q.quantized = false;
    UnetModel student = pretrained;
    student.enable_quantization();
    return QatState(std::move(teacher), std::move(student), cfg);
}

// One loop iteration of the distillation algorithm: run the training workflow
// to the Unet call, evaluate teacher (no gradients) and student on the same
// (x_t, t), add the distillation term, update the student only.
inline StepLosses qat_step(QatState& st, const Tensor& batch_x0, const NoiseSchedule& sched, WorkerPool& pool) {
    std::vector<int> t;
    Tensor eps;
    sample_noise_pair(st.rng, sched, batch_x0, &t, &eps);
    Tensor x_t = forward_diffuse(batch_x0, t, eps, sched);

    Tensor o_t;
    {
        Tape teacher_tape;
        teacher_tape.pool = &pool;
        UnetTapeForward tf = unet_forward_tape(st.teacher, teacher_tape, x_t, t, QuantMode::Off,
                                               /*train_params=*/false);
        o_t = teacher_tape.value(tf.out);
    }

    Tape tape;
    tape.pool = &pool;
    UnetTapeForward fw = unet_forward_tape(st.student, tape, x_t, t, QuantMode::Qat, /*train_params=*/true);
    const int target = tape.leaf(eps);
    const int teacher_out = tape.leaf(std::move(o_t));
    const int task = ops::mse_loss(tape, fw.out, target);
    const int kd = ops::mse_loss(tape, fw.out, teacher_out);
    const int total = ops::add(tape, task, ops::mul_scalar(tape, kd, st.cfg.lambda_kd));

    StepLosses losses;
    losses.task = tape.value(task).ptr()[0];
    losses.kd = tape.value(kd).ptr()[0];
    losses.total = tape.value(total).ptr()[0];
    if (!std::isfinite(losses.total)) {
        throw NumericalError("qat: non-finite loss at step " + std::to_string(st.step + 1));
    }

    tape.backward(total);
    std::vector<const Tensor*> grads(st.student.params.size(), nullptr);
    for (size_t i = 0; i < st.student.params.size(); ++i) {
        const int leaf = fw.param_leaf[i];
        if (leaf >= 0 && tape.has_grad(leaf)) grads[i] = &tape.grad(leaf);
    }
    st.opt.step(st.student.params, grads);
    ++st.step;
    return losses;
}

using QatLogFn = std::function<void(int step, const StepLosses&, const UnetModel& student)>;

// Runs N steps with uniform random batch sampling, then freezes the
// observer-derived QuantParams into the student. N = 0 leaves the student
// exactly as inserted.
inline void run_qat(QatState& st, const Tensor& dataset, int n_steps, WorkerPool& pool,
                    const NoiseSchedule& sched, const QatLogFn& log = nullptr) {
    if (dataset.ndim() != 4 || dataset.dim(0) < 1) throw std::invalid_argument("qat: dataset must be a nonempty [N,C,H,W] tensor");
    if (n_steps < 0) throw std::invalid_argument("qat: negative step count");
    for (int k = 0; k < n_steps; ++k) {
        std::vector<int64_t> idx(static_cast<size_t>(st.cfg.batch_size));
        for (auto& i : idx) i = st.rng.next_index(dataset.dim(0));
        Tensor batch = gather_batch(dataset, idx);
        StepLosses l = qat_step(st, batch, sched, pool);
        if (log) log(st.step, l, st.student);
    }
    if (n_steps > 0) st.student.freeze_quantization();
}

// Post-training-quantization baseline: observers watch clean (unquantized)
// activations over calibration batches, then scales freeze. No training.
inline UnetModel calibrate_ptq(const UnetModel& pretrained, const Tensor& dataset, int batches,
                               int batch_size, uint64_t seed, const NoiseSchedule& sched, WorkerPool& pool) {
    if (batches < 1) throw std::invalid_argument("calibrate: need at least one batch");
    UnetModel model = pretrained;
    model.enable_quantization();
    Rng rng(seed);
    for (int b = 0; b < batches; ++b) {
        std::vector<int64_t> idx(static_cast<size_t>(batch_size));
        for (auto& i : idx) i = rng.next_index(dataset.dim(0));
        Tensor batch = gather_batch(dataset, idx);
        std::vector<int> t;
        Tensor eps;
        sample_noise_pair(rng, sched, batch, &t, &eps);
        Tensor x_t = forward_diffuse(batch, t, eps, sched);
        Tape tape;
        tape.pool = &pool;
        unet_forward_tape(model, tape, x_t, t, QuantMode::Observe, /*train_params=*/false);
    }
    model.freeze_quantization();
    return model;
}

}  // namespace qdiff
