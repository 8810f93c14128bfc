// qdiff: train / quantize / sample / evaluate / benchmark the toy diffusion
// runtime. One JSON config file drives everything; --set key.path=value
// overrides individual entries. Exit codes: 0 ok, 2 config error, 3 runtime
// or numerical error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qdiff/config.hpp"
#include "qdiff/diffusion.hpp"
#include "qdiff/engine.hpp"
#include "qdiff/eval.hpp"
#include "qdiff/image_io.hpp"
#include "qdiff/model_io.hpp"
#include "qdiff/qat.hpp"
#include "qdiff/unet.hpp"

namespace fs = std::filesystem;
using namespace qdiff;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    int threads = -1;
    std::string out;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
    cmd->add_option("--config", args->config_path, "JSON config file (defaults apply when omitted)");
    cmd->add_option("--set", args->sets, "override a config entry, e.g. --set train.steps=100")->take_all();
    cmd->add_option("--threads", args->threads, "worker pool size (default: logical cores)");
    cmd->add_option("--out", args->out, "output directory (default: config output_dir)");
}

RunConfig resolve_config(const CommonArgs& args) {
    RunConfig cfg = RunConfig::load(args.config_path, args.sets);
    if (args.threads >= 0) cfg.threads = args.threads;
    if (!args.out.empty()) cfg.output_dir = args.out;
    return cfg;
}

int pool_size(const RunConfig& cfg) {
    if (cfg.threads > 0) return cfg.threads;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void require_file(const std::string& path, const char* what) {
    if (path.empty()) throw ConfigError(std::string("missing required ") + what + " path");
    if (!fs::exists(path)) throw ConfigError(std::string(what) + " file '" + path + "' does not exist");
}

fs::path prepare_out_dir(const RunConfig& cfg) {
    fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    return dir;
}

// ---- train ---------------------------------------------------------------------

int cmd_train(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    WorkerPool pool(pool_size(cfg));
    const fs::path out = prepare_out_dir(cfg);

    ToyDataset ds{cfg.dataset.seed, cfg.dataset.count, cfg.model.image_size};
    Tensor data = ds.generate();
    UnetModel model = UnetModel::init(cfg.model, cfg.train.seed);
    NoiseSchedule sched = cfg.make_schedule();
    Adam opt(cfg.train.lr);
    Rng rng(cfg.train.seed + 1);

    std::ofstream log(out / "train_log.jsonl");
    for (int step = 1; step <= cfg.train.steps; ++step) {
        opt.set_learning_rate(cosine_lr(step, cfg.train.steps, cfg.train.lr, cfg.train.lr_min));
        std::vector<int64_t> idx(static_cast<size_t>(cfg.train.batch_size));
        for (auto& i : idx) i = rng.next_index(data.dim(0));
        const float loss = train_step(model, gather_batch(data, idx), sched, opt, rng, pool);
        if (step % cfg.train.log_every == 0 || step == cfg.train.steps) {
            log << nlohmann::json{{"step", step}, {"loss", loss}}.dump() << "\n";
            std::cout << "step " << step << "/" << cfg.train.steps << " loss " << loss << std::endl;
        }
    }
    const fs::path ckpt = out / "model.qdc";
    save_model(model, ckpt.string());
    std::cout << "saved " << ckpt.string() << std::endl;
    return 0;
}

// ---- qat -----------------------------------------------------------------------

int cmd_qat(const CommonArgs& args, const std::string& checkpoint, bool ptq_only) {
    RunConfig cfg = resolve_config(args);
    require_file(checkpoint, "checkpoint");
    WorkerPool pool(pool_size(cfg));
    const fs::path out = prepare_out_dir(cfg);

    UnetModel pretrained = load_model(checkpoint);
    ToyDataset ds{cfg.dataset.seed, cfg.dataset.count, pretrained.cfg.image_size};
    Tensor data = ds.generate();
    NoiseSchedule sched = cfg.make_schedule();

    fs::path ckpt;
    if (ptq_only) {
        // PTQ baseline: calibration only, no training.
        UnetModel student = calibrate_ptq(pretrained, data, cfg.qat.calibration_batches, cfg.qat.batch_size,
                                          cfg.qat.seed, sched, pool);
        ckpt = out / "student_ptq.qdc";
        save_model(student, ckpt.string());
    } else {
        QatState st = init_qat(pretrained, cfg.qat);
        std::ofstream log(out / "qat_log.jsonl");
        const int every = std::max(1, cfg.qat.max_steps / 20);
        run_qat(st, data, cfg.qat.max_steps, pool, sched,
                [&](int step, const StepLosses& l, const UnetModel& student) {
                    if (step % every == 0 || step == cfg.qat.max_steps) {
                        nlohmann::json ranges = nlohmann::json::object();
                        for (const auto& q : student.quant) ranges[q.layer] = q.observer.running_max;
                        log << nlohmann::json{{"step", step},
                                              {"task_loss", l.task},
                                              {"kd_loss", l.kd},
                                              {"total", l.total},
                                              {"observer_ranges", ranges}}
                                   .dump()
                            << "\n";
                        std::cout << "qat step " << step << "/" << cfg.qat.max_steps << " task " << l.task
                                  << " kd " << l.kd << std::endl;
                    }
                });
        if (st.teacher.parameter_hash() != st.teacher_hash) {
            throw NumericalError("qat: teacher parameters changed during training");
        }
        ckpt = out / "student.qdc";
        save_model(st.student, ckpt.string());
    }
    std::cout << "saved " << ckpt.string() << std::endl;
    return 0;
}

// ---- sample --------------------------------------------------------------------

int cmd_sample(const CommonArgs& args, const std::string& checkpoint, const std::string& student_ckpt,
               int steps, int boundary, int64_t seed, int count, bool deterministic) {
    RunConfig cfg = resolve_config(args);
    WorkerPool pool(pool_size(cfg));
    const fs::path out = prepare_out_dir(cfg);

    PrecisionPolicy policy = cfg.policy;
    if (steps > 0) policy.steps = steps;
    if (boundary >= 0) policy.boundary = boundary;
    policy.validate();

    std::unique_ptr<UnetModel> full, student;
    if (!checkpoint.empty()) {
        require_file(checkpoint, "checkpoint");
        full = std::make_unique<UnetModel>(load_model(checkpoint));
    }
    if (!student_ckpt.empty()) {
        require_file(student_ckpt, "student checkpoint");
        student = std::make_unique<UnetModel>(load_model(student_ckpt));
    }
    if (!full && !student) throw ConfigError("sample: provide --checkpoint and/or --student");

    const UnetModel* shape_model = full ? full.get() : student.get();
    const int hw = shape_model->cfg.image_size;
    NoiseSchedule sched = cfg.make_schedule();
    Sampler sampler(full.get(), student.get(), sched, pool);
    std::vector<PrecisionFormat> step_formats;
    Tensor images = sampler.sample(policy, count, hw, hw, static_cast<uint64_t>(seed), !deterministic,
                                   &step_formats);

    const fs::path samples_dir = out / "samples";
    fs::create_directories(samples_dir);
    nlohmann::json files = nlohmann::json::array();
    const int64_t chw = images.numel() / images.dim(0);
    for (int i = 0; i < images.dim(0); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05d.pgm", i);
        write_pgm((samples_dir / name).string(), images.ptr() + static_cast<int64_t>(i) * chw, hw, hw);
        files.push_back(name);
    }
    nlohmann::json fmts = nlohmann::json::array();
    for (auto f : step_formats) fmts.push_back(format_name(f));
    nlohmann::json meta{{"seed", seed},
                        {"count", count},
                        {"stochastic", !deterministic},
                        {"policy",
                         {{"steps", policy.steps},
                          {"boundary", policy.boundary},
                          {"high", format_name(policy.high)},
                          {"low", format_name(policy.low)}}},
                        {"per_step_formats", fmts},
                        {"checkpoint", checkpoint},
                        {"student", student_ckpt},
                        {"images", files}};
    std::ofstream(samples_dir / "meta.json") << meta.dump(2) << "\n";
    std::cout << "wrote " << count << " images to " << samples_dir.string() << std::endl;
    return 0;
}

// ---- eval ----------------------------------------------------------------------

std::vector<PrecisionPolicy> five_config_matrix(int steps) {
    const int half_up = (steps + 1) / 2;
    PrecisionPolicy fp32{steps, 0, PrecisionFormat::BF16, PrecisionFormat::FP32};
    PrecisionPolicy bf16{steps, 0, PrecisionFormat::BF16, PrecisionFormat::BF16};
    PrecisionPolicy int8{steps, 0, PrecisionFormat::BF16, PrecisionFormat::INT8};
    PrecisionPolicy mix6{steps, std::min(3, half_up), PrecisionFormat::BF16, PrecisionFormat::INT8};
    PrecisionPolicy mix10{steps, std::min(5, half_up), PrecisionFormat::BF16, PrecisionFormat::INT8};
    return {fp32, bf16, int8, mix6, mix10};
}

std::string policy_row_label(const PrecisionPolicy& p) {
    if (p.boundary == 0) {
        if (p.low == PrecisionFormat::FP32) return "FP32";
        if (p.low == PrecisionFormat::BF16) return "BF16";
        return "INT8";
    }
    return "BF16 (" + std::to_string(2 * p.boundary) + " Steps)/INT8";
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint, const std::string& student_ckpt) {
    RunConfig cfg = resolve_config(args);
    require_file(checkpoint, "checkpoint");
    require_file(student_ckpt, "student checkpoint");
    WorkerPool pool(pool_size(cfg));
    const fs::path out = prepare_out_dir(cfg);

    UnetModel full = load_model(checkpoint);
    UnetModel student = load_model(student_ckpt);
    const int hw = full.cfg.image_size;

    ToyDataset ds{cfg.dataset.seed, cfg.dataset.count, hw};
    Tensor ref_images = ds.generate();
    FeatureProjector proj = FeatureProjector::create(static_cast<int>(ref_images.numel() / ref_images.dim(0)),
                                                     cfg.eval.feature_dim);
    FrechetStats ref = FrechetStats::from_features(proj.apply(ref_images));

    NoiseSchedule sched = cfg.make_schedule();
    Sampler sampler(&full, &student, sched, pool);

    std::vector<EvalRow> rows;
    for (const auto& policy : five_config_matrix(cfg.policy.steps)) {
        std::vector<double> fds;
        for (uint64_t seed : cfg.eval.seeds) {
            fds.push_back(evaluate_config(sampler, policy, ref, proj, cfg.eval.gen_images, hw, hw, seed));
        }
        std::sort(fds.begin(), fds.end());
        EvalRow row;
        row.label = policy_row_label(policy);
        row.mix = policy.label();
        row.steps = policy.steps;
        row.boundary = policy.boundary;
        row.frechet = quantile_sorted(fds, 0.5);
        rows.push_back(row);
        std::cout << row.label << ": frechet " << row.frechet << std::endl;
    }
    write_eval_csv((out / "eval_report.csv").string(), rows);
    write_eval_markdown((out / "eval_report.md").string(), rows);
    std::cout << "wrote " << (out / "eval_report.csv").string() << std::endl;
    return 0;
}

// ---- bench ---------------------------------------------------------------------

int cmd_bench(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    WorkerPool pool(pool_size(cfg));
    const fs::path out = prepare_out_dir(cfg);

    // Latency rows use a synthetic model at the benchmark shape (weights do not
    // affect kernel timing); scales come from a short PTQ calibration.
    UnetConfig bench_cfg = cfg.model;
    bench_cfg.image_size = cfg.bench.image_size;
    bench_cfg.base_channels = cfg.bench.base_channels;
    bench_cfg.validate();
    UnetModel full = UnetModel::init(bench_cfg, 99);
    ToyDataset ds{cfg.dataset.seed, 256, bench_cfg.image_size};
    Tensor data = ds.generate();
    NoiseSchedule sched = cfg.make_schedule();
    UnetModel student = calibrate_ptq(full, data, 8, 8, 5, sched, pool);

    Sampler sampler(&full, &student, sched, pool);
    const int n = cfg.policy.steps;
    std::vector<PrecisionPolicy> policies = {
        {n, (n + 1) / 2, PrecisionFormat::BF16, PrecisionFormat::INT8},            // all high
        {n, std::min(5, (n + 1) / 2), PrecisionFormat::BF16, PrecisionFormat::INT8},  // mixed
        {n, 0, PrecisionFormat::BF16, PrecisionFormat::INT8},                      // all low
    };
    std::vector<BenchRow> rows;
    for (const auto& p : policies) {
        BenchRow row = bench_policy_latency(sampler, p, bench_cfg.image_size, bench_cfg.image_size,
                                            cfg.bench.repeats, cfg.bench.warmup);
        rows.push_back(row);
        std::cout << row.label << ": median " << row.median_ms << " ms" << std::endl;
    }
    write_bench_csv((out / "bench_report.csv").string(), rows);
    write_bench_markdown((out / "bench_report.md").string(), rows);

    // Kernel micro-benchmarks, including the GroupNorm pair at the utilization
    // shape (G fewer than workers, C at least workers).
    std::vector<KernelBenchRow> krows;
    {
        Rng rng(31);
        Tensor x({8, 64, 128, 128});
        rng.fill_gaussian(x);
        kernels::GroupNormSpec spec;
        spec.channels = 64;
        spec.groups = 4;
        Tensor y(x.shape);
        for (int threads : {1, 2, 4, 8}) {
            WorkerPool p(threads);
            krows.push_back(bench_kernel("groupnorm_baseline", "8x64x128x128_g4", threads, [&] {
                kernels::groupnorm_baseline_raw(x.ptr(), y.ptr(), 8, 64, 128l * 128, spec, p);
            }, cfg.bench.repeats, cfg.bench.warmup));
            krows.push_back(bench_kernel("groupnorm_channel_parallel", "8x64x128x128_g4", threads, [&] {
                kernels::groupnorm_channel_parallel_raw(x.ptr(), y.ptr(), 8, 64, 128l * 128, spec, p);
            }, cfg.bench.repeats, cfg.bench.warmup));
        }
    }
    {
        const int m = 8192, k = 288, nn = 32;
        Rng rng(32);
        Tensor a({m, k}), b({k, nn});
        rng.fill_gaussian(a);
        rng.fill_gaussian(b);
        PackedBf32 pb = pack_b_f32(b.ptr(), k, nn);
        Tensor c({m, nn});
        krows.push_back(bench_kernel("gemm_f32", "8192x288x32", pool.size(),
                                     [&] { gemm_f32(a.ptr(), pb, c.ptr(), m, &pool); },
                                     cfg.bench.repeats, cfg.bench.warmup));

        QuantizedTensor qb = quantize_int8(b, calibrate(b, QuantGranularity::PerTensor));
        kernels::PackedBInt8 pq = kernels::pack_b_int8(qb.data.data(), k, nn, calibrate(b, QuantGranularity::PerTensor));
        std::vector<int16_t> a16(static_cast<size_t>(m) * k);
        for (int64_t i = 0; i < a.numel(); ++i) a16[static_cast<size_t>(i)] = quantize_scalar(a.ptr()[i], 0.01f);
        std::vector<int32_t> acc(static_cast<size_t>(m) * pq.n_tiles * 16);
        krows.push_back(bench_kernel("int8_gemm", "8192x288x32", pool.size(), [&] {
            kernels::int8_gemm_packed(a16.data(), m, k, pq, 0.01f, nullptr, c.ptr(), acc.data(), &pool);
        }, cfg.bench.repeats, cfg.bench.warmup));
    }
    {
        Rng rng(33);
        Tensor q({4, 2, 256, 16}), k({4, 2, 256, 16}), v({4, 2, 256, 16});
        rng.fill_gaussian(q);
        rng.fill_gaussian(k);
        rng.fill_gaussian(v);
        Tensor o(q.shape);
        krows.push_back(bench_kernel("fused_mha", "4x2x256x16", pool.size(), [&] {
            kernels::fused_mha_raw(q.ptr(), k.ptr(), v.ptr(), o.ptr(), 4, 2, 256, 16, pool);
        }, cfg.bench.repeats, cfg.bench.warmup));
    }
    write_kernel_bench_csv((out / "kernel_bench.csv").string(), krows);
    std::cout << "wrote " << (out / "bench_report.csv").string() << " and kernel_bench.csv" << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantized diffusion runtime"};
    app.require_subcommand(1);

    CommonArgs train_args, qat_args, sample_args, eval_args, bench_args;
    std::string qat_ckpt, sample_ckpt, sample_student, eval_ckpt, eval_student;
    int sample_steps = -1, sample_boundary = -1, sample_count = 16;
    int64_t sample_seed = 1234;
    bool sample_deterministic = false;

    CLI::App* train = app.add_subcommand("train", "train the full-precision model on the toy dataset");
    add_common(train, &train_args);

    CLI::App* qat = app.add_subcommand("qat", "quantization-aware training with distillation");
    add_common(qat, &qat_args);
    qat->add_option("--checkpoint", qat_ckpt, "pretrained model checkpoint")->required();
    bool ptq_only = false;
    qat->add_flag("--ptq", ptq_only, "calibration-only baseline: observe ranges, freeze, no training");

    CLI::App* sample = app.add_subcommand("sample", "generate images with the mixed-precision denoising loop");
    add_common(sample, &sample_args);
    sample->add_option("--checkpoint", sample_ckpt, "full-precision checkpoint (fp32/bf16 steps)");
    sample->add_option("--student", sample_student, "quantized student checkpoint (int8 steps)");
    sample->add_option("--steps", sample_steps, "denoising steps n");
    sample->add_option("--boundary", sample_boundary, "high-precision boundary width k");
    sample->add_option("--seed", sample_seed, "sampling seed");
    sample->add_option("--count", sample_count, "number of images");
    sample->add_flag("--deterministic", sample_deterministic, "zero the per-step noise term");

    CLI::App* eval = app.add_subcommand("eval", "five-configuration quality report");
    add_common(eval, &eval_args);
    eval->add_option("--checkpoint", eval_ckpt, "full-precision checkpoint")->required();
    eval->add_option("--student", eval_student, "quantized student checkpoint")->required();

    CLI::App* bench = app.add_subcommand("bench", "latency report and kernel micro-benchmarks");
    add_common(bench, &bench_args);

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train(train_args);
        if (qat->parsed()) return cmd_qat(qat_args, qat_ckpt, ptq_only);
        if (sample->parsed()) {
            return cmd_sample(sample_args, sample_ckpt, sample_student, sample_steps, sample_boundary,
                              sample_seed, sample_count, sample_deterministic);
        }
        if (eval->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_student);
        if (bench->parsed()) return cmd_bench(bench_args);
        return 2;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 3;
    }
}
