#pragma once

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdiff/diffusion.hpp"
#include "qdiff/model_io.hpp"
#include "qdiff/qat.hpp"
#include "qdiff/unet.hpp"

namespace qdiff {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    int steps = 2000;
    int batch_size = 16;
    float lr = 1e-3f;
    float lr_min = 1e-5f;  // cosine decay floor; lr_min >= lr disables decay
    uint64_t seed = 1;
    int log_every = 50;
};

struct DatasetConfig {
    uint64_t seed = 3;
    int count = 2000;
};

struct EvalConfig {
    int gen_images = 500;
    int feature_dim = 32;
    std::vector<uint64_t> seeds = {11};
};

struct BenchConfig {
    int repeats = 20;
    int warmup = 3;
    int image_size = 32;
    int base_channels = 32;
};

// Whole-run configuration: one JSON file, strict about unknown keys, every
// value overridable with --set key.path=value.
struct RunConfig {
    int threads = 0;  // 0 = hardware concurrency
    std::string output_dir = "out";
    UnetConfig model;
    int schedule_t_train = 1000;
    float schedule_beta_start = 1e-4f;
    float schedule_beta_end = 0.02f;
    TrainConfig train;
    QatConfig qat;
    PrecisionPolicy policy;
    DatasetConfig dataset;
    EvalConfig eval;
    BenchConfig bench;

    NoiseSchedule make_schedule() const {
        return NoiseSchedule::linear(schedule_t_train, schedule_beta_start, schedule_beta_end);
    }

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"threads", threads},
            {"output_dir", output_dir},
            {"model", config_to_json(model)},
            {"schedule",
             {{"t_train", schedule_t_train}, {"beta_start", schedule_beta_start}, {"beta_end", schedule_beta_end}}},
            {"train",
             {{"steps", train.steps},
              {"batch_size", train.batch_size},
              {"lr", train.lr},
              {"lr_min", train.lr_min},
              {"seed", train.seed},
              {"log_every", train.log_every}}},
            {"qat",
             {{"steps", qat.max_steps},
              {"batch_size", qat.batch_size},
              {"lr", qat.lr},
              {"lambda_kd", qat.lambda_kd},
              {"kd_loss", qat.kd_loss},
              {"calibration_batches", qat.calibration_batches},
              {"seed", qat.seed}}},
            {"policy",
             {{"steps", policy.steps},
              {"boundary", policy.boundary},
              {"high", format_name(policy.high)},
              {"low", format_name(policy.low)}}},
            {"dataset", {{"seed", dataset.seed}, {"count", dataset.count}}},
            {"eval",
             {{"gen_images", eval.gen_images}, {"feature_dim", eval.feature_dim}, {"seeds", eval.seeds}}},
            {"bench",
             {{"repeats", bench.repeats},
              {"warmup", bench.warmup},
              {"image_size", bench.image_size},
              {"base_channels", bench.base_channels}}}};
    }

    static void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                               const std::string& scope) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (!known.count(it.key())) {
                throw ConfigError("config: unknown key '" + (scope.empty() ? it.key() : scope + "." + it.key()) + "'");
            }
        }
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        reject_unknown(j, {"threads", "output_dir", "model", "schedule", "train", "qat", "policy", "dataset",
                           "eval", "bench"},
                       "");
        try {
            if (j.contains("threads")) c.threads = j.at("threads").get<int>();
            if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
            if (j.contains("model")) {
                const auto& m = j.at("model");
                reject_unknown(m, {"in_channels", "base_channels", "channel_mult", "groups", "attention",
                                   "temb_dim", "attn_heads", "image_size"},
                               "model");
                if (m.contains("in_channels")) c.model.in_channels = m.at("in_channels").get<int>();
                if (m.contains("base_channels")) c.model.base_channels = m.at("base_channels").get<int>();
                if (m.contains("channel_mult")) c.model.channel_mult = m.at("channel_mult").get<std::vector<int>>();
                if (m.contains("groups")) c.model.groups = m.at("groups").get<int>();
                if (m.contains("attention")) c.model.attention = m.at("attention").get<bool>();
                if (m.contains("temb_dim")) c.model.temb_dim = m.at("temb_dim").get<int>();
                if (m.contains("attn_heads")) c.model.attn_heads = m.at("attn_heads").get<int>();
                if (m.contains("image_size")) c.model.image_size = m.at("image_size").get<int>();
            }
            if (j.contains("schedule")) {
                const auto& s = j.at("schedule");
                reject_unknown(s, {"t_train", "beta_start", "beta_end"}, "schedule");
                if (s.contains("t_train")) c.schedule_t_train = s.at("t_train").get<int>();
                if (s.contains("beta_start")) c.schedule_beta_start = s.at("beta_start").get<float>();
                if (s.contains("beta_end")) c.schedule_beta_end = s.at("beta_end").get<float>();
            }
            if (j.contains("train")) {
                const auto& t = j.at("train");
                reject_unknown(t, {"steps", "batch_size", "lr", "lr_min", "seed", "log_every"}, "train");
                if (t.contains("steps")) c.train.steps = t.at("steps").get<int>();
                if (t.contains("batch_size")) c.train.batch_size = t.at("batch_size").get<int>();
                if (t.contains("lr")) c.train.lr = t.at("lr").get<float>();
                if (t.contains("lr_min")) c.train.lr_min = t.at("lr_min").get<float>();
                if (t.contains("seed")) c.train.seed = t.at("seed").get<uint64_t>();
                if (t.contains("log_every")) c.train.log_every = t.at("log_every").get<int>();
            }
            if (j.contains("qat")) {
                const auto& q = j.at("qat");
                reject_unknown(q, {"steps", "batch_size", "lr", "lambda_kd", "kd_loss", "calibration_batches", "seed"},
                               "qat");
                if (q.contains("steps")) c.qat.max_steps = q.at("steps").get<int>();
                if (q.contains("batch_size")) c.qat.batch_size = q.at("batch_size").get<int>();
                if (q.contains("lr")) c.qat.lr = q.at("lr").get<float>();
                if (q.contains("lambda_kd")) c.qat.lambda_kd = q.at("lambda_kd").get<float>();
                if (q.contains("kd_loss")) c.qat.kd_loss = q.at("kd_loss").get<std::string>();
                if (q.contains("calibration_batches")) c.qat.calibration_batches = q.at("calibration_batches").get<int>();
                if (q.contains("seed")) c.qat.seed = q.at("seed").get<uint64_t>();
            }
            if (j.contains("policy")) {
                const auto& p = j.at("policy");
                reject_unknown(p, {"steps", "boundary", "high", "low"}, "policy");
                if (p.contains("steps")) c.policy.steps = p.at("steps").get<int>();
                if (p.contains("boundary")) c.policy.boundary = p.at("boundary").get<int>();
                if (p.contains("high")) c.policy.high = format_from_name(p.at("high").get<std::string>());
                if (p.contains("low")) c.policy.low = format_from_name(p.at("low").get<std::string>());
            }
            if (j.contains("dataset")) {
                const auto& d = j.at("dataset");
                reject_unknown(d, {"seed", "count"}, "dataset");
                if (d.contains("seed")) c.dataset.seed = d.at("seed").get<uint64_t>();
                if (d.contains("count")) c.dataset.count = d.at("count").get<int>();
            }
            if (j.contains("eval")) {
                const auto& e = j.at("eval");
                reject_unknown(e, {"gen_images", "feature_dim", "seeds"}, "eval");
                if (e.contains("gen_images")) c.eval.gen_images = e.at("gen_images").get<int>();
                if (e.contains("feature_dim")) c.eval.feature_dim = e.at("feature_dim").get<int>();
                if (e.contains("seeds")) c.eval.seeds = e.at("seeds").get<std::vector<uint64_t>>();
            }
            if (j.contains("bench")) {
                const auto& b = j.at("bench");
                reject_unknown(b, {"repeats", "warmup", "image_size", "base_channels"}, "bench");
                if (b.contains("repeats")) c.bench.repeats = b.at("repeats").get<int>();
                if (b.contains("warmup")) c.bench.warmup = b.at("warmup").get<int>();
                if (b.contains("image_size")) c.bench.image_size = b.at("image_size").get<int>();
                if (b.contains("base_channels")) c.bench.base_channels = b.at("base_channels").get<int>();
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
        c.validate();
        return c;
    }

    void validate() const {
        model.validate();
        policy.validate();
        if (threads < 0) throw ConfigError("config: threads must be >= 0");
        if (train.steps < 0 || train.batch_size < 1) throw ConfigError("config: bad train section");
        if (dataset.count < 2) throw ConfigError("config: dataset.count must be >= 2");
        if (eval.gen_images < 2 || eval.seeds.empty()) throw ConfigError("config: bad eval section");
        try {
            qat.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
        try {
            (void)NoiseSchedule::linear(schedule_t_train, schedule_beta_start, schedule_beta_end);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
        if (policy.steps > schedule_t_train) {
            throw ConfigError("config: policy.steps exceeds schedule.t_train");
        }
    }

    static RunConfig load(const std::string& path, const std::vector<std::string>& overrides = {}) {
        nlohmann::json j;
        if (!path.empty()) {
            std::ifstream is(path);
            if (!is) throw ConfigError("config: cannot open '" + path + "'");
            j = nlohmann::json::parse(is, nullptr, false);
            if (j.is_discarded()) throw ConfigError("config: '" + path + "' is not valid JSON");
        } else {
            j = nlohmann::json::object();
        }
        for (const auto& kv : overrides) apply_override(j, kv);
        return from_json(j);
    }

    // "--set a.b.c=value"; value parsed as JSON when possible, else as string.
    static void apply_override(nlohmann::json& j, const std::string& kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError("config: --set expects key.path=value, got '" + kv + "'");
        }
        const std::string key = kv.substr(0, eq);
        const std::string raw = kv.substr(eq + 1);
        nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        nlohmann::json* node = &j;
        size_t pos = 0;
        for (;;) {
            const size_t dot = key.find('.', pos);
            const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
            if (part.empty()) throw ConfigError("config: empty key segment in '" + key + "'");
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            pos = dot + 1;
        }
    }
};

}  // namespace qdiff
