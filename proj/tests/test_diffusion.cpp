#include <catch2/catch.hpp>

#include "qdiff/diffusion.hpp"
#include "qdiff/eval.hpp"
#include "qdiff/qat.hpp"
#include "reference_ops.hpp"

using namespace qdiff;

namespace {
UnetConfig tiny_config() {
    UnetConfig cfg;
    cfg.base_channels = 8;
    cfg.groups = 2;
    cfg.image_size = 8;
    return cfg;
}
}  // namespace

TEST_CASE("noise schedule invariants", "[diffusion]") {
    NoiseSchedule s = NoiseSchedule::linear();
    REQUIRE(s.beta.size() == 1000);
    REQUIRE(s.beta.front() == Approx(1e-4f));
    REQUIRE(s.beta.back() == Approx(0.02f));
    REQUIRE(s.alpha_bar.front() == Approx(1.0 - 1e-4));
    for (int t = 1; t < s.t_train; ++t) {
        REQUIRE(s.beta[static_cast<size_t>(t)] > s.beta[static_cast<size_t>(t - 1)]);
        REQUIRE(s.beta[static_cast<size_t>(t)] < 1.0f);
        REQUIRE(s.alpha_bar[static_cast<size_t>(t)] < s.alpha_bar[static_cast<size_t>(t - 1)]);
        REQUIRE(s.alpha_bar[static_cast<size_t>(t)] > 0.0);
        REQUIRE(s.alpha_bar[static_cast<size_t>(t)] < 1.0);
    }
    REQUIRE_THROWS_AS(NoiseSchedule::linear(0), std::invalid_argument);
    REQUIRE_THROWS_AS(NoiseSchedule::linear(10, 0.5f, 0.1f), std::invalid_argument);
}

TEST_CASE("forward diffusion", "[diffusion]") {
    NoiseSchedule s = NoiseSchedule::linear();
    Rng rng(1);
    Tensor x0({2, 1, 4, 4});
    rng.fill_gaussian(x0);

    SECTION("zero noise scales the input by sqrt(alpha_bar)") {
        Tensor eps(x0.shape);
        Tensor xt = forward_diffuse(x0, {100, 900}, eps, s);
        for (int n = 0; n < 2; ++n) {
            const float sa = static_cast<float>(std::sqrt(s.alpha_bar[n == 0 ? 100 : 900]));
            for (int i = 0; i < 16; ++i) {
                REQUIRE(xt.ptr()[n * 16 + i] == Approx(sa * x0.ptr()[n * 16 + i]).margin(1e-7));
            }
        }
    }
    SECTION("t = 0 stays within the beta_0 noise scale of x0") {
        Tensor eps(x0.shape);
        rng.fill_gaussian(eps);
        Tensor xt = forward_diffuse(x0, {0, 0}, eps, s);
        for (int64_t i = 0; i < x0.numel(); ++i) {
            const double bound = std::sqrt(1e-4) * std::fabs(eps.ptr()[i]) + 1e-4;
            REQUIRE(std::fabs(xt.ptr()[i] - x0.ptr()[i]) <= bound + 1e-5);
        }
    }
    SECTION("random case matches the scalar formula") {
        Tensor eps(x0.shape);
        rng.fill_gaussian(eps);
        Tensor xt = forward_diffuse(x0, {375, 512}, eps, s);
        for (int n = 0; n < 2; ++n) {
            const double ab = s.alpha_bar[n == 0 ? 375 : 512];
            for (int i = 0; i < 16; ++i) {
                const double expect = std::sqrt(ab) * x0.ptr()[n * 16 + i] +
                                      std::sqrt(1.0 - ab) * eps.ptr()[n * 16 + i];
                REQUIRE(xt.ptr()[n * 16 + i] == Approx(expect).margin(1e-6));
            }
        }
    }
    SECTION("timestep out of range rejected") {
        Tensor eps(x0.shape);
        REQUIRE_THROWS_AS(forward_diffuse(x0, {0, 1000}, eps, s), std::invalid_argument);
        REQUIRE_THROWS_AS(forward_diffuse(x0, {-1, 0}, eps, s), std::invalid_argument);
    }
}

TEST_CASE("precision policy step selection", "[diffusion]") {
    SECTION("n=50, k=3: exactly steps 0,1,2,47,48,49 are high") {
        PrecisionPolicy p{50, 3, PrecisionFormat::BF16, PrecisionFormat::INT8};
        std::vector<int> high;
        for (int i = 0; i < 50; ++i) {
            if (precision_for_step(p, i) == PrecisionFormat::BF16) high.push_back(i);
        }
        REQUIRE(high == std::vector<int>{0, 1, 2, 47, 48, 49});
    }
    SECTION("n=50, k=5: 10 high and 40 low") {
        PrecisionPolicy p{50, 5, PrecisionFormat::BF16, PrecisionFormat::INT8};
        int high = 0;
        for (int i = 0; i < 50; ++i) high += precision_for_step(p, i) == PrecisionFormat::BF16;
        REQUIRE(high == 10);
    }
    SECTION("boundary cases k=0 and k=n/2") {
        PrecisionPolicy all_low{50, 0, PrecisionFormat::BF16, PrecisionFormat::INT8};
        PrecisionPolicy all_high{50, 25, PrecisionFormat::BF16, PrecisionFormat::INT8};
        for (int i = 0; i < 50; ++i) {
            REQUIRE(precision_for_step(all_low, i) == PrecisionFormat::INT8);
            REQUIRE(precision_for_step(all_high, i) == PrecisionFormat::BF16);
        }
    }
    SECTION("high step count equals min(2k, n) for every k") {
        for (int n : {1, 2, 7, 50}) {
            for (int k = 0; k <= (n + 1) / 2; ++k) {
                PrecisionPolicy p{n, k, PrecisionFormat::BF16, PrecisionFormat::INT8};
                int high = 0;
                for (int i = 0; i < n; ++i) high += precision_for_step(p, i) == PrecisionFormat::BF16;
                REQUIRE(high == std::min(2 * k, n));
            }
        }
    }
    SECTION("index and boundary validation") {
        PrecisionPolicy p{50, 3, PrecisionFormat::BF16, PrecisionFormat::INT8};
        REQUIRE_THROWS_AS(precision_for_step(p, -1), std::invalid_argument);
        REQUIRE_THROWS_AS(precision_for_step(p, 50), std::invalid_argument);
        PrecisionPolicy bad{50, 26, PrecisionFormat::BF16, PrecisionFormat::INT8};
        REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    }
}

TEST_CASE("sampler", "[diffusion]") {
    WorkerPool pool(2);
    NoiseSchedule sched = NoiseSchedule::linear();
    // fresh model predicts exactly zero noise (zero-initialized head)
    UnetModel zero_model = UnetModel::init(tiny_config(), 3);
    Sampler sampler(&zero_model, nullptr, sched, pool);

    SECTION("zero predictor with zeroed variance matches the closed-form product") {
        PrecisionPolicy p{10, 0, PrecisionFormat::BF16, PrecisionFormat::FP32};
        Tensor out = sampler.sample(p, 2, 8, 8, 4242, /*stochastic=*/false);
        // oracle: x_T * prod(1/sqrt(alpha_eff)) with the same strided grid
        const std::vector<int> tau = strided_timesteps(10, sched.t_train);
        double prod = 1.0;
        for (int i = 0; i < 10; ++i) {
            const double ab = sched.alpha_bar[static_cast<size_t>(tau[static_cast<size_t>(i)])];
            const double ab_prev = i + 1 < 10 ? sched.alpha_bar[static_cast<size_t>(tau[static_cast<size_t>(i + 1)])] : 1.0;
            prod *= 1.0 / std::sqrt(ab / ab_prev);
        }
        for (int b = 0; b < 2; ++b) {
            Rng r(Rng::derive(4242, static_cast<uint64_t>(b), 0));
            for (int i = 0; i < 64; ++i) {
                const double expect = static_cast<double>(r.gaussian()) * prod;
                REQUIRE(out.ptr()[b * 64 + i] == Approx(expect).epsilon(1e-4));
            }
        }
    }
    SECTION("single-step sampling produces finite output") {
        PrecisionPolicy p{1, 0, PrecisionFormat::BF16, PrecisionFormat::FP32};
        Tensor out = sampler.sample(p, 1, 8, 8, 5);
        for (float v : out.data) REQUIRE(std::isfinite(v));
    }
    SECTION("all-high policy equals a plain high-format loop byte for byte") {
        PrecisionPolicy half{8, 4, PrecisionFormat::BF16, PrecisionFormat::INT8};
        PrecisionPolicy plain{8, 0, PrecisionFormat::FP32, PrecisionFormat::BF16};
        Tensor a = sampler.sample(half, 2, 8, 8, 77);
        Tensor b = sampler.sample(plain, 2, 8, 8, 77);
        REQUIRE(a.data == b.data);
    }
    SECTION("results are independent of batch chunking") {
        PrecisionPolicy p{4, 0, PrecisionFormat::BF16, PrecisionFormat::BF16};
        Tensor a = sampler.sample(p, 5, 8, 8, 123, true, nullptr, 2);
        Tensor b = sampler.sample(p, 5, 8, 8, 123, true, nullptr, 128);
        REQUIRE(a.data == b.data);
    }
    SECTION("same seed reproduces bit-identical samples") {
        PrecisionPolicy p{6, 0, PrecisionFormat::BF16, PrecisionFormat::BF16};
        Tensor a = sampler.sample(p, 3, 8, 8, 999);
        Tensor b = sampler.sample(p, 3, 8, 8, 999);
        REQUIRE(a.data == b.data);
    }
    SECTION("int8 policy without a student model is rejected") {
        PrecisionPolicy p{4, 0, PrecisionFormat::BF16, PrecisionFormat::INT8};
        REQUIRE_THROWS_WITH(sampler.sample(p, 1, 8, 8, 1), Catch::Contains("int8"));
    }
    SECTION("step count beyond the training grid is rejected") {
        PrecisionPolicy p{1001, 0, PrecisionFormat::BF16, PrecisionFormat::BF16};
        REQUIRE_THROWS_AS(sampler.sample(p, 1, 8, 8, 1), std::invalid_argument);
    }
}

TEST_CASE("training step", "[diffusion]") {
    WorkerPool pool(2);
    NoiseSchedule sched = NoiseSchedule::linear();
    ToyDataset ds{42, 64, 8};
    Tensor data = ds.generate();

    SECTION("zero learning rate leaves parameters unchanged") {
        UnetModel m = UnetModel::init(tiny_config(), 7);
        const std::string before = m.parameter_hash();
        Adam opt(0.0f);
        Rng rng(8);
        std::vector<int64_t> idx = {0, 1, 2, 3};
        train_step(m, gather_batch(data, idx), sched, opt, rng, pool);
        REQUIRE(m.parameter_hash() == before);
    }
    SECTION("loss decreases in median over the first 200 steps") {
        UnetModel m = UnetModel::init(tiny_config(), 9);
        Adam opt(1e-3f);
        Rng rng(10);
        std::vector<float> losses;
        for (int step = 0; step < 200; ++step) {
            std::vector<int64_t> idx(8);
            for (auto& i : idx) i = rng.next_index(data.dim(0));
            losses.push_back(train_step(m, gather_batch(data, idx), sched, opt, rng, pool));
        }
        auto median = [](std::vector<float> v) {
            std::sort(v.begin(), v.end());
            return v[v.size() / 2];
        };
        const float early = median({losses.begin(), losses.begin() + 30});
        const float late = median({losses.end() - 30, losses.end()});
        INFO("early " << early << " late " << late);
        REQUIRE(late < early);
    }
    SECTION("training is deterministic given the seed") {
        auto run = [&] {
            UnetModel m = UnetModel::init(tiny_config(), 11);
            Adam opt(1e-3f);
            Rng rng(12);
            for (int step = 0; step < 5; ++step) {
                std::vector<int64_t> idx(4);
                for (auto& i : idx) i = rng.next_index(data.dim(0));
                train_step(m, gather_batch(data, idx), sched, opt, rng, pool);
            }
            return m.parameter_hash();
        };
        REQUIRE(run() == run());
    }
    SECTION("exploding optimizer surfaces as a numerical error") {
        UnetModel m = UnetModel::init(tiny_config(), 13);
        Adam opt(1e12f);
        Rng rng(14);
        bool threw = false;
        for (int step = 0; step < 10 && !threw; ++step) {
            std::vector<int64_t> idx(4);
            for (auto& i : idx) i = rng.next_index(data.dim(0));
            try {
                train_step(m, gather_batch(data, idx), sched, opt, rng, pool);
            } catch (const NumericalError&) {
                threw = true;
            }
        }
        REQUIRE(threw);
    }
}
