#include <catch2/catch.hpp>

#include <cmath>

#include "qdiff/numerics.hpp"
#include "reference_ops.hpp"

using namespace qdiff;

TEST_CASE("bf16 rounding", "[numerics]") {
    SECTION("exactly representable values pass through") {
        REQUIRE(bf16_round_scalar(1.0f) == 1.0f);
        REQUIRE(bf16_round_scalar(-2.0f) == -2.0f);
        REQUIRE(bf16_round_scalar(0.0f) == 0.0f);
    }
    SECTION("exact halfway point rounds to even significand") {
        const float x = 1.0f + std::ldexp(1.0f, -8);  // dropped bits are exactly 0x8000
        REQUIRE(bf16_round_scalar(x) == 1.0f);
    }
    SECTION("NaN and infinity pass through") {
        REQUIRE(std::isnan(bf16_round_scalar(std::nanf(""))));
        REQUIRE(bf16_round_scalar(INFINITY) == INFINITY);
        REQUIRE(bf16_round_scalar(-INFINITY) == -INFINITY);
    }
    SECTION("1000 random floats match the bit-level oracle exactly") {
        Rng rng(42);
        for (int i = 0; i < 1000; ++i) {
            const float x = rng.gaussian() * std::exp(rng.gaussian() * 4.0f);
            REQUIRE(bf16_round_scalar(x) == refops::bf16_oracle(x));
        }
    }
    SECTION("idempotence") {
        Rng rng(43);
        for (int i = 0; i < 1000; ++i) {
            const float y = bf16_round_scalar(rng.gaussian() * 100.0f);
            REQUIRE(bf16_round_scalar(y) == y);
        }
    }
}

TEST_CASE("calibration", "[numerics]") {
    SECTION("scale is max|x|/127") {
        Tensor x({2}, {-2.54f, 1.27f});
        REQUIRE(calibrate(x, QuantGranularity::PerTensor).scale() == 0.02f);
    }
    SECTION("all-zero input hits the scale floor") {
        Tensor x({4});
        REQUIRE(calibrate(x, QuantGranularity::PerTensor).scale() == kMinScale);
    }
    SECTION("per-channel scales equal scalar oracle per slice") {
        Rng rng(5);
        Tensor x({3, 4, 5});
        rng.fill_gaussian(x);
        auto p = calibrate(x, QuantGranularity::PerChannel, 1);
        REQUIRE(p.scales.size() == 4);
        for (int c = 0; c < 4; ++c) {
            float m = 0.0f;
            for (int o = 0; o < 3; ++o)
                for (int i = 0; i < 5; ++i) m = std::max(m, std::fabs(x.ptr()[(o * 4 + c) * 5 + i]));
            REQUIRE(p.scales[static_cast<size_t>(c)] == scale_from_max(m));
        }
    }
    SECTION("empty tensor rejected") {
        Tensor x;
        REQUIRE_THROWS_AS(calibrate(x, QuantGranularity::PerTensor), std::invalid_argument);
    }
}

TEST_CASE("quantize and dequantize", "[numerics]") {
    SECTION("zero maps to zero") {
        Tensor x({1}, {0.0f});
        auto p = QuantParams::per_tensor(0.1f);
        auto q = quantize_int8(x, p);
        REQUIRE(q.data[0] == 0);
        REQUIRE(dequantize(q, p).ptr()[0] == 0.0f);
    }
    SECTION("1.27 at scale 0.02 rounds the 63.5 tie up to 64") {
        Tensor x({1}, {1.27f});
        auto p = QuantParams::per_tensor(0.02f);
        auto q = quantize_int8(x, p);
        REQUIRE(static_cast<int>(q.data[0]) == 64);
        REQUIRE(dequantize(q, p).ptr()[0] == Approx(1.28f).margin(1e-6));
    }
    SECTION("saturation clamps to +-127") {
        auto p = QuantParams::per_tensor(0.02f);
        Tensor x({2}, {10.0f * 127 * 0.02f, -10.0f * 127 * 0.02f});
        auto q = quantize_int8(x, p);
        REQUIRE(static_cast<int>(q.data[0]) == 127);
        REQUIRE(static_cast<int>(q.data[1]) == -127);
    }
    SECTION("round-trip error bound over 1e5 random in-range values") {
        Rng rng(11);
        const float scale = 0.013f;
        const float lim = 127.0f * scale;
        Tensor x({100000});
        for (auto& v : x.data) v = rng.uniform(-lim, lim);
        auto p = QuantParams::per_tensor(scale);
        Tensor back = dequantize(quantize_int8(x, p), p);
        double worst = 0.0;
        for (int64_t i = 0; i < x.numel(); ++i) {
            worst = std::max(worst, std::fabs(static_cast<double>(x.ptr()[i]) - back.ptr()[i]));
        }
        REQUIRE(worst <= 0.5 * scale * (1.0 + 1e-6));
    }
    SECTION("quantize-dequantize idempotence is bit-exact") {
        Rng rng(12);
        Tensor x({4096});
        rng.fill_gaussian(x);
        auto p = QuantParams::per_tensor(0.004f);
        Tensor once = dequantize(quantize_int8(x, p), p);
        Tensor twice = dequantize(quantize_int8(once, p), p);
        REQUIRE(once.data == twice.data);
    }
    SECTION("matches scalar oracle on random values") {
        Rng rng(13);
        const float scale = 0.19f;
        auto p = QuantParams::per_tensor(scale);
        Tensor x({2048});
        rng.fill_gaussian(x);
        auto q = quantize_int8(x, p);
        for (int64_t i = 0; i < x.numel(); ++i) {
            REQUIRE(static_cast<int>(q.data[static_cast<size_t>(i)]) ==
                    refops::quant_oracle(static_cast<double>(x.ptr()[i]), static_cast<double>(scale)));
        }
    }
}

TEST_CASE("fake quantization forward equals the composition oracle", "[numerics]") {
    Rng rng(21);
    Tensor x({3, 7, 5});
    rng.fill_gaussian(x);
    SECTION("per tensor") {
        auto p = calibrate(x, QuantGranularity::PerTensor);
        Tensor fq = fake_quant_forward(x, p);
        Tensor oracle = dequantize(quantize_int8(x, p), p);
        REQUIRE(fq.data == oracle.data);
    }
    SECTION("per channel") {
        auto p = calibrate(x, QuantGranularity::PerChannel, 0);
        Tensor fq = fake_quant_forward(x, p);
        Tensor oracle = dequantize(quantize_int8(x, p), p);
        REQUIRE(fq.data == oracle.data);
    }
}

TEST_CASE("moving min-max observer", "[numerics]") {
    SECTION("first observation seeds the running max") {
        MinMaxObserver ob;
        Tensor x({3}, {0.5f, -2.0f, 1.0f});
        ob.observe(x);
        REQUIRE(ob.running_max == 2.0f);
    }
    SECTION("constant stream is a fixed point") {
        MinMaxObserver ob;
        Tensor x({2}, {3.0f, -1.0f});
        for (int i = 0; i < 50; ++i) ob.observe(x);
        REQUIRE(ob.running_max == Approx(3.0f).epsilon(1e-6));
    }
    SECTION("mixed stream matches the scalar recurrence oracle") {
        MinMaxObserver ob;
        Rng rng(31);
        double expect = 0.0;
        bool seeded = false;
        for (int step = 0; step < 40; ++step) {
            Tensor x({17});
            rng.fill_gaussian(x);
            float m = 0.0f;
            for (float v : x.data) m = std::max(m, std::fabs(v));
            if (!seeded) {
                expect = m;
                seeded = true;
            } else {
                expect = 0.99f * static_cast<float>(expect) + 0.01f * m;
            }
            ob.observe(x);
        }
        REQUIRE(ob.running_max == Approx(expect).epsilon(1e-5));
        REQUIRE(ob.params().scale() == scale_from_max(ob.running_max));
    }
}
