#include <catch2/catch.hpp>

#include "qdiff/tensor.hpp"

using namespace qdiff;

TEST_CASE("tensor shape invariants", "[tensor]") {
    Tensor t({2, 3});
    REQUIRE(t.numel() == 6);
    REQUIRE(t.data.size() == 6);

    SECTION("data length must match shape product") {
        REQUIRE_THROWS_AS(Tensor({2, 3}, {1.0f, 2.0f}), std::invalid_argument);
    }
    SECTION("dimensions must be at least 1") {
        REQUIRE_THROWS_AS(Tensor({2, 0, 3}), std::invalid_argument);
        REQUIRE_THROWS_AS(Tensor({-1}), std::invalid_argument);
    }
    SECTION("mismatch errors name both shapes") {
        Tensor a({2, 2}), b({4, 1});
        try {
            require_same_shape(a, b, "add");
            FAIL("expected throw");
        } catch (const std::invalid_argument& e) {
            const std::string msg = e.what();
            REQUIRE(msg.find("[2,2]") != std::string::npos);
            REQUIRE(msg.find("[4,1]") != std::string::npos);
        }
    }
}

TEST_CASE("rng determinism and distribution sanity", "[tensor]") {
    Rng a(123), b(123), c(124);
    for (int i = 0; i < 100; ++i) {
        REQUIRE(a.next_u64() == b.next_u64());
    }
    REQUIRE(a.next_u64() != c.next_u64());

    SECTION("gaussian moments") {
        Rng r(7);
        double sum = 0.0, sq = 0.0;
        const int n = 200000;
        for (int i = 0; i < n; ++i) {
            const double v = r.gaussian();
            sum += v;
            sq += v * v;
        }
        REQUIRE(std::fabs(sum / n) < 0.01);
        REQUIRE(std::fabs(sq / n - 1.0) < 0.02);
    }
    SECTION("derived streams differ and are stable") {
        REQUIRE(Rng::derive(1, 2, 3) == Rng::derive(1, 2, 3));
        REQUIRE(Rng::derive(1, 2, 3) != Rng::derive(1, 2, 4));
        REQUIRE(Rng::derive(1, 2, 3) != Rng::derive(2, 2, 3));
    }
    SECTION("next_index stays in range") {
        Rng r(9);
        for (int i = 0; i < 1000; ++i) {
            const int64_t v = r.next_index(17);
            REQUIRE(v >= 0);
            REQUIRE(v < 17);
        }
    }
}
