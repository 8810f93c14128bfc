#include <catch2/catch.hpp>

#include "qdiff/config.hpp"

using namespace qdiff;

TEST_CASE("default configuration is valid", "[config]") {
    RunConfig cfg = RunConfig::from_json(nlohmann::json::object());
    REQUIRE(cfg.model.image_size == 16);
    REQUIRE(cfg.model.base_channels == 16);
    REQUIRE(cfg.policy.steps == 50);
    REQUIRE(cfg.policy.boundary == 3);
    REQUIRE(cfg.policy.high == PrecisionFormat::BF16);
    REQUIRE(cfg.policy.low == PrecisionFormat::INT8);
    REQUIRE(cfg.schedule_t_train == 1000);
    REQUIRE(cfg.dataset.count == 2000);
    REQUIRE(cfg.eval.gen_images == 500);
}

TEST_CASE("unknown keys are rejected by name", "[config]") {
    SECTION("top level") {
        try {
            RunConfig::from_json(nlohmann::json{{"trian", nlohmann::json::object()}});
            FAIL("expected throw");
        } catch (const ConfigError& e) {
            REQUIRE(std::string(e.what()).find("trian") != std::string::npos);
        }
    }
    SECTION("nested") {
        try {
            RunConfig::from_json(nlohmann::json{{"train", {{"step", 10}}}});
            FAIL("expected throw");
        } catch (const ConfigError& e) {
            REQUIRE(std::string(e.what()).find("train.step") != std::string::npos);
        }
    }
}

TEST_CASE("config round-trips through JSON", "[config]") {
    RunConfig cfg = RunConfig::from_json(nlohmann::json::object());
    cfg.train.steps = 123;
    cfg.policy.boundary = 7;
    cfg.eval.seeds = {4, 5, 6};
    RunConfig back = RunConfig::from_json(cfg.to_json());
    REQUIRE(back.to_json() == cfg.to_json());
}

TEST_CASE("set overrides", "[config]") {
    nlohmann::json j = nlohmann::json::object();
    RunConfig::apply_override(j, "train.steps=77");
    RunConfig::apply_override(j, "policy.high=\"fp32\"");
    RunConfig::apply_override(j, "model.channel_mult=[1,2]");
    RunConfig::apply_override(j, "output_dir=run42");
    RunConfig cfg = RunConfig::from_json(j);
    REQUIRE(cfg.train.steps == 77);
    REQUIRE(cfg.policy.high == PrecisionFormat::FP32);
    REQUIRE(cfg.output_dir == "run42");

    REQUIRE_THROWS_AS(RunConfig::apply_override(j, "no_equals_sign"), ConfigError);
}

TEST_CASE("validation failures", "[config]") {
    SECTION("policy boundary out of range") {
        REQUIRE_THROWS_AS(RunConfig::from_json(nlohmann::json{{"policy", {{"steps", 10}, {"boundary", 6}}}}),
                          std::exception);
    }
    SECTION("policy steps beyond the training grid") {
        REQUIRE_THROWS_AS(
            RunConfig::from_json(nlohmann::json{{"schedule", {{"t_train", 20}}}, {"policy", {{"steps", 50}}}}),
            ConfigError);
    }
    SECTION("bad precision name") {
        REQUIRE_THROWS_AS(RunConfig::from_json(nlohmann::json{{"policy", {{"high", "fp64"}}}}), std::exception);
    }
    SECTION("model geometry propagates") {
        REQUIRE_THROWS_AS(RunConfig::from_json(nlohmann::json{{"model", {{"groups", 3}}}}), std::exception);
    }
}
