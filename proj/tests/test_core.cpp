#include <doctest.h>

#include <random>

#include "pioner/core.hpp"
#include "support/fixtures.hpp"

using namespace pioner;
using pioner::testing::TempDir;
using pioner::testing::write_text;

TEST_CASE("parse_region_spec examples") {
    auto box = parse_region_spec(R"({"kind":"box","box":[0,0,10,10]})");
    CHECK(box == RegionSpec::box({0, 0, 10, 10}));
    auto trace = parse_region_spec(R"({"kind":"trace","points":[[5,5]]})");
    REQUIRE(trace.kind() == RegionKind::trace);
    CHECK(std::get<TraceRegion>(trace.payload).points.size() == 1);
    CHECK_THROWS_AS(parse_region_spec(R"({"kind":"box","box":[10,10,10,20]})"), ValidationError);
}

TEST_CASE("parse_region_spec rejects malformed input") {
    CHECK_THROWS_AS(parse_region_spec(R"({"box":[0,0,1,1]})"), SchemaError);
    CHECK_THROWS_AS(parse_region_spec(R"({"kind":"circle"})"), SchemaError);
    CHECK_THROWS_AS(parse_region_spec(R"({"kind":"box"})"), SchemaError);
    CHECK_THROWS_AS(parse_region_spec(R"({"kind":"box","box":[0,0,1]})"), SchemaError);
    CHECK_THROWS_AS(parse_region_spec(R"({"kind":"box","box":["a",0,1,1]})"), SchemaError);
    CHECK_THROWS_AS(parse_region_spec(R"({"kind":"patch","patch":[1.5,0]})"), SchemaError);
    CHECK_THROWS_AS(parse_region_spec("not json"), SchemaError);
    CHECK_THROWS_AS(parse_region_spec("[1,2]"), SchemaError);
    CHECK_THROWS_AS(parse_region_spec(R"({"kind":"image","version":"region-spec/v9"})"), SchemaError);
    CHECK_THROWS_AS(parse_region_spec(R"({"kind":"trace","points":[]})"), ValidationError);
    CHECK_THROWS_AS(parse_region_spec(R"({"kind":"box_set","boxes":[]})"), ValidationError);
    CHECK_THROWS_AS(parse_region_spec(R"({"kind":"box","box":[5,0,1,1]})"), ValidationError);
    CHECK(parse_region_spec(R"({"kind":"image","version":"region-spec/v1"})") == RegionSpec::image());
}

TEST_CASE("region specs round-trip through JSON") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 500; ++i) {
        auto grid = pioner::testing::random_instance_grid(rng, 6, 1);
        auto spec = pioner::testing::random_region(rng, grid);
        auto text = serialize_region_spec(spec);
        CHECK(parse_region_spec(text) == spec);
        CHECK(serialize_region_spec(parse_region_spec(text)) == text);
    }
}

TEST_CASE("shared region-spec vectors validate") {
    // The same vectors ship in docs/region-spec-vectors.json for other clients.
    auto doc = json::parse(pioner::testing::read_text(PIONER_SOURCE_DIR "/docs/region-spec-vectors.json"));
    for (const auto& v : doc["valid"]) CHECK_NOTHROW(region_spec_from_json(v));
    for (const auto& v : doc["invalid"]) CHECK_THROWS_AS(region_spec_from_json(v), Error);
}

TEST_CASE("load_config") {
    TempDir dir;
    SUBCASE("empty file gives defaults") {
        write_text(dir / "c.json", "");
        Config c = load_config((dir / "c.json").string());
        CHECK(c.gap.tau == 0.01);
        CHECK(c.gap.sigma2 == 0.08);
        CHECK(c.aggregation == AggregationMode::uniform);
        CHECK(c.gap.mode == GapMode::memory);
        CHECK(c.train.epochs == 10);
        CHECK(c.train.lr == 1e-5);
        CHECK(c.train.batch == 64);
        CHECK(c.train.weight_decay == 0.01);
        CHECK(c.decoder.n_layer == 4);
        CHECK(c.decoder.n_head == 4);
        CHECK(c.decoder.max_len == 64);
    }
    SUBCASE("tau") {
        write_text(dir / "c.json", R"({"gap.tau": 0.01})");
        CHECK(load_config((dir / "c.json").string()).gap.tau == 0.01);
    }
    SUBCASE("negative variance") {
        write_text(dir / "c.json", R"({"gap.sigma2": -1})");
        try {
            load_config((dir / "c.json").string());
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("gap.sigma2") != std::string::npos);
        }
    }
    SUBCASE("unknown key names the key") {
        write_text(dir / "c.json", R"({"gap.tua": 1})");
        try {
            load_config((dir / "c.json").string());
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("gap.tua") != std::string::npos);
        }
    }
    SUBCASE("wrong type") {
        write_text(dir / "c.json", R"({"train.epochs": "ten"})");
        CHECK_THROWS_AS(load_config((dir / "c.json").string()), ConfigError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_config((dir / "nope.json").string()), ConfigError); }
    SUBCASE("malformed document") {
        write_text(dir / "c.json", "{");
        CHECK_THROWS_AS(load_config((dir / "c.json").string()), ConfigError);
    }
}

TEST_CASE("noise regime preset") {
    Config c = config_from_json(json{{"gap.preset", "viecap-regime"}});
    CHECK(c.gap.mode == GapMode::noise);
    CHECK(c.gap.sigma2 == doctest::Approx(16e-3));
    CHECK(c.train.epochs == 15);
    CHECK(c.train.batch == 80);
    CHECK(c.train.lr == doctest::Approx(2e-5));
    // explicit keys still win over the preset
    Config d = config_from_json(json{{"gap.preset", "viecap-regime"}, {"train.epochs", 3}});
    CHECK(d.train.epochs == 3);
    CHECK_THROWS_AS(config_from_json(json{{"gap.preset", "bogus"}}), ConfigError);
}

TEST_CASE("overrides take precedence and parse JSON values") {
    Config c;
    apply_override(c, "gap.mode=noise");
    apply_override(c, "train.epochs=3");
    apply_override(c, "metrics.dense_thresholds=[0,0.5]");
    CHECK(c.gap.mode == GapMode::noise);
    CHECK(c.train.epochs == 3);
    CHECK(c.metrics.dense_thresholds == std::vector<double>{0, 0.5});
    CHECK_THROWS_AS(apply_override(c, "novalue"), ConfigError);
    CHECK_THROWS_AS(apply_override(c, "gap.tau=0"), ConfigError);
}

TEST_CASE("config snapshot round-trips") {
    Config c;
    c.gap.tau = 0.5;
    c.decoder.checkpoint = "x.ckpt";
    Config back = config_from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
}

TEST_CASE("patch grid invariants") {
    CHECK_THROWS_AS(PatchGrid(0, 1, 1, {}, {14, 14}, 14), ValidationError);
    CHECK_THROWS_AS(PatchGrid(1, 1, 2, {1.f}, {14, 14}, 14), ValidationError);
    CHECK_THROWS_AS(PatchGrid(1, 1, 1, {NAN}, {14, 14}, 14), ValidationError);
    CHECK_THROWS_AS(PatchGrid(1, 1, 1, {1.f}, {14, 14}, 14, std::vector<float>{0.f}), ValidationError);
    CHECK_THROWS_AS(PatchGrid(1, 1, 1, {1.f}, {14, 14}, 14, std::vector<float>{-1.f}), ValidationError);
    PatchGrid g(1, 2, 1, {1.f, 2.f}, {14, 28}, 14);
    CHECK(g.original_size() == PixelSize{14, 28});
    CHECK(g.flat_index(0, 1) == 1);
}

TEST_CASE("vector helpers") {
    CHECK(l2_norm({3, 4}) == 5);
    CHECK(l2_normalized({3, 4}) == Vector{0.6, 0.8});
    CHECK_THROWS_AS(l2_normalized({0, 0}), ZeroVectorError);
    CHECK(cosine({1, 0}, {0, 2}) == 0);
}
