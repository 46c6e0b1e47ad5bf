#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pioner/regions.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace pioner;

namespace {

// 2x2 grid over a 20x20 image, dim 2, patch k has vector (k, 10k).
PatchGrid tiny_grid(bool attention = false) {
    std::vector<float> data;
    for (int k = 0; k < 4; ++k) {
        data.push_back(float(k));
        data.push_back(float(10 * k));
    }
    std::optional<std::vector<float>> att;
    if (attention) att = std::vector<float>{0.f, 0.f, 0.f, 1.f};
    return PatchGrid(2, 2, 2, data, {28, 28}, 14, att, PixelSize{20, 20});
}


double max_abs_diff(const Vector& a, const Vector& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_CASE("box covering exactly the top-left cell selects it alone") {
    auto grid = tiny_grid();
    auto sel = select_patches(RegionSpec::box({0, 0, 10, 10}), grid);
    CHECK(sel.indices == std::vector<std::size_t>{0});
    CHECK(sel.weights == std::vector<double>{1.0});
}

TEST_CASE("box set keeps duplicates so shared patches count twice") {
    auto grid = tiny_grid();
    // top row {0,1} plus right column {1,3}; patch 1 is shared
    auto sel = select_patches(RegionSpec::box_set({{0, 0, 20, 10}, {10, 0, 20, 20}}), grid);
    CHECK(sel.indices == std::vector<std::size_t>{0, 1, 1, 3});
    for (double w : sel.weights) CHECK(w == 0.25);
    auto emb = aggregate(sel, grid, AggregationMode::uniform);
    // (v0 + 2 v1 + v3) / 4
    CHECK(emb.vector[0] == doctest::Approx((0 + 2 * 1 + 3) / 4.0));
    CHECK(emb.vector[1] == doctest::Approx((0 + 20 + 30) / 4.0));
}

TEST_CASE("trace points map to one patch each with multiplicity") {
    auto grid = tiny_grid();
    auto sel = select_patches(RegionSpec::trace({{1, 1}, {2, 3}, {15, 2}}), grid);
    CHECK(sel.indices == std::vector<std::size_t>{0, 0, 1});
    auto emb = aggregate(sel, grid, AggregationMode::uniform);
    CHECK(emb.vector[0] == doctest::Approx((2 * 0 + 1) / 3.0));
    CHECK(emb.vector[1] == doctest::Approx((2 * 0 + 10) / 3.0));
}

TEST_CASE("trace points outside the image are clamped, not dropped") {
    auto grid = tiny_grid();
    auto sel = select_patches(RegionSpec::trace({{-5, -5}, {25, 25}, {20, 0}}), grid);
    CHECK(sel.indices == std::vector<std::size_t>{0, 3, 1});
}

TEST_CASE("boxes touching a cell edge do not select the neighbour") {
    auto grid = tiny_grid();
    CHECK(select_patches(RegionSpec::box({0, 0, 10, 20}), grid).indices == std::vector<std::size_t>{0, 2});
    CHECK(select_patches(RegionSpec::box({10, 10, 20, 20}), grid).indices == std::vector<std::size_t>{3});
    // sub-patch boxes select only the overlapped cell, never expand
    CHECK(select_patches(RegionSpec::box({11, 1, 12, 2}), grid).indices == std::vector<std::size_t>{1});
}

TEST_CASE("boxes outside the image select nothing") {
    auto grid = tiny_grid();
    CHECK_THROWS_AS(select_patches(RegionSpec::box({30, 30, 40, 40}), grid), EmptySelectionError);
}

TEST_CASE("patch index outside the grid is a validation error") {
    auto grid = tiny_grid();
    CHECK_THROWS_AS(select_patches(RegionSpec::patch(2, 0), grid), ValidationError);
    CHECK_THROWS_AS(select_patches(RegionSpec::patch(0, -1), grid), ValidationError);
}

TEST_CASE("image selection lists every patch once") {
    auto grid = tiny_grid();
    auto sel = select_patches(RegionSpec::image(), grid);
    CHECK(sel.indices == std::vector<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("gaussian weights") {
    SUBCASE("single patch") { CHECK(gaussian_weights(1, 1) == std::vector<double>{1.0}); }
    SUBCASE("3x3 center over corner is e^2") {
        auto u = gaussian_weights_unnormalized(3, 3);
        CHECK(u[4] == 1.0);
        CHECK(std::abs(u[0] - std::exp(-2.0)) < 1e-12);
        CHECK(std::abs(u[4] / u[0] - std::exp(2.0)) < 1e-9);
    }
    SUBCASE("2x2 is uniform") {
        for (double w : gaussian_weights(2, 2)) CHECK(std::abs(w - 0.25) < 1e-15);
    }
    SUBCASE("flip symmetry and normalization") {
        for (int rows = 1; rows <= 9; ++rows) {
            for (int cols = 1; cols <= 9; ++cols) {
                auto w = gaussian_weights(rows, cols);
                CHECK(std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0) < 1e-12);
                for (int r = 0; r < rows; ++r) {
                    for (int c = 0; c < cols; ++c) {
                        double x = w[r * cols + c];
                        CHECK(x == w[r * cols + (cols - 1 - c)]);
                        CHECK(x == w[(rows - 1 - r) * cols + c]);
                    }
                }
            }
        }
    }
}

TEST_CASE("gaussian aggregation uses the rectangle's own frame") {
    std::mt19937_64 rng(2);
    auto grid = pioner::testing::random_grid(rng, 4, 4, 3, false, {40, 40});
    // box over cells rows 1..3, cols 0..2 (3x3): center is cell (2,1)
    auto sel = select_patches(RegionSpec::box({0, 10, 30, 40}), grid);
    REQUIRE(sel.indices.size() == 9);
    auto w = mode_weights(sel, grid, AggregationMode::gaussian);
    auto g = gaussian_weights(3, 3);
    for (std::size_t i = 0; i < 9; ++i) CHECK(w[i] == g[i]);
}

TEST_CASE("gaussian on sparse selections is a mode error") {
    auto grid = tiny_grid();
    auto trace = select_patches(RegionSpec::trace({{1, 1}}), grid);
    CHECK_THROWS_AS(aggregate(trace, grid, AggregationMode::gaussian), ModeError);
    auto set = select_patches(RegionSpec::box_set({{0, 0, 5, 5}}), grid);
    CHECK_THROWS_AS(aggregate(set, grid, AggregationMode::gaussian), ModeError);
}

TEST_CASE("attention aggregation") {
    SUBCASE("all mass on one patch returns that patch") {
        std::mt19937_64 rng(5);
        std::vector<float> att(9, 0.f);
        att[4] = 1.f;
        auto base = pioner::testing::random_grid(rng, 3, 3, 4);
        PatchGrid grid(3, 3, 4, base.data(), base.source_resolution(), 14, att);
        auto emb = aggregate(select_patches(RegionSpec::image(), grid), grid, AggregationMode::attention);
        for (int d = 0; d < 4; ++d) CHECK(emb.vector[d] == double(grid.patch(4)[d]));
    }
    SUBCASE("missing map") {
        auto grid = tiny_grid(false);
        CHECK_THROWS_AS(aggregate(select_patches(RegionSpec::image(), grid), grid, AggregationMode::attention),
                        ModeError);
    }
    SUBCASE("zero mass over the selection") {
        auto grid = tiny_grid(true);
        auto sel = select_patches(RegionSpec::patch(0, 0), grid);
        CHECK_THROWS_AS(aggregate(sel, grid, AggregationMode::attention), DegenerateWeightError);
    }
}

TEST_CASE("singleton selections return the patch vector in every applicable mode") {
    std::mt19937_64 rng(8);
    auto grid = pioner::testing::random_grid(rng, 3, 5, 6, true);
    auto sel = select_patches(RegionSpec::patch(1, 3), grid);
    for (auto mode : {AggregationMode::uniform, AggregationMode::gaussian, AggregationMode::attention}) {
        auto emb = aggregate(sel, grid, mode);
        for (int d = 0; d < 6; ++d) CHECK(emb.vector[d] == double(grid.patch(grid.flat_index(1, 3))[d]));
    }
}

TEST_CASE("two orthogonal patches average to the midpoint") {
    PatchGrid grid(1, 2, 2, {1.f, 0.f, 0.f, 1.f}, {14, 28}, 14);
    auto emb = aggregate(select_patches(RegionSpec::image(), grid), grid, AggregationMode::uniform);
    CHECK(emb.vector == Vector{0.5, 0.5});
}

TEST_CASE("whole image equals a box covering the whole image") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 50; ++i) {
        auto grid = pioner::testing::random_instance_grid(rng, 8, 5, true);
        auto o = grid.original_size();
        RegionSpec full = RegionSpec::box({0, 0, double(o.width), double(o.height)});
        for (auto mode : {AggregationMode::uniform, AggregationMode::gaussian, AggregationMode::attention}) {
            auto a = aggregate(select_patches(RegionSpec::image(), grid), grid, mode);
            auto b = aggregate(select_patches(full, grid), grid, mode);
            CHECK(a.vector == b.vector);
        }
    }
}

TEST_CASE("uniform aggregation matches the brute-force definitions on random instances") {
    std::mt19937_64 rng(2024);
    for (int i = 0; i < 1000; ++i) {
        auto grid = pioner::testing::random_instance_grid(rng, 8, 4);
        auto spec = pioner::testing::random_region(rng, grid);
        Vector got;
        try {
            got = aggregate(select_patches(spec, grid), grid, AggregationMode::uniform).vector;
        } catch (const EmptySelectionError&) {
            FAIL("random valid region selected nothing");
        }
        CHECK(max_abs_diff(got, oracle::uniform_embedding(grid, spec)) < 1e-9);
    }
}

TEST_CASE("box selection matches the pixel-space overlap oracle") {
    std::mt19937_64 rng(99);
    for (int i = 0; i < 2000; ++i) {
        auto grid = pioner::testing::random_instance_grid(rng, 8, 1);
        auto spec = pioner::testing::random_region(rng, grid);
        if (spec.kind() != RegionKind::box) continue;
        const Box& b = std::get<BoxRegion>(spec.payload).box;
        CHECK(select_patches(spec, grid).indices ==
              oracle::box_cells(b, grid.rows(), grid.cols(), grid.original_size()));
    }
}

TEST_CASE("aggregation properties on random instances") {
    std::mt19937_64 rng(77);
    for (int i = 0; i < 300; ++i) {
        auto grid = pioner::testing::random_instance_grid(rng, 8, 3, true);
        auto spec = pioner::testing::random_region(rng, grid);
        auto sel = select_patches(spec, grid);
        validate(sel, grid);
        CHECK(std::abs(std::accumulate(sel.weights.begin(), sel.weights.end(), 0.0) - 1.0) < 1e-9);
        for (auto mode : {AggregationMode::uniform, AggregationMode::attention, AggregationMode::gaussian}) {
            RegionEmbedding emb;
            try {
                emb = aggregate(sel, grid, mode);
            } catch (const ModeError&) {
                CHECK(mode == AggregationMode::gaussian);
                continue;
            }
            // convex hull, coordinatewise
            for (int d = 0; d < grid.dim(); ++d) {
                double lo = 1e300, hi = -1e300;
                for (auto idx : sel.indices) {
                    lo = std::min(lo, double(grid.patch(idx)[d]));
                    hi = std::max(hi, double(grid.patch(idx)[d]));
                }
                CHECK(emb.vector[d] >= lo - 1e-12);
                CHECK(emb.vector[d] <= hi + 1e-12);
            }
        }
        // permutation invariance of the multiset
        auto shuffled = sel;
        std::vector<std::size_t> order(sel.indices.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t k = 0; k < order.size(); ++k) {
            shuffled.indices[k] = sel.indices[order[k]];
            shuffled.weights[k] = sel.weights[order[k]];
        }
        CHECK(aggregate(shuffled, grid, AggregationMode::uniform).vector ==
              aggregate(sel, grid, AggregationMode::uniform).vector);
    }
}

TEST_CASE("merged weights sum per patch") {
    auto grid = tiny_grid();
    auto sel = select_patches(RegionSpec::trace({{15, 15}, {1, 1}, {16, 16}}), grid);
    auto merged = merged_weights(sel, sel.weights);
    REQUIRE(merged.size() == 2);
    CHECK(merged[0].first == 0);
    CHECK(merged[0].second == doctest::Approx(1.0 / 3));
    CHECK(merged[1].first == 3);
    CHECK(merged[1].second == doctest::Approx(2.0 / 3));
}
