#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "streetsynth/raster.hpp"

using namespace streetsynth;

namespace {

// Crop frame with 1 m pixels for pixel-exact geometry tests.
CropFrame unit_frame(int pixels) { return {0.0, 0.0, static_cast<double>(pixels), pixels}; }

StreetGraph graph_of_edges(const std::vector<std::pair<Vec2, Vec2>>& segs,
                           Priority pr = Priority::P2) {
    StreetGraph g;
    for (const auto& [a, b] : segs) {
        const auto ia = static_cast<std::uint32_t>(g.vertices.size());
        g.vertices.push_back(a);
        g.vertices.push_back(b);
        g.edges.push_back({ia, static_cast<std::uint32_t>(ia + 1), pr});
    }
    return g;
}

std::set<std::pair<int, int>> set_pixels(const RasterField& f) {
    std::set<std::pair<int, int>> out;
    for (int r = 0; r < f.height; ++r)
        for (int c = 0; c < f.width; ++c)
            if (f.at(r, c) == 1.0) out.insert({r, c});
    return out;
}

// Dense sampling oracle: walk the segment in 0.1-px steps and round each
// sample to its pixel. Bresenham may leave out one staircase neighbor per
// step, so the check allows set pixels adjacent to sampled ones.
std::set<std::pair<int, int>> sampled_pixels(const Vec2& a, const Vec2& b) {
    std::set<std::pair<int, int>> out;
    const double len = std::max(std::hypot(b.x - a.x, b.y - a.y), 1e-9);
    const int steps = static_cast<int>(len / 0.1) + 1;
    for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        const double x = a.x + t * (b.x - a.x);
        const double y = a.y + t * (b.y - a.y);
        out.insert({static_cast<int>(std::ceil(y - 0.5)), static_cast<int>(std::ceil(x - 0.5))});
    }
    return out;
}

}  // namespace

TEST(Rasterize, DiagonalBresenham) {
    const auto g = graph_of_edges({{{0, 0}, {2, 2}}});
    const auto mask = rasterize(g, unit_frame(8));
    EXPECT_EQ(set_pixels(mask),
              (std::set<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}}));
}

TEST(Rasterize, EmptyGraphAllZero) {
    const auto mask = rasterize(StreetGraph{}, unit_frame(16));
    for (double v : mask.values) EXPECT_EQ(v, 0.0);
}

TEST(Rasterize, DefaultCropSpecIs256) {
    const CropSpec crop{0, 0, 15};
    const auto mask = rasterize(StreetGraph{}, crop);
    EXPECT_EQ(mask.height, 256);
    EXPECT_EQ(mask.width, 256);
}

TEST(Rasterize, MatchesDenseSamplingOracle) {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::pair<Vec2, Vec2>> segs;
        for (int e = 0; e < 10; ++e) {
            segs.push_back({{rng.uniform(0.0, 63.0), rng.uniform(0.0, 63.0)},
                            {rng.uniform(0.0, 63.0), rng.uniform(0.0, 63.0)}});
        }
        const auto g = graph_of_edges(segs);
        const auto actual = set_pixels(rasterize(g, unit_frame(64)));
        std::set<std::pair<int, int>> expected;
        for (const auto& [a, b] : segs)
            for (const auto& px : sampled_pixels(a, b)) expected.insert(px);
        // Every sampled pixel is set or has a set 4-neighbor on the line
        // (the usual Bresenham staircase ambiguity), and every set pixel is
        // within one pixel of a sampled one.
        for (const auto& [r, c] : expected) {
            const bool hit = actual.count({r, c}) || actual.count({r + 1, c}) ||
                             actual.count({r - 1, c}) || actual.count({r, c + 1}) ||
                             actual.count({r, c - 1});
            EXPECT_TRUE(hit) << "missing pixel near (" << r << "," << c << ")";
        }
        for (const auto& [r, c] : actual) {
            bool near = false;
            for (int dr = -1; dr <= 1 && !near; ++dr)
                for (int dc = -1; dc <= 1 && !near; ++dc)
                    near = expected.count({r + dr, c + dc}) != 0;
            EXPECT_TRUE(near) << "spurious pixel (" << r << "," << c << ")";
        }
    }
}

TEST(Rasterize, DirectionInvariant) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const Vec2 a{rng.uniform(0.0, 31.0), rng.uniform(0.0, 31.0)};
        const Vec2 b{rng.uniform(0.0, 31.0), rng.uniform(0.0, 31.0)};
        const auto fwd = rasterize(graph_of_edges({{a, b}}), unit_frame(32));
        const auto rev = rasterize(graph_of_edges({{b, a}}), unit_frame(32));
        EXPECT_EQ(fwd.values, rev.values);
    }
}

TEST(Rasterize, PriorityFilter) {
    StreetGraph g;
    g.vertices = {{1, 1}, {9, 1}, {1, 5}, {9, 5}};
    g.edges = {{0, 1, Priority::P1}, {2, 3, Priority::P2}};
    const auto p1 = rasterize(g, unit_frame(16), PriorityFilter::only_p1());
    const auto p2 = rasterize(g, unit_frame(16), PriorityFilter::only_p2());
    EXPECT_EQ(p1.at(1, 5), 1.0);
    EXPECT_EQ(p1.at(5, 5), 0.0);
    EXPECT_EQ(p2.at(5, 5), 1.0);
    EXPECT_EQ(p2.at(1, 5), 0.0);
}

TEST(Rasterize, EdgesOutsideCropContributeNothing) {
    const auto g = graph_of_edges({{{-50, -50}, {-10, -20}}, {{300, 10}, {400, 90}}});
    const auto mask = rasterize(g, unit_frame(64));
    for (double v : mask.values) EXPECT_EQ(v, 0.0);
}

TEST(DistanceField, SinglePixelThreeFourFive) {
    RasterField mask(16, 16, 0.0);
    mask.at(0, 0) = 1.0;
    const auto df = distance_field(mask, 16.0);
    EXPECT_DOUBLE_EQ(df.at(4, 3), 5.0 / 16.0);  // 3-4-5 triangle
    EXPECT_DOUBLE_EQ(df.at(0, 0), 0.0);
}

TEST(DistanceField, SetPixelsAreZeroExactly) {
    Rng rng(13);
    RasterField mask(32, 32, 0.0);
    for (int i = 0; i < 40; ++i)
        mask.at(static_cast<int>(rng.uniform_int(32)), static_cast<int>(rng.uniform_int(32))) = 1.0;
    const auto df = distance_field(mask);
    for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c)
            EXPECT_EQ(df.at(r, c) == 0.0, mask.at(r, c) == 1.0);
}

TEST(DistanceField, MatchesBruteForceOracle) {
    Rng rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        RasterField mask(32, 32, 0.0);
        const int count = 1 + static_cast<int>(rng.uniform_int(80));
        for (int i = 0; i < count; ++i)
            mask.at(static_cast<int>(rng.uniform_int(32)),
                    static_cast<int>(rng.uniform_int(32))) = 1.0;
        const double d_max = 16.0;
        const auto df = distance_field(mask, d_max);
        // O(N^2 M) nearest-set-pixel scan.
        for (int r = 0; r < 32; ++r) {
            for (int c = 0; c < 32; ++c) {
                double best = std::numeric_limits<double>::infinity();
                for (int rr = 0; rr < 32; ++rr)
                    for (int cc = 0; cc < 32; ++cc)
                        if (mask.at(rr, cc) == 1.0)
                            best = std::min(best, std::hypot(r - rr, c - cc));
                const double expected = std::min(best, d_max) / d_max;
                EXPECT_NEAR(df.at(r, c), expected, 1e-12);
            }
        }
    }
}

TEST(DistanceField, EmptyMaskAllOnesWithFlag) {
    bool empty = false;
    const auto df = distance_field(RasterField(8, 8, 0.0), 16.0, &empty);
    EXPECT_TRUE(empty);
    for (double v : df.values) EXPECT_EQ(v, 1.0);
}

TEST(DistanceField, LipschitzInPixelUnits) {
    Rng rng(31);
    RasterField mask(48, 48, 0.0);
    for (int i = 0; i < 15; ++i)
        mask.at(static_cast<int>(rng.uniform_int(48)), static_cast<int>(rng.uniform_int(48))) = 1.0;
    const double d_max = 16.0;
    const auto df = distance_field(mask, d_max);
    for (int r = 0; r + 1 < 48; ++r) {
        for (int c = 0; c + 1 < 48; ++c) {
            EXPECT_LE(std::abs(df.at(r, c) - df.at(r + 1, c)) * d_max, 1.0 + 1e-12);
            EXPECT_LE(std::abs(df.at(r, c) - df.at(r, c + 1)) * d_max, 1.0 + 1e-12);
        }
    }
}

TEST(Threshold, ZeroTauReproducesMask) {
    Rng rng(8);
    RasterField mask(24, 24, 0.0);
    for (int i = 0; i < 60; ++i)
        mask.at(static_cast<int>(rng.uniform_int(24)), static_cast<int>(rng.uniform_int(24))) = 1.0;
    const auto back = threshold(distance_field(mask), 0.0);
    EXPECT_EQ(back.values, mask.values);
}

TEST(Threshold, TauOneIsAllOnes) {
    RasterField mask(8, 8, 0.0);
    mask.at(3, 3) = 1.0;
    const auto all = threshold(distance_field(mask), 1.0);
    for (double v : all.values) EXPECT_EQ(v, 1.0);
}

TEST(Threshold, TwoPixelDiskHasThirteenPixels) {
    RasterField mask(33, 33, 0.0);
    mask.at(16, 16) = 1.0;
    const auto disk = threshold(distance_field(mask), 2.0 / 16.0);
    int count = 0;
    for (double v : disk.values) count += v == 1.0 ? 1 : 0;
    // Integer points with dx^2+dy^2 <= 4: 1 + 4 + 4 + 4 = 13.
    EXPECT_EQ(count, 13);
}

TEST(RasterIo, RoundTrip) {
    Rng rng(99);
    RasterField f(7, 5);
    for (auto& v : f.values) v = static_cast<float>(rng.uniform());
    const auto path = std::filesystem::temp_directory_path() / "streetsynth_test.sgr";
    save_raster(f, path);
    const auto g = load_raster(path);
    EXPECT_EQ(g.height, 7);
    EXPECT_EQ(g.width, 5);
    EXPECT_EQ(g.values, f.values);
    std::filesystem::remove(path);
}

TEST(RasterIo, RejectsBadMagic) {
    EXPECT_THROW(raster_from_bytes("NOPE"), IoError);
    EXPECT_THROW(raster_from_bytes("SGR1\x01"), IoError);
}

TEST(PgmIo, RoundTripBinaryMask) {
    RasterField f(4, 6, 0.0);
    f.at(1, 2) = 1.0;
    f.at(3, 5) = 1.0;
    const auto path = std::filesystem::temp_directory_path() / "streetsynth_test.pgm";
    save_pgm(f, path);
    const auto g = load_pgm(path);
    EXPECT_EQ(g.values, f.values);
    std::filesystem::remove(path);
}

TEST(RenderSvg, EmptyGraphIsValidWithNoPaths) {
    const std::string svg = render_svg(StreetGraph{});
    EXPECT_NE(svg.find("<svg"), std::string::npos);
    EXPECT_EQ(svg.find("<path"), std::string::npos);
}

TEST(RenderSvg, OneEdgeOnePath) {
    StreetGraph g;
    g.vertices = {{0, 0}, {100, 50}};
    g.edges = {{0, 1, Priority::P2}};
    const std::string svg = render_svg(g);
    std::size_t count = 0, pos = 0;
    while ((pos = svg.find("<path", pos)) != std::string::npos) {
        ++count;
        ++pos;
    }
    EXPECT_EQ(count, 1u);
}

TEST(RenderSvg, DeterministicBytes) {
    StreetGraph g;
    g.vertices = {{0, 0}, {100, 50}, {20, 80}};
    g.edges = {{0, 1, Priority::P1}, {1, 2, Priority::P2}};
    EXPECT_EQ(render_svg(g), render_svg(g));
}
