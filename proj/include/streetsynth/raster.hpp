#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "streetsynth/geo.hpp"
#include "streetsynth/graph.hpp"
#include "streetsynth/util.hpp"

namespace streetsynth {

// Single-channel row-major grid of doubles. Binary masks use {0,1},
// normalized distance fields [0,1].
struct RasterField {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    RasterField() = default;
    RasterField(int h, int w, double fill = 0.0)
        : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

    double& at(int row, int col) { return values[static_cast<std::size_t>(row) * width + col]; }
    double at(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }
    bool in_bounds(int row, int col) const {
        return row >= 0 && row < height && col >= 0 && col < width;
    }
    bool is_binary() const {
        for (double v : values)
            if (v != 0.0 && v != 1.0) return false;
        return true;
    }
};

// A crop's placement inside the coordinate frame the graph lives in. For
// world-tiled crops use from_crop_spec; for region-local crops the origin is
// the crop's offset from the region origin.
struct CropFrame {
    double x_min = 0.0;
    double y_min = 0.0;
    double side_m = 0.0;
    int pixels = 256;

    double pixel_m() const { return side_m / pixels; }

    static CropFrame from_crop_spec(const CropSpec& c) {
        const Bounds b = crop_bounds(c);
        return {b.x_min, b.y_min, c.side_m(), c.pixels_per_side()};
    }
};

namespace detail {

// Half-integer ties round toward negative infinity.
inline int round_half_down(double v) {
    return static_cast<int>(std::ceil(v - 0.5));
}

template <typename SetPixel>
inline void bresenham(int x0, int y0, int x1, int y1, SetPixel&& set) {
    // Canonical endpoint order makes the pixel set independent of the
    // direction the edge was given in.
    if (x0 > x1 || (x0 == x1 && y0 > y1)) {
        std::swap(x0, x1);
        std::swap(y0, y1);
    }
    const int dx = std::abs(x1 - x0);
    const int dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1;
    const int sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    int x = x0, y = y0;
    while (true) {
        set(x, y);
        if (x == x1 && y == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y += sy;
        }
    }
}

}  // namespace detail

struct PriorityFilter {
    bool p1 = true;
    bool p2 = true;
    bool contains(Priority p) const {
        return (p == Priority::P1 && p1) || (p == Priority::P2 && p2);
    }
    static PriorityFilter only_p1() { return {true, false}; }
    static PriorityFilter only_p2() { return {false, true}; }
};

// Bresenham mask of all edges whose priority passes the filter. Graph
// coordinates must be in the same frame as `frame`; pixels outside the crop
// are simply not drawn.
inline RasterField rasterize(const StreetGraph& g, const CropFrame& frame,
                             PriorityFilter filter = {}) {
    RasterField out(frame.pixels, frame.pixels, 0.0);
    const double ppm = frame.pixel_m();
    for (const auto& e : g.edges) {
        if (!filter.contains(e.priority)) continue;
        const Vec2& a = g.vertices[e.a];
        const Vec2& b = g.vertices[e.b];
        const int x0 = detail::round_half_down((a.x - frame.x_min) / ppm);
        const int y0 = detail::round_half_down((a.y - frame.y_min) / ppm);
        const int x1 = detail::round_half_down((b.x - frame.x_min) / ppm);
        const int y1 = detail::round_half_down((b.y - frame.y_min) / ppm);
        // Skip segments that cannot touch the crop.
        if ((x0 < 0 && x1 < 0) || (x0 >= out.width && x1 >= out.width) ||
            (y0 < 0 && y1 < 0) || (y0 >= out.height && y1 >= out.height))
            continue;
        detail::bresenham(x0, y0, x1, y1, [&](int x, int y) {
            if (out.in_bounds(y, x)) out.at(y, x) = 1.0;
        });
    }
    return out;
}

inline RasterField rasterize(const StreetGraph& g, const CropSpec& crop,
                             PriorityFilter filter = {}) {
    return rasterize(g, CropFrame::from_crop_spec(crop), filter);
}

namespace detail {

// Felzenszwalb-Huttenlocher lower envelope of parabolas; exact squared
// distances in one dimension.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d,
                   std::vector<int>& v, std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    d.resize(n);
    v.resize(n);
    z.resize(n + 1);
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        double s;
        while (true) {
            const int p = v[k];
            s = ((f[q] + q * static_cast<double>(q)) - (f[p] + p * static_cast<double>(p))) /
                (2.0 * (q - p));
            if (s > z[k]) break;
            --k;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = q - v[k];
        d[q] = dq * dq + f[v[k]];
    }
}

}  // namespace detail

// Exact Euclidean distance transform of a binary mask, clamped at d_max_px
// pixels and normalized to [0,1]. Set pixels have value 0. An empty mask
// yields the all-ones field; *was_empty reports it when provided.
inline RasterField distance_field(const RasterField& mask, double d_max_px = 16.0,
                                  bool* was_empty = nullptr) {
    const int h = mask.height, w = mask.width;
    if (was_empty) *was_empty = false;
    bool any = false;
    for (double v : mask.values)
        if (v != 0.0) { any = true; break; }
    if (!any) {
        if (was_empty) *was_empty = true;
        return RasterField(h, w, 1.0);
    }

    constexpr double kInf = 1e18;
    RasterField sq(h, w, 0.0);
    for (std::size_t i = 0; i < mask.values.size(); ++i)
        sq.values[i] = mask.values[i] != 0.0 ? 0.0 : kInf;

    std::vector<double> col(h), dcol, row(w), drow, z;
    std::vector<int> v;
    for (int x = 0; x < w; ++x) {
        for (int y = 0; y < h; ++y) col[y] = sq.at(y, x);
        detail::edt_1d(col, dcol, v, z);
        for (int y = 0; y < h; ++y) sq.at(y, x) = dcol[y];
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) row[x] = sq.at(y, x);
        detail::edt_1d(row, drow, v, z);
        for (int x = 0; x < w; ++x) sq.at(y, x) = drow[x];
    }

    RasterField out(h, w, 0.0);
    for (std::size_t i = 0; i < sq.values.size(); ++i)
        out.values[i] = std::min(std::sqrt(sq.values[i]), d_max_px) / d_max_px;
    return out;
}

// 1 where the field is at or below tau.
inline RasterField threshold(const RasterField& df, double tau) {
    RasterField out(df.height, df.width, 0.0);
    for (std::size_t i = 0; i < df.values.size(); ++i)
        out.values[i] = df.values[i] <= tau ? 1.0 : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// SGR1 raster file: magic "SGR1", u32 height, u32 width, h*w f32 LE row-major.
// ---------------------------------------------------------------------------

inline std::string raster_to_bytes(const RasterField& f) {
    std::string out = "SGR1";
    append_u32(out, static_cast<std::uint32_t>(f.height));
    append_u32(out, static_cast<std::uint32_t>(f.width));
    out.reserve(out.size() + f.values.size() * 4);
    for (double v : f.values) append_f32(out, static_cast<float>(v));
    return out;
}

inline RasterField raster_from_bytes(const std::string& bytes, const std::string& what = "raster") {
    ByteReader r(bytes, what);
    r.expect_magic("SGR1");
    const std::uint32_t h = r.u32();
    const std::uint32_t w = r.u32();
    RasterField f(static_cast<int>(h), static_cast<int>(w));
    for (auto& v : f.values) v = r.f32();
    r.expect_end();
    return f;
}

inline void save_raster(const RasterField& f, const std::filesystem::path& path) {
    atomic_write_file(path, raster_to_bytes(f));
}

inline RasterField load_raster(const std::filesystem::path& path) {
    return raster_from_bytes(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit). Land-water convention: 0 = water, 255 = land; loading
// maps >= 128 to 1.
// ---------------------------------------------------------------------------

inline void save_pgm(const RasterField& f, const std::filesystem::path& path) {
    std::string out = "P5\n" + std::to_string(f.width) + " " + std::to_string(f.height) + "\n255\n";
    out.reserve(out.size() + f.values.size());
    for (double v : f.values) {
        const int byte = std::clamp(static_cast<int>(std::lround(v * 255.0)), 0, 255);
        out.push_back(static_cast<char>(byte));
    }
    atomic_write_file(path, out);
}

inline RasterField load_pgm(const std::filesystem::path& path, bool binarize = true) {
    const std::string bytes = read_file(path);
    std::size_t pos = 0;
    auto next_token = [&]() -> std::string {
        while (pos < bytes.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
        std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw IoError(path.string() + ": truncated PGM header");
        return bytes.substr(start, pos - start);
    };
    if (next_token() != "P5") throw IoError(path.string() + ": not a P5 PGM");
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (maxval != 255) throw IoError(path.string() + ": only 8-bit PGM supported");
    ++pos;  // single whitespace after maxval
    if (bytes.size() - pos < static_cast<std::size_t>(w) * h)
        throw IoError(path.string() + ": truncated PGM data");
    RasterField f(h, w);
    for (std::size_t i = 0; i < f.values.size(); ++i) {
        const unsigned char byte = static_cast<unsigned char>(bytes[pos + i]);
        f.values[i] = binarize ? (byte >= 128 ? 1.0 : 0.0) : byte / 255.0;
    }
    return f;
}

// ---------------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------------

struct RenderStyle {
    std::string p1_stroke = "#c0392b";
    std::string p2_stroke = "#2c3e50";
    double p1_width_m = 14.0;
    double p2_width_m = 7.0;
    std::string background = "#ffffff";
    double scale = 0.1;  // svg units per meter
};

// One path element per edge; output bytes are deterministic for equal inputs.
inline std::string render_svg(const StreetGraph& g, const RenderStyle& style = {}) {
    double x_max = g.frame.width_m, y_max = g.frame.height_m;
    if (x_max <= 0 || y_max <= 0) {
        for (const auto& v : g.vertices) {
            x_max = std::max(x_max, v.x);
            y_max = std::max(y_max, v.y);
        }
        x_max = std::max(x_max, 1.0);
        y_max = std::max(y_max, 1.0);
    }
    const double s = style.scale;
    std::string svg;
    svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt_fixed(x_max * s, 1) +
           "\" height=\"" + fmt_fixed(y_max * s, 1) + "\" viewBox=\"0 0 " +
           fmt_fixed(x_max * s, 1) + " " + fmt_fixed(y_max * s, 1) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"" + style.background + "\"/>\n";
    // P2 under P1.
    for (int pass = 0; pass < 2; ++pass) {
        const Priority want = pass == 0 ? Priority::P2 : Priority::P1;
        const std::string& stroke = pass == 0 ? style.p2_stroke : style.p1_stroke;
        const double width = (pass == 0 ? style.p2_width_m : style.p1_width_m) * s;
        for (const auto& e : g.edges) {
            if (e.priority != want) continue;
            const Vec2& a = g.vertices[e.a];
            const Vec2& b = g.vertices[e.b];
            svg += "<path d=\"M " + fmt_fixed(a.x * s) + " " + fmt_fixed(a.y * s) + " L " +
                   fmt_fixed(b.x * s) + " " + fmt_fixed(b.y * s) + "\" stroke=\"" + stroke +
                   "\" stroke-width=\"" + fmt_fixed(width) +
                   "\" stroke-linecap=\"round\" fill=\"none\"/>\n";
        }
    }
    svg += "</svg>\n";
    return svg;
}

}  // namespace streetsynth
