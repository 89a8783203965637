#pragma once

#include <array>
#include <vector>

#include <json.hpp>

#include "streetsynth/graph.hpp"
#include "streetsynth/raster.hpp"
#include "streetsynth/util.hpp"

namespace streetsynth {

// Default sample spacing: a quarter cell, 76.437 m / 4.
inline double default_density_resolution_m() {
    return kEarthCircumferenceM / (1 << 15) / 16.0 / 4.0;
}

// Window for local density averaging: one crop side.
inline double default_density_window_m() {
    return kEarthCircumferenceM / (1 << 15);
}

// Precomputed global street-density map: each sample holds street length per
// unit area (m / m^2) over the sample's square footprint.
struct DensityGrid {
    double resolution_m = 0.0;
    double origin_x = 0.0;  // frame coordinates of the grid's NW corner
    double origin_y = 0.0;
    int height = 0;  // samples
    int width = 0;
    std::vector<double> values;

    double& at(int row, int col) { return values[static_cast<std::size_t>(row) * width + col]; }
    double at(int row, int col) const {
        return values[static_cast<std::size_t>(row) * width + col];
    }
};

// Accumulates exact per-sample clipped edge length, then divides by the
// footprint area. Edge pieces outside the grid are ignored.
inline DensityGrid build_density_grid(const StreetGraph& g, const Bounds& region,
                                      double resolution_m = default_density_resolution_m()) {
    DensityGrid grid;
    grid.resolution_m = resolution_m;
    grid.origin_x = region.x_min;
    grid.origin_y = region.y_min;
    grid.width = static_cast<int>(std::ceil(region.width() / resolution_m - 1e-9));
    grid.height = static_cast<int>(std::ceil(region.height() / resolution_m - 1e-9));
    grid.values.assign(static_cast<std::size_t>(grid.width) * grid.height, 0.0);

    const double res = resolution_m;
    std::vector<double> ts;
    for (const auto& e : g.edges) {
        // Segment in grid units relative to the grid origin.
        const double ax = (g.vertices[e.a].x - region.x_min) / res;
        const double ay = (g.vertices[e.a].y - region.y_min) / res;
        const double bx = (g.vertices[e.b].x - region.x_min) / res;
        const double by = (g.vertices[e.b].y - region.y_min) / res;
        const double len_m = dist(g.vertices[e.a], g.vertices[e.b]);
        if (len_m <= 0.0) continue;

        // Split the parameter range at every gridline crossing; each piece
        // lies inside a single sample square.
        ts.clear();
        ts.push_back(0.0);
        ts.push_back(1.0);
        const double dx = bx - ax, dy = by - ay;
        auto add_crossings = [&](double a0, double d, int count) {
            if (d == 0.0) return;
            const int lo = static_cast<int>(std::floor(std::min(a0, a0 + d)));
            const int hi = static_cast<int>(std::ceil(std::max(a0, a0 + d)));
            for (int k = std::max(lo, 0); k <= std::min(hi, count); ++k) {
                const double t = (k - a0) / d;
                if (t > 0.0 && t < 1.0) ts.push_back(t);
            }
        };
        add_crossings(ax, dx, grid.width);
        add_crossings(ay, dy, grid.height);
        std::sort(ts.begin(), ts.end());

        for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
            const double t0 = ts[i], t1 = ts[i + 1];
            if (t1 - t0 <= 0.0) continue;
            const double tm = 0.5 * (t0 + t1);
            const int col = static_cast<int>(std::floor(ax + tm * dx));
            const int row = static_cast<int>(std::floor(ay + tm * dy));
            if (col < 0 || col >= grid.width || row < 0 || row >= grid.height) continue;
            grid.at(row, col) += len_m * (t1 - t0);
        }
    }

    const double area = res * res;
    for (auto& v : grid.values) v /= area;
    return grid;
}

// Box-filter sampler over a DensityGrid backed by a summed-area table, so a
// window mean is O(1) per query. Windows are zero-padded outside the grid;
// the divisor is always the full window sample count.
class DensitySampler {
public:
    explicit DensitySampler(const DensityGrid& grid,
                            double window_m = default_density_window_m())
        : grid_(grid), window_m_(window_m) {
        window_samples_ = static_cast<int>(std::llround(window_m / grid.resolution_m));
        if (window_samples_ < 1) window_samples_ = 1;
        const int h = grid.height, w = grid.width;
        sat_.assign(static_cast<std::size_t>(h + 1) * (w + 1), 0.0);
        for (int r = 0; r < h; ++r) {
            double rowsum = 0.0;
            for (int c = 0; c < w; ++c) {
                rowsum += grid.at(r, c);
                sat_[idx(r + 1, c + 1)] = sat_[idx(r, c + 1)] + rowsum;
            }
        }
    }

    // Mean of the grid over the window centered on the sample containing
    // (x, y); frame coordinates.
    double window_mean(double x, double y) const {
        const int n = window_samples_;
        const int ic = static_cast<int>(std::floor((x - grid_.origin_x) / grid_.resolution_m));
        const int ir = static_cast<int>(std::floor((y - grid_.origin_y) / grid_.resolution_m));
        const int c0 = ic - n / 2, r0 = ir - n / 2;
        const double sum = box_sum(r0, c0, r0 + n, c0 + n);
        return sum / (static_cast<double>(n) * n);
    }

    // The 4x4 window means for one cell: row-major over the cell's sample
    // positions, each at the center of one quarter-cell.
    std::array<double, 16> cell_density(double cell_center_x, double cell_center_y,
                                        double cell_m) const {
        std::array<double, 16> out{};
        for (int a = 0; a < 4; ++a) {
            for (int b = 0; b < 4; ++b) {
                const double sy = cell_center_y + ((a + 0.5) / 4.0 - 0.5) * cell_m;
                const double sx = cell_center_x + ((b + 0.5) / 4.0 - 0.5) * cell_m;
                out[a * 4 + b] = window_mean(sx, sy);
            }
        }
        return out;
    }

    int window_samples() const { return window_samples_; }

private:
    std::size_t idx(int r, int c) const {
        return static_cast<std::size_t>(r) * (grid_.width + 1) + c;
    }
    // Sum over sample rows [r0,r1) x cols [c0,c1), clamped to the grid.
    double box_sum(int r0, int c0, int r1, int c1) const {
        r0 = std::clamp(r0, 0, grid_.height);
        r1 = std::clamp(r1, 0, grid_.height);
        c0 = std::clamp(c0, 0, grid_.width);
        c1 = std::clamp(c1, 0, grid_.width);
        if (r0 >= r1 || c0 >= c1) return 0.0;
        return sat_[idx(r1, c1)] - sat_[idx(r0, c1)] - sat_[idx(r1, c0)] + sat_[idx(r0, c0)];
    }

    const DensityGrid& grid_;
    double window_m_;
    int window_samples_;
    std::vector<double> sat_;
};

// Convenience one-shot form; pipelines keep a DensitySampler instead.
inline std::array<double, 16> sample_cell_density(const DensityGrid& grid, double cell_center_x,
                                                  double cell_center_y, double cell_m,
                                                  double window_m = default_density_window_m()) {
    return DensitySampler(grid, window_m).cell_density(cell_center_x, cell_center_y, cell_m);
}

// ---------------------------------------------------------------------------
// Storage: SGR1 raster plus a JSON sidecar {resolution_m, origin}.
// ---------------------------------------------------------------------------

inline void save_density_grid(const DensityGrid& grid, const std::filesystem::path& raster_path,
                              const std::filesystem::path& sidecar_path) {
    RasterField f(grid.height, grid.width);
    f.values = grid.values;
    save_raster(f, raster_path);
    nlohmann::json meta = {{"resolution_m", grid.resolution_m},
                           {"origin", {grid.origin_x, grid.origin_y}}};
    atomic_write_file(sidecar_path, meta.dump(1) + "\n");
}

inline DensityGrid load_density_grid(const std::filesystem::path& raster_path,
                                     const std::filesystem::path& sidecar_path) {
    const RasterField f = load_raster(raster_path);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(read_file(sidecar_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("density sidecar: ") + e.what(), e.byte);
    }
    DensityGrid grid;
    grid.resolution_m = meta.at("resolution_m").get<double>();
    grid.origin_x = meta.at("origin").at(0).get<double>();
    grid.origin_y = meta.at("origin").at(1).get<double>();
    grid.height = f.height;
    grid.width = f.width;
    grid.values = f.values;
    return grid;
}

}  // namespace streetsynth
