#pragma once

#include <cmath>

#include "streetsynth/util.hpp"

namespace streetsynth {

// WGS84 equatorial circumference in meters. At zoom 15 the resulting square
// crop side is 1222.992 m, one 16th of it 76.437 m, and a quarter of a cell
// 19.109 m.
constexpr double kEarthCircumferenceM = 40075016.686;
constexpr double kMaxMercatorLatDeg = 85.0511;
constexpr double kPi = 3.14159265358979323846;

struct GeoPoint {
    double lat = 0.0;  // degrees, [-90, 90]
    double lon = 0.0;  // degrees, [-180, 180]
};

struct XY {
    double x = 0.0;
    double y = 0.0;
};

// One square zoom-level tile used as a training crop, subdivided into
// cells_per_side x cells_per_side cells of pixels_per_cell x pixels_per_cell
// pixels each.
struct CropSpec {
    long tile_x = 0;
    long tile_y = 0;
    int zoom = 15;
    int cells_per_side = 16;
    int pixels_per_cell = 16;

    double side_m() const {
        return kEarthCircumferenceM / static_cast<double>(1L << zoom);
    }
    double cell_m() const { return side_m() / cells_per_side; }
    double pixel_m() const { return cell_m() / pixels_per_cell; }
    int pixels_per_side() const { return cells_per_side * pixels_per_cell; }
};

struct Bounds {
    double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;
    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
};

// Web-Mercator projection onto [0, C] x [0, C] meters. x grows east,
// y grows SOUTH (image row convention) so rasters and graphs share
// orientation.
inline XY project(const GeoPoint& p) {
    if (std::abs(p.lat) > kMaxMercatorLatDeg)
        throw OutOfProjectionRange("latitude " + std::to_string(p.lat) +
                                   " outside Web-Mercator range");
    const double phi = p.lat * kPi / 180.0;
    const double x = (p.lon + 180.0) / 360.0 * kEarthCircumferenceM;
    const double y =
        (1.0 - std::log(std::tan(phi) + 1.0 / std::cos(phi)) / kPi) / 2.0 *
        kEarthCircumferenceM;
    return {x, y};
}

inline GeoPoint unproject(const XY& m) {
    const double lon = m.x / kEarthCircumferenceM * 360.0 - 180.0;
    const double n = kPi * (1.0 - 2.0 * m.y / kEarthCircumferenceM);
    const double lat = (2.0 * std::atan(std::exp(n)) - kPi / 2.0) * 180.0 / kPi;
    return {lat, lon};
}

inline Bounds crop_bounds(const CropSpec& c) {
    const double side = c.side_m();
    Bounds b;
    b.x_min = static_cast<double>(c.tile_x) * side;
    b.y_min = static_cast<double>(c.tile_y) * side;
    b.x_max = b.x_min + side;
    b.y_max = b.y_min + side;
    return b;
}

// Fractional pixel coordinates of a world point within a crop; the crop's
// north-west corner maps to (0, 0) and integer coordinates are pixel centers.
// Points outside the crop simply land outside [0, pixels_per_side).
inline XY world_to_pixel(double x, double y, const CropSpec& c) {
    const Bounds b = crop_bounds(c);
    const double ppm = c.pixel_m();
    return {(x - b.x_min) / ppm, (y - b.y_min) / ppm};
}

// Tile coordinates whose crop contains a projected point.
inline std::pair<long, long> containing_tile(const XY& m, int zoom) {
    const double side = kEarthCircumferenceM / static_cast<double>(1L << zoom);
    return {static_cast<long>(std::floor(m.x / side)),
            static_cast<long>(std::floor(m.y / side))};
}

}  // namespace streetsynth
