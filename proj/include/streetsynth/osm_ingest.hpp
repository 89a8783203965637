#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "streetsynth/geo.hpp"
#include "streetsynth/graph.hpp"

namespace streetsynth {

struct OsmWay {
    std::int64_t id = 0;
    std::vector<std::int64_t> node_ids;
    std::string highway;
};

struct RoadData {
    std::map<std::int64_t, GeoPoint> nodes;
    std::vector<OsmWay> ways;
    // Ways referencing missing nodes are dropped, not fatal.
    std::size_t dropped_way_count = 0;
};

// Priority assignment over highway tag values. Total: every string maps to
// something, unknown values are Excluded.
inline Priority classify(const std::string& highway_tag) {
    static const std::unordered_map<std::string, Priority> table = {
        {"motorway", Priority::P1},       {"trunk", Priority::P1},
        {"primary", Priority::P1},        {"secondary", Priority::P1},
        {"motorway_link", Priority::P1},  {"trunk_link", Priority::P1},
        {"primary_link", Priority::P1},   {"secondary_link", Priority::P1},
        {"tertiary", Priority::P2},       {"tertiary_link", Priority::P2},
        {"residential", Priority::P2},    {"living_street", Priority::P2},
        {"road", Priority::P2},           {"unclassified", Priority::P2},
    };
    const auto it = table.find(highway_tag);
    return it == table.end() ? Priority::Excluded : it->second;
}

// Parses an Overpass API JSON export: a top-level "elements" array of
// {"type":"node","id","lat","lon"} and {"type":"way","id","nodes",
// "tags":{"highway":...}} objects. Only ways carrying a highway tag are
// street candidates; ways referencing nodes absent from the document are
// dropped and counted.
inline RoadData parse_overpass(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("overpass json: ") + e.what(), e.byte);
    }
    if (!doc.is_object() || !doc.contains("elements") || !doc["elements"].is_array())
        throw ParseError("overpass json: missing top-level \"elements\" array", 0);

    RoadData data;
    std::vector<OsmWay> candidates;
    for (const auto& el : doc["elements"]) {
        if (!el.is_object() || !el.contains("type")) continue;
        const std::string type = el["type"].get<std::string>();
        try {
            if (type == "node") {
                GeoPoint p{el.at("lat").get<double>(), el.at("lon").get<double>()};
                data.nodes[el.at("id").get<std::int64_t>()] = p;
            } else if (type == "way") {
                if (!el.contains("tags") || !el["tags"].contains("highway")) continue;
                OsmWay w;
                w.id = el.at("id").get<std::int64_t>();
                w.highway = el["tags"]["highway"].get<std::string>();
                for (const auto& ref : el.at("nodes"))
                    w.node_ids.push_back(ref.get<std::int64_t>());
                if (w.node_ids.size() < 2) {
                    ++data.dropped_way_count;
                    continue;
                }
                candidates.push_back(std::move(w));
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("overpass json element: ") + e.what(), 0);
        }
    }
    for (auto& w : candidates) {
        bool complete = true;
        for (std::int64_t id : w.node_ids)
            if (!data.nodes.count(id)) { complete = false; break; }
        if (complete)
            data.ways.push_back(std::move(w));
        else
            ++data.dropped_way_count;
    }
    return data;
}

namespace detail {

// Liang-Barsky clip of segment p->q against an axis box. Returns false when
// the segment misses the box, otherwise [t0,t1] of the kept piece.
inline bool clip_segment(const Vec2& p, const Vec2& q, double x_max, double y_max,
                         double& t0, double& t1) {
    t0 = 0.0;
    t1 = 1.0;
    const double dx = q.x - p.x, dy = q.y - p.y;
    const double checks[4][2] = {
        {-dx, p.x - 0.0}, {dx, x_max - p.x}, {-dy, p.y - 0.0}, {dy, y_max - p.y}};
    for (const auto& c : checks) {
        const double denom = c[0], num = c[1];
        if (denom == 0.0) {
            if (num < 0.0) return false;
        } else {
            const double t = num / denom;
            if (denom < 0.0) {
                if (t > t1) return false;
                if (t > t0) t0 = t;
            } else {
                if (t < t0) return false;
                if (t < t1) t1 = t;
            }
        }
    }
    return t0 <= t1;
}

}  // namespace detail

// Projects road data into a rectangular frame and assembles the street graph:
// every retained node is a vertex, consecutive node pairs of non-Excluded
// ways become edges, duplicate segments collapse with P1 winning conflicts.
// Segments crossing the frame boundary are clipped; clip points become new
// vertices. Vertices without incident edges are dropped.
inline StreetGraph build_graph(const RoadData& d, const Bounds& region) {
    StreetGraph g;
    g.frame.origin_x = region.x_min;
    g.frame.origin_y = region.y_min;
    g.frame.width_m = region.width();
    g.frame.height_m = region.height();

    std::unordered_map<std::int64_t, Vec2> local;
    local.reserve(d.nodes.size());
    for (const auto& [id, p] : d.nodes) {
        const XY m = project(p);
        local[id] = {m.x - region.x_min, m.y - region.y_min};
    }

    std::unordered_map<std::int64_t, std::uint32_t> node_vertex;
    std::map<std::pair<double, double>, std::uint32_t> clip_vertex;
    auto vertex_for_node = [&](std::int64_t id) {
        auto it = node_vertex.find(id);
        if (it != node_vertex.end()) return it->second;
        const auto vid = static_cast<std::uint32_t>(g.vertices.size());
        g.vertices.push_back(local.at(id));
        node_vertex.emplace(id, vid);
        return vid;
    };
    auto vertex_for_clip = [&](const Vec2& v) {
        const auto key = std::make_pair(v.x, v.y);
        auto it = clip_vertex.find(key);
        if (it != clip_vertex.end()) return it->second;
        const auto vid = static_cast<std::uint32_t>(g.vertices.size());
        g.vertices.push_back(v);
        clip_vertex.emplace(key, vid);
        return vid;
    };

    std::map<std::pair<std::uint32_t, std::uint32_t>, Priority> edge_map;
    for (const auto& w : d.ways) {
        const Priority pr = classify(w.highway);
        if (pr == Priority::Excluded) continue;
        for (std::size_t i = 0; i + 1 < w.node_ids.size(); ++i) {
            const std::int64_t na = w.node_ids[i], nb = w.node_ids[i + 1];
            if (na == nb) continue;
            const Vec2 pa = local.at(na), pb = local.at(nb);
            double t0, t1;
            if (!detail::clip_segment(pa, pb, region.width(), region.height(), t0, t1))
                continue;
            const Vec2 ca{pa.x + t0 * (pb.x - pa.x), pa.y + t0 * (pb.y - pa.y)};
            const Vec2 cb{pa.x + t1 * (pb.x - pa.x), pa.y + t1 * (pb.y - pa.y)};
            const std::uint32_t va = t0 > 0.0 ? vertex_for_clip(ca) : vertex_for_node(na);
            const std::uint32_t vb = t1 < 1.0 ? vertex_for_clip(cb) : vertex_for_node(nb);
            if (va == vb) continue;
            auto key = std::minmax(va, vb);
            auto [it, inserted] = edge_map.emplace(key, pr);
            if (!inserted && pr == Priority::P1) it->second = Priority::P1;
        }
    }

    g.edges.reserve(edge_map.size());
    for (const auto& [key, pr] : edge_map)
        g.edges.push_back({key.first, key.second, pr});
    g = drop_isolated_vertices(g);
    g.validate();
    return g;
}

inline StreetGraph build_graph(const RoadData& d, const CropSpec& crop) {
    StreetGraph g = build_graph(d, crop_bounds(crop));
    g.frame.cell_m = crop.cell_m();
    g.frame.pixels_per_cell = crop.pixels_per_cell;
    return g;
}

}  // namespace streetsynth
