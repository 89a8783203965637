#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "streetsynth/util.hpp"

namespace streetsynth {

enum class Priority : std::uint8_t { P1, P2, Excluded };

inline const char* priority_name(Priority p) {
    switch (p) {
        case Priority::P1: return "P1";
        case Priority::P2: return "P2";
        default: return "Excluded";
    }
}

inline Priority priority_from_name(const std::string& s) {
    if (s == "P1") return Priority::P1;
    if (s == "P2") return Priority::P2;
    if (s == "Excluded") return Priority::Excluded;
    throw Error("unknown priority name: " + s);
}

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

inline double dist(const Vec2& a, const Vec2& b) {
    return std::hypot(a.x - b.x, a.y - b.y);
}

struct GraphEdge {
    std::uint32_t a = 0;  // a < b
    std::uint32_t b = 0;
    Priority priority = Priority::P2;
};

// Metadata describing the planar frame the vertex coordinates live in.
// origin is in world Web-Mercator meters; vertex coordinates are relative
// to it, x east and y south.
struct GraphFrame {
    double origin_x = 0.0;
    double origin_y = 0.0;
    double width_m = 0.0;
    double height_m = 0.0;
    double cell_m = 0.0;        // 0 when not cell-aligned
    int pixels_per_cell = 16;
};

// 2D-embedded undirected street graph. Straight edges only; curved streets
// are chains of vertices.
struct StreetGraph {
    GraphFrame frame;
    std::vector<Vec2> vertices;
    std::vector<GraphEdge> edges;

    double total_length() const {
        double sum = 0.0;
        for (const auto& e : edges) sum += dist(vertices[e.a], vertices[e.b]);
        return sum;
    }

    // Checks the structural invariants: index ranges, no self-loops, no
    // duplicate edges, finite coordinates, a<b ordering.
    void validate() const {
        std::vector<std::uint64_t> keys;
        keys.reserve(edges.size());
        for (const auto& e : edges) {
            if (e.a >= vertices.size() || e.b >= vertices.size())
                throw Error("graph edge index out of range");
            if (e.a == e.b) throw Error("graph self-loop");
            if (e.a > e.b) throw Error("graph edge not ordered a < b");
            keys.push_back((static_cast<std::uint64_t>(e.a) << 32) | e.b);
        }
        std::sort(keys.begin(), keys.end());
        if (std::adjacent_find(keys.begin(), keys.end()) != keys.end())
            throw Error("duplicate graph edge");
        for (const auto& v : vertices)
            if (!std::isfinite(v.x) || !std::isfinite(v.y))
                throw Error("non-finite vertex coordinate");
    }
};

// Per-vertex lists of (neighbor, edge index).
inline std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>>
adjacency(const StreetGraph& g) {
    std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> adj(g.vertices.size());
    for (std::uint32_t ei = 0; ei < g.edges.size(); ++ei) {
        const auto& e = g.edges[ei];
        adj[e.a].push_back({e.b, ei});
        adj[e.b].push_back({e.a, ei});
    }
    return adj;
}

// Connected-component label per vertex (union-find).
inline std::vector<std::uint32_t> component_labels(const StreetGraph& g) {
    std::vector<std::uint32_t> parent(g.vertices.size());
    for (std::uint32_t i = 0; i < parent.size(); ++i) parent[i] = i;
    std::function<std::uint32_t(std::uint32_t)> find = [&](std::uint32_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    for (const auto& e : g.edges) {
        auto ra = find(e.a), rb = find(e.b);
        if (ra != rb) parent[ra] = rb;
    }
    std::vector<std::uint32_t> label(g.vertices.size());
    for (std::uint32_t i = 0; i < label.size(); ++i) label[i] = find(i);
    return label;
}

// Drops vertices with no incident edge and remaps edge indices.
inline StreetGraph drop_isolated_vertices(const StreetGraph& g) {
    std::vector<bool> used(g.vertices.size(), false);
    for (const auto& e : g.edges) used[e.a] = used[e.b] = true;
    std::vector<std::uint32_t> remap(g.vertices.size(), 0);
    StreetGraph out;
    out.frame = g.frame;
    for (std::uint32_t i = 0; i < g.vertices.size(); ++i) {
        if (used[i]) {
            remap[i] = static_cast<std::uint32_t>(out.vertices.size());
            out.vertices.push_back(g.vertices[i]);
        }
    }
    out.edges.reserve(g.edges.size());
    for (const auto& e : g.edges)
        out.edges.push_back({remap[e.a], remap[e.b], e.priority});
    return out;
}

// ---------------------------------------------------------------------------
// JSON serialization:
//   {"frame": {...}, "vertices": [[x,y],...], "edges": [[i,j,"P1"],...]}
// ---------------------------------------------------------------------------

inline nlohmann::json graph_to_json(const StreetGraph& g) {
    nlohmann::json j;
    j["frame"] = {{"origin_x", g.frame.origin_x},
                  {"origin_y", g.frame.origin_y},
                  {"width_m", g.frame.width_m},
                  {"height_m", g.frame.height_m},
                  {"cell_m", g.frame.cell_m},
                  {"pixels_per_cell", g.frame.pixels_per_cell}};
    auto& verts = j["vertices"] = nlohmann::json::array();
    for (const auto& v : g.vertices) verts.push_back({v.x, v.y});
    auto& edges = j["edges"] = nlohmann::json::array();
    for (const auto& e : g.edges)
        edges.push_back({e.a, e.b, priority_name(e.priority)});
    return j;
}

inline StreetGraph graph_from_json(const nlohmann::json& j) {
    StreetGraph g;
    if (j.contains("frame")) {
        const auto& f = j.at("frame");
        g.frame.origin_x = f.value("origin_x", 0.0);
        g.frame.origin_y = f.value("origin_y", 0.0);
        g.frame.width_m = f.value("width_m", 0.0);
        g.frame.height_m = f.value("height_m", 0.0);
        g.frame.cell_m = f.value("cell_m", 0.0);
        g.frame.pixels_per_cell = f.value("pixels_per_cell", 16);
    }
    for (const auto& v : j.at("vertices"))
        g.vertices.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
    for (const auto& e : j.at("edges"))
        g.edges.push_back({e.at(0).get<std::uint32_t>(), e.at(1).get<std::uint32_t>(),
                           priority_from_name(e.at(2).get<std::string>())});
    g.validate();
    return g;
}

inline void save_graph(const StreetGraph& g, const std::filesystem::path& path) {
    atomic_write_file(path, graph_to_json(g).dump(1) + "\n");
}

inline StreetGraph load_graph(const std::filesystem::path& path) {
    try {
        return graph_from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("graph json: ") + e.what(), e.byte);
    }
}

}  // namespace streetsynth
