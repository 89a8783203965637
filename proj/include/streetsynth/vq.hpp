#pragma once

#include <cstdint>
#include <vector>

#include "streetsynth/raster.hpp"
#include "streetsynth/util.hpp"

namespace streetsynth {

// Learned dictionary of patch prototypes. Row-major K x dim; dim is a square
// (patch_side^2), 16x16 = 256 by default.
struct Codebook {
    int k = 0;
    int dim = 0;
    std::vector<double> centroids;

    const double* centroid(int i) const { return centroids.data() + static_cast<std::size_t>(i) * dim; }
    double* centroid(int i) { return centroids.data() + static_cast<std::size_t>(i) * dim; }
    int patch_side() const {
        const int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(dim))));
        if (s * s != dim) throw Error("codebook dim is not a square");
        return s;
    }
};

// Grid of codebook indices, one per cell. k records the codebook size the
// indices refer to.
struct IndexField {
    int height = 0;
    int width = 0;
    std::uint32_t k = 0;
    std::vector<std::uint32_t> indices;

    IndexField() = default;
    IndexField(int h, int w, std::uint32_t k_)
        : height(h), width(w), k(k_), indices(static_cast<std::size_t>(h) * w, 0) {}

    std::uint32_t& at(int row, int col) {
        return indices[static_cast<std::size_t>(row) * width + col];
    }
    std::uint32_t at(int row, int col) const {
        return indices[static_cast<std::size_t>(row) * width + col];
    }
};

namespace detail {

inline double sq_dist(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// Nearest centroid in squared Euclidean distance; ties break toward the
// lowest index (strict < while scanning in order).
inline int nearest_centroid(const double* p, const Codebook& cb) {
    int best = 0;
    double best_d = sq_dist(p, cb.centroid(0), cb.dim);
    for (int c = 1; c < cb.k; ++c) {
        const double d = sq_dist(p, cb.centroid(c), cb.dim);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

}  // namespace detail

// k-means with k-means++ seeding. Deterministic under the seed; assignment
// parallelizes over patches with per-chunk partial sums reduced in chunk
// order. Empty clusters are re-seeded with the point farthest from its
// centroid. The quantization error is non-increasing across iterations.
inline Codebook fit_codebook(const std::vector<double>& patches, int n, int dim, int k,
                             std::uint64_t seed, int max_iters = 100, double tol = 1e-6,
                             std::vector<double>* error_log = nullptr) {
    if (n < k) throw TooFewPatches("fit_codebook: " + std::to_string(n) + " patches < k=" +
                                   std::to_string(k));
    if (static_cast<std::size_t>(n) * dim != patches.size())
        throw DimensionMismatch("fit_codebook: patch buffer size mismatch");
    for (double v : patches)
        if (!std::isfinite(v)) throw Error("fit_codebook: non-finite patch value");

    const auto patch = [&](int i) { return patches.data() + static_cast<std::size_t>(i) * dim; };

    Codebook cb;
    cb.k = k;
    cb.dim = dim;
    cb.centroids.assign(static_cast<std::size_t>(k) * dim, 0.0);

    // k-means++ seeding.
    Rng rng(seed);
    std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
    {
        const int first = static_cast<int>(rng.uniform_int(n));
        std::copy_n(patch(first), dim, cb.centroid(0));
        for (int c = 1; c < k; ++c) {
            double total = 0.0;
            for (int i = 0; i < n; ++i) {
                const double d = detail::sq_dist(patch(i), cb.centroid(c - 1), dim);
                if (d < min_d[i]) min_d[i] = d;
                total += min_d[i];
            }
            int chosen = -1;
            if (total > 0.0) {
                double target = rng.uniform() * total;
                for (int i = 0; i < n; ++i) {
                    target -= min_d[i];
                    if (target <= 0.0) {
                        chosen = i;
                        break;
                    }
                }
            }
            if (chosen < 0) chosen = static_cast<int>(rng.uniform_int(n));
            std::copy_n(patch(chosen), dim, cb.centroid(c));
        }
    }

    std::vector<int> assign(n, 0);
    std::vector<double> dist_to_centroid(n, 0.0);
    const int max_chunks = thread_count();

    for (int iter = 0; iter < max_iters; ++iter) {
        // Assignment (parallel, deterministic reduction by chunk order).
        std::vector<std::vector<double>> sums(max_chunks);
        std::vector<std::vector<std::int64_t>> counts(max_chunks);
        std::vector<double> errors(max_chunks, 0.0);
        parallel_chunks(n, [&](int chunk, std::int64_t lo, std::int64_t hi) {
            auto& sum = sums[chunk];
            auto& count = counts[chunk];
            sum.assign(static_cast<std::size_t>(k) * dim, 0.0);
            count.assign(k, 0);
            double err = 0.0;
            for (std::int64_t i = lo; i < hi; ++i) {
                const double* p = patch(static_cast<int>(i));
                const int c = detail::nearest_centroid(p, cb);
                assign[i] = c;
                dist_to_centroid[i] = detail::sq_dist(p, cb.centroid(c), dim);
                err += dist_to_centroid[i];
                double* s = sum.data() + static_cast<std::size_t>(c) * dim;
                for (int j = 0; j < dim; ++j) s[j] += p[j];
                ++count[c];
            }
            errors[chunk] = err;
        });

        double error = 0.0;
        std::vector<double> total_sum(static_cast<std::size_t>(k) * dim, 0.0);
        std::vector<std::int64_t> total_count(k, 0);
        for (int c = 0; c < max_chunks; ++c) {
            if (sums[c].empty()) continue;
            error += errors[c];
            for (std::size_t j = 0; j < total_sum.size(); ++j) total_sum[j] += sums[c][j];
            for (int j = 0; j < k; ++j) total_count[j] += counts[c][j];
        }
        if (error_log) error_log->push_back(error);

        // Update step.
        double max_move_sq = 0.0;
        for (int c = 0; c < k; ++c) {
            if (total_count[c] == 0) continue;
            double move = 0.0;
            double* ctr = cb.centroid(c);
            const double inv = 1.0 / static_cast<double>(total_count[c]);
            for (int j = 0; j < dim; ++j) {
                const double nc = total_sum[static_cast<std::size_t>(c) * dim + j] * inv;
                const double d = nc - ctr[j];
                move += d * d;
                ctr[j] = nc;
            }
            max_move_sq = std::max(max_move_sq, move);
        }

        // Re-seed empty clusters with the point farthest from its centroid.
        for (int c = 0; c < k; ++c) {
            if (total_count[c] != 0) continue;
            int far = 0;
            double far_d = -1.0;
            for (int i = 0; i < n; ++i) {
                if (dist_to_centroid[i] > far_d) {
                    far_d = dist_to_centroid[i];
                    far = i;
                }
            }
            std::copy_n(patch(far), dim, cb.centroid(c));
            dist_to_centroid[far] = 0.0;
            max_move_sq = std::numeric_limits<double>::infinity();
        }

        if (max_move_sq < tol * tol) break;
    }
    return cb;
}

// Cuts a field into non-overlapping patch_side x patch_side patches aligned
// to the cell grid and maps each to its nearest centroid.
inline IndexField encode(const RasterField& df, const Codebook& cb) {
    const int side = cb.patch_side();
    if (df.height % side != 0 || df.width % side != 0)
        throw DimensionMismatch("encode: field dimensions not divisible by patch side");
    const int hq = df.height / side, wq = df.width / side;
    IndexField out(hq, wq, static_cast<std::uint32_t>(cb.k));
    std::vector<double> patch(static_cast<std::size_t>(cb.dim));
    for (int r = 0; r < hq; ++r) {
        for (int c = 0; c < wq; ++c) {
            for (int pr = 0; pr < side; ++pr)
                for (int pc = 0; pc < side; ++pc)
                    patch[static_cast<std::size_t>(pr) * side + pc] =
                        df.at(r * side + pr, c * side + pc);
            out.at(r, c) = static_cast<std::uint32_t>(detail::nearest_centroid(patch.data(), cb));
        }
    }
    return out;
}

// Pastes each cell's centroid patch back into a raster; values clamped to [0,1].
inline RasterField decode(const IndexField& f, const Codebook& cb) {
    const int side = cb.patch_side();
    RasterField out(f.height * side, f.width * side);
    for (int r = 0; r < f.height; ++r) {
        for (int c = 0; c < f.width; ++c) {
            const std::uint32_t idx = f.at(r, c);
            if (idx >= static_cast<std::uint32_t>(cb.k))
                throw IndexOutOfRange("decode: index " + std::to_string(idx) + " >= k=" +
                                      std::to_string(cb.k));
            const double* ctr = cb.centroid(static_cast<int>(idx));
            for (int pr = 0; pr < side; ++pr)
                for (int pc = 0; pc < side; ++pc)
                    out.at(r * side + pr, c * side + pc) =
                        std::clamp(ctr[static_cast<std::size_t>(pr) * side + pc], 0.0, 1.0);
        }
    }
    return out;
}

// Optional 3x3 box smoothing to soften patch seams before thresholding.
inline RasterField box_smooth3(const RasterField& f) {
    RasterField out(f.height, f.width);
    for (int r = 0; r < f.height; ++r) {
        for (int c = 0; c < f.width; ++c) {
            double sum = 0.0;
            int count = 0;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc)
                    if (f.in_bounds(r + dr, c + dc)) {
                        sum += f.at(r + dr, c + dc);
                        ++count;
                    }
            out.at(r, c) = sum / count;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Codebook file "SGC1": u32 K, u32 D, K*D f32 LE.
// IndexField file "SGI1": u32 H, u32 W, u32 K, H*W u32 LE.
// ---------------------------------------------------------------------------

inline std::string codebook_to_bytes(const Codebook& cb) {
    std::string out = "SGC1";
    append_u32(out, static_cast<std::uint32_t>(cb.k));
    append_u32(out, static_cast<std::uint32_t>(cb.dim));
    for (double v : cb.centroids) append_f32(out, static_cast<float>(v));
    return out;
}

inline Codebook codebook_from_bytes(const std::string& bytes, const std::string& what = "codebook") {
    ByteReader r(bytes, what);
    r.expect_magic("SGC1");
    Codebook cb;
    cb.k = static_cast<int>(r.u32());
    cb.dim = static_cast<int>(r.u32());
    cb.centroids.resize(static_cast<std::size_t>(cb.k) * cb.dim);
    for (auto& v : cb.centroids) v = r.f32();
    r.expect_end();
    return cb;
}

inline void save_codebook(const Codebook& cb, const std::filesystem::path& path) {
    atomic_write_file(path, codebook_to_bytes(cb));
}

inline Codebook load_codebook(const std::filesystem::path& path) {
    return codebook_from_bytes(read_file(path), path.string());
}

inline std::string index_field_to_bytes(const IndexField& f) {
    std::string out = "SGI1";
    append_u32(out, static_cast<std::uint32_t>(f.height));
    append_u32(out, static_cast<std::uint32_t>(f.width));
    append_u32(out, f.k);
    for (std::uint32_t v : f.indices) append_u32(out, v);
    return out;
}

inline IndexField index_field_from_bytes(const std::string& bytes,
                                         const std::string& what = "index field") {
    ByteReader r(bytes, what);
    r.expect_magic("SGI1");
    IndexField f;
    f.height = static_cast<int>(r.u32());
    f.width = static_cast<int>(r.u32());
    f.k = r.u32();
    f.indices.resize(static_cast<std::size_t>(f.height) * f.width);
    for (auto& v : f.indices) {
        v = r.u32();
        if (v >= f.k) throw IndexOutOfRange(what + ": stored index out of range");
    }
    r.expect_end();
    return f;
}

inline void save_index_field(const IndexField& f, const std::filesystem::path& path) {
    atomic_write_file(path, index_field_to_bytes(f));
}

inline IndexField load_index_field(const std::filesystem::path& path) {
    return index_field_from_bytes(read_file(path), path.string());
}

}  // namespace streetsynth
