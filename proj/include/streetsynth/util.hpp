#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <limits>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace streetsynth {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct OutOfProjectionRange : Error { using Error::Error; };
struct ParseError : Error {
    std::size_t byte_offset = 0;
    ParseError(const std::string& msg, std::size_t offset)
        : Error(msg + " (byte " + std::to_string(offset) + ")"), byte_offset(offset) {}
};
struct DimensionMismatch : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct IndexOutOfRange : Error { using Error::Error; };
struct TooFewPatches : Error { using Error::Error; };
struct NonFiniteLoss : Error {
    long step = 0;
    NonFiniteLoss(const std::string& msg, long s)
        : Error(msg + " at step " + std::to_string(s)), step(s) {}
};
struct ConfigMismatch : Error { using Error::Error; };
struct NotThin : Error { using Error::Error; };
struct ClosedSegment : Error { using Error::Error; };
struct InsufficientConnectivity : Error { using Error::Error; };
struct NoLand : Error { using Error::Error; };
struct BinMismatch : Error { using Error::Error; };
struct UnknownConfigKey : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// Deterministic random numbers
//
// All randomness in the library goes through Rng so that a seed pins the
// output bit-for-bit across platforms. Distribution shaping is done by hand;
// std:: distributions are implementation-defined.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53 mantissa bits.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection-free modulo bias is negligible for
    // n << 2^64 but we reject anyway to stay exact.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw Error("uniform_int: n must be positive");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do { x = gen_(); } while (x >= limit);
        return x % n;
    }

    // Box-Muller; consumes two uniforms per pair.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_int(i)]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Derive an independent substream seed; splitmix64 finalizer.
inline std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

inline int thread_count() {
    if (const char* env = std::getenv("STREETSYNTH_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

// Splits [0, n) into contiguous chunks, one task per chunk. Chunk boundaries
// depend only on n and the thread count, so per-chunk reductions stay
// deterministic when the caller combines them in chunk order.
inline void parallel_chunks(std::int64_t n,
                            const std::function<void(int, std::int64_t, std::int64_t)>& body) {
    const int threads =
        static_cast<int>(std::min<std::int64_t>(thread_count(), std::max<std::int64_t>(n, 1)));
    if (threads <= 1 || n < 2) {
        if (n > 0) body(0, 0, n);
        return;
    }
    const std::int64_t chunk = (n + threads - 1) / threads;
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) {
        const std::int64_t lo = t * chunk;
        const std::int64_t hi = std::min<std::int64_t>(lo + chunk, n);
        if (lo >= hi) break;
        pool.emplace_back([&body, t, lo, hi] { body(t, lo, hi); });
    }
    for (auto& th : pool) th.join();
}

inline void parallel_for(std::int64_t n,
                         const std::function<void(std::int64_t, std::int64_t)>& body) {
    parallel_chunks(n, [&body](int, std::int64_t lo, std::int64_t hi) { body(lo, hi); });
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Partial outputs never appear under the final name: write to a temp sibling
// and rename into place.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

// Little-endian scalar packing for the binary formats.
inline void append_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void append_f32(std::string& out, float f) {
    std::uint32_t v;
    static_assert(sizeof(v) == sizeof(f));
    std::memcpy(&v, &f, sizeof(v));
    append_u32(out, v);
}

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string what)
        : bytes_(bytes), what_(std::move(what)) {}

    void expect_magic(const char magic[5]) {
        if (bytes_.size() < pos_ + 4 || bytes_.compare(pos_, 4, magic, 4) != 0)
            throw IoError(what_ + ": bad magic, expected " + std::string(magic, 4));
        pos_ += 4;
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i)
            v = (v << 8) | static_cast<unsigned char>(bytes_[pos_ + i]);
        pos_ += 4;
        return v;
    }

    float f32() {
        std::uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, sizeof(f));
        return f;
    }

    void expect_end() const {
        if (pos_ != bytes_.size())
            throw IoError(what_ + ": trailing bytes");
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() < pos_ + n) throw IoError(what_ + ": truncated file");
    }
    const std::string& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

// Deterministic float formatting for text outputs (SVG, CSV).
inline std::string fmt_fixed(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

inline std::string fmt_sci(double v, int digits = 9) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
    return buf;
}

}  // namespace streetsynth
