#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace cfkit {

// Invalid shapes, mismatched channel counts, bad schedules.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// NaN/Inf escaping an operator. Never silent.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Unreadable or foreign input files.
class IngestError : public std::runtime_error {
public:
    explicit IngestError(const std::string& msg) : std::runtime_error("ingestion error: " + msg) {}
};

// CLI misuse (unknown suite, bad format string, ...).
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error("usage error: " + msg) {}
};

// Process-wide worker count for operator-internal parallelism. Results are
// required to be identical for any value (each output element has exactly
// one writer and a fixed serial reduction order).
inline int& thread_count() {
    static int n = 1;
    return n;
}

inline void set_thread_count(int n) {
    if (n < 1) throw ConfigError("thread count must be >= 1, got " + std::to_string(n));
    thread_count() = n;
}

// Splits [0, n) into contiguous chunks, one worker thread each. fn(begin, end).
// total_work is a scalar-op estimate used to skip threading when the job is
// too small to amortize thread startup.
inline void parallel_for(int64_t n, int64_t total_work, const std::function<void(int64_t, int64_t)>& fn) {
    const int workers = thread_count();
    if (n <= 0) return;
    if (workers <= 1 || n < 2 || total_work < (int64_t{1} << 17)) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    const int64_t chunk = (n + workers - 1) / workers;
    for (int t = 0; t < workers; ++t) {
        const int64_t b = t * chunk;
        const int64_t e = std::min<int64_t>(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& th : pool) th.join();
}

inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    parallel_for(n, std::numeric_limits<int64_t>::max(), fn);
}

// Deterministic seeded RNG. mt19937_64 output is pinned by the standard, and
// the mappings below avoid std::uniform_real_distribution, whose exact value
// sequence is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    uint64_t next_u64() {
        // splitmix64; tiny, stable, and good enough for test data and init.
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    int64_t uniform_int(int64_t lo, int64_t hi_inclusive) {
        const uint64_t span = static_cast<uint64_t>(hi_inclusive - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

private:
    uint64_t state_;
};

template <class R>
inline bool is_finite_value(R v) {
    return std::isfinite(static_cast<double>(v));
}

}  // namespace cfkit
