#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <string_view>
#include <thread>
#include <vector>

#include "exeval/errors.hpp"

namespace exeval {

using vec = std::vector<double>;

inline double dot(const vec& a, const vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const vec& a) { return std::sqrt(dot(a, a)); }

// y += alpha * x
inline void axpy(double alpha, const vec& x, vec& y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale(vec& x, double alpha) {
    for (auto& v : x) v *= alpha;
}

inline bool all_finite(const vec& x) {
    for (double v : x)
        if (!std::isfinite(v)) return false;
    return true;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Fans one global seed out to stage-specific seeds. The derivation is part of
/// the reproducibility contract: equal (seed, tag) pairs give equal streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage_tag) {
    return splitmix64(seed ^ fnv1a64(stage_tag));
}

/// Runs fn(0..n-1) on up to `workers` threads. Each index is an independent
/// unit of work writing only to its own slot, so results do not depend on the
/// worker count. The lowest-index exception wins, mirroring serial execution.
inline void parallel_for(std::size_t n, unsigned workers,
                         const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    if (workers <= 1 || n == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const unsigned nthreads = static_cast<unsigned>(
        std::min<std::size_t>(workers, n));
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (unsigned w = 0; w < nthreads; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += nthreads) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace exeval
