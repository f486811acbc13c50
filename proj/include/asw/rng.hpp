#pragma once

// Seeded random streams. Every consumer draws from a sub-stream named after
// its role ("data", "init", "noise", ...) so that changing one experimental
// axis never shifts the random numbers seen by another.

#include <cstdint>
#include <random>
#include <string_view>

namespace asw {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
    for (unsigned char ch : name) {
        h ^= ch;
        h *= 0x100000001B3ull;
    }
    return splitmix64(splitmix64(seed) ^ h);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    return splitmix64(stream_seed(seed, name) + splitmix64(index));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::string_view stream) : engine_(stream_seed(seed, stream)) {}
    Rng(std::uint64_t seed, std::string_view stream, std::uint64_t index)
        : engine_(stream_seed(seed, stream, index)) {}

    double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace asw
