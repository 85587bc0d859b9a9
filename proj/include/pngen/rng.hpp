#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

#include "pngen/tensor.hpp"

namespace pngen {

// Philox4x32-10 counter-based generator. Every stochastic pathway in the
// project draws from a stream keyed by (global seed, purpose tag, index),
// so any draw is reproducible without carrying generator state around.
struct Philox4x32 {
    static constexpr uint32_t M0 = 0xD2511F53u;
    static constexpr uint32_t M1 = 0xCD9E8D57u;
    static constexpr uint32_t W0 = 0x9E3779B9u;
    static constexpr uint32_t W1 = 0xBB67AE85u;

    static std::array<uint32_t, 4> block(std::array<uint32_t, 4> x, std::array<uint32_t, 2> k) {
        for (int round = 0; round < 10; ++round) {
            uint64_t p0 = static_cast<uint64_t>(M0) * x[0];
            uint64_t p1 = static_cast<uint64_t>(M1) * x[2];
            uint32_t hi0 = static_cast<uint32_t>(p0 >> 32), lo0 = static_cast<uint32_t>(p0);
            uint32_t hi1 = static_cast<uint32_t>(p1 >> 32), lo1 = static_cast<uint32_t>(p1);
            x = {hi1 ^ x[1] ^ k[0], lo1, hi0 ^ x[3] ^ k[1], lo0};
            k[0] += W0;
            k[1] += W1;
        }
        return x;
    }
};

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// One logical random stream: key derives from (seed, purpose), the 128-bit
// counter holds (index, running block number).
class RandomStream {
public:
    RandomStream(uint64_t seed, std::string_view purpose, uint64_t index = 0)
        : index_(index) {
        uint64_t k = seed ^ fnv1a64(purpose);
        key_ = {static_cast<uint32_t>(k), static_cast<uint32_t>(k >> 32)};
    }

    uint32_t next_u32() {
        if (pos_ == 4) refill();
        return buf_[pos_++];
    }

    uint64_t next_u64() {
        uint64_t lo = next_u32();
        uint64_t hi = next_u32();
        return lo | (hi << 32);
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) via rejection.
    uint64_t uniform_int(uint64_t n) {
        if (n <= 1) return 0;
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    // Standard normal via Box-Muller; the paired draw is cached.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, double mean = 0.0, double std = 1.0) {
        for (auto& v : t.data) v = static_cast<T>(mean + std * normal());
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo = 0.0, double hi = 1.0) {
        for (auto& v : t.data) v = static_cast<T>(uniform(lo, hi));
    }

private:
    void refill() {
        buf_ = Philox4x32::block({static_cast<uint32_t>(index_),
                                  static_cast<uint32_t>(index_ >> 32),
                                  static_cast<uint32_t>(block_),
                                  static_cast<uint32_t>(block_ >> 32)},
                                 key_);
        ++block_;
        pos_ = 0;
    }

    std::array<uint32_t, 2> key_{};
    uint64_t index_ = 0;
    uint64_t block_ = 0;
    std::array<uint32_t, 4> buf_{};
    int pos_ = 4;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace pngen
