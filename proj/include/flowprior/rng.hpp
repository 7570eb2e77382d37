#pragma once

#include <cmath>
#include <cstdint>

namespace flowprior {

/// Counter-based random stream. Every draw is a pure function of
/// (base_seed, stream_id, counter), so sequences are identical across
/// platforms and thread counts. Parallel consumers call derive() to get
/// disjoint substreams instead of sharing one stream.
///
/// Construction: the (seed, stream) pair is hashed into a 64-bit key and
/// draw i returns fin(key + i*GOLDEN) where fin is the splitmix64
/// finalizer. Normal variates come from Box-Muller over consecutive
/// uniforms; the spare half of each pair is cached, and the cache is part
/// of the stream value (copies replay identically).
class RngStream {
public:
    RngStream() : RngStream(0, 0) {}
    explicit RngStream(uint64_t base_seed, uint64_t stream_id = 0)
        : base_(base_seed), stream_(stream_id), key_(mix(mix(base_seed + kGolden) ^ stream_id)) {}

    /// Substream k. Children of distinct k (and the parent) do not overlap.
    RngStream derive(uint64_t k) const { return RngStream(base_, mix(stream_ ^ mix(k + kGolden))); }

    uint64_t base_seed() const { return base_; }
    uint64_t stream_id() const { return stream_; }

    uint64_t next_u64() { return mix(key_ + (++counter_) * kGolden); }

    /// Uniform in [0, 1), 53-bit resolution.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in (0, 1]; safe as a log() argument.
    double next_unit_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = next_unit_pos();
        double u2 = next_unit();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// Uniform integer in [0, bound); bound >= 1.
    int next_index(int bound) {
        return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                                 static_cast<unsigned __int128>(bound)) >> 64);
    }

private:
    static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;

    // splitmix64 finalizer
    static uint64_t mix(uint64_t x) {
        x ^= x >> 30;
        x *= 0xBF58476D1CE4E5B9ull;
        x ^= x >> 27;
        x *= 0x94D049BB133111EBull;
        x ^= x >> 31;
        return x;
    }

    uint64_t base_ = 0;
    uint64_t stream_ = 0;
    uint64_t key_ = 0;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace flowprior
