#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace tisc {

inline constexpr std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// xoshiro256** (Blackman & Vigna). Satisfies UniformRandomBitGenerator.
class Xoshiro256ss {
public:
    using result_type = std::uint64_t;

    explicit Xoshiro256ss(std::uint64_t seed = 0) {
        for (auto& w : s_) w = splitmix64(seed);
    }

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return ~result_type{0}; }

    result_type operator()() {
        const std::uint64_t r = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return r;
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t s_[4];
};

/// Seed for substream `stream` of path `path`; distinct (seed, path, stream) give unrelated streams.
inline constexpr std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t path, std::uint64_t stream) {
    std::uint64_t s = seed;
    std::uint64_t a = splitmix64(s);
    s = a ^ (path * 0xd1b54a32d192ed03ULL);
    std::uint64_t b = splitmix64(s);
    s = b ^ (stream * 0x8cb92ba72f3d8dd7ULL);
    return splitmix64(s);
}

namespace detail {

/// log(u) for u in [2^-53, 1]; branch-free so loops over it vectorise. Error below 2 ulp.
inline double log_unit(double u) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(u);
    double e = static_cast<double>(static_cast<std::int64_t>(bits >> 52)) - 1023.0;
    double m = std::bit_cast<double>((bits & 0x000fffffffffffffULL) | 0x3ff0000000000000ULL);
    const bool big = m > 1.4142135623730951;
    m = big ? 0.5 * m : m;
    e = big ? e + 1.0 : e;
    const double z = (m - 1.0) / (m + 1.0), w = z * z;
    double p = 1.0 / 23.0;
    p = p * w + 1.0 / 21.0;
    p = p * w + 1.0 / 19.0;
    p = p * w + 1.0 / 17.0;
    p = p * w + 1.0 / 15.0;
    p = p * w + 1.0 / 13.0;
    p = p * w + 1.0 / 11.0;
    p = p * w + 1.0 / 9.0;
    p = p * w + 1.0 / 7.0;
    p = p * w + 1.0 / 5.0;
    p = p * w + 1.0 / 3.0;
    const double logm = 2.0 * z + 2.0 * z * w * p;
    constexpr double ln2_hi = 6.93147180369123816490e-01, ln2_lo = 1.90821492927058770002e-10;
    return e * ln2_hi + (e * ln2_lo + logm);
}

/// (cos, sin) of 2 pi t for t in [-1/2, 1/2]; branch-free.
inline void sincos_turn(double t, double& c, double& s) {
    const double k = std::floor(4.0 * t + 0.5);  // quadrant in -2..2
    const double th = 6.283185307179586 * (t - 0.25 * k);
    const double w = th * th;
    double ps = -1.0 / 1307674368000.0;
    ps = ps * w + 1.0 / 6227020800.0;
    ps = ps * w - 1.0 / 39916800.0;
    ps = ps * w + 1.0 / 362880.0;
    ps = ps * w - 1.0 / 5040.0;
    ps = ps * w + 1.0 / 120.0;
    ps = ps * w - 1.0 / 6.0;
    const double sn = th + th * w * ps;
    double pc = 1.0 / 20922789888000.0;
    pc = pc * w - 1.0 / 87178291200.0;
    pc = pc * w + 1.0 / 479001600.0;
    pc = pc * w - 1.0 / 3628800.0;
    pc = pc * w + 1.0 / 40320.0;
    pc = pc * w - 1.0 / 720.0;
    pc = pc * w + 1.0 / 24.0;
    pc = pc * w - 0.5;
    const double cs = 1.0 + w * pc;
    const bool q1 = k == 1.0, qm1 = k == -1.0, q2 = k == 2.0 || k == -2.0;
    c = q1 ? -sn : (qm1 ? sn : (q2 ? -cs : cs));
    s = q1 ? cs : (qm1 ? -cs : (q2 ? -sn : sn));
}

}  // namespace detail

/// Independent xoshiro256** streams advanced in lockstep, one standard normal per lane per draw
/// (Box-Muller on lane pairs of uniforms). Lane sequences depend only on their own seed.
class NormalLanes {
public:
    NormalLanes() = default;
    explicit NormalLanes(std::span<const std::uint64_t> seeds) { reset(seeds); }

    void reset(std::span<const std::uint64_t> seeds) {
        const std::size_t n = seeds.size();
        s0_.resize(n);
        s1_.resize(n);
        s2_.resize(n);
        s3_.resize(n);
        spare_.assign(n, 0.0);
        have_spare_ = false;
        for (std::size_t j = 0; j < n; ++j) {
            std::uint64_t sd = seeds[j];
            s0_[j] = splitmix64(sd);
            s1_[j] = splitmix64(sd);
            s2_[j] = splitmix64(sd);
            s3_[j] = splitmix64(sd);
        }
    }

    std::size_t size() const { return s0_.size(); }

    /// Writes the next normal of every lane to z[0..size()).
    void next(double* __restrict z) {
        const std::size_t n = s0_.size();
        if (have_spare_) {
            for (std::size_t j = 0; j < n; ++j) z[j] = spare_[j];
            have_spare_ = false;
            return;
        }
        std::uint64_t* __restrict a = s0_.data();
        std::uint64_t* __restrict b = s1_.data();
        std::uint64_t* __restrict c = s2_.data();
        std::uint64_t* __restrict d = s3_.data();
        double* __restrict sp = spare_.data();
#pragma GCC ivdep
        for (std::size_t j = 0; j < n; ++j) {
            const std::uint64_t r1 = step(a[j], b[j], c[j], d[j]);
            const std::uint64_t r2 = step(a[j], b[j], c[j], d[j]);
            const double u1 = static_cast<double>(static_cast<std::int64_t>(r1 >> 11) + 1) * 0x1.0p-53;
            const double t = static_cast<double>(static_cast<std::int64_t>(r2 >> 11)) * 0x1.0p-53 - 0.5;
            const double rad = std::sqrt(-2.0 * detail::log_unit(u1));
            double cs, sn;
            detail::sincos_turn(t, cs, sn);
            z[j] = rad * cs;
            sp[j] = rad * sn;
        }
        have_spare_ = true;
    }

private:
    static std::uint64_t step(std::uint64_t& s0, std::uint64_t& s1, std::uint64_t& s2, std::uint64_t& s3) {
        const std::uint64_t x = s1 * 5;
        const std::uint64_t r = ((x << 7) | (x >> 57)) * 9;
        const std::uint64_t t = s1 << 17;
        s2 ^= s0;
        s3 ^= s1;
        s1 ^= s2;
        s0 ^= s3;
        s2 ^= t;
        s3 = (s3 << 45) | (s3 >> 19);
        return r;
    }

    std::vector<std::uint64_t> s0_, s1_, s2_, s3_;
    std::vector<double> spare_;
    bool have_spare_ = false;
};

}  // namespace tisc
