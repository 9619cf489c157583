#pragma once
// Counter-based randomness. Everything is a pure function of (seed, key...),
// so replays are exact, trials can run on any thread in any order, and the
// instruction attached to (site, slot) never depends on how the run got
// there. The mixer is the splitmix64 finalizer chained per key word.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "lattice.hpp"

namespace sandpile {

inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

inline uint64_t hash2(uint64_t seed, uint64_t a) { return mix64(seed ^ mix64(a)); }
inline uint64_t hash3(uint64_t seed, uint64_t a, uint64_t b) { return mix64(hash2(seed, a) ^ mix64(b)); }
inline uint64_t hash4(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
    return mix64(hash3(seed, a, b) ^ mix64(c));
}

inline uint64_t hash_str(uint64_t seed, std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the bytes, then mixed in
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return hash2(seed, h);
}

// One independent lane per (seed, subcommand, trial): outputs only depend on
// these three, never on scheduling.
inline uint64_t trial_seed(uint64_t seed, std::string_view subcommand, uint64_t trial) {
    return hash2(hash_str(seed, subcommand), trial);
}

// --- streams --------------------------------------------------------------

// (seed, counter) pair; next() hashes and bumps the counter. Substreams
// re-key so parent and child never collide.
struct RandomStream {
    uint64_t seed = 0;
    uint64_t counter = 0;

    explicit RandomStream(uint64_t s = 0) : seed(s) {}

    uint64_t next_u64() { return hash2(seed, counter++); }

    // 53-bit mantissa in [0,1)
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform on {0..k-1}, rejection kills the modulo bias
    uint32_t uniform_below(uint32_t k) {
        if (k == 0) throw std::invalid_argument("uniform_below: k = 0");
        uint64_t usable = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % k;
        // usable is a multiple of k covering all but < k of the top values
        for (;;) {
            uint64_t u = next_u64();
            if (u < usable) return uint32_t(u % k);
        }
    }

    bool bernoulli(double p) {
        if (p < 0.0 || p > 1.0) throw std::invalid_argument("bernoulli: p outside [0,1]");
        return uniform01() < p;  // strict: p=0 never fires, p=1 always
    }

    // Poisson by CDF inversion from one uniform. Ties break downward since
    // the comparison is strict. Small-mean regime only.
    int poisson(double mu) {
        if (!(mu >= 0.0) || mu > 10.0)
            throw std::invalid_argument("poisson: need 0 <= mu <= 10");
        if (mu == 0.0) return 0;
        double u = uniform01();
        double p = std::exp(-mu), cdf = p;
        int k = 0;
        while (u >= cdf) {
            ++k;
            p *= mu / k;
            cdf += p;
            if (k > 2000) break;  // cdf stuck at 1.0 in floating point
        }
        return k;
    }

    // supported on {1,2,...}, P(k) = (1-q)^{k-1} q
    int64_t geometric(double q) {
        if (!(q > 0.0) || q > 1.0) throw std::invalid_argument("geometric: need 0 < q <= 1");
        if (q == 1.0) return 1;
        double u = uniform01();
        // inversion: smallest k with 1-(1-q)^k >= u; u=0 gives 1
        int64_t k = 1 + int64_t(std::floor(std::log1p(-u) / std::log1p(-q)));
        return k < 1 ? 1 : k;
    }

    RandomStream substream(uint64_t label) const {
        RandomStream s(hash3(seed, 0x737562ull /* "sub" */, label));
        return s;
    }
    RandomStream substream(std::string_view label) const {
        RandomStream s(hash_str(hash2(seed, 0x737562ull), label));
        return s;
    }
};

// --- instruction fields ---------------------------------------------------

// The random instruction stack: slot (x, j), j >= 1, holds a uniformly
// chosen neighbor of x, fixed once and for all by the seed. Pure function,
// no state, so any two drivers consuming the same slots see the same moves.
struct InstructionField {
    uint64_t seed = 0;

    explicit InstructionField(uint64_t s = 0) : seed(s) {}

    Site target(const Graph& g, Site x, int64_t j) const {
        if (j < 1) throw std::invalid_argument("instruction slot j must be >= 1");
        if (g.is_halo(x)) throw std::invalid_argument("instruction requested at halo site");
        uint32_t deg = uint32_t(g.degree(x));
        uint64_t usable = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % deg;
        for (uint64_t attempt = 0;; ++attempt) {
            uint64_t u = hash4(seed, uint64_t(x), uint64_t(j), attempt);
            if (u < usable) return g.neighbor(x, int(u % deg));
        }
    }
};

// Finite explicit stack: slots (x, 1..m(x)) pinned to concrete neighbors.
// Used to hand-build traces in tests and to enumerate every field over a
// slot profile. target() throws on unpinned slots so nothing silently
// falls back to randomness.
struct TruncatedField {
    std::map<Site, std::vector<Site>> slots;  // slots[x][j-1] = target of (x, j)

    TruncatedField() = default;
    explicit TruncatedField(std::map<Site, std::vector<Site>> s) : slots(std::move(s)) {}

    int64_t count(Site x) const {
        auto it = slots.find(x);
        return it == slots.end() ? 0 : int64_t(it->second.size());
    }

    Site target(const Graph& g, Site x, int64_t j) const {
        (void)g;
        auto it = slots.find(x);
        if (it == slots.end() || j < 1 || j > int64_t(it->second.size()))
            throw std::out_of_range("truncated field: slot not pinned");
        return it->second[j - 1];
    }

    // product of (1/deg)^{m(x)} over pinned sites: the chance a random field
    // agrees with this one on every pinned slot
    double weight(const Graph& g) const {
        double w = 1.0;
        for (const auto& [x, v] : slots)
            for (size_t j = 0; j < v.size(); ++j) w /= double(g.degree(x));
        return w;
    }
};

// All truncated fields with profile m (m[x] slots at site x), each passed to
// visit. Pinned targets run through each site's neighbor list in canonical
// order, odometer-style, so enumeration order is deterministic.
template <typename Visit>
void enumerate_truncated_fields(const Graph& g, const std::map<Site, int>& m, Visit&& visit) {
    std::vector<std::pair<Site, int>> prof(m.begin(), m.end());
    std::vector<std::pair<Site, int64_t>> flat;  // one entry per slot
    for (auto& [x, cnt] : prof) {
        if (g.is_halo(x)) throw std::invalid_argument("enumerate_truncated_fields: halo site");
        if (cnt < 0) throw std::invalid_argument("enumerate_truncated_fields: negative count");
        for (int j = 1; j <= cnt; ++j) flat.emplace_back(x, j);
    }
    std::vector<int> pick(flat.size(), 0);
    for (;;) {
        TruncatedField f;
        for (auto& [x, cnt] : prof) f.slots[x] = std::vector<Site>();
        for (size_t i = 0; i < flat.size(); ++i)
            f.slots[flat[i].first].push_back(g.neighbor(flat[i].first, pick[i]));
        visit(const_cast<const TruncatedField&>(f));
        size_t i = 0;
        for (; i < flat.size(); ++i) {
            if (++pick[i] < g.degree(flat[i].first)) break;
            pick[i] = 0;
        }
        if (i == flat.size()) return;
    }
}

}  // namespace sandpile
