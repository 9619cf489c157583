#pragma once
// Sandpile state and the toppling drivers. State is (eta, h2): particle
// counts and twice the toppling counter, so half steps stay integral. A
// half toppling at x consumes instruction slot h2[x]+1, moves one particle
// to the slot's target and bumps h2[x]. A full toppling is two half steps
// back to back.
//
// Four stopping notions share one driver:
//   full    topple while some count is >= 2 (units of two half steps)
//   half    single half steps while count >= 2, or == 1 with h2 odd
//   a_stab  as half on the marked set A; outside A any particle may hop
//   weak    full topplings, but a doubly-occupied site next to the marked
//           center may only fire if it has occupied company in that
//           neighborhood; stops in the two-case "weakly stable" sense
//
// The odometer returned counts particle jumps (= half steps) per site.

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "lattice.hpp"
#include "rng.hpp"

namespace sandpile {

inline constexpr int64_t default_half_step_cap = 100'000'000;

struct SsmState {
    std::vector<int32_t> eta;
    std::vector<int64_t> h2;

    static SsmState zeros(const Graph& g) {
        SsmState s;
        s.eta.assign(g.n_total, 0);
        s.h2.assign(g.n_total, 0);
        return s;
    }

    int64_t total_particles() const {
        int64_t t = 0;
        for (int32_t v : eta) t += v;
        return t;
    }

    bool operator==(const SsmState& o) const { return eta == o.eta && h2 == o.h2; }
};

// eta over active sites (halo zero-padded), h2 = 0
inline SsmState make_state(const Graph& g, const std::vector<int32_t>& eta_active) {
    if (int(eta_active.size()) != g.n_active)
        throw std::invalid_argument("make_state: eta size != active sites");
    SsmState s = SsmState::zeros(g);
    std::copy(eta_active.begin(), eta_active.end(), s.eta.begin());
    for (int32_t v : eta_active)
        if (v < 0) throw std::invalid_argument("make_state: negative count");
    return s;
}

inline SsmState poisson_init(const Graph& g, double mu, RandomStream& rng) {
    SsmState s = SsmState::zeros(g);
    for (Site x = 0; x < g.n_active; ++x) s.eta[x] = int32_t(rng.poisson(mu));
    return s;
}

struct StabilityMode {
    enum class Kind { full, half, a_stab, weak };
    Kind kind = Kind::full;
    SiteSet A;           // a_stab: the marked set
    Site center = no_site;  // weak: the protected neighborhood's center

    static StabilityMode full() { return StabilityMode{Kind::full, SiteSet(), no_site}; }
    static StabilityMode half() { return StabilityMode{Kind::half, SiteSet(), no_site}; }
    static StabilityMode a_stab(SiteSet A) { return StabilityMode{Kind::a_stab, std::move(A), no_site}; }
    static StabilityMode weak(Site center) { return StabilityMode{Kind::weak, SiteSet(), center}; }
};

// Instability of a single site under a mode. For weak this is plain
// two-particle instability; the company side condition lives in the driver
// because it reads the whole neighborhood.
inline bool is_unstable(const Graph& g, const SsmState& s, Site x, const StabilityMode& mode) {
    g.check_site(x);
    if (g.is_halo(x)) return false;
    switch (mode.kind) {
        case StabilityMode::Kind::full:
        case StabilityMode::Kind::weak:
            return s.eta[x] >= 2;
        case StabilityMode::Kind::half:
            return s.eta[x] >= 2 || (s.eta[x] == 1 && (s.h2[x] & 1));
        case StabilityMode::Kind::a_stab:
            if (mode.A.contains(x)) return s.eta[x] >= 2 || (s.eta[x] == 1 && (s.h2[x] & 1));
            return s.eta[x] >= 1;
    }
    return false;
}

// One half toppling: needs a particle present. Returns where it went.
template <class Field>
inline Site half_topple(const Graph& g, SsmState& s, Site x, const Field& field) {
    g.check_site(x);
    if (g.is_halo(x)) throw std::invalid_argument("half_topple: halo sites never topple");
    if (s.eta[x] < 1) throw std::invalid_argument("half_topple: no particle at site");
    Site y = field.target(g, x, s.h2[x] + 1);
    assert(y >= 0 && y < g.n_total);
    --s.eta[x];
    ++s.eta[y];
    ++s.h2[x];
    return y;
}

enum class TopplePolicy { lex_min, random_site, dfs };
enum class StabilizeStatus { stable, capped };

struct StabilizeResult {
    StabilizeStatus status = StabilizeStatus::stable;
    std::vector<int64_t> odometer;  // particle jumps per site
    int64_t total_half_steps = 0;
    // weak mode bookkeeping: was the protected neighborhood ever occupied,
    // and is it occupied at the end
    bool center_ball_ever_occupied = false;
    bool center_ball_finally_occupied = false;
};

namespace detail {

// Exact membership worklist: one structure drives all three policies. For
// lex_min an ordered set; for random/dfs a vector with position index.
struct Worklist {
    TopplePolicy policy;
    std::set<Site> ordered;
    std::vector<Site> list;
    std::vector<int32_t> pos;  // -1 when absent (random/dfs)

    Worklist(TopplePolicy p, int n_sites) : policy(p) {
        if (policy != TopplePolicy::lex_min) pos.assign(n_sites, -1);
    }

    bool contains(Site x) const {
        return policy == TopplePolicy::lex_min ? ordered.count(x) > 0 : pos[x] >= 0;
    }
    bool empty() const {
        return policy == TopplePolicy::lex_min ? ordered.empty() : list.empty();
    }
    void add(Site x) {
        if (policy == TopplePolicy::lex_min) {
            ordered.insert(x);
        } else if (pos[x] < 0) {
            pos[x] = int32_t(list.size());
            list.push_back(x);
        }
    }
    void remove(Site x) {
        if (policy == TopplePolicy::lex_min) {
            ordered.erase(x);
        } else if (pos[x] >= 0) {
            int32_t i = pos[x];
            Site last = list.back();
            list[i] = last;
            pos[last] = i;
            list.pop_back();
            pos[x] = -1;
        }
    }
    Site pick(RandomStream* rng) {
        switch (policy) {
            case TopplePolicy::lex_min: return *ordered.begin();
            case TopplePolicy::dfs: return list.back();
            case TopplePolicy::random_site: return list[rng->uniform_below(uint32_t(list.size()))];
        }
        return no_site;
    }
};

}  // namespace detail

// Drive s until every site is stable for the mode inside Vp (sites outside
// Vp never topple), or until cap half steps. Mutates s in place; the
// odometer records this run's jumps. policy_rng is only consulted for
// TopplePolicy::random_site.
template <class Field>
StabilizeResult stabilize(const Graph& g, SsmState& s, const SiteSet& Vp, const StabilityMode& mode,
                          const Field& field, TopplePolicy policy = TopplePolicy::lex_min,
                          RandomStream* policy_rng = nullptr, int64_t cap = default_half_step_cap) {
    if (policy == TopplePolicy::random_site && policy_rng == nullptr)
        throw std::invalid_argument("stabilize: random policy needs a stream");
    if (int(s.eta.size()) != g.n_total)
        throw std::invalid_argument("stabilize: state does not match graph");
    const bool weak = mode.kind == StabilityMode::Kind::weak;
    const bool unit_is_full = weak || mode.kind == StabilityMode::Kind::full;

    // weak mode: the protected neighborhood around the center, with its
    // occupancy count maintained incrementally
    std::vector<uint8_t> in_ball;
    std::vector<Site> ball_sites;
    int ball_occupied = 0;
    StabilizeResult res;
    res.odometer.assign(g.n_total, 0);
    if (weak) {
        if (mode.center == no_site) throw std::invalid_argument("stabilize: weak mode needs a center");
        in_ball.assign(g.n_total, 0);
        ball_sites = ball(g, mode.center, 1, Metric::graph);
        for (Site z : ball_sites) in_ball[z] = 1;
        for (Site z : ball_sites) ball_occupied += s.eta[z] >= 1;
        res.center_ball_ever_occupied = ball_occupied > 0;
    }

    auto selectable = [&](Site x) -> bool {
        if (g.is_halo(x) || !Vp.contains(x)) return false;
        switch (mode.kind) {
            case StabilityMode::Kind::full:
                return s.eta[x] >= 2;
            case StabilityMode::Kind::half:
                return s.eta[x] >= 2 || (s.eta[x] == 1 && (s.h2[x] & 1));
            case StabilityMode::Kind::a_stab:
                if (mode.A.contains(x)) return s.eta[x] >= 2 || (s.eta[x] == 1 && (s.h2[x] & 1));
                return s.eta[x] >= 1;
            case StabilityMode::Kind::weak:
                if (s.eta[x] < 2) return false;
                if (!in_ball[x] || s.eta[x] >= 3) return true;
                return ball_occupied >= 2;  // company: someone else in the ball holds a particle
        }
        return false;
    };

    detail::Worklist work(policy, g.n_total);
    for (Site x = 0; x < g.n_active; ++x)
        if (selectable(x)) work.add(x);

    const int64_t before = s.total_particles();
    std::vector<Site> touched;
    touched.reserve(4);
    while (!work.empty()) {
        Site x = work.pick(policy_rng);
        if (!selectable(x)) {  // stale entry (weak company can lapse)
            work.remove(x);
            continue;
        }
        int unit = unit_is_full ? 2 : 1;
        if (res.total_half_steps + unit > cap) {
            res.status = StabilizeStatus::capped;
            break;
        }
        touched.clear();
        touched.push_back(x);
        for (int k = 0; k < unit; ++k) {
            Site y = half_topple(g, s, x, field);
            ++res.odometer[x];
            ++res.total_half_steps;
            touched.push_back(y);
        }
        if (weak) {
            int occ = 0;
            bool ball_touched = false;
            for (Site z : touched) ball_touched = ball_touched || in_ball[z];
            if (ball_touched) {
                for (Site z : ball_sites) occ += s.eta[z] >= 1;
                ball_occupied = occ;
                if (ball_occupied > 0) res.center_ball_ever_occupied = true;
                for (Site z : ball_sites) {
                    if (selectable(z)) work.add(z);
                    else work.remove(z);
                }
            }
        }
        for (Site z : touched) {
            if (selectable(z)) work.add(z);
            else work.remove(z);
        }
    }
    assert(s.total_particles() == before);
    (void)before;
    if (weak) res.center_ball_finally_occupied = ball_occupied > 0;
    return res;
}

// Convenience: everything may topple (the whole active region).
inline SiteSet all_active(const Graph& g) {
    SiteSet v(g.n_total);
    for (Site x = 0; x < g.n_active; ++x) v.insert(x);
    return v;
}

inline SiteSet support_set(const Graph& g, const SsmState& s) {
    SiteSet v(g.n_total);
    for (Site x = 0; x < g.n_total; ++x)
        if (s.eta[x] >= 1) v.insert(x);
    return v;
}

// The two-case terminal predicate for weak runs: either everything in Vp is
// plain stable, or everything outside the center ball is stable and the
// ball holds exactly one doubly-occupied site and nothing else.
inline bool is_weakly_stable(const Graph& g, const SsmState& s, const SiteSet& Vp, Site center) {
    std::vector<Site> ballv = ball(g, center, 1, Metric::graph);
    std::vector<uint8_t> in_ball(g.n_total, 0);
    for (Site z : ballv) in_ball[z] = 1;
    bool all_stable = true, outside_stable = true;
    for (Site x = 0; x < g.n_active; ++x) {
        if (!Vp.contains(x)) continue;
        if (s.eta[x] >= 2) {
            all_stable = false;
            if (!in_ball[x]) outside_stable = false;
        }
    }
    if (all_stable) return true;
    if (!outside_stable) return false;
    int twos = 0, occupied = 0;
    for (Site z : ballv) {
        if (s.eta[z] >= 1) ++occupied;
        if (s.eta[z] == 2) ++twos;
        if (s.eta[z] >= 3) return false;
    }
    return twos == 1 && occupied == 1;
}

// --- order independence probes -------------------------------------------

struct AbelianProbeResult {
    bool abelian = true;
    StabilizeResult reference;  // lexicographic-min run
    SsmState final_state;       // its final state
};

// Same instance, same field, many toppling orders: outcomes must agree
// bit for bit. Weak mode is refused, order independence is not claimed
// for it.
template <class Field>
AbelianProbeResult abelian_probe(const Graph& g, const SsmState& s0, const SiteSet& Vp,
                                 const StabilityMode& mode, const Field& field, int trials,
                                 RandomStream rng, int64_t cap = default_half_step_cap) {
    if (mode.kind == StabilityMode::Kind::weak)
        throw std::invalid_argument("abelian_probe: weak stopping is order-sensitive, not probed");
    AbelianProbeResult out;
    SsmState ref = s0;
    out.reference = stabilize(g, ref, Vp, mode, field, TopplePolicy::lex_min, nullptr, cap);
    if (out.reference.status != StabilizeStatus::stable)
        throw std::runtime_error("abelian_probe: reference run hit the cap");
    out.final_state = ref;
    for (int t = 0; t < trials && out.abelian; ++t) {
        SsmState trial = s0;
        RandomStream sub = rng.substream(uint64_t(t));
        StabilizeResult r = stabilize(g, trial, Vp, mode, field, TopplePolicy::random_site, &sub, cap);
        out.abelian = r.status == StabilizeStatus::stable && trial == ref &&
                      r.odometer == out.reference.odometer;
    }
    // also cross-check the dfs policy once
    if (out.abelian) {
        SsmState trial = s0;
        StabilizeResult r = stabilize(g, trial, Vp, mode, field, TopplePolicy::dfs, nullptr, cap);
        out.abelian = r.status == StabilizeStatus::stable && trial == ref &&
                      r.odometer == out.reference.odometer;
    }
    return out;
}

// Walk the full tree of legal toppling orders (every selectable site at
// every step) and check all leaves agree. Returns nullopt if the tree
// exceeds node_budget. Small instances only.
template <class Field>
std::optional<bool> exhaustive_order_check(const Graph& g, const SsmState& s0, const SiteSet& Vp,
                                           const StabilityMode& mode, const Field& field,
                                           int64_t node_budget) {
    if (mode.kind == StabilityMode::Kind::weak)
        throw std::invalid_argument("exhaustive_order_check: weak mode unsupported");
    const bool unit_is_full = mode.kind == StabilityMode::Kind::full;
    SsmState s = s0;
    std::optional<SsmState> leaf;
    int64_t nodes = 0;
    bool ok = true, overflow = false;

    auto selectable_sites = [&]() {
        std::vector<Site> v;
        for (Site x = 0; x < g.n_active; ++x)
            if (Vp.contains(x) && is_unstable(g, s, x, mode)) v.push_back(x);
        return v;
    };

    auto rec = [&](auto&& self) -> void {
        if (!ok || overflow) return;
        if (++nodes > node_budget) {
            overflow = true;
            return;
        }
        std::vector<Site> pick = selectable_sites();
        if (pick.empty()) {
            if (!leaf) leaf = s;
            else ok = ok && s == *leaf;
            return;
        }
        for (Site x : pick) {
            Site y1 = half_topple(g, s, x, field);
            Site y2 = no_site;
            if (unit_is_full) y2 = half_topple(g, s, x, field);
            self(self);
            if (y2 != no_site) {
                --s.eta[y2];
                ++s.eta[x];
                --s.h2[x];
            }
            --s.eta[y1];
            ++s.eta[x];
            --s.h2[x];
            if (!ok || overflow) return;
        }
    };
    rec(rec);
    if (overflow) return std::nullopt;
    return ok;
}

}  // namespace sandpile
