#pragma once
// Activated random walks with instantaneous deactivation. A configuration
// assigns each site either k >= 0 active particles or a single sleeping
// one (encoded -1, mass 1, ordered between 0 and 1). One driver step picks
// an active site x, lets its particle fall asleep in place with chance
// lambda/(1+lambda) when x carries exactly one particle inside the ground
// set A, and otherwise walks the particle until it first enters an A-site
// that would be empty without it. The walker settles there asleep, and
// every sleeping site it departed from on the way wakes up; a wake mask W
// can shield part of the graph from that waking.
//
// Two engines share the kernel. The full engine tracks the whole
// configuration. The subset engine assumes every site of A is occupied and
// tracks only the set U of active sites, in which case the walk always
// loops back to its own origin; this is the representation the cluster
// strategies run on. The two are coupled step for step under a common
// stream, which the tests lean on.

#include <cassert>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lattice.hpp"
#include "rng.hpp"
#include "ssm.hpp"

namespace sandpile {

inline constexpr int32_t arwd_sleeping = -1;
inline constexpr int64_t default_walk_cap = 100'000'000;

inline bool arwd_site_stable(int32_t v) { return v == 0 || v == arwd_sleeping; }
inline bool arwd_site_active(int32_t v) { return v >= 1; }

// particle mass at one site, the sleeping particle counting as one
inline int64_t arwd_mass(int32_t v) { return v == arwd_sleeping ? 1 : v; }

// position in the order 0 < sleeping < 1 < 2 < ...
inline int arwd_rank(int32_t v) { return v == arwd_sleeping ? 1 : (v == 0 ? 0 : v + 1); }

struct ArwdState {
    std::vector<int32_t> eta;  // per site, -1 sleeping or k >= 0 active

    int64_t total_mass() const {
        int64_t t = 0;
        for (int32_t v : eta) t += arwd_mass(v);
        return t;
    }

    bool operator==(const ArwdState& o) const { return eta == o.eta; }
};

inline void check_no_halo(const Graph& g, const char* who) {
    if (g.n_total != g.n_active)
        throw std::invalid_argument(std::string(who) + ": graphs with an absorbing halo are not supported here");
}

inline ArwdState make_arwd_state(const Graph& g, const std::vector<int32_t>& values) {
    check_no_halo(g, "make_arwd_state");
    if (int(values.size()) != g.n_active)
        throw std::invalid_argument("make_arwd_state: value count != sites");
    for (int32_t v : values)
        if (v < arwd_sleeping) throw std::invalid_argument("make_arwd_state: bad site value");
    return ArwdState{values};
}

// particle-count configuration with every lone particle inside A put to sleep
inline ArwdState with_lone_particles_asleep(const Graph& g, const std::vector<int32_t>& counts,
                                            const SiteSet& A) {
    check_no_halo(g, "with_lone_particles_asleep");
    if (int(counts.size()) != g.n_active)
        throw std::invalid_argument("with_lone_particles_asleep: count size != sites");
    ArwdState s;
    s.eta.resize(counts.size());
    for (Site x = 0; x < g.n_active; ++x) {
        if (counts[x] < 0) throw std::invalid_argument("with_lone_particles_asleep: negative count");
        s.eta[x] = (counts[x] == 1 && A.contains(x)) ? arwd_sleeping : counts[x];
    }
    return s;
}

// one active particle on each site of U, a sleeping one on the rest of A
inline ArwdState fully_occupied_state(const Graph& g, const SiteSet& A, const SiteSet& U) {
    check_no_halo(g, "fully_occupied_state");
    ArwdState s;
    s.eta.assign(g.n_active, 0);
    for (Site x = 0; x < g.n_active; ++x) {
        if (U.contains(x)) {
            if (!A.contains(x)) throw std::invalid_argument("fully_occupied_state: U must sit inside A");
            s.eta[x] = 1;
        } else if (A.contains(x)) {
            s.eta[x] = arwd_sleeping;
        }
    }
    return s;
}

// inverse of the above, checked: exactly one particle per A-site, nothing outside
inline SiteSet active_subset_of(const Graph& g, const SiteSet& A, const ArwdState& s) {
    SiteSet U(g.n_active);
    for (Site x = 0; x < g.n_active; ++x) {
        if (!A.contains(x)) {
            if (s.eta[x] != 0)
                throw std::invalid_argument("active_subset_of: particle outside the ground set");
            continue;
        }
        if (s.eta[x] == 1) U.insert(x);
        else if (s.eta[x] != arwd_sleeping)
            throw std::invalid_argument("active_subset_of: site of A not singly occupied");
    }
    return U;
}

// ---------------------------------------------------------------------------
// the settling walk

struct WalkOutcome {
    Site settled = no_site;
    std::vector<Site> departed;  // distinct sites, in first-departure order
    int64_t steps = 0;
};

// Walk from `start` until the first arrival (after at least one step) at a
// site with stop_at[z] != 0. Arrival ends the walk; the endpoint is not a
// departure unless the walker left it earlier. The chooser maps a site to
// the neighbor actually taken, so tests can pin trajectories.
template <class Chooser>
WalkOutcome settling_walk(const Graph& g, Site start, const std::vector<uint8_t>& stop_at,
                          int64_t cap, Chooser&& pick) {
    if (int(stop_at.size()) != g.n_total)
        throw std::invalid_argument("settling_walk: stop set size != sites");
    WalkOutcome out;
    std::vector<uint8_t> seen(g.n_total, 0);
    Site z = start;
    while (true) {
        if (out.steps >= cap) throw std::runtime_error("settling_walk: step budget exhausted");
        Site next = pick(z);
        bool ok = false;
        for (const Site* it = g.neighbors_begin(z); it != g.neighbors_end(z); ++it)
            if (*it == next) { ok = true; break; }
        if (!ok) throw std::logic_error("settling_walk: chooser returned a non-neighbor");
        if (!seen[z]) {
            seen[z] = 1;
            out.departed.push_back(z);
        }
        ++out.steps;
        if (stop_at[next]) {
            out.settled = next;
            return out;
        }
        z = next;
    }
}

inline WalkOutcome settling_walk_random(const Graph& g, Site start, const std::vector<uint8_t>& stop_at,
                                        int64_t cap, RandomStream& rng) {
    return settling_walk(g, start, stop_at, cap, [&](Site z) {
        return g.neighbor(z, int(rng.uniform_below(uint32_t(g.degree(z)))));
    });
}

// sites of A that would be empty once the particle at x is lifted
inline std::vector<uint8_t> empty_after_lift(const Graph& g, const ArwdState& s, const SiteSet& A,
                                             Site x) {
    std::vector<uint8_t> stop(g.n_total, 0);
    bool any = false;
    for (Site z = 0; z < g.n_active; ++z) {
        if (!A.contains(z)) continue;
        int32_t v = s.eta[z] - (z == x ? 1 : 0);
        if (v == 0) { stop[z] = 1; any = true; }
    }
    if (!any) throw std::logic_error("empty_after_lift: nowhere to settle, mass exceeds |A|?");
    return stop;
}

// ---------------------------------------------------------------------------
// one kernel step, unmasked and masked variants

struct ArwdStepResult {
    bool slept = false;
    Site settled = no_site;
    std::vector<Site> woken;
    int64_t walk_steps = 0;
};

inline void check_step_site(const Graph& g, const ArwdState& s, Site x, const char* who) {
    g.check_site(x);
    if (!arwd_site_active(s.eta[x]))
        throw std::logic_error(std::string(who) + ": chosen site holds no active particle");
}

// every sleeping site the walker departed from wakes up
inline ArwdStepResult arwd_step(const Graph& g, ArwdState& s, const SiteSet& A, Site x,
                                double lambda, RandomStream& rng,
                                int64_t walk_cap = default_walk_cap) {
    check_step_site(g, s, x, "arwd_step");
    const int64_t before = s.total_mass();
    ArwdStepResult res;
    const bool may_sleep = A.contains(x) && s.eta[x] == 1;
    if (may_sleep && rng.uniform01() < lambda / (1.0 + lambda)) {
        s.eta[x] = arwd_sleeping;
        res.slept = true;
        assert(s.total_mass() == before);
        return res;
    }
    std::vector<uint8_t> stop = empty_after_lift(g, s, A, x);
    WalkOutcome walk = settling_walk_random(g, x, stop, walk_cap, rng);
    res.walk_steps = walk.steps;
    s.eta[x] -= 1;
    for (Site z : walk.departed)
        if (s.eta[z] == arwd_sleeping) {
            s.eta[z] = 1;
            res.woken.push_back(z);
        }
    assert(s.eta[walk.settled] == 0);
    s.eta[walk.settled] = arwd_sleeping;
    res.settled = walk.settled;
    assert(s.total_mass() == before);
    return res;
}

// departed sleeping sites wake only inside the mask W
inline ArwdStepResult arwd_step_masked(const Graph& g, ArwdState& s, const SiteSet& A, Site x,
                                       const SiteSet& W, double lambda, RandomStream& rng,
                                       int64_t walk_cap = default_walk_cap) {
    check_step_site(g, s, x, "arwd_step_masked");
    const int64_t before = s.total_mass();
    ArwdStepResult res;
    const bool may_sleep = A.contains(x) && s.eta[x] == 1;
    if (may_sleep && rng.uniform01() < lambda / (1.0 + lambda)) {
        s.eta[x] = arwd_sleeping;
        res.slept = true;
        assert(s.total_mass() == before);
        return res;
    }
    std::vector<uint8_t> stop = empty_after_lift(g, s, A, x);
    WalkOutcome walk = settling_walk_random(g, x, stop, walk_cap, rng);
    res.walk_steps = walk.steps;
    s.eta[x] -= 1;
    for (Site z : walk.departed)
        if (s.eta[z] == arwd_sleeping && W.contains(z)) {
            s.eta[z] = 1;
            res.woken.push_back(z);
        }
    assert(s.eta[walk.settled] == 0);
    s.eta[walk.settled] = arwd_sleeping;
    res.settled = walk.settled;
    assert(s.total_mass() == before);
    return res;
}

// ---------------------------------------------------------------------------
// full-configuration runner

enum class ArwdStatus { stabilised, capped };

struct ArwdRunResult {
    int64_t T = 0;  // steps taken before the strategy first returned no_site
    ArwdStatus status = ArwdStatus::stabilised;
    std::vector<int64_t> times_chosen;  // per site
    int64_t walk_steps = 0;
};

using ArwdStrategyFn = std::function<Site(const ArwdState&, int64_t)>;

inline Site min_active_site(const ArwdState& s) {
    for (Site x = 0; x < Site(s.eta.size()); ++x)
        if (arwd_site_active(s.eta[x])) return x;
    return no_site;
}

inline ArwdRunResult run_arwd(const Graph& g, ArwdState& s, const SiteSet& A, double lambda,
                              const ArwdStrategyFn& f, RandomStream& rng,
                              int64_t max_steps = 1'000'000, const SiteSet* W = nullptr,
                              int64_t walk_cap = default_walk_cap) {
    check_no_halo(g, "run_arwd");
    if (s.total_mass() != A.size())
        throw std::invalid_argument("run_arwd: mass must equal |A|");
    ArwdRunResult out;
    out.times_chosen.assign(g.n_active, 0);
    for (int64_t t = 0;; ++t) {
        if (t >= max_steps) {
            out.T = t;
            out.status = ArwdStatus::capped;
            return out;
        }
        Site x = f(s, t);
        if (x == no_site) {
            out.T = t;
            return out;
        }
        check_step_site(g, s, x, "run_arwd strategy");
        out.times_chosen[x] += 1;
        ArwdStepResult step = W ? arwd_step_masked(g, s, A, x, *W, lambda, rng, walk_cap)
                                : arwd_step(g, s, A, x, lambda, rng, walk_cap);
        out.walk_steps += step.walk_steps;
    }
}

// ---------------------------------------------------------------------------
// subset engine: all of A occupied, only the active set U tracked

struct SubsetStrategy {
    virtual ~SubsetStrategy() = default;
    // called for every reached state, including the initial one
    virtual void observe(const SiteSet& U, int64_t t) { (void)U, (void)t; }
    virtual Site choose(const SiteSet& U, int64_t t) = 0;
};

struct GreedyMinStrategy final : SubsetStrategy {
    Site choose(const SiteSet& U, int64_t) override { return U.min_element(); }
};

struct SubsetSleepMask {
    virtual ~SubsetSleepMask() = default;
    virtual void observe(const SiteSet& U, int64_t t) { (void)U, (void)t; }
    // mark with 1 every site the walk of step t is allowed to wake
    virtual void fill(const SiteSet& U, int64_t t, Site chosen, std::vector<uint8_t>& wake_ok) = 0;
};

struct SubsetRunResult {
    int64_t T = 0;
    ArwdStatus status = ArwdStatus::stabilised;
    SiteSet final_active;
    std::vector<int64_t> times_chosen;
    int64_t walk_steps = 0;
};

inline SubsetRunResult run_arwd_subset(const Graph& g, const SiteSet& A, const SiteSet& U0,
                                       double lambda, SubsetStrategy& f, SubsetSleepMask* mask,
                                       RandomStream& rng, int64_t max_steps = 1'000'000,
                                       int64_t walk_cap = default_walk_cap) {
    check_no_halo(g, "run_arwd_subset");
    if (A.empty()) throw std::invalid_argument("run_arwd_subset: empty ground set");
    for (Site x = 0; x < g.n_active; ++x)
        if (U0.contains(x) && !A.contains(x))
            throw std::invalid_argument("run_arwd_subset: U0 must sit inside A");
    SiteSet U = U0;
    SubsetRunResult out;
    out.times_chosen.assign(g.n_active, 0);
    std::vector<uint8_t> stop(g.n_total, 0);
    std::vector<uint8_t> wake_ok(g.n_total, 1);
    const double sleep_p = lambda / (1.0 + lambda);
    for (int64_t t = 0;; ++t) {
        f.observe(U, t);
        if (mask) mask->observe(U, t);
        if (t >= max_steps) {
            out.T = t;
            out.status = ArwdStatus::capped;
            break;
        }
        Site x = f.choose(U, t);
        if (x == no_site) {
            out.T = t;
            break;
        }
        if (!U.contains(x)) throw std::logic_error("run_arwd_subset: strategy chose an inactive site");
        out.times_chosen[x] += 1;
        if (rng.uniform01() < sleep_p) {
            U.erase(x);
            continue;
        }
        // with every A-site occupied the only place to settle is x itself
        stop[x] = 1;
        WalkOutcome walk = settling_walk_random(g, x, stop, walk_cap, rng);
        stop[x] = 0;
        assert(walk.settled == x);
        out.walk_steps += walk.steps;
        if (mask) {
            std::fill(wake_ok.begin(), wake_ok.end(), 0);
            mask->fill(U, t, x, wake_ok);
        }
        U.erase(x);
        for (Site z : walk.departed)
            if (A.contains(z) && !U.contains(z) && z != x && wake_ok[z]) U.insert(z);
    }
    out.final_active = U;
    return out;
}

// ---------------------------------------------------------------------------
// paired samples for the half-toppling vs deactivation comparison

struct DominationSample {
    int64_t trial = 0;
    uint64_t seed = 0;
    int64_t value = 0;
    bool capped = false;
};

struct DominationReport {
    std::vector<DominationSample> ssm;   // half topplings of the A-stabilisation
    std::vector<DominationSample> arwd;  // deactivation steps on B, all sites occupied
    int64_t ssm_capped = 0;
    int64_t arwd_capped = 0;
    double lambda = 0.0;
};

inline void check_probe_set(const Graph& g, const SiteSet& A, const SiteSet& B, const char* who) {
    for (Site x = 0; x < g.n_active; ++x) {
        if (!B.contains(x)) continue;
        if (!A.contains(x)) throw std::invalid_argument(std::string(who) + ": B must sit inside A");
        if (g.degree(x) < 2) throw std::invalid_argument(std::string(who) + ": B-site of degree < 2");
        for (const Site* it = g.neighbors_begin(x); it != g.neighbors_end(x); ++it)
            if (B.contains(*it))
                throw std::invalid_argument(std::string(who) + ": B must be totally disconnected");
    }
}

inline DominationReport domination_experiment(const Graph& g, const SiteSet& A, const SiteSet& B,
                                              const std::vector<int32_t>& counts, int64_t trials,
                                              uint64_t seed,
                                              int64_t half_step_cap = default_half_step_cap,
                                              int64_t arwd_max_steps = 1'000'000) {
    check_no_halo(g, "domination_experiment");
    check_probe_set(g, A, B, "domination_experiment");
    if (int(counts.size()) != g.n_active)
        throw std::invalid_argument("domination_experiment: count size != sites");
    int64_t mass = 0;
    for (int32_t v : counts) {
        if (v < 0) throw std::invalid_argument("domination_experiment: negative count");
        mass += v;
    }
    if (mass != A.size())
        throw std::invalid_argument("domination_experiment: particle count must equal |A|");
    if (trials < 1) throw std::invalid_argument("domination_experiment: trials < 1");

    DominationReport rep;
    rep.lambda = double(g.max_degree) * g.max_degree * g.max_degree;
    SiteSet everything = all_active(g);
    SiteSet U0(g.n_active);
    for (Site x = 0; x < g.n_active; ++x)
        if (B.contains(x) && counts[x] >= 2) U0.insert(x);

    for (int64_t i = 0; i < trials; ++i) {
        uint64_t fs = trial_seed(seed, "domination/ssm", uint64_t(i));
        InstructionField field(fs);
        SsmState s = make_state(g, counts);
        StabilizeResult r = stabilize(g, s, everything, StabilityMode::a_stab(A), field,
                                      TopplePolicy::lex_min, nullptr, half_step_cap);
        bool capped = r.status == StabilizeStatus::capped;
        rep.ssm.push_back({i, fs, r.total_half_steps, capped});
        if (capped) ++rep.ssm_capped;
    }
    for (int64_t i = 0; i < trials; ++i) {
        uint64_t rs = trial_seed(seed, "domination/arwd", uint64_t(i));
        RandomStream rng(rs);
        GreedyMinStrategy f;
        SubsetRunResult r = run_arwd_subset(g, B, U0, rep.lambda, f, nullptr, rng, arwd_max_steps);
        bool capped = r.status == ArwdStatus::capped;
        rep.arwd.push_back({i, rs, r.T, capped});
        if (capped) ++rep.arwd_capped;
    }
    return rep;
}

}  // namespace sandpile
