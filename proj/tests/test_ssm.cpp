#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "sandpile/lattice.hpp"
#include "sandpile/rng.hpp"
#include "sandpile/ssm.hpp"

using namespace sandpile;

TEST_CASE("instability predicates") {
    Graph g = make_cycle(5);
    SsmState s = SsmState::zeros(g);
    SECTION("two particles: unstable in every mode") {
        s.eta[1] = 2;
        REQUIRE(is_unstable(g, s, 1, StabilityMode::full()));
        REQUIRE(is_unstable(g, s, 1, StabilityMode::half()));
    }
    SECTION("one particle mid-toppling: only half-unstable") {
        s.eta[1] = 1;
        s.h2[1] = 3;
        REQUIRE_FALSE(is_unstable(g, s, 1, StabilityMode::full()));
        REQUIRE(is_unstable(g, s, 1, StabilityMode::half()));
        s.h2[1] = 4;
        REQUIRE_FALSE(is_unstable(g, s, 1, StabilityMode::half()));
    }
    SECTION("marked-set mode: lone particles outside the set must move on") {
        SiteSet A(g.n_total, {0, 1});
        s.eta[3] = 1;
        REQUIRE(is_unstable(g, s, 3, StabilityMode::a_stab(A)));
        s.eta[1] = 1;
        REQUIRE_FALSE(is_unstable(g, s, 1, StabilityMode::a_stab(A)));
        s.h2[1] = 1;
        REQUIRE(is_unstable(g, s, 1, StabilityMode::a_stab(A)));
    }
    SECTION("halo never unstable") {
        Graph b = make_box(1, 1);
        SsmState sb = SsmState::zeros(b);
        sb.eta[b.n_active] = 5;
        REQUIRE_FALSE(is_unstable(b, sb, Site(b.n_active), StabilityMode::full()));
    }
}

TEST_CASE("half toppling consumes the next slot") {
    Graph g = make_cycle(3);
    SsmState s = make_state(g, {2, 0, 0});
    TruncatedField f(std::map<Site, std::vector<Site>>{{0, {1, 2}}});
    Site y = half_topple(g, s, 0, f);
    REQUIRE(y == 1);
    REQUIRE(s.eta == std::vector<int32_t>{1, 1, 0});
    REQUIRE(s.h2[0] == 1);
    y = half_topple(g, s, 0, f);
    REQUIRE(y == 2);
    REQUIRE(s.eta == std::vector<int32_t>{0, 1, 1});
    REQUIRE(s.h2[0] == 2);
    REQUIRE_THROWS_AS(half_topple(g, s, 0, f), std::invalid_argument);  // empty now
}

TEST_CASE("a full toppling is exactly two pinned half steps") {
    Graph g = make_cycle(3);
    TruncatedField f(std::map<Site, std::vector<Site>>{{0, {2, 1}}});
    SsmState a = make_state(g, {2, 0, 0});
    SiteSet all = all_active(g);
    StabilizeResult r = stabilize(g, a, all, StabilityMode::full(), f);
    REQUIRE(r.status == StabilizeStatus::stable);
    REQUIRE(a.eta == std::vector<int32_t>{0, 1, 1});
    REQUIRE(a.h2[0] == 2);
    REQUIRE(r.odometer[0] == 2);
    REQUIRE(r.total_half_steps == 2);

    SsmState b = make_state(g, {2, 0, 0});
    half_topple(g, b, 0, f);
    half_topple(g, b, 0, f);
    REQUIRE(a == b);
}

TEST_CASE("stabilize basics") {
    Graph g = make_cycle(6);
    SiteSet all = all_active(g);
    SECTION("already stable does nothing") {
        SsmState s = make_state(g, {1, 0, 1, 0, 0, 1});
        StabilizeResult r = stabilize(g, s, all, StabilityMode::full(), InstructionField(5));
        REQUIRE(r.total_half_steps == 0);
        REQUIRE(r.status == StabilizeStatus::stable);
    }
    SECTION("ends stable with mass conserved on a torus") {
        SsmState s = make_state(g, {3, 0, 2, 0, 0, 0});
        StabilizeResult r = stabilize(g, s, all, StabilityMode::full(), InstructionField(6));
        REQUIRE(r.status == StabilizeStatus::stable);
        REQUIRE(s.total_particles() == 5);
        for (Site x = 0; x < g.n_active; ++x) REQUIRE(s.eta[x] <= 1);
        REQUIRE(r.odometer[0] >= 2);
    }
    SECTION("sites outside the toppling region are left alone") {
        SsmState s = make_state(g, {2, 0, 0, 0, 0, 0});
        SiteSet vp(g.n_total, {3, 4});
        StabilizeResult r = stabilize(g, s, vp, StabilityMode::full(), InstructionField(7));
        REQUIRE(r.total_half_steps == 0);
        REQUIRE(s.eta[0] == 2);
    }
    SECTION("box overflow spills onto the halo") {
        Graph b = make_box(2, 1);
        SsmState s = SsmState::zeros(b);
        for (Site x = 0; x < b.n_active; ++x) s.eta[x] = 1;
        s.eta[b.site_at({0})] += 1;  // six particles, five interior slots
        StabilizeResult r = stabilize(b, s, all_active(b), StabilityMode::full(), InstructionField(8));
        REQUIRE(r.status == StabilizeStatus::stable);
        int64_t interior = 0, halo = 0;
        for (Site x = 0; x < b.n_total; ++x) (b.is_halo(x) ? halo : interior) += s.eta[x];
        REQUIRE(interior + halo == 6);
        REQUIRE(interior <= 5);
        REQUIRE(halo >= 1);
    }
    SECTION("cap reports capped and a partial odometer") {
        SsmState s = make_state(g, {4, 0, 0, 0, 0, 0});
        StabilizeResult r = stabilize(g, s, all, StabilityMode::half(), InstructionField(9),
                                      TopplePolicy::lex_min, nullptr, 1);
        REQUIRE(r.status == StabilizeStatus::capped);
        REQUIRE(r.total_half_steps == 1);
        SsmState s2 = make_state(g, {4, 0, 0, 0, 0, 0});
        StabilizeResult r2 = stabilize(g, s2, all, StabilityMode::full(), InstructionField(9),
                                       TopplePolicy::lex_min, nullptr, 3);
        REQUIRE(r2.status == StabilizeStatus::capped);
        REQUIRE(r2.total_half_steps == 2);  // full units never split
    }
}

TEST_CASE("full and half stabilization agree from a fresh state") {
    RandomStream rng(31);
    for (int trial = 0; trial < 40; ++trial) {
        Graph g = trial % 2 == 0 ? make_cycle(4 + int(rng.uniform_below(5)))
                                 : make_torus(3 + int(rng.uniform_below(2)), 2);
        SiteSet all = all_active(g);
        std::vector<int32_t> eta(g.n_active, 0);
        int budget = int(rng.uniform_below(uint32_t(g.n_active)));
        for (int k = 0; k < budget; ++k) eta[rng.uniform_below(uint32_t(g.n_active))] += 1;
        InstructionField field(rng.next_u64());
        SsmState a = make_state(g, eta), b = make_state(g, eta);
        StabilizeResult ra = stabilize(g, a, all, StabilityMode::full(), field);
        StabilizeResult rb = stabilize(g, b, all, StabilityMode::half(), field, TopplePolicy::dfs);
        REQUIRE(ra.status == StabilizeStatus::stable);
        REQUIRE(rb.status == StabilizeStatus::stable);
        REQUIRE(a == b);
        REQUIRE(ra.odometer == rb.odometer);
        // after a half-mode run nobody is caught mid-toppling
        for (Site x = 0; x < g.n_active; ++x)
            if (b.eta[x] == 1) REQUIRE(b.h2[x] % 2 == 0);
    }
}

TEST_CASE("order independence") {
    SECTION("random orders on random tori") {
        RandomStream rng(32);
        int checked = 0;
        for (int trial = 0; trial < 30 && checked < 15; ++trial) {
            Graph g = make_torus(4, 2);
            RandomStream init = rng.substream(uint64_t(trial));
            SsmState s = poisson_init(g, 0.6, init);
            // more particles than sites means no stable state exists
            if (s.total_particles() > g.n_active) continue;
            ++checked;
            InstructionField field(init.next_u64());
            AbelianProbeResult pr = abelian_probe(g, s, all_active(g), StabilityMode::full(), field, 20,
                                                  init.substream("orders"));
            REQUIRE(pr.abelian);
        }
        REQUIRE(checked == 15);
    }
    SECTION("exhaustive over every legal order on a small instance") {
        // absorbing boundary keeps the stabilization short, so the whole
        // order tree fits in the budget
        Graph g = make_box(2, 1);
        SiteSet all = all_active(g);
        for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
            InstructionField field(seed);
            SsmState s = make_state(g, {0, 2, 2, 0, 0});
            auto full = exhaustive_order_check(g, s, all, StabilityMode::full(), field, 2000000);
            REQUIRE(full.has_value());
            REQUIRE(*full);
            auto half = exhaustive_order_check(g, s, all, StabilityMode::half(), field, 2000000);
            REQUIRE(half.has_value());
            REQUIRE(*half);
        }
    }
    SECTION("budget overflow reports instead of lying") {
        Graph g = make_torus(4, 1);
        InstructionField field(3);
        SsmState s = make_state(g, {2, 2, 0, 0});
        auto r = exhaustive_order_check(g, s, all_active(g), StabilityMode::half(), field, 3);
        REQUIRE_FALSE(r.has_value());
    }
    SECTION("weak mode is refused") {
        Graph g = make_cycle(5);
        SsmState s = make_state(g, {2, 0, 0, 0, 0});
        RandomStream rng(1);
        REQUIRE_THROWS_AS(
            abelian_probe(g, s, all_active(g), StabilityMode::weak(0), InstructionField(1), 3, rng),
            std::invalid_argument);
    }
}

TEST_CASE("restricting the toppling region only lowers the odometer") {
    RandomStream rng(33);
    for (int trial = 0; trial < 25; ++trial) {
        Graph g = make_box(3, 1);
        RandomStream init = rng.substream(uint64_t(trial));
        SsmState a = poisson_init(g, 0.9, init);
        SsmState b = a;
        InstructionField field(init.next_u64());
        SiteSet big = all_active(g);
        SiteSet small(g.n_total);
        for (Site x = 0; x < g.n_active; ++x)
            if (init.bernoulli(0.6)) small.insert(x);
        StabilizeResult rb = stabilize(g, a, big, StabilityMode::half(), field);
        StabilizeResult rs = stabilize(g, b, small, StabilityMode::half(), field);
        REQUIRE(rb.status == StabilizeStatus::stable);
        REQUIRE(rs.status == StabilizeStatus::stable);
        for (Site x = 0; x < g.n_total; ++x) REQUIRE(rs.odometer[x] <= rb.odometer[x]);
    }
}

TEST_CASE("marked-set runs reproduce plain runs when the final support is the mark") {
    RandomStream rng(34);
    int checked = 0;
    for (int trial = 0; trial < 30; ++trial) {
        Graph g = trial % 2 == 0 ? make_torus(5, 1) : make_torus(3, 2);
        RandomStream init = rng.substream(uint64_t(trial));
        SsmState s0 = poisson_init(g, 0.7, init);
        if (s0.total_particles() > g.n_active) continue;  // would never settle
        InstructionField field(init.next_u64());
        SsmState full_run = s0;
        StabilizeResult rf = stabilize(g, full_run, all_active(g), StabilityMode::full(), field);
        if (rf.status != StabilizeStatus::stable) continue;
        SiteSet A = support_set(g, full_run);
        SsmState marked_run = s0;
        StabilizeResult rm = stabilize(g, marked_run, all_active(g), StabilityMode::a_stab(A), field,
                                       TopplePolicy::dfs);
        REQUIRE(rm.status == StabilizeStatus::stable);
        REQUIRE(marked_run == full_run);
        REQUIRE(rm.odometer == rf.odometer);
        ++checked;
    }
    REQUIRE(checked >= 10);
}

TEST_CASE("weak stopping") {
    Graph g = make_cycle(5);
    SiteSet all = all_active(g);
    SECTION("terminal states are weakly stable and the lemma holds per run") {
        RandomStream rng(35);
        for (int trial = 0; trial < 60; ++trial) {
            RandomStream init = rng.substream(uint64_t(trial));
            SsmState s = poisson_init(g, 0.8, init);
            if (s.total_particles() > g.n_active) continue;
            Site center = Site(init.uniform_below(uint32_t(g.n_active)));
            InstructionField field(init.next_u64());
            StabilizeResult r = stabilize(g, s, all, StabilityMode::weak(center), field);
            REQUIRE(r.status == StabilizeStatus::stable);
            REQUIRE(is_weakly_stable(g, s, all, center));
            if (r.center_ball_ever_occupied) REQUIRE(r.center_ball_finally_occupied);
        }
    }
    SECTION("a blocked pair stays put") {
        // lone doubly-occupied site with an empty neighborhood around it:
        // weakly stable already, nothing may fire
        SsmState s = make_state(g, {2, 0, 0, 0, 0});
        StabilizeResult r = stabilize(g, s, all, StabilityMode::weak(0), InstructionField(2));
        REQUIRE(r.total_half_steps == 0);
        REQUIRE(s.eta[0] == 2);
        REQUIRE(is_weakly_stable(g, s, all, 0));
    }
    SECTION("company unblocks the pair") {
        SsmState s = make_state(g, {2, 1, 0, 0, 0});
        StabilizeResult r = stabilize(g, s, all, StabilityMode::weak(0), InstructionField(3));
        REQUIRE(r.status == StabilizeStatus::stable);
        REQUIRE(r.total_half_steps >= 2);
        REQUIRE(is_weakly_stable(g, s, all, 0));
        REQUIRE(r.center_ball_finally_occupied);
    }
}

TEST_CASE("poisson init") {
    Graph g = make_torus(10, 2);
    RandomStream rng(36);
    double total = 0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        RandomStream sub = rng.substream(uint64_t(t));
        SsmState s = poisson_init(g, 0.8, sub);
        total += double(s.total_particles());
        if (t == 0)
            for (Site x = 0; x < g.n_total; ++x) REQUIRE(s.h2[x] == 0);
    }
    REQUIRE(total / trials == Catch::Approx(80.0).margin(3.0));
}

TEST_CASE("state construction guards") {
    Graph g = make_cycle(4);
    REQUIRE_THROWS_AS(make_state(g, {1, 2, 3}), std::invalid_argument);
    REQUIRE_THROWS_AS(make_state(g, {1, -1, 0, 0}), std::invalid_argument);
    SsmState s = make_state(g, {2, 0, 0, 0});
    RandomStream rng(1);
    REQUIRE_THROWS_AS(
        stabilize(g, s, all_active(g), StabilityMode::full(), InstructionField(1), TopplePolicy::random_site),
        std::invalid_argument);  // random policy without a stream
}
