#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <cmath>

#include "sandpile/experiments.hpp"

using namespace sandpile;

TEST_CASE("csv rendering is plain and strict") {
    CHECK(fmt_g(0.5) == "0.5");
    CHECK(fmt_g(1.0) == "1");
    CHECK(fmt_g(1e-5) == "1e-05");
    CHECK(fmt_g(1.0 / 3.0) == "0.333333333333");

    CsvDoc doc;
    doc.echo = {{"b", 2}, {"a", 1}};
    doc.notes = {"note line"};
    doc.columns = {"x", "y"};
    doc.rows = {{"1", "2"}, {"3", "4"}};
    std::string body = render_csv(doc);
    CHECK(body ==
          "# config {\"a\":1,\"b\":2}\n# note line\nx,y\n1,2\n3,4\n");
    std::string stamped = render_csv(doc, "2024-01-01T00:00:00Z");
    CHECK(stamped.find("# generated 2024-01-01T00:00:00Z\n") != std::string::npos);

    doc.rows.push_back({"lonely"});
    CHECK_THROWS_AS(render_csv(doc), std::logic_error);
}

TEST_CASE("indexed runner is schedule-independent") {
    auto square = [](int64_t i) { return i * i; };
    std::vector<int64_t> serial = run_indexed(500, 1, square);
    std::vector<int64_t> parallel = run_indexed(500, 8, square);
    REQUIRE(serial == parallel);
    CHECK(serial[499] == 499 * 499);
    CHECK(run_indexed(0, 4, square).empty());

    auto boom = [](int64_t i) -> int {
        if (i == 57) throw std::runtime_error("57");
        return 0;
    };
    CHECK_THROWS_AS(run_indexed(200, 4, boom), std::runtime_error);
}

TEST_CASE("fixation scan brackets the density sweep") {
    FixationReport rep = fixation_scan(1, {0.2, 2.0}, {6}, 150, 77, 10'000'000, -1, 4);
    REQUIRE(rep.cells.size() == 2);
    CHECK(rep.cells[0].completed == 150);
    CHECK(rep.cells[0].frac_active < rep.cells[1].frac_active);
    CHECK(rep.cells[1].frac_active >= 0.98);
    CHECK(rep.cells[0].frac_grew <= rep.cells[0].frac_active);

    // empty grid still renders a header
    FixationReport empty = fixation_scan(1, {}, {6}, 50, 1);
    CHECK(empty.cells.empty());
    CsvDoc doc = fixation_csv(empty, {{"subcommand", "fixation-scan"}});
    CHECK(render_csv(doc) == "# config {\"subcommand\":\"fixation-scan\"}\n"
                             "mu,L,trials,completed,capped,frac_active,frac_grew\n");

    // thread count changes nothing, byte for byte
    FixationReport serial = fixation_scan(1, {0.2, 2.0}, {6}, 150, 77, 10'000'000, -1, 1);
    CHECK(render_csv(fixation_csv(serial, {})) == render_csv(fixation_csv(rep, {})));

    CHECK_THROWS_AS(fixation_scan(0, {0.5}, {6}, 10, 1), std::invalid_argument);
    CHECK_THROWS_AS(fixation_scan(1, {-0.5}, {6}, 10, 1), std::invalid_argument);
    CHECK_THROWS_AS(fixation_scan(1, {0.5}, {0}, 10, 1), std::invalid_argument);
}

TEST_CASE("torus time accounting and fit guards") {
    TorusTimeReport rep = torus_time_experiment(1, 0.9, {4, 6}, 60, 3, 200'000, 4);
    REQUIRE(rep.cells.size() == 2);
    for (const TorusTimeCell& c : rep.cells) {
        CHECK(c.trials == 60);
        CHECK(c.used + c.nonstab + c.capped == 60);
        if (c.used > 0) {
            CHECK(c.q1 <= c.median);
            CHECK(c.median <= c.q3);
        }
    }
    CHECK_FALSE(rep.have_fit);  // two cells cannot support a three-point fit
    CHECK_FALSE(rep.mu_warning);

    TorusTimeReport warn = torus_time_experiment(1, 1.2, {4}, 20, 3, 100'000);
    CHECK(warn.mu_warning);
    CHECK(warn.cells[0].nonstab > 0);

    CHECK_THROWS_AS(torus_time_experiment(1, 0.9, {2}, 10, 1), std::invalid_argument);
    CHECK_THROWS_AS(torus_time_experiment(1, 0.0, {4}, 10, 1), std::invalid_argument);
    CHECK_THROWS_AS(torus_time_experiment(1, 0.9, {4}, 0, 1), std::invalid_argument);
}

TEST_CASE("weak probe bound, saturation and interior guard") {
    WeakProbeReport rep = weak_probe_experiment(1, 8, 0.8, 1500, 21, 10'000'000, 4);
    CHECK(rep.completed == 1500);
    CHECK(rep.bound == Catch::Approx(0.125));
    CHECK(rep.ok);

    WeakProbeReport sat = weak_probe_experiment(1, 6, 5.0, 300, 21);
    CHECK(sat.p_near >= 0.99);

    Coord edge = {8};  // touches the halo on box(8,1)
    CHECK_THROWS_AS(weak_probe_experiment(1, 8, 0.8, 10, 1, 1'000'000, 1, &edge),
                    std::invalid_argument);
    CHECK_THROWS_AS(weak_probe_experiment(1, 8, 0.8, 0, 1), std::invalid_argument);
}

TEST_CASE("confinement probe matches the two-site instance") {
    Graph g = make_cycle(5);
    SiteSet A(g.n_active, {0, 1});
    std::vector<int32_t> eta = {1, 0, 0, 0, 0};
    std::vector<int64_t> h2 = {1, 0, 0, 0, 0};

    ConfinementReport rep = confinement_probe(g, A, eta, h2, 2000, 11, 100'000, 4);
    CHECK(rep.bound == Catch::Approx(0.0625));
    // the only toppling is the first one: the particle leaves A with
    // exactly one fresh coin flip, so the truth is 1/2
    CHECK(std::abs(rep.p_hat - 0.5) < 0.05);
    CHECK(rep.ok);
    CHECK(rep.capped == 0);

    // an even start is already stable, confinement is certain
    std::vector<int64_t> even(5, 0);
    ConfinementReport still = confinement_probe(g, A, eta, even, 200, 11);
    CHECK(still.p_hat == 1.0);

    SECTION("hypothesis violations") {
        std::vector<int32_t> full = {1, 1, 0, 0, 0};
        CHECK_THROWS_AS(confinement_probe(g, A, full, h2, 10, 1), std::invalid_argument);
        std::vector<int32_t> heavy = {2, 0, 0, 0, 0};
        CHECK_THROWS_AS(confinement_probe(g, A, heavy, h2, 10, 1), std::invalid_argument);
        SiteSet split(g.n_active, {0, 2});
        CHECK_THROWS_AS(confinement_probe(g, split, eta, h2, 10, 1), std::invalid_argument);
        CHECK_THROWS_AS(confinement_probe(g, A, eta, h2, 0, 1), std::invalid_argument);
        Graph big = make_torus(4, 2);
        SiteSet nine(big.n_active, {0, 1, 2, 3, 4, 5, 6, 7, 8});
        std::vector<int32_t> beta(16, 0);
        std::vector<int64_t> bh(16, 0);
        CHECK_THROWS_AS(confinement_probe(big, nine, beta, bh, 10, 1), std::invalid_argument);
    }
}

TEST_CASE("domination summary keeps the expected ordering") {
    Graph g = make_cycle(6);
    SiteSet A = all_active(g);
    SiteSet B(g.n_active, {0, 2, 4});
    std::vector<int32_t> counts = {2, 0, 2, 1, 1, 0};
    DominationSummary s = domination_summary(g, A, B, counts, 500, 19);
    CHECK_FALSE(s.verdict.rejected);
    CHECK(s.used_ssm == 500);
    CHECK(s.used_arwd == 500);
    CHECK(s.ssm_median > s.arwd_median);
    CsvDoc doc = domination_csv(s, {});
    REQUIRE(doc.rows.size() == 2);
    CHECK(doc.rows[0].size() == doc.columns.size());
}

TEST_CASE("hierarchy check never passes a silent invalid") {
    std::vector<HierarchyCheckRow> rows = hierarchy_check(24, 0.5, 2, 6, 31, 3);
    REQUIRE(rows.size() == 6);
    for (const HierarchyCheckRow& r : rows) {
        CHECK(r.built);
        CHECK(r.valid);
        CHECK(r.a_size >= int64_t(0.5 * 576));
    }
    std::vector<HierarchyCheckRow> again = hierarchy_check(24, 0.5, 2, 6, 31, 1);
    CHECK(render_csv(hierarchy_check_csv(again, {})) == render_csv(hierarchy_check_csv(rows, {})));
}

TEST_CASE("lemma battery passes and trims cleanly") {
    std::vector<NamedCheck> fast = lemma_checks(7, 0);
    for (const NamedCheck& c : fast) {
        INFO(c.name << ": " << c.detail);
        CHECK(c.ok);
        CHECK(c.name.rfind("bernoulli", 0) != 0);
    }
    std::vector<NamedCheck> withmc = lemma_checks(7, 2000);
    int bern = 0;
    for (const NamedCheck& c : withmc) {
        INFO(c.name << ": " << c.detail);
        CHECK(c.ok);
        bern += c.name.rfind("bernoulli", 0) == 0;
    }
    CHECK(bern == 2);
}

TEST_CASE("selfcheck is green and byte-stable") {
    Selfcheck a = run_selfcheck(5, true);
    INFO(a.transcript);
    CHECK(a.failures == 0);
    CHECK(a.checks.size() >= 10);
    Selfcheck b = run_selfcheck(5, true);
    CHECK(a.transcript == b.transcript);
    CHECK(a.transcript.find("selfcheck: all") != std::string::npos);
}
