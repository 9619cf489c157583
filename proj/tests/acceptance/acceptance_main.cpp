// Acceptance gate for the library: thirteen end-to-end checks, one line of
// output each, exit code equal to the number of failures. The CLI binary
// under test is passed as --cli <path> so the determinism checks can drive
// the real executable.

#include <sandpile/analysis.hpp>
#include <sandpile/arwd.hpp>
#include <sandpile/experiments.hpp>
#include <sandpile/hierarchy.hpp>
#include <sandpile/lattice.hpp>
#include <sandpile/parity_probe.hpp>
#include <sandpile/rng.hpp>
#include <sandpile/ssm.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <string>
#include <vector>

using namespace sandpile;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// worker threads for the heavier experiments; results do not depend on this
constexpr int kThreads = 4;

template <class T>
bool vec_eq(const std::vector<T>& a, const std::vector<T>& b) {
    return a == b;
}

// ---- exhaustive toppling-order enumeration ------------------------------
//
// Walks every legal order of moves from the current state, undoing each move
// after the recursive call, and compares every terminal state against the
// reference stabilisation. A "move" is one driver step: two half topplings
// in full mode, one otherwise. Gives up once the visited node count passes
// the budget, and treats any path longer than the reference run as a
// violation (all maximal orders must perform the same moves).
struct EnumJob {
    const Graph& g;
    SsmState& s;
    const StabilityMode& mode;
    const InstructionField& field;
    std::vector<int64_t>& odo;
    const SsmState& ref_state;
    const std::vector<int64_t>& ref_odo;
    int64_t depth_cap = 0;  // moves along one path
    int64_t budget = 100000;
    int64_t nodes = 0;
    int64_t leaves = 0;
    bool overflow = false;
    bool mismatch = false;
};

void enumerate_orders(EnumJob& j, int64_t depth) {
    if (j.overflow || j.mismatch) return;
    if (++j.nodes > j.budget) {
        j.overflow = true;
        return;
    }
    bool any = false;
    const int unit = j.mode.kind == StabilityMode::Kind::full ? 2 : 1;
    for (Site x = 0; x < j.g.n_active; ++x) {
        if (!is_unstable(j.g, j.s, x, j.mode)) continue;
        any = true;
        if (depth + 1 > j.depth_cap) {  // longer order than the reference run
            j.mismatch = true;
            return;
        }
        Site y1 = half_topple(j.g, j.s, x, j.field);
        Site y2 = no_site;
        if (unit == 2) y2 = half_topple(j.g, j.s, x, j.field);
        j.odo[x] += unit;
        enumerate_orders(j, depth + 1);
        j.odo[x] -= unit;
        if (y2 != no_site) {
            --j.s.eta[y2];
            ++j.s.eta[x];
            --j.s.h2[x];
        }
        --j.s.eta[y1];
        ++j.s.eta[x];
        --j.s.h2[x];
        if (j.overflow || j.mismatch) return;
    }
    if (!any) {
        ++j.leaves;
        if (!vec_eq(j.s.eta, j.ref_state.eta) || !vec_eq(j.s.h2, j.ref_state.h2) ||
            !vec_eq(j.odo, j.ref_odo))
            j.mismatch = true;
    }
}

// ---- shell helpers for the CLI determinism check ------------------------

bool run_capture(const std::string& cmd, std::string& out, int& rc) {
    out.clear();
    FILE* p = popen((cmd + " 2>/dev/null").c_str(), "r");
    if (!p) return false;
    char buf[4096];
    size_t got;
    while ((got = fread(buf, 1, sizeof buf, p)) > 0) out.append(buf, got);
    int status = pclose(p);
    rc = (status >= 0 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
    return true;
}

std::string q(const std::string& path) { return "'" + path + "'"; }

}  // namespace

int main(int argc, char** argv) {
    std::string cli_path;
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--cli") cli_path = argv[i + 1];

    int failures = 0;
    auto gate = [&failures](int num, const char* name, auto&& fn) {
        auto t0 = Clock::now();
        bool ok = false;
        std::string detail;
        try {
            ok = fn(detail);
        } catch (const std::exception& e) {
            ok = false;
            detail = std::string("exception: ") + e.what();
        }
        if (!ok) ++failures;
        std::printf("[%s] #%d %s: %s (%.1fs)\n", ok ? "PASS" : "FAIL", num, name, detail.c_str(),
                    seconds_since(t0));
        std::fflush(stdout);
    };

    // 1: every legal toppling order of a small instance lands on the same
    // state and odometer, in every mode, checked by 100 random orders per
    // instance plus full enumeration whenever the order tree is small.
    gate(1, "order and policy invariance", [](std::string& d) {
        auto t0 = Clock::now();
        RandomStream rng(1001);
        const int n_instances = 220;
        const int n_orders = 100;
        const int64_t spot_cap = 400000;
        int64_t random_runs = 0, enumerated = 0, leaves = 0, skipped = 0;
        for (int i = 0; i < n_instances; ++i) {
            detail::SmallInstance inst = detail::random_small_instance(rng);
            const Graph& g = inst.g;
            SiteSet all = all_active(g);
            InstructionField field(rng.next_u64());
            SiteSet marked(g.n_active);
            for (Site x = 0; x < g.n_active; ++x)
                if (rng.bernoulli(0.5)) marked.insert(x);
            if (marked.empty()) marked.insert(Site(rng.uniform_below(uint32_t(g.n_active))));
            const StabilityMode modes[3] = {StabilityMode::full(), StabilityMode::half(),
                                            StabilityMode::a_stab(marked)};
            const char* mode_names[3] = {"full", "half", "marked"};
            for (int mi = 0; mi < 3; ++mi) {
                SsmState ref = make_state(g, inst.eta);
                StabilizeResult rr = stabilize(g, ref, all, modes[mi], field, TopplePolicy::lex_min,
                                               nullptr, spot_cap);
                if (rr.status == StabilizeStatus::capped) {
                    // the instance has no stable endpoint in this mode
                    ++skipped;
                    continue;
                }
                for (int o = 0; o < n_orders; ++o) {
                    SsmState s = make_state(g, inst.eta);
                    StabilizeResult r = stabilize(g, s, all, modes[mi], field,
                                                  TopplePolicy::random_site, &rng, spot_cap);
                    ++random_runs;
                    if (r.status != StabilizeStatus::stable || !vec_eq(s.eta, ref.eta) ||
                        !vec_eq(s.h2, ref.h2) || !vec_eq(r.odometer, rr.odometer)) {
                        d = "random-order mismatch, instance " + std::to_string(i) + " mode " +
                            mode_names[mi];
                        return false;
                    }
                }
                const int unit = mi == 0 ? 2 : 1;
                SsmState work = make_state(g, inst.eta);
                std::vector<int64_t> odo(static_cast<size_t>(g.n_total), 0);
                EnumJob job{g,   work,   modes[mi], field, odo, ref, rr.odometer,
                            rr.total_half_steps / unit, 100000};
                enumerate_orders(job, 0);
                if (job.mismatch) {
                    d = "enumerated-order mismatch, instance " + std::to_string(i) + " mode " +
                        mode_names[mi];
                    return false;
                }
                if (!job.overflow) {
                    ++enumerated;
                    leaves += job.leaves;
                }
            }
        }
        double secs = seconds_since(t0);
        std::ostringstream os;
        os << n_instances << " instances, " << random_runs << " random orders, " << enumerated
           << " full enumerations (" << leaves << " terminal orders), " << skipped
           << " non-stabilising runs skipped";
        d = os.str();
        if (enumerated < 50) {
            d += "; too few enumerable instances";
            return false;
        }
        if (secs >= 60.0) {
            d += "; over the 60s budget";
            return false;
        }
        return true;
    });

    // 2: full-move and half-move stabilisation agree exactly from an
    // even-start state, and when the settled state is an indicator the
    // marked-mode rerun on its support reproduces the same odometer.
    gate(2, "half-step consistency and indicator replay", [](std::string& d) {
        RandomStream rng(2002);
        const int n_instances = 260;
        const int64_t spot_cap = 400000;
        int64_t compared = 0, replayed = 0, skipped = 0;
        for (int i = 0; i < n_instances; ++i) {
            detail::SmallInstance inst = detail::random_small_instance(rng);
            const Graph& g = inst.g;
            SiteSet all = all_active(g);
            InstructionField field(rng.next_u64());
            SsmState sf = make_state(g, inst.eta);
            StabilizeResult rf = stabilize(g, sf, all, StabilityMode::full(), field,
                                           TopplePolicy::lex_min, nullptr, spot_cap);
            if (rf.status == StabilizeStatus::capped) {
                ++skipped;
                continue;
            }
            SsmState sh = make_state(g, inst.eta);
            StabilizeResult rh = stabilize(g, sh, all, StabilityMode::half(), field,
                                           TopplePolicy::lex_min, nullptr, spot_cap);
            ++compared;
            if (rh.status != StabilizeStatus::stable || !vec_eq(sf.eta, sh.eta) ||
                !vec_eq(sf.h2, sh.h2) || !vec_eq(rf.odometer, rh.odometer)) {
                d = "full vs half mismatch, instance " + std::to_string(i);
                return false;
            }
            if (g.has_halo()) continue;  // mass can leave, the replay identity needs all of it
            bool indicator = true;
            SiteSet support(g.n_active);
            for (Site x = 0; x < g.n_active; ++x) {
                if (sf.eta[x] > 1) indicator = false;
                if (sf.eta[x] == 1) support.insert(x);
            }
            if (!indicator || support.empty()) continue;
            SsmState sa = make_state(g, inst.eta);
            StabilizeResult ra = stabilize(g, sa, all, StabilityMode::a_stab(support), field,
                                           TopplePolicy::lex_min, nullptr, spot_cap);
            ++replayed;
            if (ra.status != StabilizeStatus::stable || !vec_eq(sa.eta, sf.eta) ||
                !vec_eq(sa.h2, sf.h2) || !vec_eq(ra.odometer, rf.odometer)) {
                d = "indicator replay mismatch, instance " + std::to_string(i);
                return false;
            }
        }
        std::ostringstream os;
        os << compared << " full/half pairs exact, " << replayed << " indicator replays exact, "
           << skipped << " non-stabilising instances skipped";
        d = os.str();
        return compared >= 150 && replayed >= 30;
    });

    // 3: on a line segment the chance that a walk from the origin reaches
    // distance r before returning is exactly 1/(2r), whatever the segment.
    gate(3, "line hitting probability", [](std::string& d) {
        auto t0 = Clock::now();
        double worst = 0.0;
        for (int r = 1; r <= 10; ++r) {
            for (int L : {2 * r + 1, 4 * r}) {
                Graph g = make_box(L, 1);
                double got = upsilon(g, g.site_at({0}), g.site_at({r}));
                worst = std::max(worst, std::abs(got - 1.0 / (2.0 * r)));
            }
        }
        double secs = seconds_since(t0);
        std::ostringstream os;
        os << "max |value - 1/(2r)| = " << fmt_g(worst) << " over r=1..10, two segments each";
        d = os.str();
        if (secs >= 5.0) {
            d += "; over the 5s budget";
            return false;
        }
        return worst <= 1e-10;
    });

    // 4: green function of the three-site segment matches the closed form,
    // and row sums equal expected exit times on random windows.
    gate(4, "green function identities", [](std::string& d) {
        Graph g1 = make_box(1, 1);
        std::vector<Site> Z1;
        for (Site x = 0; x < g1.n_active; ++x) Z1.push_back(x);
        GreenTable t1 = green_function(g1, Z1);
        Site o = g1.site_at({0}), right = g1.site_at({1});
        double e_center = std::abs(t1.value(o, o) - 2.0);
        double e_side = std::abs(t1.value(right, o) - 1.0);
        if (e_center > 1e-10 || e_side > 1e-10) {
            d = "three-site values off: G(0,0) err " + fmt_g(e_center) + ", G(1,0) err " +
                fmt_g(e_side);
            return false;
        }
        RandomStream rng(4004);
        int windows = 0;
        double worst = 0.0;
        while (windows < 50) {
            Graph g = rng.bernoulli(0.5) ? make_cycle(6 + int(rng.uniform_below(20)))
                                         : make_box(2 + int(rng.uniform_below(6)), 1);
            std::vector<Site> Z;
            for (Site x = 0; x < g.n_active; ++x)
                if (rng.bernoulli(0.7)) Z.push_back(x);
            if (Z.size() < 2 || int(Z.size()) == g.n_active) continue;
            GreenTable t = green_function(g, Z);
            std::vector<double> et = exit_times(g, Z);
            for (size_t i = 0; i < t.domain.size(); ++i) {
                double rs = t.row_sum(t.domain[i]);
                worst = std::max(worst, std::abs(rs - et[i]) / std::max(1.0, std::abs(et[i])));
            }
            ++windows;
        }
        std::ostringstream os;
        os << "G(0,0) err " << fmt_g(e_center) << ", G(1,0) err " << fmt_g(e_side)
           << ", max relative row-sum error " << fmt_g(worst) << " on 50 windows";
        d = os.str();
        return worst <= 1e-9;
    });

    // 5: after full stabilisation on a line box, a neighborhood of the
    // probe site holds a particle at least as often as the closed-form
    // bound predicts, up to the empty-odometer correction and noise.
    gate(5, "weak-mode occupancy bound", [](std::string& d) {
        auto t0 = Clock::now();
        std::ostringstream os;
        bool ok = true;
        for (double mu : {0.6, 0.8}) {
            WeakProbeReport rep = weak_probe_experiment(1, 8, mu, 10000, 5005, 10'000'000,
                                                        kThreads);
            os << "mu=" << fmt_g(mu) << ": p_near=" << fmt_g(rep.p_near)
               << " p_m0=" << fmt_g(rep.p_m0) << " bound=" << fmt_g(rep.bound)
               << (rep.ok ? " ok" : " VIOLATED") << "; ";
            ok = ok && rep.ok && rep.capped == 0;
        }
        double secs = seconds_since(t0);
        d = os.str() + "10000 trials each";
        if (secs >= 120.0) {
            d += "; over the 120s budget";
            return false;
        }
        return ok;
    });

    // 6: half-toppling counts of the marked stabilisation stochastically
    // dominate the deactivation counts of the subset walk process on the
    // six-cycle instance.
    gate(6, "cluster process domination", [](std::string& d) {
        auto t0 = Clock::now();
        Graph g = make_cycle(6);
        SiteSet A = all_active(g);
        SiteSet B(g.n_active, {0, 2, 4});
        DominationSummary s =
            domination_summary(g, A, B, {2, 0, 2, 1, 1, 0}, 10000, 6006, 0.01);
        std::ostringstream os;
        os << "medians " << fmt_g(s.ssm_median) << " vs " << fmt_g(s.arwd_median) << ", d_stat "
           << fmt_g(s.verdict.d_stat) << ", threshold " << fmt_g(s.verdict.threshold)
           << ", lambda " << fmt_g(s.report.lambda) << ", capped " << s.report.ssm_capped << "+"
           << s.report.arwd_capped;
        d = os.str();
        double secs = seconds_since(t0);
        if (secs >= 300.0) {
            d += "; over the 300s budget";
            return false;
        }
        return !s.verdict.rejected && s.report.lambda == 8.0 && s.report.ssm_capped == 0 &&
               s.report.arwd_capped == 0;
    });

    // 7: exhaustive coupling enumeration keeps every conditional departure
    // parity at or above the closed-form floor on both probe instances.
    gate(7, "parity lower bound probe", [](std::string& d) {
        auto t0 = Clock::now();
        std::ostringstream os;
        bool ok = true;
        {
            Graph g = make_cycle(3);
            SiteSet A = all_active(g), B(g.n_active, {0});
            ParityProbeReport rep = coupled_parity_probe(g, A, B, {2, 1, 0}, 4);
            os << "cycle: min " << fmt_g(rep.min_pi_hat) << " vs bound " << fmt_g(rep.bound)
               << " over " << rep.records.size() << " records; ";
            ok = ok && rep.all_hold && rep.min_pi_hat >= rep.bound - 1e-12;
        }
        {
            Graph g = make_path(4);
            SiteSet A = all_active(g), B(g.n_active, {1});
            ParityProbeReport rep = coupled_parity_probe(g, A, B, {1, 2, 1, 0}, 4);
            os << "path: min " << fmt_g(rep.min_pi_hat) << " vs bound " << fmt_g(rep.bound)
               << " over " << rep.records.size() << " records";
            ok = ok && rep.all_hold && rep.min_pi_hat >= rep.bound - 1e-12;
        }
        d = os.str();
        double secs = seconds_since(t0);
        if (secs >= 120.0) {
            d += "; over the 120s budget";
            return false;
        }
        return ok;
    });

    // 8: composing geometric attempts with geometric persistence stays
    // geometric, and the bernoulli-thinned sum dominates its geometric
    // reference under both couplings.
    gate(8, "geometric composition and thinned domination", [](std::string& d) {
        double worst = 0.0;
        bool comp_ok = true;
        for (int ia = 1; ia <= 5; ++ia) {
            for (int ib = 1; ib <= 5; ++ib) {
                GeometricCompositionReport r =
                    geometric_composition_check(ia / 6.0, ib / 6.0, 1e-8);
                worst = std::max(worst, r.max_abs_err);
                comp_ok = comp_ok && r.ok;
            }
        }
        BernoulliGeomReport bi = bernoulli_geometric_domination_check(
            0.05, 1e-5, 100000, 8008, BernoulliCoupling::independent, 0.01);
        BernoulliGeomReport ba = bernoulli_geometric_domination_check(
            0.05, 1e-5, 100000, 8008, BernoulliCoupling::adversarial, 0.01);
        std::ostringstream os;
        os << "composition max err " << fmt_g(worst) << " on the 5x5 grid; domination d_stat "
           << fmt_g(bi.verdict.d_stat) << " (independent), " << fmt_g(ba.verdict.d_stat)
           << " (adversarial), threshold " << fmt_g(bi.verdict.threshold);
        d = os.str();
        return comp_ok && worst <= 1e-8 && !bi.verdict.rejected && !ba.verdict.rejected;
    });

    // 9: the hierarchy builder plus validator accept every random dense set
    // across the parameter grid, with no silently invalid structure.
    gate(9, "cluster hierarchy validity", [](std::string& d) {
        int64_t built = 0, refused = 0, silent_invalid = 0, total = 0;
        uint64_t combo = 0;
        for (int n : {24, 32}) {
            for (double mu : {0.5, 0.7}) {
                for (int64_t v : {int64_t(2), int64_t(4)}) {
                    std::vector<HierarchyCheckRow> rows =
                        hierarchy_check(n, mu, v, 13, hash2(9009, combo++), kThreads);
                    for (const HierarchyCheckRow& r : rows) {
                        ++total;
                        if (!r.built) {
                            ++refused;
                        } else if (!r.valid) {
                            ++silent_invalid;
                        } else {
                            ++built;
                        }
                    }
                }
            }
        }
        std::ostringstream os;
        os << total << " random sets over the (n, mu, v) grid: " << built << " valid, " << refused
           << " refused loudly, " << silent_invalid << " silently invalid";
        d = os.str();
        return total >= 100 && silent_invalid == 0 && built == total - refused;
    });

    // 10: median stabilisation time on growing one-dimensional tori rises
    // like exp(c n), with a positive slope at three standard errors.
    gate(10, "torus stabilisation time growth", [](std::string& d) {
        auto t0 = Clock::now();
        TorusTimeReport rep =
            torus_time_experiment(1, 0.95, {8, 12, 16, 20}, 200, 10010, 100'000'000, kThreads);
        std::ostringstream os;
        os << "medians";
        for (const TorusTimeCell& c : rep.cells)
            os << " n=" << c.n << ":" << fmt_g(c.median) << " (nonstab " << c.nonstab << ", capped "
               << c.capped << ")";
        if (rep.have_fit)
            os << "; slope " << fmt_g(rep.fit.slope) << " +- " << fmt_g(rep.fit.slope_stderr)
               << ", r2 " << fmt_g(rep.fit.r2);
        d = os.str();
        double secs = seconds_since(t0);
        if (secs >= 600.0) {
            d += "; over the 600s budget";
            return false;
        }
        return rep.have_fit && rep.medians_increasing &&
               rep.fit.slope > 3.0 * rep.fit.slope_stderr;
    });

    // 11: with one particle and one odd half-count on a two-site window of
    // the five-cycle, the walk stays inside at least 1/16 of the time.
    gate(11, "two-site confinement bound", [](std::string& d) {
        Graph g = make_cycle(5);
        SiteSet A(g.n_active, {0, 1});
        ConfinementReport rep = confinement_probe(g, A, {1, 0, 0, 0, 0}, {1, 0, 0, 0, 0}, 100000,
                                                  11011, default_half_step_cap, kThreads);
        std::ostringstream os;
        os << "p_hat " << fmt_g(rep.p_hat) << " vs bound " << fmt_g(rep.bound) << " (se "
           << fmt_g(rep.se) << ", capped " << rep.capped << ")";
        d = os.str();
        return rep.ok && rep.capped == 0;
    });

    // 12: the fixation sweep on a length-40 line pins both ends of the
    // density range and is monotone across it.
    gate(12, "fixation density sweep", [](std::string& d) {
        FixationReport rep = fixation_scan(1, {0.1, 0.5, 0.9, 1.1, 1.5}, {40}, 1000, 12012,
                                           10'000'000, -1, kThreads);
        std::ostringstream os;
        os << "active fractions";
        bool monotone = true;
        double prev = -1.0;
        for (const FixationCell& c : rep.cells) {
            os << " mu=" << fmt_g(c.mu) << ":" << fmt_g(c.frac_active);
            if (c.frac_active < prev) monotone = false;
            prev = c.frac_active;
        }
        d = os.str();
        double lo = rep.cells.front().frac_active, hi = rep.cells.back().frac_active;
        return lo <= 0.05 && hi >= 0.95 && monotone;
    });

    // 13: the CLI binary is byte-reproducible: the same seed gives the same
    // output run to run and across worker thread counts.
    gate(13, "cli determinism", [&cli_path](std::string& d) {
        if (cli_path.empty()) {
            d = "no --cli <path> given";
            return false;
        }
        struct Pair {
            const char* label;
            std::string a, b;
            int rc_expected;
        };
        std::vector<Pair> pairs = {
            {"selfcheck twice", q(cli_path) + " selfcheck --fast --seed 3",
             q(cli_path) + " selfcheck --fast --seed 3", 0},
            {"fixation-scan threads 1 vs 6",
             q(cli_path) + " fixation-scan --trials 120 --seed 42 --no-timestamp --threads 1",
             q(cli_path) + " fixation-scan --trials 120 --seed 42 --no-timestamp --threads 6", 0},
            {"torus-time threads 1 vs 5",
             q(cli_path) +
                 " torus-time --trials 25 --n-list 4,6 --cap 200000 --seed 7 --no-timestamp"
                 " --threads 1",
             q(cli_path) +
                 " torus-time --trials 25 --n-list 4,6 --cap 200000 --seed 7 --no-timestamp"
                 " --threads 5",
             0},
        };
        std::ostringstream os;
        for (const Pair& p : pairs) {
            std::string out_a, out_b;
            int rc_a = -1, rc_b = -1;
            if (!run_capture(p.a, out_a, rc_a) || !run_capture(p.b, out_b, rc_b)) {
                d = std::string(p.label) + ": failed to launch the binary";
                return false;
            }
            if (rc_a != p.rc_expected || rc_b != p.rc_expected) {
                d = std::string(p.label) + ": exit codes " + std::to_string(rc_a) + "/" +
                    std::to_string(rc_b);
                return false;
            }
            if (out_a != out_b) {
                d = std::string(p.label) + ": outputs differ (" + std::to_string(out_a.size()) +
                    " vs " + std::to_string(out_b.size()) + " bytes)";
                return false;
            }
            if (out_a.empty()) {
                d = std::string(p.label) + ": empty output";
                return false;
            }
            os << p.label << " identical (" << out_a.size() << " bytes); ";
        }
        d = os.str();
        return true;
    });

    std::printf("acceptance: %d/13 criteria passed\n", 13 - failures);
    return failures;
}
