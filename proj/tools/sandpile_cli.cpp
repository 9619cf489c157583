// Experiment harness over the sandpile library. One subcommand per probe,
// JSON config file plus flag overrides, CSV output whose first line echoes
// the resolved config. Outputs are byte-identical for a fixed seed no
// matter the thread count; timestamps sit on their own header line and are
// suppressed by --no-timestamp so tests can compare whole files.

#include <CLI11.hpp>

#include <ctime>
#include <fstream>
#include <iostream>

#include "sandpile/experiments.hpp"
#include "sandpile/hierarchy_json.hpp"

using namespace sandpile;
using nlohmann::json;

namespace {

struct Common {
    uint64_t seed = 1;
    int64_t trials = -1;  // -1: keep the subcommand's default
    int threads = 1;
    int64_t cap = -1;
    std::string out;  // empty: stdout
    bool no_timestamp = false;
    std::string config_path;
};

std::string now_rfc3339() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return std::string(buf);
}

int emit(const std::string& body, const Common& c) {
    if (c.out.empty()) {
        std::cout << body;
        return 0;
    }
    std::ofstream f(c.out, std::ios::binary);
    if (!f) {
        std::cerr << "cannot open " << c.out << "\n";
        return 2;
    }
    f << body;
    std::cerr << "wrote " << c.out << "\n";
    return 0;
}

// config file value applies only when the flag was not given on the line
template <class T>
void cfg_override(const json& cfg, CLI::App* scope, const std::string& flag, const char* key,
                  T& target) {
    if (!cfg.contains(key)) return;
    if (scope->count(flag) > 0) return;
    target = cfg.at(key).get<T>();
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream f(path);
    if (!f) throw CLI::ValidationError("--config", "cannot read " + path);
    json cfg = json::parse(f, nullptr, true, true);  // comments allowed
    if (!cfg.is_object()) throw CLI::ValidationError("--config", "expected a JSON object");
    return cfg;
}

SiteSet set_from_list(const Graph& g, const std::vector<int>& sites, const char* what) {
    SiteSet s(g.n_active);
    for (int x : sites) {
        if (x < 0 || x >= g.n_active)
            throw std::invalid_argument(std::string(what) + ": site " + std::to_string(x) +
                                        " outside the graph");
        s.insert(Site(x));
    }
    return s;
}

std::vector<int32_t> counts_from_list(const Graph& g, const std::vector<int>& vals,
                                      const char* what) {
    if (int(vals.size()) != g.n_active)
        throw std::invalid_argument(std::string(what) + ": need exactly " +
                                    std::to_string(g.n_active) + " values");
    std::vector<int32_t> out(vals.begin(), vals.end());
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stochastic sandpile / activated walk experiment harness"};
    app.require_subcommand(1);
    app.fallthrough();

    Common c;
    app.add_option("--seed", c.seed, "base seed; per-trial seeds derive from it");
    app.add_option("--trials", c.trials, "trial count (default depends on the subcommand)");
    app.add_option("--threads", c.threads, "worker threads; never changes any output byte");
    app.add_option("--cap", c.cap, "per-trial work cap (half-topplings or walk steps)");
    app.add_option("--out", c.out, "write the report here instead of stdout");
    app.add_flag("--no-timestamp", c.no_timestamp, "omit the generated-at header line");
    app.add_option("--config", c.config_path, "JSON file with defaults for any option");

    // fixation-scan
    auto* sc_fix = app.add_subcommand("fixation-scan", "origin activity over a (mu, L) grid");
    int fx_d = 1;
    std::vector<double> fx_mu = {0.1, 0.5, 0.9, 1.1, 1.5};
    std::vector<int> fx_L = {40};
    int64_t fx_thr = -1;
    sc_fix->add_option("--d", fx_d, "dimension");
    sc_fix->add_option("--mu-grid", fx_mu, "density grid")->delimiter(',');
    sc_fix->add_option("--L-grid", fx_L, "box radii")->delimiter(',');
    sc_fix->add_option("--growth-threshold", fx_thr, "odometer level counted as grown (-1: L)");

    // torus-time
    auto* sc_tt = app.add_subcommand("torus-time", "half-topplings to stabilise growing tori");
    int tt_d = 1;
    double tt_mu = 0.95;
    std::vector<int> tt_n = {8, 12, 16, 20};
    sc_tt->add_option("--d", tt_d, "dimension");
    sc_tt->add_option("--mu", tt_mu, "density");
    sc_tt->add_option("--n-list", tt_n, "torus sides")->delimiter(',');

    // weak-probe
    auto* sc_wp = app.add_subcommand("weak-probe", "near-occupation lower bound on a box");
    int wp_d = 1, wp_L = 8;
    double wp_mu = 0.8;
    std::vector<int> wp_x;
    sc_wp->add_option("--d", wp_d, "dimension");
    sc_wp->add_option("--L", wp_L, "box radius");
    sc_wp->add_option("--mu", wp_mu, "density");
    sc_wp->add_option("--x", wp_x, "probe coordinate (default: center)")->delimiter(',');

    // domination
    auto* sc_dom = app.add_subcommand("domination", "half-toppling count vs deactivation steps");
    std::string dom_graph = "cycle:n=6";
    std::vector<int> dom_b = {0, 2, 4};
    std::vector<int> dom_counts = {2, 0, 2, 1, 1, 0};
    double dom_alpha = 0.01;
    int64_t dom_steps = 1'000'000;
    sc_dom->add_option("--graph", dom_graph, "graph spec, e.g. cycle:n=6");
    sc_dom->add_option("--b-sites", dom_b, "probe set B")->delimiter(',');
    sc_dom->add_option("--counts", dom_counts, "start configuration, one count per site")
        ->delimiter(',');
    sc_dom->add_option("--alpha", dom_alpha, "test level");
    sc_dom->add_option("--arwd-steps", dom_steps, "step budget per walk-side trial");

    // confinement-probe
    auto* sc_cf = app.add_subcommand("confinement-probe", "chance that no particle leaves A");
    std::string cf_graph = "cycle:n=5";
    std::vector<int> cf_a = {0, 1};
    std::vector<int> cf_eta = {1, 0, 0, 0, 0};
    std::vector<int> cf_odd = {0};
    sc_cf->add_option("--graph", cf_graph, "graph spec");
    sc_cf->add_option("--a-sites", cf_a, "the confined set A")->delimiter(',');
    sc_cf->add_option("--eta", cf_eta, "start configuration, one count per site")->delimiter(',');
    sc_cf->add_option("--h2-odd", cf_odd, "sites whose half-toppling count starts odd")
        ->delimiter(',');

    // hierarchy-check
    auto* sc_hc = app.add_subcommand("hierarchy-check", "build and revalidate cluster hierarchies");
    int hc_n = 24;
    double hc_mu = 0.5;
    int64_t hc_v = 2;
    sc_hc->add_option("--n", hc_n, "torus side (dimension fixed at 2)");
    sc_hc->add_option("--mu", hc_mu, "density floor for the random set");
    sc_hc->add_option("--v", hc_v, "volume parameter");

    // parity-probe
    auto* sc_pp = app.add_subcommand("parity-probe", "conditional parity bound, exhaustive");
    std::string pp_graph = "cycle:n=3";
    std::vector<int> pp_b = {0};
    std::vector<int> pp_eta = {2, 1, 0};
    int pp_steps = 3;
    int64_t pp_budget = 10'000'000;
    sc_pp->add_option("--graph", pp_graph, "graph spec");
    sc_pp->add_option("--b-sites", pp_b, "probe set B")->delimiter(',');
    sc_pp->add_option("--eta", pp_eta, "start configuration, one count per site")->delimiter(',');
    sc_pp->add_option("--steps", pp_steps, "tree depth");
    sc_pp->add_option("--budget", pp_budget, "branch budget");

    // ghost-probe
    auto* sc_gp = app.add_subcommand("ghost-probe", "visit identity at a box origin");
    int gp_d = 1, gp_L = 6;
    double gp_mu = 0.3;
    sc_gp->add_option("--d", gp_d, "dimension");
    sc_gp->add_option("--L", gp_L, "box radius");
    sc_gp->add_option("--mu", gp_mu, "density");

    // lemma-checks
    auto* sc_lc = app.add_subcommand("lemma-checks", "closed-form probe battery");
    int64_t lc_bern = 100'000;
    sc_lc->add_option("--bernoulli-trials", lc_bern, "trials for the domination battery");

    // selfcheck
    auto* sc_self = app.add_subcommand("selfcheck", "run the built-in invariant gate");
    bool self_fast = false;
    sc_self->add_flag("--fast", self_fast, "trimmed subset for quick runs");

    CLI11_PARSE(app, argc, argv);

    try {
        json cfg = load_config(c.config_path);
        cfg_override(cfg, &app, "--seed", "seed", c.seed);
        cfg_override(cfg, &app, "--trials", "trials", c.trials);
        cfg_override(cfg, &app, "--threads", "threads", c.threads);
        cfg_override(cfg, &app, "--cap", "cap", c.cap);
        cfg_override(cfg, &app, "--out", "out", c.out);
        const std::string stamp = c.no_timestamp ? "" : now_rfc3339();
        auto pick = [](int64_t v, int64_t dflt) { return v >= 0 ? v : dflt; };

        if (sc_fix->parsed()) {
            cfg_override(cfg, sc_fix, "--d", "d", fx_d);
            cfg_override(cfg, sc_fix, "--mu-grid", "mu_grid", fx_mu);
            cfg_override(cfg, sc_fix, "--L-grid", "L_grid", fx_L);
            cfg_override(cfg, sc_fix, "--growth-threshold", "growth_threshold", fx_thr);
            const int64_t trials = pick(c.trials, 1000), cap = pick(c.cap, 10'000'000);
            json echo = {{"subcommand", "fixation-scan"}, {"seed", c.seed}, {"trials", trials},
                         {"cap", cap},  {"d", fx_d},      {"mu_grid", fx_mu},
                         {"L_grid", fx_L}, {"growth_threshold", fx_thr}};
            FixationReport rep =
                fixation_scan(fx_d, fx_mu, fx_L, trials, c.seed, cap, fx_thr, c.threads);
            return emit(render_csv(fixation_csv(rep, echo), stamp), c);
        }
        if (sc_tt->parsed()) {
            cfg_override(cfg, sc_tt, "--d", "d", tt_d);
            cfg_override(cfg, sc_tt, "--mu", "mu", tt_mu);
            cfg_override(cfg, sc_tt, "--n-list", "n_list", tt_n);
            const int64_t trials = pick(c.trials, 200), cap = pick(c.cap, 100'000'000);
            json echo = {{"subcommand", "torus-time"}, {"seed", c.seed}, {"trials", trials},
                         {"cap", cap},   {"d", tt_d},  {"mu", tt_mu},   {"n_list", tt_n}};
            TorusTimeReport rep =
                torus_time_experiment(tt_d, tt_mu, tt_n, trials, c.seed, cap, c.threads);
            return emit(render_csv(torus_time_csv(rep, echo), stamp), c);
        }
        if (sc_wp->parsed()) {
            cfg_override(cfg, sc_wp, "--d", "d", wp_d);
            cfg_override(cfg, sc_wp, "--L", "L", wp_L);
            cfg_override(cfg, sc_wp, "--mu", "mu", wp_mu);
            const int64_t trials = pick(c.trials, 10'000), cap = pick(c.cap, 10'000'000);
            json echo = {{"subcommand", "weak-probe"}, {"seed", c.seed}, {"trials", trials},
                         {"cap", cap},  {"d", wp_d},   {"L", wp_L},     {"mu", wp_mu}};
            Coord where;
            const Coord* wptr = nullptr;
            if (!wp_x.empty()) {
                where.assign(wp_x.begin(), wp_x.end());
                wptr = &where;
                echo["x"] = wp_x;
            }
            WeakProbeReport rep =
                weak_probe_experiment(wp_d, wp_L, wp_mu, trials, c.seed, cap, c.threads, wptr);
            int rc = emit(render_csv(weak_probe_csv(rep, echo), stamp), c);
            return rc != 0 ? rc : (rep.ok ? 0 : 1);
        }
        if (sc_dom->parsed()) {
            cfg_override(cfg, sc_dom, "--graph", "graph", dom_graph);
            cfg_override(cfg, sc_dom, "--b-sites", "b_sites", dom_b);
            cfg_override(cfg, sc_dom, "--counts", "counts", dom_counts);
            cfg_override(cfg, sc_dom, "--alpha", "alpha", dom_alpha);
            const int64_t trials = pick(c.trials, 10'000), cap = pick(c.cap, 100'000'000);
            Graph g = parse_graph_spec(dom_graph);
            SiteSet A = all_active(g);
            SiteSet B = set_from_list(g, dom_b, "domination");
            std::vector<int32_t> counts = counts_from_list(g, dom_counts, "domination");
            json echo = {{"subcommand", "domination"}, {"seed", c.seed},   {"trials", trials},
                         {"cap", cap},   {"graph", dom_graph}, {"b_sites", dom_b},
                         {"counts", dom_counts}, {"alpha", dom_alpha}};
            DominationSummary s =
                domination_summary(g, A, B, counts, trials, c.seed, dom_alpha, cap, dom_steps);
            return emit(render_csv(domination_csv(s, echo), stamp), c);
        }
        if (sc_cf->parsed()) {
            cfg_override(cfg, sc_cf, "--graph", "graph", cf_graph);
            cfg_override(cfg, sc_cf, "--a-sites", "a_sites", cf_a);
            cfg_override(cfg, sc_cf, "--eta", "eta", cf_eta);
            cfg_override(cfg, sc_cf, "--h2-odd", "h2_odd", cf_odd);
            const int64_t trials = pick(c.trials, 100'000), cap = pick(c.cap, 100'000'000);
            Graph g = parse_graph_spec(cf_graph);
            SiteSet A = set_from_list(g, cf_a, "confinement");
            std::vector<int32_t> eta = counts_from_list(g, cf_eta, "confinement");
            std::vector<int64_t> h2(size_t(g.n_active), 0);
            for (int x : cf_odd) {
                if (x < 0 || x >= g.n_active)
                    throw std::invalid_argument("confinement: odd-parity site outside the graph");
                h2[size_t(x)] = 1;
            }
            json echo = {{"subcommand", "confinement-probe"}, {"seed", c.seed},
                         {"trials", trials},  {"cap", cap},   {"graph", cf_graph},
                         {"a_sites", cf_a},   {"eta", cf_eta}, {"h2_odd", cf_odd}};
            ConfinementReport rep =
                confinement_probe(g, A, eta, h2, trials, c.seed, cap, c.threads);
            int rc = emit(render_csv(confinement_csv(rep, echo), stamp), c);
            return rc != 0 ? rc : (rep.ok ? 0 : 1);
        }
        if (sc_hc->parsed()) {
            cfg_override(cfg, sc_hc, "--n", "n", hc_n);
            cfg_override(cfg, sc_hc, "--mu", "mu", hc_mu);
            cfg_override(cfg, sc_hc, "--v", "v", hc_v);
            const int64_t trials = pick(c.trials, 25);
            json echo = {{"subcommand", "hierarchy-check"}, {"seed", c.seed},
                         {"trials", trials}, {"n", hc_n},   {"mu", hc_mu},  {"v", hc_v}};
            std::vector<HierarchyCheckRow> rows =
                hierarchy_check(hc_n, hc_mu, hc_v, trials, c.seed, c.threads);
            int silent = 0;
            for (const HierarchyCheckRow& r : rows) silent += r.built && !r.valid;
            int rc = emit(render_csv(hierarchy_check_csv(rows, echo), stamp), c);
            return rc != 0 ? rc : (silent > 0 ? 1 : 0);
        }
        if (sc_pp->parsed()) {
            cfg_override(cfg, sc_pp, "--graph", "graph", pp_graph);
            cfg_override(cfg, sc_pp, "--b-sites", "b_sites", pp_b);
            cfg_override(cfg, sc_pp, "--eta", "eta", pp_eta);
            cfg_override(cfg, sc_pp, "--steps", "steps", pp_steps);
            Graph g = parse_graph_spec(pp_graph);
            SiteSet A = all_active(g);
            SiteSet B = set_from_list(g, pp_b, "parity-probe");
            std::vector<int32_t> eta = counts_from_list(g, pp_eta, "parity-probe");
            json echo = {{"subcommand", "parity-probe"}, {"seed", c.seed}, {"graph", pp_graph},
                         {"b_sites", pp_b}, {"eta", pp_eta}, {"steps", pp_steps},
                         {"budget", pp_budget}};
            ParityProbeReport rep = coupled_parity_probe(g, A, B, eta, pp_steps, pp_budget);
            int rc = emit(render_csv(parity_probe_csv(rep, echo), stamp), c);
            return rc != 0 ? rc : (rep.all_hold ? 0 : 1);
        }
        if (sc_gp->parsed()) {
            cfg_override(cfg, sc_gp, "--d", "d", gp_d);
            cfg_override(cfg, sc_gp, "--L", "L", gp_L);
            cfg_override(cfg, sc_gp, "--mu", "mu", gp_mu);
            const int64_t trials = pick(c.trials, 10'000), cap = pick(c.cap, 100'000'000);
            json echo = {{"subcommand", "ghost-probe"}, {"seed", c.seed}, {"trials", trials},
                         {"cap", cap},  {"d", gp_d},    {"L", gp_L},     {"mu", gp_mu}};
            GhostProbeReport rep = ghost_probe(make_box(gp_L, gp_d), gp_mu, trials, c.seed, cap);
            return emit(render_csv(ghost_probe_csv(rep, echo), stamp), c);
        }
        if (sc_lc->parsed()) {
            cfg_override(cfg, sc_lc, "--bernoulli-trials", "bernoulli_trials", lc_bern);
            std::vector<NamedCheck> checks = lemma_checks(c.seed, lc_bern);
            std::string body;
            int failures = 0;
            for (const NamedCheck& ck : checks) {
                body += std::string(ck.ok ? "[ok]   " : "[FAIL] ") + ck.name + ": " + ck.detail +
                        "\n";
                failures += !ck.ok;
            }
            int rc = emit(body, c);
            return rc != 0 ? rc : failures;
        }
        if (sc_self->parsed()) {
            Selfcheck sc = run_selfcheck(c.seed, self_fast);
            int rc = emit(sc.transcript, c);
            return rc != 0 ? rc : sc.failures;
        }
    } catch (const ParityBudgetError& e) {
        std::cerr << "parity-probe: " << e.what() << " (budget used "
                  << e.partial.budget_used << ")\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
