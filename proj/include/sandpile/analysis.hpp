#pragma once
// Numerical side of the project: exact expected-visit tables and hitting
// probabilities for the simple random walk (dense linear solves), the
// one-sided two-sample dominance test, small closed-form constants, and
// oracles for the two geometric composition/domination lemmas the sampler
// work leans on.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lattice.hpp"
#include "rng.hpp"
#include "ssm.hpp"

namespace sandpile {

// --- expected visits before absorption ------------------------------------

struct GreenTable {
    std::vector<Site> domain;       // solve set Z, ascending
    std::vector<int32_t> index_of;  // site -> row, -1 outside Z
    Eigen::MatrixXd G;              // G(x,y): expected visits to y from x before leaving Z
    double max_residual = 0.0;

    double value(Site x, Site y) const {
        int32_t i = index_of[x], j = index_of[y];
        if (i < 0 || j < 0) return 0.0;
        return G(i, j);
    }
    // expected time to leave Z from x
    double row_sum(Site x) const {
        int32_t i = index_of[x];
        if (i < 0) return 0.0;
        return G.row(i).sum();
    }
};

inline constexpr int max_dense_states = 5000;

// Walk killed on first exit from Z. Solves (I - P_Z) G = I densely.
inline GreenTable green_function(const Graph& g, const std::vector<Site>& Z) {
    GreenTable t;
    t.domain = Z;
    std::sort(t.domain.begin(), t.domain.end());
    t.domain.erase(std::unique(t.domain.begin(), t.domain.end()), t.domain.end());
    const int m = int(t.domain.size());
    if (m == 0) throw std::invalid_argument("green_function: empty set");
    if (m > max_dense_states) throw std::invalid_argument("green_function: set too large for dense solve");
    t.index_of.assign(g.n_total, -1);
    for (int i = 0; i < m; ++i) {
        Site x = t.domain[i];
        g.check_site(x);
        if (g.is_halo(x)) throw std::invalid_argument("green_function: halo site in solve set");
        t.index_of[x] = i;
    }
    bool leaks = false;
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(m, m);
    for (int i = 0; i < m; ++i) {
        Site x = t.domain[i];
        double inv = 1.0 / g.degree(x);
        for (const Site* p = g.neighbors_begin(x); p != g.neighbors_end(x); ++p) {
            int32_t j = t.index_of[*p];
            if (j >= 0) M(i, j) -= inv;
            else leaks = true;
        }
    }
    if (!leaks) throw std::invalid_argument("green_function: no absorption (set has no exit)");
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(M);
    t.G = lu.solve(Eigen::MatrixXd::Identity(m, m));
    t.max_residual = (M * t.G - Eigen::MatrixXd::Identity(m, m)).cwiseAbs().maxCoeff();
    return t;
}

// Expected exit time from Z, solved on its own (not via the visit table),
// so identities between the two really cross two routes.
inline std::vector<double> exit_times(const Graph& g, const std::vector<Site>& Z) {
    std::vector<Site> dom(Z);
    std::sort(dom.begin(), dom.end());
    dom.erase(std::unique(dom.begin(), dom.end()), dom.end());
    const int m = int(dom.size());
    if (m == 0) throw std::invalid_argument("exit_times: empty set");
    if (m > max_dense_states) throw std::invalid_argument("exit_times: set too large");
    std::vector<int32_t> idx(g.n_total, -1);
    for (int i = 0; i < m; ++i) {
        g.check_site(dom[i]);
        if (g.is_halo(dom[i])) throw std::invalid_argument("exit_times: halo site in solve set");
        idx[dom[i]] = i;
    }
    bool leaks = false;
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(m, m);
    Eigen::VectorXd one = Eigen::VectorXd::Ones(m);
    for (int i = 0; i < m; ++i) {
        double inv = 1.0 / g.degree(dom[i]);
        for (const Site* p = g.neighbors_begin(dom[i]); p != g.neighbors_end(dom[i]); ++p) {
            if (idx[*p] >= 0) M(i, idx[*p]) -= inv;
            else leaks = true;
        }
    }
    if (!leaks) throw std::invalid_argument("exit_times: no absorption");
    Eigen::VectorXd tvec = Eigen::PartialPivLU<Eigen::MatrixXd>(M).solve(one);
    return std::vector<double>(tvec.data(), tvec.data() + m);
}

// P_x(walk started at x hits y before coming back to x). Absorbing at x, y
// and (for boxes) the halo; exact dense solve for the hit-y-first harmonic
// function, then average over the first step.
inline double upsilon(const Graph& g, Site x, Site y) {
    g.check_site(x);
    g.check_site(y);
    if (x == y) throw std::invalid_argument("upsilon: x == y");
    if (g.is_halo(x) || g.is_halo(y)) throw std::invalid_argument("upsilon: halo endpoint");
    std::vector<int32_t> idx(g.n_total, -1);
    std::vector<Site> transient;
    for (Site z = 0; z < g.n_active; ++z)
        if (z != x && z != y) {
            idx[z] = int32_t(transient.size());
            transient.push_back(z);
        }
    const int m = int(transient.size());
    if (m > max_dense_states) throw std::invalid_argument("upsilon: graph too large for dense solve");
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(std::max(m, 1), std::max(m, 1));
    Eigen::VectorXd b = Eigen::VectorXd::Zero(std::max(m, 1));
    for (int i = 0; i < m; ++i) {
        Site z = transient[i];
        double inv = 1.0 / g.degree(z);
        for (const Site* p = g.neighbors_begin(z); p != g.neighbors_end(z); ++p) {
            if (*p == y) b(i) += inv;
            else if (idx[*p] >= 0) M(i, idx[*p]) -= inv;
            // *p == x or halo: absorbed with value 0
        }
    }
    Eigen::VectorXd u;
    if (m > 0) u = Eigen::PartialPivLU<Eigen::MatrixXd>(M).solve(b);
    double out = 0.0, inv = 1.0 / g.degree(x);
    for (const Site* p = g.neighbors_begin(x); p != g.neighbors_end(x); ++p) {
        if (*p == y) out += inv;
        else if (idx[*p] >= 0) out += inv * u(idx[*p]);
    }
    return out;
}

// --- closed-form constants ------------------------------------------------

struct DegreeConstants {
    double weak_occupation_bound;  // (d-1)/d^3 for degree d
    double mu_lower_bound;         // (d-1)/(10 d^6 (d^2+1))
    double lambda;                 // d^3
};

inline DegreeConstants degree_constants(int degree) {
    if (degree < 2) throw std::invalid_argument("degree_constants: need degree >= 2");
    double d = double(degree);
    return DegreeConstants{(d - 1.0) / (d * d * d),
                           (d - 1.0) / (10.0 * std::pow(d, 6) * (d * d + 1.0)),
                           d * d * d};
}

// chance a Poisson(4/5) count is at least 2
inline double rho_zero() { return 1.0 - (1.0 + 0.8) * std::exp(-0.8); }

// --- one-sided two-sample dominance test ----------------------------------

struct DominanceVerdict {
    double d_stat = 0.0;    // max_k F1(k) - F2(k)
    double dkw_band = 0.0;  // sqrt(log(2/alpha) / (2 min(n1,n2)))
    double threshold = 0.0; // summed two-sample band, sqrt(..n1) + sqrt(..n2)
    bool rejected = false;
    int64_t n1 = 0, n2 = 0;
    double alpha = 0.0;
};

// H0: sample1's law dominates sample2's (F1 <= F2 pointwise). Reject when
// the empirical CDF gap exceeds the summed one-sided DKW bands; type I
// error is at most alpha by a union bound, so the test is conservative.
inline DominanceVerdict dominance_test(const std::vector<int64_t>& s1, const std::vector<int64_t>& s2,
                                       double alpha = 0.01) {
    if (s1.empty() || s2.empty()) throw std::invalid_argument("dominance_test: empty sample");
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("dominance_test: alpha in (0,1)");
    std::vector<int64_t> a(s1), b(s2);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    DominanceVerdict v;
    v.n1 = int64_t(a.size());
    v.n2 = int64_t(b.size());
    v.alpha = alpha;
    double band1 = std::sqrt(std::log(2.0 / alpha) / (2.0 * double(v.n1)));
    double band2 = std::sqrt(std::log(2.0 / alpha) / (2.0 * double(v.n2)));
    v.dkw_band = std::sqrt(std::log(2.0 / alpha) / (2.0 * double(std::min(v.n1, v.n2))));
    v.threshold = band1 + band2;
    // evaluate F1 - F2 at every value where either CDF jumps
    std::vector<int64_t> pts(a);
    pts.insert(pts.end(), b.begin(), b.end());
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    double worst = -1.0;
    for (int64_t k : pts) {
        double f1 = double(std::upper_bound(a.begin(), a.end(), k) - a.begin()) / double(v.n1);
        double f2 = double(std::upper_bound(b.begin(), b.end(), k) - b.begin()) / double(v.n2);
        worst = std::max(worst, f1 - f2);
    }
    v.d_stat = worst;
    v.rejected = worst > v.threshold;
    return v;
}

// --- geometric composition lemma (exact oracle) ---------------------------

struct GeometricCompositionReport {
    double q = 0.0;          // claimed parameter a*b / (1 - b + a*b)
    double max_abs_err = 0.0;
    double compared_mass = 0.0;  // law mass covered by the truncated convolution
    bool ok = false;
};

// Law of 1 + sum_{n<=N} (X_n - 1), N geometric(a) on {1,2,...}, X_n iid
// geometric(b), checked against geometric(ab/(1-b+ab)) by a truncated
// convolution, nothing reused from the closed form. Truncation keeps at
// least 1 - 1e-12 of the mass or the check fails.
inline GeometricCompositionReport geometric_composition_check(double a, double b, double tol = 1e-10) {
    if (!(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0))
        throw std::invalid_argument("geometric_composition_check: parameters in (0,1]");
    GeometricCompositionReport rep;
    rep.q = (a * b) / (1.0 - b + a * b);
    // support bound: far past both geometric tails
    double qmin = std::min({a, b, rep.q});
    int J = qmin == 1.0 ? 4 : std::max(64, int(std::ceil(40.0 / -std::log1p(-qmin))));
    // dist[j] = P(sum of (X-1) terms so far = j), starts as the k=1 layer
    std::vector<double> law(J + 1, 0.0);     // law of S - 1, accumulated over N = k
    std::vector<double> conv(J + 1, 0.0);    // k-fold convolution of X-1
    std::vector<double> step(J + 1, 0.0);    // P(X-1 = j) = b (1-b)^j
    {
        double w = b;
        for (int j = 0; j <= J; ++j) {
            step[j] = w;
            w *= (1.0 - b);
        }
    }
    conv = step;
    double pn = a;  // P(N = k), k = 1
    double n_tail = 1.0;
    for (int k = 1;; ++k) {
        for (int j = 0; j <= J; ++j) law[j] += pn * conv[j];
        n_tail -= pn;
        if (n_tail < 1e-15 || k > 400000) break;
        // next layer of the convolution
        std::vector<double> next(J + 1, 0.0);
        for (int j = 0; j <= J; ++j) {
            if (conv[j] == 0.0) continue;
            double c = conv[j];
            for (int i = 0; j + i <= J; ++i) next[j + i] += c * step[i];
        }
        conv.swap(next);
        pn *= (1.0 - a);
    }
    double mass = 0.0;
    for (double v : law) mass += v;
    rep.compared_mass = mass;
    double err = 0.0, target = rep.q;
    for (int j = 0; j <= J; ++j) {
        err = std::max(err, std::abs(law[j] - target));
        target *= (1.0 - rep.q);
    }
    rep.max_abs_err = err;
    rep.ok = mass >= 1.0 - 1e-12 && err <= tol;
    return rep;
}

// --- bernoulli/geometric domination lemma (monte carlo) -------------------

enum class BernoulliCoupling { independent, adversarial };

struct BernoulliGeomReport {
    double p = 0, eps = 0;
    double window_lo = 0, window_hi = 0;  // admissible eps range for this p
    double dominated_q = 0;               // reference parameter eps / p^3
    DominanceVerdict verdict;
};

inline void check_bernoulli_geom_window(double p, double eps) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("bernoulli_geom: p in (0,1)");
    double lo = std::exp(-1.0 / (32.0 * p * p)), hi = p * p * p;
    if (!(lo <= eps && eps < hi))
        throw std::invalid_argument("bernoulli_geom: eps outside admissible window [" +
                                    std::to_string(lo) + ", " + std::to_string(hi) + ")");
}

// One draw of 1 + X_1 + ... + X_T with T+1 geometric(eps) and X_n iid
// bernoulli(p). Independent: T drawn on its own. Adversarial: T is paired
// antithetically with the first success position, so short horizons get
// sequences whose successes sit early and beyond the horizon as often as
// the marginals allow. The X family stays exactly iid bernoulli(p): the
// first success position is geometric(p) by the quantile transform and the
// later gaps are fresh draws.
inline int64_t sample_bernoulli_geom_sum(double p, double eps, BernoulliCoupling c, RandomStream& rng) {
    int64_t T;
    int64_t first;  // position of the first success, >= 1
    if (c == BernoulliCoupling::independent) {
        T = rng.geometric(eps) - 1;
        first = rng.geometric(p);
    } else {
        double u = rng.uniform01();
        // T+1 at quantile u, first success at quantile 1-u
        T = int64_t(std::ceil(std::log1p(-u) / std::log1p(-eps))) - 1;
        if (T < 0) T = 0;
        if (u < 1e-300) {
            first = std::numeric_limits<int64_t>::max() / 2;
        } else {
            first = int64_t(std::ceil(std::log(u) / std::log1p(-p)));
            if (first < 1) first = 1;
        }
    }
    int64_t successes = 0, pos = first;
    while (pos <= T) {
        ++successes;
        pos += rng.geometric(p);
    }
    return 1 + successes;
}

// Draw `trials` composite sums and the same number of geometric(eps/p^3)
// references, then run the one-sided dominance test (H0: composite sum
// dominates the reference).
inline BernoulliGeomReport bernoulli_geometric_domination_check(double p, double eps, int64_t trials,
                                                               uint64_t seed, BernoulliCoupling c,
                                                               double alpha = 0.01) {
    check_bernoulli_geom_window(p, eps);
    if (trials < 100) throw std::invalid_argument("bernoulli_geom: need >= 100 trials");
    BernoulliGeomReport rep;
    rep.p = p;
    rep.eps = eps;
    rep.window_lo = std::exp(-1.0 / (32.0 * p * p));
    rep.window_hi = p * p * p;
    rep.dominated_q = eps / (p * p * p);
    std::vector<int64_t> sums(trials), ref(trials);
    RandomStream rs(hash3(seed, 0xbe7a, uint64_t(c)));
    RandomStream rr(hash3(seed, 0x9e0e, uint64_t(c)));
    for (int64_t i = 0; i < trials; ++i) sums[i] = sample_bernoulli_geom_sum(p, eps, c, rs);
    for (int64_t i = 0; i < trials; ++i) ref[i] = rr.geometric(rep.dominated_q);
    rep.verdict = dominance_test(sums, ref, alpha);
    return rep;
}

// --- growth fits ----------------------------------------------------------

struct ExpFit {
    double slope = 0, intercept = 0, r2 = 0, slope_stderr = 0;
};

// least squares of log(time) against n^d
inline ExpFit fit_exponential_time(const std::vector<int>& ns, int d, const std::vector<double>& times) {
    if (ns.size() != times.size() || ns.size() < 3)
        throw std::invalid_argument("fit_exponential_time: need >= 3 matched points");
    const int m = int(ns.size());
    std::vector<double> x(m), y(m);
    for (int i = 0; i < m; ++i) {
        if (!(times[i] > 0)) throw std::invalid_argument("fit_exponential_time: times must be positive");
        x[i] = std::pow(double(ns[i]), d);
        y[i] = std::log(times[i]);
    }
    double xm = 0, ym = 0;
    for (int i = 0; i < m; ++i) { xm += x[i]; ym += y[i]; }
    xm /= m;
    ym /= m;
    double sxx = 0, sxy = 0, syy = 0;
    for (int i = 0; i < m; ++i) {
        sxx += (x[i] - xm) * (x[i] - xm);
        sxy += (x[i] - xm) * (y[i] - ym);
        syy += (y[i] - ym) * (y[i] - ym);
    }
    if (sxx == 0) throw std::invalid_argument("fit_exponential_time: degenerate x values");
    ExpFit f;
    f.slope = sxy / sxx;
    f.intercept = ym - f.slope * xm;
    double ss_res = 0;
    for (int i = 0; i < m; ++i) {
        double e = y[i] - (f.intercept + f.slope * x[i]);
        ss_res += e * e;
    }
    f.r2 = syy == 0 ? 1.0 : 1.0 - ss_res / syy;
    f.slope_stderr = m > 2 ? std::sqrt(ss_res / double(m - 2) / sxx) : 0.0;
    return f;
}

// --- ghost walk probe -----------------------------------------------------

struct GhostProbeReport {
    int64_t trials = 0;
    double mean_augmented_odometer = 0;  // mc mean of m(o) + ghost visits to o
    double stderr_mean = 0;
    double exact = 0;      // mu * sum_x G(x, o)
    double z_score = 0;    // (mc - exact) / stderr
    double interior_green_ratio = 0;  // interior column sum / full column sum
};

// Monte carlo check of the visit identity at the origin of a box: stabilize
// a Poisson(mu) fill, then walk one ghost out of every singly-occupied site
// until it leaves the box, counting jumps out of the origin. The mean of
// odometer(o) + ghost jumps equals mu * sum_x G(x,o) exactly in law.
inline GhostProbeReport ghost_probe(const Graph& g, double mu, int64_t trials, uint64_t seed,
                                    int64_t cap = default_half_step_cap) {
    if (!g.has_halo()) throw std::invalid_argument("ghost_probe: needs a box graph");
    if (trials < 0) throw std::invalid_argument("ghost_probe: negative trials");
    GhostProbeReport rep;
    rep.trials = trials;
    Coord origin_c(g.d, 0);
    Site o = g.site_at(origin_c);
    std::vector<Site> Z;
    for (Site x = 0; x < g.n_active; ++x) Z.push_back(x);
    GreenTable green = green_function(g, Z);
    double full = 0, interior = 0;
    for (Site x : Z) {
        full += green.value(x, o);
        bool inner = true;
        for (const Site* p = g.neighbors_begin(x); p != g.neighbors_end(x); ++p)
            inner = inner && !g.is_halo(*p);
        if (inner) interior += green.value(x, o);
    }
    rep.exact = mu * full;
    rep.interior_green_ratio = full > 0 ? interior / full : 0.0;
    if (trials == 0) return rep;

    SiteSet all = all_active(g);
    double sum = 0, sumsq = 0;
    for (int64_t t = 0; t < trials; ++t) {
        RandomStream rng(trial_seed(seed, "ghost-probe", uint64_t(t)));
        RandomStream init = rng.substream("init");
        RandomStream ghosts = rng.substream("ghosts");
        InstructionField field(rng.substream("field").seed);
        SsmState s = poisson_init(g, mu, init);
        StabilizeResult r = stabilize(g, s, all, StabilityMode::full(), field, TopplePolicy::dfs, nullptr, cap);
        if (r.status != StabilizeStatus::stable) throw std::runtime_error("ghost_probe: stabilization capped");
        double mbar = double(r.odometer[o]);
        for (Site x = 0; x < g.n_active; ++x) {
            if (s.eta[x] != 1) continue;
            Site pos = x;
            while (!g.is_halo(pos)) {
                if (pos == o) mbar += 1.0;
                pos = g.neighbor(pos, int(ghosts.uniform_below(uint32_t(g.degree(pos)))));
            }
        }
        sum += mbar;
        sumsq += mbar * mbar;
    }
    rep.mean_augmented_odometer = sum / double(trials);
    double var = std::max(0.0, sumsq / double(trials) - rep.mean_augmented_odometer * rep.mean_augmented_odometer);
    rep.stderr_mean = std::sqrt(var / double(trials));
    rep.z_score = rep.stderr_mean > 0 ? (rep.mean_augmented_odometer - rep.exact) / rep.stderr_mean : 0.0;
    return rep;
}

}  // namespace sandpile
