#pragma once
// Multi-level cluster structure over a site set of a torus, plus the
// machinery that runs on it: a per-cluster site chooser that favors the
// cluster's distinguished site, the recursive two-child rally strategy,
// the four-case colored sleep mask, and a parameter calculator whose
// feasibility conditions are evaluated and reported, never enforced.
//
// The builder is greedy. Level 0 keeps the r-connected components of A
// that reach the volume floor. Each later level matches cluster pairs by
// smallest union diameter under the level's diameter budget; a cluster
// merges at most once per level. Unmatched clusters carry over while they
// still satisfy the (growing) volume floor of the next level and are
// dropped otherwise. Budgets grow sixfold per level, so a level with no
// eligible pair still makes progress by loosening the budget. The builder
// fails loudly, naming a clause, whenever the result would violate an
// invariant, and validate_hierarchy re-checks everything from scratch
// without trusting any cached field.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "arwd.hpp"
#include "lattice.hpp"
#include "rng.hpp"

namespace sandpile {

struct HierarchyError : std::runtime_error {
    std::string clause;  // name of the first violated requirement
    HierarchyError(std::string cl, const std::string& detail)
        : std::runtime_error("hierarchy: " + cl + ": " + detail), clause(std::move(cl)) {}
};

struct Cluster {
    int id = -1;
    int born = 0;              // level at which this cluster first appears
    std::vector<Site> sites;   // sorted ascending
    Site distinguished = no_site;
    int child0 = -1;           // merge children; child0 holds the smaller min site
    int child1 = -1;
    int parent = -1;
    Site min_site() const { return sites.empty() ? no_site : sites.front(); }
    int64_t size() const { return int64_t(sites.size()); }
};

struct Hierarchy {
    const Graph* g = nullptr;
    SiteSet A;           // ground set the construction started from
    int64_t v = 1;       // volume floor at level 0
    double mu = 0.0;     // density parameter, 0 when not built from one
    int r = 0;           // connectivity radius of level-0 clusters
    int L = 0;
    std::vector<int64_t> D;                // diameter budget per level, saturating
    std::vector<Cluster> clusters;         // every tree node ever created
    std::vector<std::vector<int>> levels;  // cluster ids present at levels 0..L
    std::vector<SiteSet> A_level;          // union of each level's clusters
    std::vector<std::vector<int>> member;  // member[j][x] = cluster id, -1 outside

    int top_cluster() const { return levels.at(size_t(L)).at(0); }

    // id of the level-j cluster containing x, -1 when there is none
    int cluster_at(int j, Site x) const {
        if (j < 0 || j > L) return -1;
        return member[size_t(j)][size_t(x)];
    }

    bool distinguished_at(Site x, int j) const {
        int c = cluster_at(j, x);
        return c >= 0 && clusters[size_t(c)].distinguished == x;
    }
};

// r = 2*floor(sqrt(2v/mu)), with a nudge against floating point edges
inline int connectivity_radius(int64_t v, double mu) {
    if (v < 1) throw std::invalid_argument("connectivity_radius: v < 1");
    if (!(mu > 0.0) || !(mu < 1.0)) throw std::invalid_argument("connectivity_radius: mu in (0,1)");
    double q = 2.0 * double(v) / mu;
    int64_t s = int64_t(std::floor(std::sqrt(q)));
    while (double(s + 1) * double(s + 1) <= q) ++s;
    while (s > 0 && double(s) * double(s) > q) --s;
    return int(2 * s);
}

// 6^level * 12 v r, saturating instead of overflowing
inline int64_t diameter_budget(int level, int64_t v, int r) {
    if (level < 0) throw std::invalid_argument("diameter_budget: negative level");
    const int64_t cap = std::numeric_limits<int64_t>::max();
    if (v <= 0 || r <= 0) throw std::invalid_argument("diameter_budget: need v, r >= 1");
    int64_t d = v > cap / (12 * int64_t(r)) ? cap : 12 * v * int64_t(r);
    for (int i = 0; i < level; ++i) d = d > cap / 6 ? cap : 6 * d;
    return d;
}

// volume floor 2^floor(j/2) * v, saturating
inline int64_t volume_floor(int level, int64_t v) {
    int sh = level / 2;
    if (sh >= 62) return std::numeric_limits<int64_t>::max();
    int64_t f = int64_t(1) << sh;
    if (v > std::numeric_limits<int64_t>::max() / f) return std::numeric_limits<int64_t>::max();
    return f * v;
}

struct ValidationResult {
    bool ok = true;
    std::string clause;
    std::string detail;
};

// Re-derives every structural requirement from the raw fields: per-level
// partitions and the member maps, nesting of the level sets, volume
// floors, merge shape and diameter, the single top cluster, the quarter
// mass bound, level-0 connectivity and the distinguished-site rules.
// Reports the first violated clause in this fixed order.
inline ValidationResult validate_hierarchy(const Hierarchy& h) {
    auto fail = [](const char* clause, const std::string& detail) {
        return ValidationResult{false, clause, detail};
    };
    if (h.g == nullptr) return fail("partition", "no graph attached");
    const Graph& g = *h.g;
    const int nl = int(h.levels.size());
    if (nl == 0 || h.L != nl - 1 || int(h.A_level.size()) != nl || int(h.member.size()) != nl ||
        int64_t(h.D.size()) < int64_t(nl))
        return fail("partition", "level arrays disagree with L");
    if (h.v < 1) return fail("partition", "volume parameter below one");

    // partition: clusters of each level are disjoint, nonempty, sorted,
    // and together reproduce both A_level[j] and member[j]
    std::vector<std::vector<int>> own(static_cast<size_t>(nl));
    for (int j = 0; j < nl; ++j) {
        own[size_t(j)].assign(size_t(g.n_active), -1);
        if (int(h.member[size_t(j)].size()) != g.n_active)
            return fail("partition", "member map size at level " + std::to_string(j));
        for (int id : h.levels[size_t(j)]) {
            if (id < 0 || id >= int(h.clusters.size()))
                return fail("partition", "cluster id out of range at level " + std::to_string(j));
            const Cluster& c = h.clusters[size_t(id)];
            if (c.sites.empty()) return fail("partition", "empty cluster " + std::to_string(id));
            if (!std::is_sorted(c.sites.begin(), c.sites.end()) ||
                std::adjacent_find(c.sites.begin(), c.sites.end()) != c.sites.end())
                return fail("partition", "cluster sites not sorted unique, id " + std::to_string(id));
            for (Site x : c.sites) {
                if (x < 0 || x >= g.n_active)
                    return fail("partition", "cluster site off the graph, id " + std::to_string(id));
                if (own[size_t(j)][size_t(x)] != -1)
                    return fail("partition", "clusters overlap at level " + std::to_string(j));
                own[size_t(j)][size_t(x)] = id;
            }
        }
        for (Site x = 0; x < g.n_active; ++x) {
            bool covered = own[size_t(j)][size_t(x)] != -1;
            if (covered != h.A_level[size_t(j)].contains(x))
                return fail("partition", "cluster union differs from the level set at level " +
                                             std::to_string(j));
            if (h.member[size_t(j)][size_t(x)] != own[size_t(j)][size_t(x)])
                return fail("partition", "member map mismatch at level " + std::to_string(j));
        }
    }

    // nesting: A contains A_0, each level set contains the next
    for (Site x = 0; x < g.n_active; ++x) {
        if (h.A_level[0].contains(x) && !h.A.contains(x))
            return fail("nesting", "level 0 leaks outside the ground set");
        for (int j = 0; j + 1 < nl; ++j)
            if (h.A_level[size_t(j + 1)].contains(x) && !h.A_level[size_t(j)].contains(x))
                return fail("nesting", "level " + std::to_string(j + 1) + " leaks outside level " +
                                           std::to_string(j));
    }

    // volume floors
    for (int j = 0; j < nl; ++j)
        for (int id : h.levels[size_t(j)])
            if (h.clusters[size_t(id)].size() < volume_floor(j, h.v))
                return fail("cardinality-bound", "cluster " + std::to_string(id) + " at level " +
                                                     std::to_string(j) + " is below the floor");

    // merged clusters: identified by site set, not by stored links
    for (int j = 0; j + 1 < nl; ++j) {
        for (int id : h.levels[size_t(j + 1)]) {
            const Cluster& c = h.clusters[size_t(id)];
            int below = own[size_t(j)][size_t(c.sites.front())];
            if (below >= 0 && h.clusters[size_t(below)].sites == c.sites) {
                // carried over unchanged; its distinguished site must not move
                if (h.clusters[size_t(below)].distinguished != c.distinguished)
                    return fail("distinguished", "carried cluster changed its site, id " +
                                                     std::to_string(id));
                continue;
            }
            int64_t diam = diameter(g, c.sites);
            if (diam > h.D[size_t(j)])
                return fail("merge-diameter", "cluster " + std::to_string(id) + " at level " +
                                                  std::to_string(j + 1) + " has diameter " +
                                                  std::to_string(diam));
            std::vector<int> kids;
            int64_t covered = 0;
            for (Site x : c.sites) {
                int k = own[size_t(j)][size_t(x)];
                if (k < 0) return fail("merge-children", "merged site missing below, id " +
                                                             std::to_string(id));
                if (std::find(kids.begin(), kids.end(), k) == kids.end()) {
                    kids.push_back(k);
                    covered += h.clusters[size_t(k)].size();
                }
            }
            if (kids.size() != 2 || covered != c.size())
                return fail("merge-children", "cluster " + std::to_string(id) +
                                                  " is not a union of two clusters below");
            const Cluster& k0 = h.clusters[size_t(kids[0])];
            const Cluster& k1 = h.clusters[size_t(kids[1])];
            const Cluster& big = k0.size() > k1.size()   ? k0
                                 : k1.size() > k0.size() ? k1
                                 : (k0.min_site() < k1.min_site() ? k0 : k1);
            if (c.distinguished != big.distinguished)
                return fail("distinguished", "merged cluster " + std::to_string(id) +
                                                 " does not inherit from its bigger child");
        }
    }

    if (h.levels[size_t(nl - 1)].size() != 1)
        return fail("single-top", "top level holds " +
                                      std::to_string(h.levels[size_t(nl - 1)].size()) + " clusters");

    if (4 * int64_t(h.A_level[size_t(nl - 1)].size()) < int64_t(h.A.size()))
        return fail("top-mass", "top level keeps " +
                                    std::to_string(h.A_level[size_t(nl - 1)].size()) + " of " +
                                    std::to_string(h.A.size()) + " sites");

    for (int id : h.levels[0]) {
        const Cluster& c = h.clusters[size_t(id)];
        if (r_components(g, c.sites, h.r).size() != 1)
            return fail("level0-r-connectivity",
                        "cluster " + std::to_string(id) + " splits at radius " + std::to_string(h.r));
        if (c.distinguished != c.min_site())
            return fail("distinguished",
                        "level-0 cluster " + std::to_string(id) + " is not marked at its min site");
    }
    for (int j = 0; j < nl; ++j)
        for (int id : h.levels[size_t(j)]) {
            const Cluster& c = h.clusters[size_t(id)];
            if (!std::binary_search(c.sites.begin(), c.sites.end(), c.distinguished))
                return fail("distinguished",
                            "cluster " + std::to_string(id) + " marked outside itself");
        }
    return {};
}

namespace hier_detail {

// finalize the per-level site maps and level sets from levels[] + clusters
inline void index_levels(Hierarchy& h) {
    const Graph& g = *h.g;
    h.A_level.assign(h.levels.size(), SiteSet(g.n_active));
    h.member.assign(h.levels.size(), std::vector<int>(size_t(g.n_active), -1));
    for (size_t j = 0; j < h.levels.size(); ++j)
        for (int id : h.levels[j])
            for (Site x : h.clusters[size_t(id)].sites) {
                h.member[j][size_t(x)] = id;
                h.A_level[j].insert(x);
            }
}

}  // namespace hier_detail

// Builds the structure bottom-up on a two-dimensional torus. Preconditions
// (density and torus size against the derived radius) are rejected up
// front; structural failures during or after the build throw a
// HierarchyError naming the violated clause.
inline Hierarchy build_hierarchy(const Graph& g, const SiteSet& A, int64_t v, double mu) {
    if (g.kind != GraphKind::torus || g.d != 2)
        throw std::invalid_argument("build_hierarchy: needs a torus of dimension 2");
    if (v < 1) throw std::invalid_argument("build_hierarchy: v < 1");
    if (!(mu > 0.0) || !(mu < 1.0)) throw std::invalid_argument("build_hierarchy: mu in (0,1)");
    const int r = connectivity_radius(v, mu);
    if (g.n < r + 1)
        throw std::invalid_argument("build_hierarchy: torus side below r+1 = " + std::to_string(r + 1));
    if (double(A.size()) < mu * double(g.n_active))
        throw std::invalid_argument("build_hierarchy: ground set thinner than mu");
    const int level_cap = 64;

    Hierarchy h;
    h.g = &g;
    h.A = A;
    h.v = v;
    h.mu = mu;
    h.r = r;

    // level 0: big enough r-connected components
    std::vector<int64_t> diam_of;  // cached per cluster id
    std::vector<int> current;
    for (std::vector<Site>& comp : r_components(g, A.elements(), r)) {
        if (int64_t(comp.size()) < v) continue;
        Cluster c;
        c.id = int(h.clusters.size());
        c.born = 0;
        c.distinguished = comp.front();
        c.sites = std::move(comp);
        current.push_back(c.id);
        diam_of.push_back(diameter(g, h.clusters.emplace_back(std::move(c)).sites));
    }
    {
        int64_t a0 = 0;
        for (int id : current) a0 += h.clusters[size_t(id)].size();
        if (2 * a0 < int64_t(A.size()))
            throw HierarchyError("level0-mass", "level 0 keeps " + std::to_string(a0) + " of " +
                                                    std::to_string(A.size()) + " sites");
    }
    h.levels.push_back(current);
    h.D.push_back(diameter_budget(0, v, r));

    int j = 0;
    while (h.levels[size_t(j)].size() > 1) {
        if (j + 1 >= level_cap)
            throw HierarchyError("single-top", "no single cluster within " +
                                                   std::to_string(level_cap) + " levels");
        const std::vector<int>& cur = h.levels[size_t(j)];
        const int64_t budget = h.D[size_t(j)];

        // all mergeable pairs, cheapest union first; ties fall back to the
        // smaller min sites so the outcome never depends on id history
        struct Cand {
            int64_t diam;
            Site ma, mb;
            int a, b;
        };
        std::vector<Cand> cands;
        for (size_t ia = 0; ia < cur.size(); ++ia)
            for (size_t ib = ia + 1; ib < cur.size(); ++ib) {
                const Cluster& ca = h.clusters[size_t(cur[ia])];
                const Cluster& cb = h.clusters[size_t(cur[ib])];
                int64_t cross = 0;
                for (Site xa : ca.sites)
                    for (Site xb : cb.sites)
                        cross = std::max<int64_t>(cross, sup_distance(g, xa, xb));
                int64_t du = std::max({diam_of[size_t(cur[ia])], diam_of[size_t(cur[ib])], cross});
                if (du > budget) continue;
                Cand cd;
                cd.diam = du;
                cd.a = cur[ia];
                cd.b = cur[ib];
                cd.ma = std::min(ca.min_site(), cb.min_site());
                cd.mb = std::max(ca.min_site(), cb.min_site());
                cands.push_back(cd);
            }
        std::sort(cands.begin(), cands.end(), [](const Cand& l, const Cand& r2) {
            return std::tie(l.diam, l.ma, l.mb) < std::tie(r2.diam, r2.ma, r2.mb);
        });

        std::vector<uint8_t> matched(h.clusters.size(), 0);
        std::vector<int> next;
        for (const Cand& cd : cands) {
            if (matched[size_t(cd.a)] || matched[size_t(cd.b)]) continue;
            matched[size_t(cd.a)] = matched[size_t(cd.b)] = 1;
            Cluster& ca = h.clusters[size_t(cd.a)];
            Cluster& cb = h.clusters[size_t(cd.b)];
            Cluster m;
            m.id = int(h.clusters.size());
            m.born = j + 1;
            m.child0 = ca.min_site() < cb.min_site() ? cd.a : cd.b;
            m.child1 = m.child0 == cd.a ? cd.b : cd.a;
            m.sites.resize(ca.sites.size() + cb.sites.size());
            std::merge(ca.sites.begin(), ca.sites.end(), cb.sites.begin(), cb.sites.end(),
                       m.sites.begin());
            const Cluster& big = ca.size() > cb.size()   ? ca
                                 : cb.size() > ca.size() ? cb
                                                         : h.clusters[size_t(m.child0)];
            m.distinguished = big.distinguished;
            ca.parent = cb.parent = m.id;
            assert(m.size() >= volume_floor(j + 1, v));
            next.push_back(m.id);
            diam_of.push_back(cd.diam);
            h.clusters.push_back(std::move(m));
        }
        for (int id : cur) {
            if (matched[size_t(id)]) continue;
            // carry over only while the next level's volume floor allows it
            if (h.clusters[size_t(id)].size() >= volume_floor(j + 1, v)) next.push_back(id);
        }
        if (next.empty())
            throw HierarchyError("top-mass",
                                 "every cluster was dropped at level " + std::to_string(j + 1));
        std::sort(next.begin(), next.end(), [&](int a, int b) {
            return h.clusters[size_t(a)].min_site() < h.clusters[size_t(b)].min_site();
        });
        h.levels.push_back(std::move(next));
        h.D.push_back(diameter_budget(j + 1, v, r));
        ++j;
    }
    h.L = j;
    hier_detail::index_levels(h);

    ValidationResult res = validate_hierarchy(h);
    if (!res.ok) throw HierarchyError(res.clause, res.detail);
    return h;
}

// One level holding all of A as a single cluster. The connectivity radius
// is taken as the diameter of A itself, which makes any set pass the
// level-0 connectivity check, and the volume floor is |A|.
inline Hierarchy build_trivial_hierarchy(const Graph& g, const SiteSet& A) {
    if (A.empty()) throw std::invalid_argument("build_trivial_hierarchy: empty ground set");
    for (Site x = 0; x < g.n_active; ++x)
        if (A.contains(x)) g.check_site(x);
    Hierarchy h;
    h.g = &g;
    h.A = A;
    h.v = A.size();
    h.mu = 0.0;
    Cluster c;
    c.id = 0;
    c.born = 0;
    c.sites = A.elements();
    c.distinguished = c.sites.front();
    h.r = std::max(1, diameter(g, c.sites));
    h.clusters.push_back(std::move(c));
    h.levels.push_back({0});
    h.D.push_back(diameter_budget(0, h.v, h.r));
    h.L = 0;
    hier_detail::index_levels(h);
    ValidationResult res = validate_hierarchy(h);
    if (!res.ok) throw HierarchyError(res.clause, res.detail);
    return h;
}

// chance that a Poisson variable of mean 4/5 reaches 2
inline double default_rho0() { return 1.0 - 1.8 * std::exp(-0.8); }

// counters for the density goal of the per-cluster chooser; the goal is
// recorded, never enforced
struct PcLog {
    int64_t queries = 0;
    int64_t checked = 0;     // calls where the active set was small enough to grade
    int64_t violations = 0;  // graded calls that missed the sleeper-density target
    double min_checked_score = std::numeric_limits<double>::infinity();
};

// The chooser for one cluster: the distinguished site as soon as it is
// active, otherwise the active site with the most sleeping cluster sites
// within sup-distance 16*v*r (ties to the smallest site). When at most a
// beta fraction of the cluster is active, the winning score is graded
// against (1-beta)*v and shortfalls are counted in the log.
inline Site pick_cluster_site(const Graph& g, const std::vector<Site>& C, Site xstar,
                              const SiteSet& U, int64_t v, int r, double beta,
                              PcLog* log = nullptr) {
    if (U.empty()) throw std::invalid_argument("pick_cluster_site: empty active set");
    if (!std::binary_search(C.begin(), C.end(), xstar))
        throw std::invalid_argument("pick_cluster_site: marked site outside the cluster");
    for (Site u : U.elements())
        if (!std::binary_search(C.begin(), C.end(), u))
            throw std::invalid_argument("pick_cluster_site: active site outside the cluster");
    if (log) ++log->queries;
    if (U.contains(xstar)) return xstar;

    const int64_t radius = 16 * v * int64_t(r);
    Site best = no_site;
    int64_t best_score = -1;
    for (Site u : U.elements()) {
        int64_t score = 0;
        for (Site y : C)
            if (!U.contains(y) && sup_distance(g, u, y) <= radius) ++score;
        if (score > best_score) {
            best_score = score;
            best = u;
        }
    }
    if (log && int64_t(U.size()) <= int64_t(beta * double(C.size()))) {
        ++log->checked;
        log->min_checked_score = std::min(log->min_checked_score, double(best_score));
        if (double(best_score) < (1.0 - beta) * double(v)) ++log->violations;
    }
    return best;
}

namespace hier_detail {

// Incremental per-cluster bookkeeping shared by the strategy and the
// mask: current active count, the last observed step at which the cluster
// was entirely stable, and a sticky flag remembering whether it has ever
// been stable. Feed it every observed state in step order; a step value
// of zero restarts it.
struct ClusterTracker {
    const Hierarchy* h = nullptr;
    std::vector<std::vector<int>> chain;  // per site: its distinct cluster ids
    std::vector<int64_t> count;
    std::vector<int64_t> last_stable;
    std::vector<uint8_t> ever_stable;
    std::vector<uint8_t> prev;
    int64_t seen_t = -1;

    void bind(const Hierarchy& hh) {
        h = &hh;
        const Graph& g = *hh.g;
        chain.assign(size_t(g.n_active), {});
        for (Site x = 0; x < g.n_active; ++x)
            for (int j = 0; j <= hh.L; ++j) {
                int id = hh.member[size_t(j)][size_t(x)];
                // a carried cluster repeats consecutively, so this dedup is enough
                if (id >= 0 && (chain[size_t(x)].empty() || chain[size_t(x)].back() != id))
                    chain[size_t(x)].push_back(id);
            }
        seen_t = -1;
    }

    void observe(const SiteSet& U, int64_t t) {
        assert(h != nullptr);
        const Graph& g = *h->g;
        if (t == 0) {
            count.assign(h->clusters.size(), 0);
            last_stable.assign(h->clusters.size(), std::numeric_limits<int64_t>::min());
            ever_stable.assign(h->clusters.size(), 0);
            prev.assign(size_t(g.n_active), 0);
            for (Site x = 0; x < g.n_active; ++x)
                if (U.contains(x)) {
                    prev[size_t(x)] = 1;
                    for (int id : chain[size_t(x)]) ++count[size_t(id)];
                }
            for (size_t c = 0; c < count.size(); ++c)
                if (count[c] == 0) {
                    ever_stable[c] = 1;
                    last_stable[c] = 0;
                }
            seen_t = 0;
            return;
        }
        assert(t == seen_t + 1);
        // a step changes few sites; net deltas first, transitions after
        std::map<int, int64_t> pend;
        for (Site x = 0; x < g.n_active; ++x) {
            uint8_t now = U.contains(x) ? 1 : 0;
            if (now == prev[size_t(x)]) continue;
            prev[size_t(x)] = now;
            for (int id : chain[size_t(x)]) pend[id] += now ? 1 : -1;
        }
        for (auto& [id, dv] : pend) {
            int64_t before = count[size_t(id)], after = before + dv;
            assert(after >= 0);
            if (before > 0 && after == 0) {
                ever_stable[size_t(id)] = 1;
                last_stable[size_t(id)] = t;
            } else if (before == 0 && after > 0) {
                last_stable[size_t(id)] = t - 1;
            } else if (before == 0 && after == 0) {
                last_stable[size_t(id)] = t;
            }
            count[size_t(id)] = after;
        }
        seen_t = t;
    }

    // latest observed step at or before t at which the cluster was stable;
    // int64 min when that never happened
    int64_t stable_instant(int id, int64_t t) const {
        return count[size_t(id)] == 0 ? t : last_stable[size_t(id)];
    }
};

}  // namespace hier_detail

// The rally strategy of the whole tree: descend from the top cluster,
// and at every merged cluster continue into the child that has been
// stable at least as recently as its sibling (preferring the smaller-min
// child on ties); at a level-0 cluster delegate to the per-cluster
// chooser. Returns no_site exactly when the top cluster is stable, which
// makes the runner's stop time the top cluster's stabilisation time.
struct HierarchyStrategy final : SubsetStrategy {
    const Hierarchy* h;
    double beta;
    PcLog pc_log;
    hier_detail::ClusterTracker trk;

    explicit HierarchyStrategy(const Hierarchy& hh, double beta_ = 0.5 * default_rho0())
        : h(&hh), beta(beta_) {
        trk.bind(hh);
    }

    void observe(const SiteSet& U, int64_t t) override { trk.observe(U, t); }

    Site choose(const SiteSet& U, int64_t t) override {
        int id = h->top_cluster();
        if (trk.count[size_t(id)] == 0) return no_site;
        while (h->clusters[size_t(id)].child0 >= 0) {
            const Cluster& c = h->clusters[size_t(id)];
            int64_t t0 = trk.stable_instant(c.child0, t);
            int64_t t1 = trk.stable_instant(c.child1, t);
            id = t0 <= t1 ? c.child0 : c.child1;
            assert(trk.count[size_t(id)] > 0);
        }
        const Cluster& leaf = h->clusters[size_t(id)];
        SiteSet UC(h->g->n_active);
        for (Site x : leaf.sites)
            if (U.contains(x)) UC.insert(x);
        assert(!UC.empty());
        return pick_cluster_site(*h->g, leaf.sites, leaf.distinguished, UC, h->v, h->r, beta,
                                 &pc_log);
    }
};

// colors of the steps: value(t) >= 0, with 1 + value(t) geometric of
// parameter one half; drawn lazily in step order so any access pattern
// sees the same sequence
struct ColorSequence {
    RandomStream stream;
    std::vector<int> cache;

    explicit ColorSequence(uint64_t seed) : stream(seed) {}

    int value(int64_t t) {
        if (t < 0) throw std::invalid_argument("ColorSequence: negative step");
        while (int64_t(cache.size()) <= t) cache.push_back(int(stream.geometric(0.5)) - 1);
        return cache[size_t(t)];
    }
};

// The four-case wake filter. With x the chosen site and j the step's
// color: a site distinguished one level above j whose level-j cluster was
// never yet stable wakes nothing; otherwise a site distinguished at j
// wakes the ring between its level-(j+1) and level-j clusters; a site
// distinguished at 0 but not at j wakes nothing; an ordinary site wakes
// its whole level-0 cluster. Exactly one case applies per call.
struct HierarchyMask final : SubsetSleepMask {
    const Hierarchy* h;
    ColorSequence* colors;  // not owned
    hier_detail::ClusterTracker trk;
    int64_t case_hits[4] = {0, 0, 0, 0};

    HierarchyMask(const Hierarchy& hh, ColorSequence& cs) : h(&hh), colors(&cs) { trk.bind(hh); }

    void observe(const SiteSet& U, int64_t t) override { trk.observe(U, t); }

    void fill(const SiteSet&, int64_t t, Site x, std::vector<uint8_t>& wake_ok) override {
        const int j = colors->value(t);
        const bool d0 = h->distinguished_at(x, 0);
        const bool dj = h->distinguished_at(x, j);
        const bool dj1 = h->distinguished_at(x, j + 1);
        bool q1 = false;
        if (dj1) {
            int cj = h->cluster_at(j, x);
            assert(cj >= 0);  // a site distinguished above j always has a level-j cluster
            q1 = !trk.ever_stable[size_t(cj)];
        }
        const bool q2 = dj && !q1;
        const bool q3 = d0 && !dj;
        const bool q4 = !d0;
        assert(int(q1) + int(q2) + int(q3) + int(q4) == 1);
        if (q1) {
            ++case_hits[0];
        } else if (q2) {
            ++case_hits[1];
            int cj1 = h->cluster_at(j + 1, x);
            if (cj1 < 0) return;  // above the top level the upper cluster is empty
            int cj = h->cluster_at(j, x);
            for (Site z : h->clusters[size_t(cj1)].sites)
                if (h->member[size_t(j)][size_t(z)] != cj) wake_ok[size_t(z)] = 1;
        } else if (q3) {
            ++case_hits[2];
        } else {
            ++case_hits[3];
            int c0 = h->cluster_at(0, x);
            if (c0 < 0) return;
            for (Site z : h->clusters[size_t(c0)].sites) wake_ok[size_t(z)] = 1;
        }
    }
};

// ---------------------------------------------------------------------------
// History-scanning twins of the strategy and the mask. These recompute
// every quantity from the full recorded prefix U_0..U_t, exactly as the
// definitions read, and exist to cross-check the incremental bookkeeping.

namespace hier_detail {

inline bool level_hits(const Hierarchy& h, const SiteSet& U, int id) {
    for (Site x : h.clusters[size_t(id)].sites)
        if (U.contains(x)) return true;
    return false;
}

inline int64_t literal_stable_sup(const Hierarchy& h, const std::vector<SiteSet>& hist, int id) {
    for (int64_t s = int64_t(hist.size()) - 1; s >= 0; --s)
        if (!level_hits(h, hist[size_t(s)], id)) return s;
    return std::numeric_limits<int64_t>::min();
}

}  // namespace hier_detail

// f applied to the full history, by direct descent with sup scans
inline Site literal_strategy_choice(const Hierarchy& h, const std::vector<SiteSet>& hist,
                                    double beta, PcLog* log = nullptr) {
    if (hist.empty()) throw std::invalid_argument("literal_strategy_choice: empty history");
    const SiteSet& U = hist.back();
    int id = h.top_cluster();
    while (h.clusters[size_t(id)].child0 >= 0) {
        const Cluster& c = h.clusters[size_t(id)];
        int64_t t0 = hier_detail::literal_stable_sup(h, hist, c.child0);
        int64_t t1 = hier_detail::literal_stable_sup(h, hist, c.child1);
        id = t0 <= t1 ? c.child0 : c.child1;
    }
    const Cluster& leaf = h.clusters[size_t(id)];
    SiteSet UC(h.g->n_active);
    for (Site x : leaf.sites)
        if (U.contains(x)) UC.insert(x);
    if (UC.empty()) return no_site;
    return pick_cluster_site(*h.g, leaf.sites, leaf.distinguished, UC, h.v, h.r, beta, log);
}

// the wake set of the four-case filter, recomputed from the history
inline std::vector<Site> literal_mask_set(const Hierarchy& h, const std::vector<SiteSet>& hist,
                                          Site x, int j) {
    if (hist.empty()) throw std::invalid_argument("literal_mask_set: empty history");
    const bool d0 = h.distinguished_at(x, 0);
    const bool dj = h.distinguished_at(x, j);
    const bool dj1 = h.distinguished_at(x, j + 1);
    bool q1 = false;
    if (dj1) {
        int cj = h.cluster_at(j, x);
        q1 = cj >= 0;
        for (size_t s = 0; q1 && s < hist.size(); ++s)
            if (!hier_detail::level_hits(h, hist[s], cj)) q1 = false;
    }
    std::vector<Site> out;
    if (q1) return out;
    if (dj) {
        int cj1 = h.cluster_at(j + 1, x);
        if (cj1 < 0) return out;
        int cj = h.cluster_at(j, x);
        for (Site z : h.clusters[size_t(cj1)].sites)
            if (h.member[size_t(j)][size_t(z)] != cj) out.push_back(z);
        return out;
    }
    if (d0) return out;
    int c0 = h.cluster_at(0, x);
    if (c0 >= 0) out = h.clusters[size_t(c0)].sites;
    return out;
}

// steps at which the chooser picked the top cluster's distinguished site
inline int64_t distinguished_steps(const SubsetRunResult& res, const Hierarchy& h) {
    return res.times_chosen[size_t(h.clusters[size_t(h.top_cluster())].distinguished)];
}

// ---------------------------------------------------------------------------
// Parameter calculator. Every closed-form constant of the renormalisation
// argument in one place, with the two per-level feasibility conditions
// evaluated in log space and reported.

inline constexpr double default_p_bar = 0.125;

// grid check of the inequality pinning the universal small-p constant:
// 8 p^3 ln p - ln(1 - p + p^2) >= p/2 on (0, p_bar]
inline bool p_bar_margin_ok(double p_bar = default_p_bar, int grid = 4096) {
    if (!(p_bar > 0.0) || !(p_bar < 1.0)) throw std::invalid_argument("p_bar_margin_ok: range");
    for (int i = 1; i <= grid; ++i) {
        double p = p_bar * double(i) / double(grid);
        if (8.0 * p * p * p * std::log(p) - std::log1p(p * p - p) < 0.5 * p) return false;
    }
    return true;
}

// usable lower bound on the return-before-revisit chance at distance rr:
// exact in dimension 1, asymptotic shapes with a configurable scale above
inline double upsilon_floor(int d, int64_t rr, double K = 1.0) {
    if (d < 1) throw std::invalid_argument("upsilon_floor: dimension");
    if (d == 1) return 1.0 / (2.0 * double(std::max<int64_t>(rr, 1)));
    if (d == 2) return K / std::log(double(std::max<int64_t>(rr, 2)));
    return K;
}

struct LevelFeasibility {
    int j = 0;
    double alpha = 0.0;       // decay rate at this level
    double alpha_next = 0.0;  // decay rate one level up
    double p_j = 0.0;
    int64_t D = 0;
    double upsilon = 0.0;  // lower bound fed into the growth condition
    bool p_ok = false;     // p_j under its three ceilings
    bool growth_ok = false;
};

struct ParameterPack {
    int d = 2;
    double mu = 0.0;
    int64_t v = 1;
    double lambda = 0.0;
    double rho0 = 0.0;
    double beta = 0.0;
    double p_bar = 0.0;
    double p = 0.0;
    double kappa = 0.0;
    int r = 0;
    std::vector<LevelFeasibility> levels;
    bool all_ok = false;  // report only; nothing downstream enforces it
};

inline ParameterPack make_parameter_pack(int d, double mu, int64_t v, double lambda, int n_levels,
                                         double rho0 = default_rho0(), double K = 1.0,
                                         double p_bar = default_p_bar) {
    if (d < 1) throw std::invalid_argument("make_parameter_pack: dimension");
    if (!(mu > 0.0) || !(mu < 1.0)) throw std::invalid_argument("make_parameter_pack: mu in (0,1)");
    if (v < 1) throw std::invalid_argument("make_parameter_pack: v < 1");
    if (!(lambda > 0.0)) throw std::invalid_argument("make_parameter_pack: lambda <= 0");
    if (n_levels < 1) throw std::invalid_argument("make_parameter_pack: need a level");
    if (!(rho0 > 0.0) || rho0 > 1.0) throw std::invalid_argument("make_parameter_pack: rho0");

    ParameterPack pk;
    pk.d = d;
    pk.mu = mu;
    pk.v = v;
    pk.lambda = lambda;
    pk.rho0 = rho0;
    pk.beta = rho0 / 2.0;
    pk.p_bar = p_bar;
    pk.p = std::min({p_bar, std::sqrt(mu) / 384.0, 1.0 / (2.0 * (1.0 + lambda))});
    pk.r = connectivity_radius(v, mu);
    const double alpha0 = (1.0 + 1.0) / (2.0 * std::sqrt(double(v)));
    pk.kappa = alpha0 * mu / 8.0;

    pk.all_ok = true;
    const double ln2 = std::log(2.0);
    for (int j = 0; j < n_levels; ++j) {
        LevelFeasibility lf;
        lf.j = j;
        lf.alpha = (1.0 + std::pow(2.0, -j / 4.0)) / (2.0 * std::sqrt(double(v)));
        lf.alpha_next = (1.0 + std::pow(2.0, -(j + 1) / 4.0)) / (2.0 * std::sqrt(double(v)));
        lf.D = diameter_budget(j, v, pk.r);
        lf.p_j = pk.p / (std::pow(6.0, j) * std::pow(double(v), 1.5));
        lf.upsilon = upsilon_floor(d, lf.D, K);
        const double ceil_pair = 1.0 / (std::pow(2.0, j + 1) * (1.0 + lambda));
        const double ceil_diam = 1.0 / std::sqrt(32.0 * lf.alpha * std::pow(double(lf.D) + 1.0, d));
        lf.p_ok = lf.p_j <= std::min({p_bar, ceil_pair, ceil_diam});
        // volume growth condition, compared in logs to dodge the exponential
        const double lhs = (j / 2.0 + 2.0) * ln2 + std::log(double(v));
        const double rhs = 6.0 * std::log(lf.p_j) + std::log(lf.upsilon) +
                           (lf.alpha - lf.alpha_next) * std::pow(2.0, j / 2.0) * double(v);
        lf.growth_ok = lhs <= rhs;
        pk.all_ok = pk.all_ok && lf.p_ok && lf.growth_ok;
        pk.levels.push_back(lf);
    }
    return pk;
}

}  // namespace sandpile
