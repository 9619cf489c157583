#pragma once
// Exhaustive check of the parity lower bound behind the walk-legality
// coupling. The coupled dynamics shadow an A-stabilisation: a step picks a
// site by fixed priority (actives outside A, then doubly occupied sites of
// A, then the smallest singly active site of B), walks its particle along
// fresh instruction slots until it reaches an A-site left empty by the
// lift, and tracks per site the parity of how many times the walker
// departed from it. A singly active B-site may only sleep; the coupling
// lets it sleep on even parity outright and tilts the odd-parity mass so
// that walks happen with overall chance at most 1/(1+lambda).
//
// Nothing here is sampled. Branches are enumerated exactly, grouped by the
// configuration history (the sequence eta_1..eta_t), and each group keeps
// the full conditional law of the parity vector on B as long double
// weights. Walk outcomes are solved in closed form on the absorbing chain
// over (position, woken set, parity increment), so the reported
// conditional probabilities are exact up to rounding. The claim under
// test: whenever a history gives eta_t(x) = 1 for x in B, the conditional
// chance that x's departure count is odd is at least 1/(1+Delta^3).

#include <Eigen/Dense>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "arwd.hpp"
#include "lattice.hpp"

namespace sandpile {

struct ParityRecord {
    int64_t history = 0;  // id of the history group
    int64_t t = 0;
    Site x = no_site;
    double pi_hat = 0.0;  // conditional chance the departure parity at x is odd
    bool holds = false;
};

struct ParityProbeReport {
    std::vector<ParityRecord> records;
    bool all_hold = true;
    double min_pi_hat = 1.0;  // 1 when no record applies
    double bound = 0.0;       // 1/(1+lambda)
    double lambda = 0.0;
    int64_t histories = 0;
    int64_t terminal_histories = 0;
    int64_t budget_used = 0;
};

struct ParityBudgetError : std::runtime_error {
    ParityProbeReport partial;
    explicit ParityBudgetError(ParityProbeReport p)
        : std::runtime_error("coupled_parity_probe: branch budget exhausted"), partial(std::move(p)) {}
};

namespace parity_detail {

// one absorbing branch of a settling walk: endpoint, set of departed
// sleeping sites, parity flips on B, and its exact probability
struct WalkBranch {
    Site y = no_site;
    uint32_t woken = 0;       // bits over the sleeping-site list
    uint32_t parity_inc = 0;  // bits over the B list
    long double prob = 0.0L;
};

struct WalkSolver {
    const Graph* g = nullptr;
    std::vector<Site> b_list;              // sorted sites of B
    std::vector<int> b_index;              // site -> bit in parity masks, -1 elsewhere
    std::map<uint64_t, std::vector<WalkBranch>> memo;
    int64_t states_built = 0;

    WalkSolver(const Graph& graph, const SiteSet& B) : g(&graph) {
        b_index.assign(graph.n_active, -1);
        for (Site x = 0; x < graph.n_active; ++x)
            if (B.contains(x)) {
                b_index[x] = int(b_list.size());
                b_list.push_back(x);
            }
    }

    static uint64_t key(Site start, uint32_t stop_bits, uint32_t srel_bits) {
        return uint64_t(start) | (uint64_t(stop_bits) << 8) | (uint64_t(srel_bits) << 40);
    }

    // exact absorption law of the walk from start: stop on arrival at a
    // stop site after at least one step, flip parity at each departure
    const std::vector<WalkBranch>& solve(Site start, const std::vector<uint8_t>& stop,
                                         const std::vector<uint8_t>& sleeping) {
        uint32_t stop_bits = 0, srel_bits = 0;
        int n_srel = 0;
        std::vector<int> srel_index(g->n_active, -1);
        for (Site z = 0; z < g->n_active; ++z) {
            if (stop[z]) stop_bits |= 1u << z;
            if (sleeping[z]) {
                srel_bits |= 1u << z;
                srel_index[z] = n_srel++;
            }
        }
        auto hit = memo.find(key(start, stop_bits, srel_bits));
        if (hit != memo.end()) return hit->second;

        auto encode = [&](Site z, uint32_t woken, uint32_t parity) {
            return (uint64_t(z) << 32) | (uint64_t(woken) << 8) | parity;
        };
        std::map<uint64_t, int> index;
        std::vector<std::tuple<Site, uint32_t, uint32_t>> states;
        std::vector<uint64_t> queue;
        auto intern = [&](Site z, uint32_t woken, uint32_t parity) {
            uint64_t code = encode(z, woken, parity);
            auto it = index.find(code);
            if (it != index.end()) return it->second;
            int id = int(states.size());
            index.emplace(code, id);
            states.emplace_back(z, woken, parity);
            queue.push_back(code);
            return id;
        };
        intern(start, 0, 0);

        // discover transient states first; absorption happens on arrival
        for (size_t q = 0; q < queue.size(); ++q) {
            auto [z, woken, parity] = states[index[queue[q]]];
            uint32_t w2 = woken;
            if (srel_index[z] >= 0) w2 |= 1u << srel_index[z];
            uint32_t p2 = parity;
            if (b_index[z] >= 0) p2 ^= 1u << b_index[z];
            for (const Site* it = g->neighbors_begin(z); it != g->neighbors_end(z); ++it)
                if (!stop[*it]) intern(*it, w2, p2);
            if (int64_t(states.size()) > 20000)
                throw std::runtime_error("coupled_parity_probe: walk state space too large");
        }
        const int n = int(states.size());
        states_built += n;

        using Mat = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
        using Vec = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
        Mat M = Mat::Identity(n, n);  // I - Q^T assembled directly
        for (int i = 0; i < n; ++i) {
            auto [z, woken, parity] = states[i];
            uint32_t w2 = woken;
            if (srel_index[z] >= 0) w2 |= 1u << srel_index[z];
            uint32_t p2 = parity;
            if (b_index[z] >= 0) p2 ^= 1u << b_index[z];
            long double step = 1.0L / g->degree(z);
            for (const Site* it = g->neighbors_begin(z); it != g->neighbors_end(z); ++it)
                if (!stop[*it]) M(index[encode(*it, w2, p2)], i) -= step;
        }
        Vec e = Vec::Zero(n);
        e[0] = 1.0L;
        Vec visits = Eigen::PartialPivLU<Mat>(M).solve(e);  // expected visits per state

        std::map<uint64_t, long double> acc;
        for (int i = 0; i < n; ++i) {
            auto [z, woken, parity] = states[i];
            uint32_t w2 = woken;
            if (srel_index[z] >= 0) w2 |= 1u << srel_index[z];
            uint32_t p2 = parity;
            if (b_index[z] >= 0) p2 ^= 1u << b_index[z];
            long double step = visits[i] / g->degree(z);
            for (const Site* it = g->neighbors_begin(z); it != g->neighbors_end(z); ++it)
                if (stop[*it]) acc[encode(*it, w2, p2)] += step;
        }
        std::vector<WalkBranch> branches;
        long double total = 0.0L;
        for (auto& [code, prob] : acc) {
            WalkBranch b;
            b.y = Site(code >> 32);
            b.woken = uint32_t((code >> 8) & 0xffffffu);
            b.parity_inc = uint32_t(code & 0xffu);
            b.prob = prob;
            total += prob;
            branches.push_back(b);
        }
        if (std::abs(double(total - 1.0L)) > 1e-12)
            throw std::logic_error("coupled_parity_probe: walk law does not sum to one");
        auto [it, fresh] = memo.emplace(key(start, stop_bits, srel_bits), std::move(branches));
        (void)fresh;
        return it->second;
    }
};

}  // namespace parity_detail

// does eta stay at or below one particle per A-site, with nothing outside
inline bool at_most_one_on(const std::vector<int32_t>& eta, const SiteSet& A) {
    for (Site z = 0; z < Site(eta.size()); ++z) {
        if (A.contains(z)) {
            if (eta[z] >= 2) return false;
        } else if (eta[z] != 0) {
            return false;
        }
    }
    return true;
}

inline ParityProbeReport coupled_parity_probe(const Graph& g, const SiteSet& A, const SiteSet& B,
                                              const std::vector<int32_t>& eta0, int steps,
                                              int64_t budget = 10'000'000) {
    check_no_halo(g, "coupled_parity_probe");
    if (g.n_active > 6)
        throw std::invalid_argument("coupled_parity_probe: exhaustive enumeration needs <= 6 sites");
    check_probe_set(g, A, B, "coupled_parity_probe");
    if (int(eta0.size()) != g.n_active)
        throw std::invalid_argument("coupled_parity_probe: eta size != sites");
    int64_t mass = 0;
    for (int32_t v : eta0) {
        if (v < 0) throw std::invalid_argument("coupled_parity_probe: negative count");
        mass += v;
    }
    if (mass != A.size())
        throw std::invalid_argument("coupled_parity_probe: particle count must equal |A|");
    if (steps < 0) throw std::invalid_argument("coupled_parity_probe: negative step count");

    struct Node {
        std::vector<int32_t> eta;
        std::map<uint32_t, long double> parity_mass;  // parity bits over B -> weight
        int64_t t = 0;
        bool frozen = false;
    };

    ParityProbeReport rep;
    rep.lambda = double(g.max_degree) * g.max_degree * g.max_degree;
    rep.bound = 1.0 / (1.0 + rep.lambda);

    parity_detail::WalkSolver solver(g, B);
    const auto& b_list = solver.b_list;

    std::vector<Node> nodes;
    {
        Node root;
        root.eta = with_lone_particles_asleep(g, eta0, A).eta;
        root.parity_mass[0] = 1.0L;
        nodes.push_back(std::move(root));
    }
    std::vector<size_t> frontier = {0};
    rep.budget_used = 1;

    auto is_terminal = [&](const std::vector<int32_t>& eta) {
        for (Site z = 0; z < g.n_active; ++z) {
            int32_t v = eta[z];
            if (B.contains(z)) {
                if (!(v == 0 || v == arwd_sleeping)) return false;
            } else if (A.contains(z)) {
                if (v >= 2) return false;
            } else if (v != 0) {
                return false;
            }
        }
        return true;
    };

    auto choose = [&](const std::vector<int32_t>& eta) -> Site {
        for (Site z = 0; z < g.n_active; ++z)
            if (!A.contains(z) && arwd_site_active(eta[z])) return z;
        for (Site z = 0; z < g.n_active; ++z)
            if (A.contains(z) && eta[z] >= 2) return z;
        assert(at_most_one_on(eta, A));
        for (Site z : b_list)
            if (eta[z] == 1) return z;
        return no_site;
    };

    auto record_node = [&](size_t id) {
        const Node& nd = nodes[id];
        long double total = 0.0L;
        for (auto& [p, w] : nd.parity_mass) total += w;
        for (size_t k = 0; k < b_list.size(); ++k) {
            Site x = b_list[k];
            if (nd.eta[x] != 1) continue;
            long double odd = 0.0L;
            for (auto& [p, w] : nd.parity_mass)
                if (p & (1u << k)) odd += w;
            ParityRecord r;
            r.history = int64_t(id);
            r.t = nd.t;
            r.x = x;
            r.pi_hat = double(odd / total);
            r.holds = r.pi_hat >= rep.bound - 1e-12;
            rep.records.push_back(r);
            rep.min_pi_hat = std::min(rep.min_pi_hat, r.pi_hat);
            if (!r.holds) rep.all_hold = false;
        }
    };

    std::vector<uint8_t> stop(g.n_total, 0), sleeping(g.n_total, 0), nobody(g.n_total, 0);

    for (int t = 0; t <= steps; ++t) {
        std::vector<size_t> next;
        for (size_t id : frontier) {
            record_node(id);
            if (is_terminal(nodes[id].eta)) {
                nodes[id].frozen = true;
                ++rep.terminal_histories;
                continue;
            }
            if (t == steps) continue;
            Site x = choose(nodes[id].eta);
            if (x == no_site) {
                nodes[id].frozen = true;
                ++rep.terminal_histories;
                continue;
            }
            // copies: pushing children below may reallocate the node pool
            const std::vector<int32_t> eta = nodes[id].eta;
            const std::map<uint32_t, long double> pmass = nodes[id].parity_mass;
            const bool stage3 = A.contains(x) && eta[x] == 1;
            assert(stage3 || eta[x] >= 2 || !A.contains(x));
            if (stage3) assert(at_most_one_on(eta, A));

            // walk law for this configuration and chosen site
            bool any_stop = false;
            for (Site z = 0; z < g.n_active; ++z) {
                int32_t lifted = eta[z] - (z == x ? 1 : 0);
                stop[z] = A.contains(z) && lifted == 0;
                any_stop |= stop[z];
                sleeping[z] = stage3 && eta[z] == arwd_sleeping;
            }
            if (!any_stop) throw std::logic_error("coupled_parity_probe: nowhere to settle");
            std::vector<Site> srel_list;
            for (Site z = 0; z < g.n_active; ++z)
                if (sleeping[z]) srel_list.push_back(z);
            const auto& branches = solver.solve(x, stop, stage3 ? sleeping : nobody);

            // split each parity class into sleep and walk shares
            std::map<std::vector<int32_t>, std::map<uint32_t, long double>> children;
            long double total = 0.0L, odd_total = 0.0L;
            int xbit = solver.b_index[x];
            for (auto& [p, w] : pmass) {
                total += w;
                if (xbit >= 0 && (p & (1u << xbit))) odd_total += w;
            }
            long double walk_share_odd = 1.0L, walk_share_even = 1.0L;
            if (stage3) {
                // only singly active B-sites are ever chosen at this stage
                assert(xbit >= 0);
                long double pi = odd_total / total;
                long double c =
                    pi > 0.0L ? std::min<long double>(1.0L, 1.0L / ((1.0L + rep.lambda) * pi)) : 0.0L;
                walk_share_even = 0.0L;  // even parity must sleep: the toppling would be illegal
                walk_share_odd = c;
                std::vector<int32_t> asleep = eta;
                asleep[x] = arwd_sleeping;
                auto& slot = children[std::move(asleep)];
                for (auto& [p, w] : pmass) {
                    bool odd = xbit >= 0 && (p & (1u << xbit));
                    long double stay = odd ? w * (1.0L - walk_share_odd) : w;
                    if (stay > 0.0L) slot[p] += stay;
                }
            }
            for (const parity_detail::WalkBranch& br : branches) {
                std::vector<int32_t> child = eta;
                if (stage3)
                    for (size_t k = 0; k < srel_list.size(); ++k)
                        if (br.woken & (1u << k)) child[srel_list[k]] = 1;
                child[x] -= 1;
                assert(child[br.y] == 0);
                child[br.y] = arwd_sleeping;
                assert([&] {
                    int64_t m = 0;
                    for (int32_t v : child) m += arwd_mass(v);
                    return m == int64_t(A.size());
                }());
                auto& slot = children[std::move(child)];
                for (auto& [p, w] : pmass) {
                    bool odd = xbit >= 0 && (p & (1u << xbit));
                    long double share = (odd ? walk_share_odd : walk_share_even) * w * br.prob;
                    if (share > 0.0L) slot[p ^ br.parity_inc] += share;
                }
            }

            for (auto& [eta_child, masses] : children) {
                if (masses.empty()) continue;
                Node child;
                child.eta = eta_child;
                child.parity_mass = masses;
                child.t = t + 1;
                rep.budget_used += 1 + int64_t(masses.size());
                nodes.push_back(std::move(child));
                next.push_back(nodes.size() - 1);
            }
            rep.budget_used += solver.states_built;
            solver.states_built = 0;
            if (rep.budget_used > budget) {
                rep.histories = int64_t(nodes.size());
                throw ParityBudgetError(rep);
            }
        }
        frontier = std::move(next);
    }
    rep.histories = int64_t(nodes.size());
    return rep;
}

}  // namespace sandpile
