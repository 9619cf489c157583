#pragma once
// Finite lattice graphs the simulators run on: tori (Z/nZ)^d, boxes
// {-L..L}^d with an absorbing halo one step outside, cycles and paths.
// Sites are dense int ids; coordinates are recovered on demand. Two
// metrics coexist on purpose: the graph metric (BFS hops) and the
// wrap-around sup metric used for cluster geometry. Callers say which
// one they want, there is no default.
//
// Halo sites are real vertices (so metric queries and absorption work)
// but the dynamics never topples them: they keep a back-edge to their
// unique interior neighbor for BFS symmetry, and is_halo() guards the
// hot paths.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

namespace sandpile {

using Site = int32_t;
inline constexpr Site no_site = -1;

enum class GraphKind { torus, box, cycle, path };

enum class Metric { graph, sup };  // sup = coordinate sup-norm, wrapping on tori

using Coord = std::vector<int>;

struct Graph {
    GraphKind kind = GraphKind::torus;
    int d = 1;   // dimension (1 for cycle/path)
    int n = 0;   // side length (torus), cycle length, path length
    int L = 0;   // box radius, active coords -L..L per axis

    int n_active = 0;  // sites the dynamics may topple
    int n_total = 0;   // active + halo (halo only for box)

    int max_degree = 0;

    std::vector<int32_t> adj_begin;  // size n_total+1, flat CSR adjacency
    std::vector<Site> adj;

    // box only: coords of halo sites, in id order (ids n_active..n_total-1)
    std::vector<Coord> halo_coords;
    std::map<Coord, Site> halo_index;

    bool has_halo() const { return kind == GraphKind::box; }
    bool is_halo(Site x) const { return x >= n_active; }

    int degree(Site x) const { return adj_begin[x + 1] - adj_begin[x]; }
    const Site* neighbors_begin(Site x) const { return adj.data() + adj_begin[x]; }
    const Site* neighbors_end(Site x) const { return adj.data() + adj_begin[x + 1]; }
    Site neighbor(Site x, int k) const { return adj[adj_begin[x] + k]; }
    std::vector<Site> neighbors(Site x) const {
        return std::vector<Site>(neighbors_begin(x), neighbors_end(x));
    }

    Coord coord(Site x) const {
        check_site(x);
        if (kind == GraphKind::cycle || kind == GraphKind::path) return Coord{int(x)};
        if (is_halo(x)) return halo_coords[x - n_active];
        Coord c(d);
        int64_t rem = x;
        int side = (kind == GraphKind::torus) ? n : 2 * L + 1;
        for (int a = d - 1; a >= 0; --a) {
            c[a] = int(rem % side);
            rem /= side;
        }
        if (kind == GraphKind::box)
            for (int a = 0; a < d; ++a) c[a] -= L;
        return c;
    }

    Site site_at(const Coord& c) const {
        if (int(c.size()) != d) throw std::invalid_argument("site_at: wrong arity");
        if (kind == GraphKind::cycle || kind == GraphKind::path) {
            int v = c[0];
            if (kind == GraphKind::cycle) v = ((v % n) + n) % n;
            if (v < 0 || v >= n) throw std::out_of_range("site_at: off the path");
            return Site(v);
        }
        if (kind == GraphKind::torus) {
            int64_t id = 0;
            for (int a = 0; a < d; ++a) id = id * n + ((c[a] % n) + n) % n;
            return Site(id);
        }
        // box: interior first, else halo lookup
        bool interior = true;
        for (int a = 0; a < d; ++a) interior = interior && c[a] >= -L && c[a] <= L;
        if (interior) {
            int64_t id = 0;
            for (int a = 0; a < d; ++a) id = id * (2 * L + 1) + (c[a] + L);
            return Site(id);
        }
        auto it = halo_index.find(c);
        if (it == halo_index.end()) throw std::out_of_range("site_at: not a site");
        return it->second;
    }

    std::string spec_string() const {
        switch (kind) {
            case GraphKind::torus: return "torus:n=" + std::to_string(n) + ",d=" + std::to_string(d);
            case GraphKind::box: return "box:L=" + std::to_string(L) + ",d=" + std::to_string(d);
            case GraphKind::cycle: return "cycle:n=" + std::to_string(n);
            case GraphKind::path: return "path:n=" + std::to_string(n);
        }
        return "?";
    }

    void check_site(Site x) const {
        if (x < 0 || x >= n_total) throw std::out_of_range("bad site id");
    }
};

namespace detail {

inline uint64_t ipow(uint64_t b, int e) {
    uint64_t r = 1;
    while (e-- > 0) r *= b;
    return r;
}

inline void check_dim(int d) {
    if (d < 1 || d > 4) throw std::invalid_argument("dimension must be 1..4");
}

}  // namespace detail

// --- constructors ---------------------------------------------------------

// (Z/nZ)^d, degree 2d everywhere. Needs n >= 3 so the two neighbors along
// an axis are distinct; multi-edges are not modelled.
inline Graph make_torus(int n, int d) {
    detail::check_dim(d);
    if (n < 3) throw std::invalid_argument("make_torus: need n >= 3");
    uint64_t count = detail::ipow(uint64_t(n), d);
    if (count > (1u << 24)) throw std::invalid_argument("make_torus: too many sites");
    Graph g;
    g.kind = GraphKind::torus;
    g.d = d;
    g.n = n;
    g.n_active = g.n_total = int(count);
    g.max_degree = 2 * d;
    g.adj_begin.assign(g.n_total + 1, 0);
    g.adj.resize(size_t(g.n_total) * 2 * d);
    for (Site x = 0; x < g.n_active; ++x) {
        g.adj_begin[x] = x * 2 * d;
        Coord c = [&] {
            Coord cc(d);
            int64_t rem = x;
            for (int a = d - 1; a >= 0; --a) { cc[a] = int(rem % n); rem /= n; }
            return cc;
        }();
        int slot = 0;
        for (int a = 0; a < d; ++a) {
            Coord t = c;
            t[a] = (c[a] + n - 1) % n;  // minus, then plus
            g.adj[size_t(x) * 2 * d + slot++] = g.site_at(t);
            t[a] = (c[a] + 1) % n;
            g.adj[size_t(x) * 2 * d + slot++] = g.site_at(t);
        }
    }
    g.adj_begin[g.n_total] = g.n_total * 2 * d;
    return g;
}

// Box {-L..L}^d plus the halo of outside sites at graph distance 1. Active
// sites have degree 2d with halo sites as targets near the boundary; halo
// sites carry one back-edge each (metric queries only, never toppled).
inline Graph make_box(int L, int d) {
    detail::check_dim(d);
    if (L < 1) throw std::invalid_argument("make_box: need L >= 1");
    uint64_t count = detail::ipow(uint64_t(2 * L + 1), d);
    if (count > (1u << 24)) throw std::invalid_argument("make_box: too many sites");
    Graph g;
    g.kind = GraphKind::box;
    g.d = d;
    g.L = L;
    g.n_active = int(count);
    g.max_degree = 2 * d;
    // halo: exactly one axis pushed to +-(L+1), the rest interior
    std::vector<Coord> halo;
    {
        // enumerate interior coords of the (d-1)-dim faces
        uint64_t faces = detail::ipow(uint64_t(2 * L + 1), d - 1);
        for (int a = 0; a < d; ++a)
            for (int s = -1; s <= 1; s += 2)
                for (uint64_t k = 0; k < faces; ++k) {
                    Coord c(d);
                    int64_t rem = int64_t(k);
                    for (int b = d - 1; b >= 0; --b) {
                        if (b == a) continue;
                        c[b] = int(rem % (2 * L + 1)) - L;
                        rem /= (2 * L + 1);
                    }
                    c[a] = s * (L + 1);
                    halo.push_back(std::move(c));
                }
    }
    std::sort(halo.begin(), halo.end());
    g.halo_coords = halo;
    g.n_total = g.n_active + int(halo.size());
    for (int i = 0; i < int(halo.size()); ++i)
        g.halo_index[halo[i]] = Site(g.n_active + i);

    g.adj_begin.assign(g.n_total + 1, 0);
    std::vector<std::vector<Site>> nbrs(g.n_total);
    for (Site x = 0; x < g.n_active; ++x) {
        Coord c = [&] {
            Coord cc(d);
            int64_t rem = x;
            for (int a = d - 1; a >= 0; --a) { cc[a] = int(rem % (2 * L + 1)) - L; rem /= (2 * L + 1); }
            return cc;
        }();
        // canonical neighbor order: per axis minus then plus, axes in order
        for (int a = 0; a < d; ++a)
            for (int s = -1; s <= 1; s += 2) {
                Coord t = c;
                t[a] += s;
                nbrs[x].push_back(g.site_at(t));
            }
    }
    for (Site h = g.n_active; h < g.n_total; ++h) {
        // unique interior neighbor: pull the out-of-range axis back in
        Coord c = g.halo_coords[h - g.n_active];
        for (int a = 0; a < d; ++a) {
            if (c[a] == L + 1) { Coord t = c; t[a] = L; nbrs[h].push_back(g.site_at(t)); }
            if (c[a] == -L - 1) { Coord t = c; t[a] = -L; nbrs[h].push_back(g.site_at(t)); }
        }
    }
    size_t total = 0;
    for (int i = 0; i < g.n_total; ++i) {
        g.adj_begin[i] = int32_t(total);
        total += nbrs[i].size();
    }
    g.adj_begin[g.n_total] = int32_t(total);
    g.adj.resize(total);
    for (int i = 0; i < g.n_total; ++i)
        std::copy(nbrs[i].begin(), nbrs[i].end(), g.adj.begin() + g.adj_begin[i]);
    return g;
}

// Cycle Z/nZ, degree 2.
inline Graph make_cycle(int n) {
    if (n < 3) throw std::invalid_argument("make_cycle: need n >= 3");
    Graph g;
    g.kind = GraphKind::cycle;
    g.d = 1;
    g.n = n;
    g.n_active = g.n_total = n;
    g.max_degree = 2;
    g.adj_begin.resize(n + 1);
    g.adj.resize(size_t(n) * 2);
    for (Site x = 0; x < n; ++x) {
        g.adj_begin[x] = 2 * x;
        g.adj[2 * x] = Site((x + n - 1) % n);
        g.adj[2 * x + 1] = Site((x + 1) % n);
    }
    g.adj_begin[n] = 2 * n;
    return g;
}

// Path 0-1-...-(n-1), endpoints degree 1. No halo: particles bounce back.
inline Graph make_path(int n) {
    if (n < 2) throw std::invalid_argument("make_path: need n >= 2");
    Graph g;
    g.kind = GraphKind::path;
    g.d = 1;
    g.n = n;
    g.n_active = g.n_total = n;
    g.max_degree = 2;
    g.adj_begin.resize(n + 1);
    g.adj_begin[0] = 0;
    for (Site x = 0; x < n; ++x) {
        if (x > 0) g.adj.push_back(Site(x - 1));
        if (x < n - 1) g.adj.push_back(Site(x + 1));
        g.adj_begin[x + 1] = int32_t(g.adj.size());
    }
    return g;
}

// "torus:n=32,d=2" / "box:L=50,d=1" / "cycle:n=100" / "path:n=4"
inline Graph parse_graph_spec(const std::string& spec) {
    auto colon = spec.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("graph spec: missing ':' in \"" + spec + "\"");
    std::string kind = spec.substr(0, colon);
    std::map<std::string, int> kv;
    std::string rest = spec.substr(colon + 1);
    size_t pos = 0;
    while (pos < rest.size()) {
        size_t comma = rest.find(',', pos);
        if (comma == std::string::npos) comma = rest.size();
        std::string item = rest.substr(pos, comma - pos);
        auto eq = item.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("graph spec: expected k=v, got \"" + item + "\"");
        try {
            kv[item.substr(0, eq)] = std::stoi(item.substr(eq + 1));
        } catch (const std::exception&) {
            throw std::invalid_argument("graph spec: bad integer in \"" + item + "\"");
        }
        pos = comma + 1;
    }
    auto need = [&](const char* k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw std::invalid_argument(std::string("graph spec: missing ") + k);
        return it->second;
    };
    if (kind == "torus") return make_torus(need("n"), need("d"));
    if (kind == "box") return make_box(need("L"), need("d"));
    if (kind == "cycle") return make_cycle(need("n"));
    if (kind == "path") return make_path(need("n"));
    throw std::invalid_argument("graph spec: unknown kind \"" + kind + "\"");
}

// --- metrics --------------------------------------------------------------

// Sup metric: max over axes of the per-axis displacement, where tori and
// cycles take the shorter way around. This is the metric cluster geometry
// (components, diameters, balls) is phrased in.
inline int sup_distance(const Graph& g, Site a, Site b) {
    g.check_site(a);
    g.check_site(b);
    Coord ca = g.coord(a), cb = g.coord(b);
    bool wrap = g.kind == GraphKind::torus || g.kind == GraphKind::cycle;
    int dist = 0;
    for (int ax = 0; ax < g.d; ++ax) {
        int delta = std::abs(ca[ax] - cb[ax]);
        if (wrap) delta = std::min(delta, g.n - delta);
        dist = std::max(dist, delta);
    }
    return dist;
}

// Graph metric: BFS hop count, -1 if unreachable (cannot happen on our
// graphs since halo back-edges keep everything connected).
inline int graph_distance(const Graph& g, Site a, Site b) {
    g.check_site(a);
    g.check_site(b);
    if (a == b) return 0;
    std::vector<int> dist(g.n_total, -1);
    std::queue<Site> q;
    dist[a] = 0;
    q.push(a);
    while (!q.empty()) {
        Site x = q.front();
        q.pop();
        for (const Site* p = g.neighbors_begin(x); p != g.neighbors_end(x); ++p) {
            if (dist[*p] != -1) continue;
            dist[*p] = dist[x] + 1;
            if (*p == b) return dist[*p];
            q.push(*p);
        }
    }
    return -1;
}

inline int distance(const Graph& g, Site a, Site b, Metric m) {
    return m == Metric::sup ? sup_distance(g, a, b) : graph_distance(g, a, b);
}

// Ball of radius r around x in the chosen metric, ids ascending.
inline std::vector<Site> ball(const Graph& g, Site x, int r, Metric m) {
    g.check_site(x);
    if (r < 0) throw std::invalid_argument("ball: r < 0");
    std::vector<Site> out;
    if (m == Metric::sup) {
        for (Site y = 0; y < g.n_total; ++y)
            if (sup_distance(g, x, y) <= r) out.push_back(y);
        return out;
    }
    std::vector<int> dist(g.n_total, -1);
    std::queue<Site> q;
    dist[x] = 0;
    q.push(x);
    out.push_back(x);
    while (!q.empty()) {
        Site v = q.front();
        q.pop();
        if (dist[v] == r) continue;
        for (const Site* p = g.neighbors_begin(v); p != g.neighbors_end(v); ++p)
            if (dist[*p] == -1) {
                dist[*p] = dist[v] + 1;
                out.push_back(*p);
                q.push(*p);
            }
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Maximal r-connected pieces of A: x,y in the same piece iff they are
// joined by hops of sup-distance <= r inside A. Pieces come out sorted by
// their smallest site, each piece sorted ascending.
inline std::vector<std::vector<Site>> r_components(const Graph& g, const std::vector<Site>& A, int r) {
    if (r < 0) throw std::invalid_argument("r_components: r < 0");
    std::vector<Site> sites(A);
    std::sort(sites.begin(), sites.end());
    sites.erase(std::unique(sites.begin(), sites.end()), sites.end());
    for (Site s : sites) g.check_site(s);
    int m = int(sites.size());
    std::vector<int> comp(m, -1);
    std::vector<std::vector<Site>> out;
    for (int i = 0; i < m; ++i) {
        if (comp[i] != -1) continue;
        int id = int(out.size());
        out.emplace_back();
        std::vector<int> stack{i};
        comp[i] = id;
        while (!stack.empty()) {
            int v = stack.back();
            stack.pop_back();
            out[id].push_back(sites[v]);
            for (int w = 0; w < m; ++w)
                if (comp[w] == -1 && sup_distance(g, sites[v], sites[w]) <= r) {
                    comp[w] = id;
                    stack.push_back(w);
                }
        }
        std::sort(out[id].begin(), out[id].end());
    }
    return out;
}

// Largest pairwise sup-distance within C; 0 for empty or singleton sets.
inline int diameter(const Graph& g, const std::vector<Site>& C) {
    int best = 0;
    for (size_t i = 0; i < C.size(); ++i)
        for (size_t j = i + 1; j < C.size(); ++j)
            best = std::max(best, sup_distance(g, C[i], C[j]));
    return best;
}

// --- site sets ------------------------------------------------------------

// Membership bitmap plus count. Iteration is an ascending id scan, which
// keeps every consumer deterministic.
struct SiteSet {
    std::vector<uint8_t> in;
    int count = 0;

    SiteSet() = default;
    explicit SiteSet(int n_sites) : in(n_sites, 0) {}
    SiteSet(int n_sites, const std::vector<Site>& elems) : in(n_sites, 0) {
        for (Site s : elems) insert(s);
    }

    int universe() const { return int(in.size()); }
    bool contains(Site x) const { return x >= 0 && x < universe() && in[x]; }
    bool empty() const { return count == 0; }
    int size() const { return count; }

    void insert(Site x) {
        if (!in.at(x)) { in[x] = 1; ++count; }
    }
    void erase(Site x) {
        if (in.at(x)) { in[x] = 0; --count; }
    }

    std::vector<Site> elements() const {
        std::vector<Site> out;
        out.reserve(count);
        for (Site x = 0; x < universe(); ++x)
            if (in[x]) out.push_back(x);
        return out;
    }

    Site min_element() const {
        for (Site x = 0; x < universe(); ++x)
            if (in[x]) return x;
        return no_site;
    }

    bool operator==(const SiteSet& o) const { return in == o.in; }
};

}  // namespace sandpile
