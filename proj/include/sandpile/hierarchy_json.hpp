#pragma once
// JSON view of a built hierarchy: one record per cluster with its level
// of first appearance, sites, distinguished site and parent link, plus
// the per-level id lists. Kept out of hierarchy.hpp so that only callers
// who serialize pay for the json dependency.

#include <nlohmann/json.hpp>

#include "hierarchy.hpp"

namespace sandpile {

inline nlohmann::json hierarchy_to_json(const Hierarchy& h) {
    nlohmann::json out;
    out["L"] = h.L;
    out["v"] = h.v;
    out["r"] = h.r;
    out["mu"] = h.mu;
    out["D"] = h.D;
    out["levels"] = h.levels;
    nlohmann::json cl = nlohmann::json::array();
    for (const Cluster& c : h.clusters) {
        nlohmann::json e;
        e["cluster_id"] = c.id;
        e["level"] = c.born;
        e["sites"] = c.sites;
        e["distinguished"] = c.distinguished;
        e["parent"] = c.parent;
        cl.push_back(std::move(e));
    }
    out["clusters"] = std::move(cl);
    return out;
}

}  // namespace sandpile
