#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "corpus.hpp"
#include "error.hpp"

namespace mhstm {

using NodeId = std::int32_t;

// Marks a not-yet-created node in a branching path.
inline constexpr NodeId kNewNode = -1;
inline constexpr NodeId kNoParent = -1;

struct TopicNode {
    NodeId id = 0;
    NodeId parent = kNoParent;
    int level = 0;  // root is level 0, leaves are level depth-1
    std::vector<NodeId> children;  // ascending id order
    std::vector<std::int32_t> visits;  // per-brand sentence visits M_{b,k}
    std::int64_t total_visits = 0;
    bool alive = false;
};

// Root-to-leaf node sequence. A branching path ends in a contiguous run of
// kNewNode placeholders starting right below its branch node.
struct TreePath {
    std::vector<NodeId> nodes;

    // Index of the first placeholder, or nodes.size() for an existing path.
    std::size_t first_new() const {
        auto it = std::find(nodes.begin(), nodes.end(), kNewNode);
        return static_cast<std::size_t>(it - nodes.begin());
    }
    bool is_existing() const { return first_new() == nodes.size(); }

    friend bool operator==(const TreePath&, const TreePath&) = default;
};

class TopicTree {
public:
    TopicTree(int depth, std::size_t num_brands) : depth_(depth), num_brands_(num_brands) {
        if (depth < 1) throw ConfigError("tree depth must be >= 1");
        TopicNode root;
        root.id = 0;
        root.level = 0;
        root.visits.assign(num_brands, 0);
        root.alive = true;
        nodes_.push_back(std::move(root));
        live_count_ = 1;
    }

    int depth() const { return depth_; }
    std::size_t num_brands() const { return num_brands_; }
    NodeId root() const { return 0; }
    std::size_t num_live() const { return live_count_; }
    // One past the largest id ever issued; ids are never reused.
    NodeId id_bound() const { return static_cast<NodeId>(nodes_.size()); }

    bool alive(NodeId id) const {
        return id >= 0 && static_cast<std::size_t>(id) < nodes_.size() && nodes_[static_cast<std::size_t>(id)].alive;
    }

    const TopicNode& node(NodeId id) const {
        if (!alive(id)) throw InvariantError("access to dead or unknown node " + std::to_string(id));
        return nodes_[static_cast<std::size_t>(id)];
    }

    NodeId parent(NodeId id) const { return node(id).parent; }
    int level(NodeId id) const { return node(id).level; }
    bool is_leaf_level(NodeId id) const { return node(id).level == depth_ - 1; }
    std::int32_t visits(BrandId b, NodeId id) const { return node(id).visits[static_cast<std::size_t>(b)]; }

    std::vector<NodeId> live_nodes() const {
        std::vector<NodeId> out;
        out.reserve(live_count_);
        for (const auto& n : nodes_)
            if (n.alive) out.push_back(n.id);
        return out;
    }

    std::vector<NodeId> nodes_at_level(int level) const {
        std::vector<NodeId> out;
        for (const auto& n : nodes_)
            if (n.alive && n.level == level) out.push_back(n.id);
        return out;
    }

    // Ancestors from parent up to root.
    std::vector<NodeId> ancestors(NodeId id) const {
        std::vector<NodeId> out;
        for (NodeId p = parent(id); p != kNoParent; p = parent(p)) out.push_back(p);
        return out;
    }

    NodeId create_child(NodeId parent_id) {
        const auto& p = node(parent_id);
        if (p.level + 1 >= depth_) throw InvariantError("cannot create a child below the leaf level");
        TopicNode n;
        n.id = static_cast<NodeId>(nodes_.size());
        n.parent = parent_id;
        n.level = p.level + 1;
        n.visits.assign(num_brands_, 0);
        n.alive = true;
        nodes_[static_cast<std::size_t>(parent_id)].children.push_back(n.id);
        nodes_.push_back(std::move(n));
        ++live_count_;
        return nodes_.back().id;
    }

    // Throws unless `path` is a well-formed existing or branching path.
    void validate(const TreePath& path) const {
        if (path.nodes.size() != static_cast<std::size_t>(depth_))
            throw InvariantError("path length differs from tree depth");
        if (path.nodes[0] != root()) throw InvariantError("path does not start at the root");
        const std::size_t cut = path.first_new();
        for (std::size_t l = cut; l < path.nodes.size(); ++l)
            if (path.nodes[l] != kNewNode) throw InvariantError("placeholders must form a suffix");
        for (std::size_t l = 1; l < cut; ++l) {
            if (!alive(path.nodes[l])) throw InvariantError("path references a dead node");
            if (parent(path.nodes[l]) != path.nodes[l - 1])
                throw InvariantError("path violates parent-child edge");
        }
    }

    // Materializes placeholders and increments M_{b,k} along the path.
    TreePath attach(BrandId brand, const TreePath& path) {
        validate(path);
        TreePath out = path;
        for (std::size_t l = out.first_new(); l < out.nodes.size(); ++l)
            out.nodes[l] = create_child(out.nodes[l - 1]);
        for (NodeId id : out.nodes) {
            auto& n = nodes_[static_cast<std::size_t>(id)];
            ++n.visits[static_cast<std::size_t>(brand)];
            ++n.total_visits;
        }
        return out;
    }

    // Decrements M_{b,k} along the path and prunes nodes left with no visits,
    // provided `weight_is_zero(id)` confirms they hold no word weight.
    // Returns pruned ids, deepest first.
    std::vector<NodeId> detach(BrandId brand, const TreePath& path,
                               const std::function<bool(NodeId)>& weight_is_zero = {}) {
        validate(path);
        if (!path.is_existing()) throw InvariantError("cannot detach a path with placeholders");
        for (NodeId id : path.nodes) {
            auto& n = nodes_[static_cast<std::size_t>(id)];
            if (n.visits[static_cast<std::size_t>(brand)] <= 0 || n.total_visits <= 0)
                throw InvariantError("visit count underflow at node " + std::to_string(id));
            --n.visits[static_cast<std::size_t>(brand)];
            --n.total_visits;
        }
        std::vector<NodeId> pruned;
        for (std::size_t l = path.nodes.size(); l-- > 1;) {
            NodeId id = path.nodes[l];
            const auto& n = nodes_[static_cast<std::size_t>(id)];
            if (n.total_visits != 0 || !n.children.empty()) break;
            if (weight_is_zero && !weight_is_zero(id)) break;
            remove(id);
            pruned.push_back(id);
        }
        return pruned;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["depth"] = depth_;
        auto& jn = j["nodes"] = nlohmann::json::array();
        auto& je = j["edges"] = nlohmann::json::array();
        for (const auto& n : nodes_) {
            if (!n.alive) continue;
            jn.push_back({{"id", n.id},
                          {"level", n.level},
                          {"parent", n.parent == kNoParent ? nlohmann::json() : nlohmann::json(n.parent)},
                          {"visits", n.visits}});
            for (NodeId c : n.children) je.push_back({n.id, c});
        }
        j["next_id"] = nodes_.size();
        return j;
    }

    // Rebuild from to_json output. Ids and visit counts are preserved.
    static TopicTree from_json(const nlohmann::json& j, std::size_t num_brands) {
        TopicTree t(j.at("depth").get<int>(), num_brands);
        const auto next_id = j.at("next_id").get<std::size_t>();
        t.nodes_.assign(next_id, TopicNode{});
        for (std::size_t i = 0; i < next_id; ++i) t.nodes_[i].id = static_cast<NodeId>(i);
        t.live_count_ = 0;
        for (const auto& jn : j.at("nodes")) {
            auto id = jn.at("id").get<NodeId>();
            if (id < 0 || static_cast<std::size_t>(id) >= next_id) throw DataError("tree node id out of range");
            auto& n = t.nodes_[static_cast<std::size_t>(id)];
            n.alive = true;
            n.level = jn.at("level").get<int>();
            n.parent = jn.at("parent").is_null() ? kNoParent : jn.at("parent").get<NodeId>();
            n.visits = jn.at("visits").get<std::vector<std::int32_t>>();
            if (n.visits.size() != num_brands) throw DataError("tree visit vector has wrong brand count");
            n.total_visits = 0;
            for (auto v : n.visits) n.total_visits += v;
            ++t.live_count_;
        }
        for (const auto& e : j.at("edges")) {
            auto p = e.at(0).get<NodeId>();
            auto c = e.at(1).get<NodeId>();
            if (!t.alive(p) || !t.alive(c) || t.nodes_[static_cast<std::size_t>(c)].parent != p)
                throw DataError("inconsistent tree edge");
            t.nodes_[static_cast<std::size_t>(p)].children.push_back(c);
        }
        for (auto& n : t.nodes_) std::sort(n.children.begin(), n.children.end());
        if (!t.alive(0) || t.nodes_[0].parent != kNoParent) throw DataError("tree has no root");
        return t;
    }

private:
    void remove(NodeId id) {
        auto& n = nodes_[static_cast<std::size_t>(id)];
        auto& siblings = nodes_[static_cast<std::size_t>(n.parent)].children;
        siblings.erase(std::find(siblings.begin(), siblings.end(), id));
        n.alive = false;
        n.children.clear();
        n.visits.clear();
        n.visits.shrink_to_fit();
        --live_count_;
    }

    int depth_;
    std::size_t num_brands_;
    std::vector<TopicNode> nodes_;
    std::size_t live_count_ = 0;
};

// Brand-specific nCRP step from `parent`: one probability per existing child
// (ascending id) followed by the new-child probability.
inline std::vector<double> ncrp_child_distribution(const TopicTree& tree, NodeId parent, BrandId brand,
                                                   double gamma) {
    if (!(gamma > 0.0)) throw ConfigError("gamma must be > 0");
    const auto& p = tree.node(parent);
    if (p.level >= tree.depth() - 1) throw InvariantError("nCRP step requested from a leaf");
    const double denom = gamma + p.visits[static_cast<std::size_t>(brand)] + static_cast<double>(p.children.size());
    std::vector<double> out;
    out.reserve(p.children.size() + 1);
    for (NodeId c : p.children) out.push_back((tree.visits(brand, c) + 1.0) / denom);
    out.push_back(gamma / denom);
    return out;
}

inline double log_existing_child_factor(const TopicTree& tree, NodeId parent, NodeId child, BrandId brand,
                                        double gamma) {
    const auto& p = tree.node(parent);
    const double denom = gamma + p.visits[static_cast<std::size_t>(brand)] + static_cast<double>(p.children.size());
    return std::log((tree.visits(brand, child) + 1.0) / denom);
}

inline double log_new_child_factor(const TopicTree& tree, NodeId parent, BrandId brand, double gamma) {
    const auto& p = tree.node(parent);
    const double denom = gamma + p.visits[static_cast<std::size_t>(brand)] + static_cast<double>(p.children.size());
    return std::log(gamma / denom);
}

// Log nCRP prior of a path under the tree's current counts. The caller is
// responsible for having detached the sentence being resampled.
inline double path_log_prior(const TopicTree& tree, BrandId brand, const TreePath& path, double gamma) {
    if (!(gamma > 0.0)) throw ConfigError("gamma must be > 0");
    tree.validate(path);
    const std::size_t cut = path.first_new();
    double lp = 0.0;
    for (std::size_t l = 1; l < cut; ++l)
        lp += log_existing_child_factor(tree, path.nodes[l - 1], path.nodes[l], brand, gamma);
    if (cut < path.nodes.size()) lp += log_new_child_factor(tree, path.nodes[cut - 1], brand, gamma);
    return lp;
}

// Every existing root-to-leaf path plus one branching candidate per internal
// node, in lexicographic order of node ids (placeholders sort last).
inline std::vector<TreePath> enumerate_candidate_paths(const TopicTree& tree) {
    std::vector<TreePath> out;
    const auto L = static_cast<std::size_t>(tree.depth());
    std::vector<NodeId> prefix;
    std::function<void(NodeId)> visit = [&](NodeId id) {
        prefix.push_back(id);
        const auto& n = tree.node(id);
        if (prefix.size() == L) {
            out.push_back(TreePath{prefix});
        } else {
            for (NodeId c : n.children) visit(c);
            TreePath branch{prefix};
            branch.nodes.resize(L, kNewNode);
            out.push_back(std::move(branch));
        }
        prefix.pop_back();
    };
    visit(tree.root());
    return out;
}

}  // namespace mhstm
