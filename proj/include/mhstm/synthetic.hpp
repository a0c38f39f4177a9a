#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "corpus.hpp"
#include "error.hpp"
#include "rng.hpp"
#include "topic_tree.hpp"

namespace mhstm {

// Shape of a fixed truth tree. "3(3,2,4)" is a root with three children that
// have 3, 2 and 4 leaf children. Items may nest: "2(2(1,1),3)".
struct TreeShape {
    std::vector<TreeShape> children;

    int depth() const {
        int d = 0;
        for (const auto& c : children) d = std::max(d, c.depth());
        return 1 + d;
    }
    std::size_t num_nodes() const {
        std::size_t n = 1;
        for (const auto& c : children) n += c.num_nodes();
        return n;
    }
};

namespace detail {

class ShapeParser {
public:
    explicit ShapeParser(std::string_view s) : s_(s) {}

    TreeShape parse() {
        TreeShape root = item();
        skip_ws();
        if (pos_ != s_.size()) fail("trailing characters");
        return root;
    }

private:
    // item := count [ '(' item {',' item} ')' ]
    TreeShape item() {
        const int n = number();
        TreeShape node;
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == '(') {
            ++pos_;
            node.children.push_back(item());
            skip_ws();
            while (pos_ < s_.size() && s_[pos_] == ',') {
                ++pos_;
                node.children.push_back(item());
                skip_ws();
            }
            if (pos_ >= s_.size() || s_[pos_] != ')') fail("expected ')'");
            ++pos_;
            if (static_cast<int>(node.children.size()) != n)
                fail("count " + std::to_string(n) + " does not match " + std::to_string(node.children.size()) + " items");
        } else {
            node.children.assign(static_cast<std::size_t>(n), TreeShape{});
        }
        return node;
    }

    int number() {
        skip_ws();
        std::size_t start = pos_;
        while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) ++pos_;
        if (start == pos_) fail("expected a number");
        int n = std::stoi(std::string(s_.substr(start, pos_ - start)));
        if (n < 1) fail("branch counts must be >= 1");
        return n;
    }

    void skip_ws() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw ConfigError("hierarchy '" + std::string(s_) + "': " + msg + " at offset " + std::to_string(pos_));
    }

    std::string_view s_;
    std::size_t pos_ = 0;
};

inline bool leaves_at_uniform_depth(const TreeShape& s, int level, int& leaf_level) {
    if (s.children.empty()) {
        if (leaf_level < 0) leaf_level = level;
        return leaf_level == level;
    }
    for (const auto& c : s.children)
        if (!leaves_at_uniform_depth(c, level + 1, leaf_level)) return false;
    return true;
}

}  // namespace detail

inline TreeShape parse_hierarchy(std::string_view text) {
    TreeShape shape = detail::ShapeParser(text).parse();
    int leaf_level = -1;
    if (!detail::leaves_at_uniform_depth(shape, 0, leaf_level))
        throw ConfigError("hierarchy '" + std::string(text) + "' has leaves at different depths");
    return shape;
}

enum class PathMode {
    FixedBrandDistributions,  // brand-specific distributions over a fixed truth tree
    NestedCrp,                // brand-specific nCRP draws over a growing tree
};

struct HierarchySpec {
    std::string hierarchy = "3(3,2,4)";
    std::size_t vocab_size = 100;
    double eta = 0.1;
    double alpha = 1.0;
    std::vector<double> sigma_by_level = {1.0, 2.0, 3.0};
    double mu = 0.0;
    double rho = 1.0;
    std::size_t num_brands = 10;
    std::size_t docs_per_brand = 200;
    std::size_t sentences_per_doc = 5;
    double mean_sentence_length = 10.0;
    bool clip_response = true;
    PathMode path_mode = PathMode::FixedBrandDistributions;
    double gamma = 1.0;  // NestedCrp mode only

    void validate() const {
        if (vocab_size < 1) throw ConfigError("vocab size must be >= 1");
        if (!(eta > 0.0) || !(alpha > 0.0)) throw ConfigError("eta and alpha must be > 0");
        if (rho < 0.0) throw ConfigError("rho must be >= 0");
        if (num_brands < 1 || docs_per_brand < 1 || sentences_per_doc < 1) throw ConfigError("corpus sizes must be >= 1");
        if (!(mean_sentence_length > 0.0)) throw ConfigError("mean sentence length must be > 0");
        for (double s : sigma_by_level)
            if (s < 0.0) throw ConfigError("sigma values must be >= 0");
        if (path_mode == PathMode::NestedCrp && !(gamma > 0.0)) throw ConfigError("gamma must be > 0");
        const auto shape = parse_hierarchy(hierarchy);
        if (sigma_by_level.size() < static_cast<std::size_t>(shape.depth()))
            throw ConfigError("need one sigma per tree level");
    }
};

struct GroundTruth {
    TopicTree tree{1, 1};
    std::vector<std::vector<double>> phi;   // [node id][term]
    std::vector<std::vector<double>> beta;  // [brand][node id]
    std::vector<NodeId> leaves;             // ascending id
    std::vector<std::vector<double>> brand_path_distributions;  // [brand][leaf index]
    // Token-level truth in corpus order.
    std::vector<NodeId> sentence_leaf;
    std::vector<int> token_levels;
    std::vector<NodeId> token_topics;

    double leaf_score(BrandId b, NodeId leaf) const {
        return beta.at(static_cast<std::size_t>(b)).at(static_cast<std::size_t>(leaf));
    }
};

inline std::vector<std::string> synthetic_terms(std::size_t V) {
    std::vector<std::string> t;
    t.reserve(V);
    // Zero-padded so lexicographic and numeric order agree.
    const std::size_t width = std::to_string(V > 0 ? V - 1 : 0).size();
    for (std::size_t v = 0; v < V; ++v) {
        std::string num = std::to_string(v);
        t.push_back("w" + std::string(width - num.size(), '0') + num);
    }
    return t;
}

namespace detail {
inline void grow_shape(TopicTree& tree, NodeId at, const TreeShape& shape) {
    for (const auto& c : shape.children) {
        NodeId id = tree.create_child(at);
        grow_shape(tree, id, c);
    }
}

inline std::vector<double> draw_node_betas(std::size_t B, int level, const HierarchySpec& spec, Rng& rng) {
    std::vector<double> out(B);
    const double sd = spec.sigma_by_level.at(static_cast<std::size_t>(level));
    for (auto& b : out) b = rng.normal(spec.mu, sd);
    return out;
}
}  // namespace detail

// Per brand, a Dirichlet(1) vector over the tree's leaf paths.
inline std::vector<std::vector<double>> draw_brand_path_distributions(const TopicTree& tree, std::size_t num_brands,
                                                                      Rng& rng) {
    const auto leaves = tree.nodes_at_level(tree.depth() - 1);
    std::vector<std::vector<double>> out;
    for (std::size_t b = 0; b < num_brands; ++b) out.push_back(rng.dirichlet(leaves.size(), 1.0));
    return out;
}

// Fixed truth tree with phi_k ~ Dir(eta) and beta^b_k ~ N(mu, sigma_level^2).
inline GroundTruth build_truth_hierarchy(const HierarchySpec& spec, Rng& rng) {
    spec.validate();
    const TreeShape shape = parse_hierarchy(spec.hierarchy);
    GroundTruth g;
    g.tree = TopicTree(shape.depth(), spec.num_brands);
    detail::grow_shape(g.tree, g.tree.root(), shape);
    const auto nodes = g.tree.live_nodes();
    g.phi.assign(nodes.size(), {});
    g.beta.assign(spec.num_brands, std::vector<double>(nodes.size(), 0.0));
    for (NodeId k : nodes) {
        g.phi[static_cast<std::size_t>(k)] = rng.dirichlet(spec.vocab_size, spec.eta);
        const auto b = detail::draw_node_betas(spec.num_brands, g.tree.level(k), spec, rng);
        for (std::size_t br = 0; br < spec.num_brands; ++br) g.beta[br][static_cast<std::size_t>(k)] = b[br];
    }
    g.leaves = g.tree.nodes_at_level(g.tree.depth() - 1);
    return g;
}

namespace detail {

inline std::size_t draw_sentence_length(double mean, Rng& rng) {
    for (;;) {
        const int n = rng.poisson(mean);
        if (n >= 2) return static_cast<std::size_t>(n);
    }
}

inline std::size_t leaf_index(const std::vector<NodeId>& leaves, NodeId leaf) {
    return static_cast<std::size_t>(std::lower_bound(leaves.begin(), leaves.end(), leaf) - leaves.begin());
}

// Draw a path by the brand-specific nCRP, growing `g` as needed.
inline TreePath draw_ncrp_path(GroundTruth& g, BrandId brand, const HierarchySpec& spec, Rng& rng) {
    TreePath p{{g.tree.root()}};
    for (int l = 1; l < g.tree.depth(); ++l) {
        const auto probs = ncrp_child_distribution(g.tree, p.nodes.back(), brand, spec.gamma);
        const std::size_t pick = rng.categorical(probs);
        const auto& kids = g.tree.node(p.nodes.back()).children;
        if (pick < kids.size()) {
            p.nodes.push_back(kids[pick]);
        } else {
            const NodeId id = g.tree.create_child(p.nodes.back());
            g.phi.resize(static_cast<std::size_t>(id) + 1);
            g.phi[static_cast<std::size_t>(id)] = rng.dirichlet(spec.vocab_size, spec.eta);
            const auto b = draw_node_betas(spec.num_brands, l, spec, rng);
            for (std::size_t br = 0; br < spec.num_brands; ++br) {
                g.beta[br].resize(static_cast<std::size_t>(id) + 1, 0.0);
                g.beta[br][static_cast<std::size_t>(id)] = b[br];
            }
            p.nodes.push_back(id);
        }
    }
    g.tree.attach(brand, p);
    return p;
}

}  // namespace detail

// Sample a brand-tagged corpus from the truth; records token-level truth.
inline std::pair<Corpus, GroundTruth> generate_corpus(GroundTruth truth, const HierarchySpec& spec, Rng& rng) {
    spec.validate();
    GroundTruth& g = truth;
    const auto L = static_cast<std::size_t>(g.tree.depth());
    if (spec.path_mode == PathMode::FixedBrandDistributions && g.brand_path_distributions.empty())
        g.brand_path_distributions = draw_brand_path_distributions(g.tree, spec.num_brands, rng);
    g.sentence_leaf.clear();
    g.token_levels.clear();
    g.token_topics.clear();

    std::vector<Review> reviews;
    reviews.reserve(spec.num_brands * spec.docs_per_brand);
    const std::vector<double> alpha(L, spec.alpha);
    for (std::size_t b = 0; b < spec.num_brands; ++b) {
        const auto brand = static_cast<BrandId>(b);
        for (std::size_t d = 0; d < spec.docs_per_brand; ++d) {
            Review r;
            r.brand = brand;
            double mean = 0.0;
            std::size_t n_tokens = 0;
            for (std::size_t s = 0; s < spec.sentences_per_doc; ++s) {
                TreePath path;
                if (spec.path_mode == PathMode::FixedBrandDistributions) {
                    const std::size_t li = rng.categorical(g.brand_path_distributions[b]);
                    path.nodes.assign(L, kNewNode);
                    for (NodeId k = g.leaves[li]; k != kNoParent; k = g.tree.parent(k))
                        path.nodes[static_cast<std::size_t>(g.tree.level(k))] = k;
                } else {
                    path = detail::draw_ncrp_path(g, brand, spec, rng);
                }
                g.sentence_leaf.push_back(path.nodes.back());
                const auto theta = rng.dirichlet(alpha);
                const std::size_t n = detail::draw_sentence_length(spec.mean_sentence_length, rng);
                Sentence sent;
                sent.reserve(n);
                for (std::size_t i = 0; i < n; ++i) {
                    const auto l = rng.categorical(theta);
                    const NodeId k = path.nodes[l];
                    const auto v = static_cast<TermId>(rng.categorical(g.phi[static_cast<std::size_t>(k)]));
                    sent.push_back(v);
                    g.token_levels.push_back(static_cast<int>(l));
                    g.token_topics.push_back(k);
                    mean += g.beta[b][static_cast<std::size_t>(k)];
                }
                n_tokens += n;
                r.sentences.push_back(std::move(sent));
            }
            mean /= static_cast<double>(n_tokens);
            const double y = rng.normal(mean, spec.rho);
            r.rating = y;
            r.response = spec.clip_response ? std::clamp(y, 0.0, 1.0) : y;
            reviews.push_back(std::move(r));
        }
    }
    if (spec.path_mode == PathMode::NestedCrp) g.leaves = g.tree.nodes_at_level(g.tree.depth() - 1);

    std::vector<std::string> brands;
    for (std::size_t b = 0; b < spec.num_brands; ++b) brands.push_back("brand" + std::to_string(b));
    Provenance prov;
    prov.source = "synthetic:" + spec.hierarchy;
    prov.min_df = 1;
    if (!spec.clip_response) {
        // Unclipped responses can leave [0,1]; the corpus requires the unit
        // interval, so store them rescaled and keep the raw value as rating.
        double lo = 0.0, hi = 1.0;
        for (const auto& r : reviews) {
            lo = std::min(lo, r.rating);
            hi = std::max(hi, r.rating);
        }
        for (auto& r : reviews) r.response = (r.rating - lo) / (hi - lo);
        prov.rating_min = lo;
        prov.rating_max = hi;
    }
    Corpus corpus(Vocabulary(synthetic_terms(spec.vocab_size)), std::move(brands), std::move(reviews), prov);
    return {std::move(corpus), std::move(truth)};
}

// Convenience: truth + corpus from one seed, on separate streams.
inline std::pair<Corpus, GroundTruth> generate_scenario(const HierarchySpec& spec, std::uint64_t seed) {
    Rng truth_rng(seed, stream::truth);
    GroundTruth g = build_truth_hierarchy(spec, truth_rng);
    Rng path_rng(seed, stream::brand_paths);
    if (spec.path_mode == PathMode::FixedBrandDistributions) {
        g.brand_path_distributions = draw_brand_path_distributions(g.tree, spec.num_brands, path_rng);
    } else {
        // Start from the root only; nodes are created by the draws.
        const int depth = parse_hierarchy(spec.hierarchy).depth();
        g.tree = TopicTree(depth, spec.num_brands);
        g.phi.assign(1, {});
        Rng root_rng(seed, stream::truth + 100);
        g.phi[0] = root_rng.dirichlet(spec.vocab_size, spec.eta);
        for (auto& row : g.beta) row.assign(1, 0.0);
        const auto rb = detail::draw_node_betas(spec.num_brands, 0, spec, root_rng);
        for (std::size_t b = 0; b < spec.num_brands; ++b) g.beta[b][0] = rb[b];
        g.leaves.clear();
    }
    Rng corpus_rng(seed, stream::corpus);
    return generate_corpus(std::move(g), spec, corpus_rng);
}

// The 3x3 grid demonstration: V = 9, tree 1-3-9, uniform root, row-uniform
// level-2 topics, point-mass leaves, 10 brands x 200 documents.
inline HierarchySpec grid_spec() {
    HierarchySpec spec;
    spec.hierarchy = "3(3,3,3)";
    spec.vocab_size = 9;
    return spec;
}

inline GroundTruth grid_truth(std::size_t num_brands, const HierarchySpec& spec, Rng& rng) {
    GroundTruth g;
    g.tree = TopicTree(3, num_brands);
    g.phi.assign(13, std::vector<double>(9, 0.0));
    std::fill(g.phi[0].begin(), g.phi[0].end(), 1.0 / 9.0);
    std::vector<NodeId> mids;
    for (int row = 0; row < 3; ++row) mids.push_back(g.tree.create_child(g.tree.root()));
    for (int row = 0; row < 3; ++row) {
        const NodeId m = mids[static_cast<std::size_t>(row)];
        for (int c = 0; c < 3; ++c) g.phi[static_cast<std::size_t>(m)][static_cast<std::size_t>(3 * row + c)] = 1.0 / 3.0;
        for (int c = 0; c < 3; ++c) {
            const NodeId leaf = g.tree.create_child(m);
            g.phi[static_cast<std::size_t>(leaf)][static_cast<std::size_t>(3 * row + c)] = 1.0;
        }
    }
    g.beta.assign(num_brands, std::vector<double>(13, 0.0));
    for (NodeId k : g.tree.live_nodes()) {
        const auto b = detail::draw_node_betas(num_brands, g.tree.level(k), spec, rng);
        for (std::size_t br = 0; br < num_brands; ++br) g.beta[br][static_cast<std::size_t>(k)] = b[br];
    }
    g.leaves = g.tree.nodes_at_level(2);
    return g;
}

inline std::pair<Corpus, GroundTruth> generate_grid_corpus(std::uint64_t seed) {
    const HierarchySpec spec = grid_spec();
    Rng truth_rng(seed, stream::truth);
    GroundTruth g = grid_truth(spec.num_brands, spec, truth_rng);
    Rng path_rng(seed, stream::brand_paths);
    g.brand_path_distributions = draw_brand_path_distributions(g.tree, spec.num_brands, path_rng);
    Rng corpus_rng(seed, stream::corpus);
    auto out = generate_corpus(std::move(g), spec, corpus_rng);
    return out;
}

inline nlohmann::json to_json(const HierarchySpec& s) {
    return {{"hierarchy", s.hierarchy},
            {"vocab_size", s.vocab_size},
            {"eta", s.eta},
            {"alpha", s.alpha},
            {"sigma_by_level", s.sigma_by_level},
            {"mu", s.mu},
            {"rho", s.rho},
            {"num_brands", s.num_brands},
            {"docs_per_brand", s.docs_per_brand},
            {"sentences_per_doc", s.sentences_per_doc},
            {"mean_sentence_length", s.mean_sentence_length},
            {"clip_response", s.clip_response},
            {"path_mode", s.path_mode == PathMode::NestedCrp ? "ncrp" : "fixed"},
            {"gamma", s.gamma}};
}

inline HierarchySpec hierarchy_spec_from_json(const nlohmann::json& j) {
    HierarchySpec s;
    s.hierarchy = j.value("hierarchy", s.hierarchy);
    s.vocab_size = j.value("vocab_size", s.vocab_size);
    s.eta = j.value("eta", s.eta);
    s.alpha = j.value("alpha", s.alpha);
    s.sigma_by_level = j.value("sigma_by_level", s.sigma_by_level);
    s.mu = j.value("mu", s.mu);
    s.rho = j.value("rho", s.rho);
    s.num_brands = j.value("num_brands", s.num_brands);
    s.docs_per_brand = j.value("docs_per_brand", s.docs_per_brand);
    s.sentences_per_doc = j.value("sentences_per_doc", s.sentences_per_doc);
    s.mean_sentence_length = j.value("mean_sentence_length", s.mean_sentence_length);
    s.clip_response = j.value("clip_response", s.clip_response);
    s.path_mode = j.value("path_mode", std::string("fixed")) == "ncrp" ? PathMode::NestedCrp : PathMode::FixedBrandDistributions;
    s.gamma = j.value("gamma", s.gamma);
    return s;
}

// Truth export: tree, phi, beta, brand path distributions and token-level
// assignments.
inline nlohmann::json truth_to_json(const GroundTruth& g, const HierarchySpec& spec) {
    nlohmann::json j;
    j["format"] = "mhstm-truth";
    j["version"] = 1;
    j["spec"] = to_json(spec);
    j["tree"] = g.tree.to_json();
    j["phi"] = g.phi;
    j["beta"] = g.beta;
    j["leaves"] = g.leaves;
    j["brand_path_distributions"] = g.brand_path_distributions;
    j["sentence_leaf"] = g.sentence_leaf;
    j["token_levels"] = g.token_levels;
    j["token_topics"] = g.token_topics;
    return j;
}

inline std::pair<GroundTruth, HierarchySpec> truth_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", "") != "mhstm-truth") throw DataError("not an mhstm-truth document");
        HierarchySpec spec = hierarchy_spec_from_json(j.at("spec"));
        GroundTruth g;
        const auto B = j.at("beta").size();
        g.tree = TopicTree::from_json(j.at("tree"), B);
        g.phi = j.at("phi").get<std::vector<std::vector<double>>>();
        g.beta = j.at("beta").get<std::vector<std::vector<double>>>();
        g.leaves = j.at("leaves").get<std::vector<NodeId>>();
        g.brand_path_distributions = j.at("brand_path_distributions").get<std::vector<std::vector<double>>>();
        g.sentence_leaf = j.at("sentence_leaf").get<std::vector<NodeId>>();
        g.token_levels = j.at("token_levels").get<std::vector<int>>();
        g.token_topics = j.at("token_topics").get<std::vector<NodeId>>();
        return {std::move(g), spec};
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("truth schema violation: ") + e.what());
    }
}

}  // namespace mhstm
