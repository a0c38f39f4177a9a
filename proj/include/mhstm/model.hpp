#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "corpus.hpp"
#include "error.hpp"
#include "hpu_urn.hpp"
#include "topic_tree.hpp"

namespace mhstm {

struct FitConfig {
    int depth = 3;
    double gamma = 1.0;
    double alpha = 1.0;
    double eta = 0.1;
    double rho2 = 0.5;
    int max_iters = 500;
    double epsilon = 1e-4;   // per-token log-likelihood improvement threshold
    bool early_stop = true;  // false: always run max_iters
    int burn_in = 50;
    std::uint64_t seed = 0;
    double ridge = 1e-6;
    bool zero_root_beta = true;
    int average_last = 0;  // >0: average phi and x^d over this many final sweeps
    AdditionCounts addition_counts = AdditionCounts::DirectChildren;
    bool sequential_block = true;  // within-sentence count increments in the path likelihood

    void validate() const {
        if (depth < 2) throw ConfigError("depth must be >= 2 (root plus at least one level)");
        if (!(gamma > 0.0)) throw ConfigError("gamma must be > 0");
        if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
        if (!(eta > 0.0)) throw ConfigError("eta must be > 0");
        if (!(rho2 > 0.0)) throw ConfigError("rho2 must be > 0");
        if (max_iters < 1) throw ConfigError("at least one iteration is required");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
        if (burn_in < 0) throw ConfigError("burn-in must be >= 0");
        if (ridge < 0.0) throw ConfigError("ridge must be >= 0");
        if (average_last < 0) throw ConfigError("average_last must be >= 0");
    }
};

inline nlohmann::json to_json(const FitConfig& c) {
    return {{"depth", c.depth},
            {"gamma", c.gamma},
            {"alpha", c.alpha},
            {"eta", c.eta},
            {"rho2", c.rho2},
            {"max_iters", c.max_iters},
            {"epsilon", c.epsilon},
            {"early_stop", c.early_stop},
            {"burn_in", c.burn_in},
            {"seed", c.seed},
            {"ridge", c.ridge},
            {"zero_root_beta", c.zero_root_beta},
            {"average_last", c.average_last},
            {"addition_counts", c.addition_counts == AdditionCounts::DirectChildren ? "children" : "subtrees"},
            {"sequential_block", c.sequential_block}};
}

inline FitConfig fit_config_from_json(const nlohmann::json& j) {
    FitConfig c;
    c.depth = j.value("depth", c.depth);
    c.gamma = j.value("gamma", c.gamma);
    c.alpha = j.value("alpha", c.alpha);
    c.eta = j.value("eta", c.eta);
    c.rho2 = j.value("rho2", c.rho2);
    c.max_iters = j.value("max_iters", c.max_iters);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.early_stop = j.value("early_stop", c.early_stop);
    c.burn_in = j.value("burn_in", c.burn_in);
    c.seed = j.value("seed", c.seed);
    c.ridge = j.value("ridge", c.ridge);
    c.zero_root_beta = j.value("zero_root_beta", c.zero_root_beta);
    c.average_last = j.value("average_last", c.average_last);
    c.addition_counts = j.value("addition_counts", std::string("children")) == "subtrees"
                            ? AdditionCounts::ChildSubtrees
                            : AdditionCounts::DirectChildren;
    c.sequential_block = j.value("sequential_block", c.sequential_block);
    return c;
}

// Final latent assignments in corpus order.
struct Assignments {
    int depth = 0;
    std::vector<NodeId> paths;   // sentence-major, depth entries per sentence
    std::vector<int> levels;     // one per token
    std::vector<NodeId> topics;  // one per token, paths[s][levels[t]]
};

struct IterationStats {
    int iteration = 0;
    double log_likelihood = 0.0;
    std::size_t live_nodes = 0;
    double path_seconds = 0.0;
    double level_seconds = 0.0;
    double addition_seconds = 0.0;
    double beta_seconds = 0.0;
};

struct Model {
    FitConfig config;
    std::vector<std::string> vocabulary;
    std::vector<std::string> brands;
    TopicTree tree;
    UrnState urn;
    std::vector<std::vector<double>> beta;  // [brand][node id]
    std::optional<Assignments> assignments;
    std::vector<IterationStats> trace;
    std::map<NodeId, std::vector<double>> averaged_phi;
    bool converged = false;

    Model(FitConfig cfg, std::vector<std::string> vocab, std::vector<std::string> brand_names, TopicTree t,
          UrnState u)
        : config(cfg), vocabulary(std::move(vocab)), brands(std::move(brand_names)), tree(std::move(t)),
          urn(std::move(u)) {
        beta.assign(brands.size(), {});
    }

    std::size_t num_brands() const { return brands.size(); }
    std::size_t vocab_size() const { return vocabulary.size(); }

    double beta_at(BrandId b, NodeId k) const {
        const auto& row = beta.at(static_cast<std::size_t>(b));
        return (k >= 0 && static_cast<std::size_t>(k) < row.size()) ? row[static_cast<std::size_t>(k)] : 0.0;
    }

    // Smoothed topic-word distribution; averaged over the final sweeps when
    // averaging was requested.
    std::vector<double> phi(NodeId k) const {
        if (auto it = averaged_phi.find(k); it != averaged_phi.end()) return it->second;
        return urn.topic_word_distribution(k, config.eta);
    }

    std::vector<NodeId> leaves() const { return tree.nodes_at_level(tree.depth() - 1); }

    // Term ids sorted by descending phi, ties by ascending id.
    std::vector<TermId> top_terms(NodeId k, std::size_t n) const {
        const auto p = phi(k);
        std::vector<TermId> ids(p.size());
        std::iota(ids.begin(), ids.end(), 0);
        std::stable_sort(ids.begin(), ids.end(), [&](TermId a, TermId b) {
            return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)];
        });
        if (ids.size() > n) ids.resize(n);
        return ids;
    }
};

// Structured model export. Weights are written as decimal doubles; they are
// exact for weights below 2^21.
inline nlohmann::json model_to_json(const Model& m, bool include_assignments = true) {
    nlohmann::json j;
    j["format"] = "mhstm-model";
    j["version"] = 1;
    j["config"] = to_json(m.config);
    j["vocabulary"] = m.vocabulary;
    j["brands"] = m.brands;
    j["tree"] = m.tree.to_json();
    j["addition_matrix_computed"] = m.urn.addition_matrix_computed();
    j["converged"] = m.converged;

    auto& topics = j["topics"] = nlohmann::json::array();
    for (NodeId k : m.tree.live_nodes()) {
        nlohmann::json jt;
        jt["node"] = k;
        jt["level"] = m.tree.level(k);
        const auto phi = m.phi(k);
        auto& top = jt["top_terms"] = nlohmann::json::array();
        for (TermId v : m.top_terms(k, 10))
            top.push_back({{"term", m.vocabulary[static_cast<std::size_t>(v)]},
                           {"prob", phi[static_cast<std::size_t>(v)]}});
        std::vector<TermId> ids;
        std::vector<double> w;
        std::vector<std::int32_t> n;
        for (std::size_t v = 0; v < m.vocab_size(); ++v) {
            const auto tv = static_cast<TermId>(v);
            if (m.urn.weight_fixed(k, tv) != 0 || m.urn.raw_count(k, tv) != 0) {
                ids.push_back(tv);
                w.push_back(m.urn.weight(k, tv));
                n.push_back(m.urn.raw_count(k, tv));
            }
        }
        jt["terms"] = ids;
        jt["W"] = w;
        jt["N"] = n;
        if (auto it = m.averaged_phi.find(k); it != m.averaged_phi.end()) jt["averaged_phi"] = it->second;
        std::vector<double> b;
        for (std::size_t br = 0; br < m.num_brands(); ++br) b.push_back(m.beta_at(static_cast<BrandId>(br), k));
        jt["beta"] = b;
        topics.push_back(std::move(jt));
    }
    auto& tr = j["trace"] = nlohmann::json::array();
    for (const auto& s : m.trace)
        tr.push_back({{"iteration", s.iteration},
                      {"log_likelihood", s.log_likelihood},
                      {"live_nodes", s.live_nodes},
                      {"path_seconds", s.path_seconds},
                      {"level_seconds", s.level_seconds},
                      {"addition_seconds", s.addition_seconds},
                      {"beta_seconds", s.beta_seconds}});
    if (include_assignments && m.assignments) {
        j["assignments"] = {{"depth", m.assignments->depth},
                            {"paths", m.assignments->paths},
                            {"levels", m.assignments->levels}};
    }
    return j;
}

// Timing fields vary between runs; drop them for content comparisons.
inline nlohmann::json strip_timings(nlohmann::json j) {
    if (j.contains("trace"))
        for (auto& s : j["trace"])
            for (const char* k : {"path_seconds", "level_seconds", "addition_seconds", "beta_seconds"}) s.erase(k);
    return j;
}

inline Model model_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", "") != "mhstm-model") throw DataError("not an mhstm-model document");
        auto cfg = fit_config_from_json(j.at("config"));
        auto vocab = j.at("vocabulary").get<std::vector<std::string>>();
        auto brands = j.at("brands").get<std::vector<std::string>>();
        auto tree = TopicTree::from_json(j.at("tree"), brands.size());
        UrnState urn(vocab.size(), cfg.addition_counts);
        urn.mark_computed(j.value("addition_matrix_computed", false));
        Model m(cfg, std::move(vocab), std::move(brands), std::move(tree), std::move(urn));
        for (auto& row : m.beta) row.assign(static_cast<std::size_t>(m.tree.id_bound()), 0.0);
        for (const auto& jt : j.at("topics")) {
            const auto k = jt.at("node").get<NodeId>();
            if (!m.tree.alive(k)) throw DataError("topic for unknown node");
            auto ids = jt.at("terms").get<std::vector<TermId>>();
            auto w = jt.at("W").get<std::vector<double>>();
            auto n = jt.at("N").get<std::vector<std::int32_t>>();
            if (ids.size() != w.size() || ids.size() != n.size()) throw DataError("ragged topic weights");
            std::vector<Weight> W(m.vocab_size(), 0);
            std::vector<std::int32_t> N(m.vocab_size(), 0);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= m.vocab_size())
                    throw DataError("topic term id out of range");
                W[static_cast<std::size_t>(ids[i])] = to_weight(w[i]);
                N[static_cast<std::size_t>(ids[i])] = n[i];
            }
            m.urn.load_row(k, std::move(W), std::move(N));
            if (jt.contains("averaged_phi")) m.averaged_phi[k] = jt["averaged_phi"].get<std::vector<double>>();
            auto b = jt.at("beta").get<std::vector<double>>();
            if (b.size() != m.num_brands()) throw DataError("beta vector has wrong brand count");
            for (std::size_t br = 0; br < b.size(); ++br) m.beta[br][static_cast<std::size_t>(k)] = b[br];
        }
        for (const auto& s : j.value("trace", nlohmann::json::array())) {
            IterationStats st;
            st.iteration = s.value("iteration", 0);
            st.log_likelihood = s.value("log_likelihood", 0.0);
            st.live_nodes = s.value("live_nodes", std::size_t{0});
            st.path_seconds = s.value("path_seconds", 0.0);
            st.level_seconds = s.value("level_seconds", 0.0);
            st.addition_seconds = s.value("addition_seconds", 0.0);
            st.beta_seconds = s.value("beta_seconds", 0.0);
            m.trace.push_back(st);
        }
        m.converged = j.value("converged", false);
        if (j.contains("assignments")) {
            Assignments a;
            a.depth = j["assignments"].at("depth").get<int>();
            a.paths = j["assignments"].at("paths").get<std::vector<NodeId>>();
            a.levels = j["assignments"].at("levels").get<std::vector<int>>();
            m.assignments = std::move(a);
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("model schema violation: ") + e.what());
    }
}

// Structural consistency of a loaded model; empty when consistent.
inline std::string audit_model(const Model& m) {
    if (m.tree.depth() != m.config.depth) return "tree depth differs from the configured depth";
    if (m.assignments && m.assignments->depth != m.tree.depth()) return "assignment depth differs from tree depth";
    for (NodeId k : m.tree.live_nodes()) {
        const auto& node = m.tree.node(k);
        if (!m.tree.is_leaf_level(k)) {
            for (std::size_t b = 0; b < m.num_brands(); ++b) {
                int sum = 0;
                for (NodeId c : node.children) sum += m.tree.visits(static_cast<BrandId>(b), c);
                if (sum != m.tree.visits(static_cast<BrandId>(b), k))
                    return "child visits do not sum to parent visits at node " + std::to_string(k);
            }
        }
        for (std::size_t v = 0; v < m.vocab_size(); ++v) {
            const auto tv = static_cast<TermId>(v);
            const auto n = m.urn.raw_count(k, tv);
            if (n < 0) return "negative count at node " + std::to_string(k);
            if (m.urn.weight_fixed(k, tv) < static_cast<Weight>(n) * kWeightOne)
                return "weight below raw count at node " + std::to_string(k);
        }
    }
    return {};
}

// Per-token topics need sentence lengths, which live in the corpus.
inline void fill_token_topics(Assignments& a, const Corpus& corpus) {
    a.topics.clear();
    a.topics.reserve(a.levels.size());
    std::size_t s = 0, t = 0;
    const auto L = static_cast<std::size_t>(a.depth);
    for (const auto& r : corpus.reviews()) {
        for (const auto& sent : r.sentences) {
            if ((s + 1) * L > a.paths.size()) throw DataError("assignments do not match corpus");
            for (std::size_t n = 0; n < sent.size(); ++n, ++t) {
                if (t >= a.levels.size()) throw DataError("assignments do not match corpus");
                a.topics.push_back(a.paths[s * L + static_cast<std::size_t>(a.levels[t])]);
            }
            ++s;
        }
    }
    if (t != a.levels.size()) throw DataError("assignments do not match corpus");
}

inline void write_json_file(const std::string& path, const nlohmann::json& j, int indent = -1) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << j.dump(indent) << '\n';
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("'" + path + "': " + e.what());
    }
}

}  // namespace mhstm
