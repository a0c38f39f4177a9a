#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "error.hpp"
#include "topic_tree.hpp"

namespace mhstm {

// Urn weights are fixed-point integers with 32 fractional bits, so that
// adding and later subtracting the same recorded amount is exact.
using Weight = std::int64_t;
inline constexpr Weight kWeightOne = Weight{1} << 32;

inline Weight to_weight(double x) { return static_cast<Weight>(std::llround(x * static_cast<double>(kWeightOne))); }
inline double from_weight(Weight w) { return static_cast<double>(w) / static_cast<double>(kWeightOne); }

// Which child counts feed the entropy ratio of an internal node.
enum class AdditionCounts {
    DirectChildren,  // N_{k',v} of the children themselves
    ChildSubtrees,   // N summed over each child's subtree
};

struct TokenRecord {
    NodeId node = kNewNode;
    TermId term = 0;
    std::vector<Weight> ancestor_weights;  // parent first, root last
};

struct PredictiveParams {
    double eta = 0.1;
    std::size_t vocab_size = 0;
};

// Natural-log entropy of a count vector; zero for empty or single-mass input.
inline double count_entropy(std::span<const double> counts) {
    double total = 0.0;
    for (double c : counts) total += c;
    if (!(total > 0.0)) return 0.0;
    double h = 0.0;
    for (double c : counts) {
        if (c > 0.0) {
            const double p = c / total;
            h -= p * std::log(p);
        }
    }
    return h;
}

// Entropy-ratio weight min(H(children | v) / H(children), 1) given per-child
// totals and per-child counts of v. Degenerate cases map to 1.
inline double entropy_addition_weight(std::span<const double> child_totals, std::span<const double> term_counts) {
    const double h_all = count_entropy(child_totals);
    if (!(h_all > 0.0)) return 1.0;
    double s = 0.0;
    for (double c : term_counts) s += c;
    if (!(s > 0.0)) return 1.0;
    return std::min(count_entropy(term_counts) / h_all, 1.0);
}

class UrnState {
public:
    UrnState(std::size_t vocab_size, AdditionCounts scope = AdditionCounts::DirectChildren)
        : vocab_size_(vocab_size), scope_(scope) {}

    std::size_t vocab_size() const { return vocab_size_; }
    AdditionCounts scope() const { return scope_; }

    bool has_row(NodeId k) const {
        return k >= 0 && static_cast<std::size_t>(k) < rows_.size() && rows_[static_cast<std::size_t>(k)] != nullptr;
    }

    Weight weight_fixed(NodeId k, TermId v) const {
        return has_row(k) ? row(k).W[static_cast<std::size_t>(v)] : 0;
    }
    double weight(NodeId k, TermId v) const { return from_weight(weight_fixed(k, v)); }
    Weight total_weight_fixed(NodeId k) const { return has_row(k) ? row(k).W_total : 0; }
    double total_weight(NodeId k) const { return from_weight(total_weight_fixed(k)); }
    std::int32_t raw_count(NodeId k, TermId v) const {
        return has_row(k) ? row(k).N[static_cast<std::size_t>(v)] : 0;
    }
    std::int64_t raw_total(NodeId k) const { return has_row(k) ? row(k).N_total : 0; }

    // Weight a_{kv} currently applied to ancestors at internal node k.
    Weight addition_weight_fixed(NodeId k, TermId v) const {
        if (has_row(k) && !row(k).A.empty()) return row(k).A[static_cast<std::size_t>(v)];
        return default_addition_;
    }
    double addition_weight(NodeId k, TermId v) const { return from_weight(addition_weight_fixed(k, v)); }

    // Fill value for rows without a computed A: zero until the first
    // recompute, then one (the no-evidence rule).
    Weight default_addition_fixed() const { return default_addition_; }
    bool addition_matrix_computed() const { return computed_once_; }

    // Overwrite A (testing hook and model reload). Values are clamped to [0,1].
    void set_addition_weight(NodeId k, TermId v, double a) {
        auto& r = ensure_row(k);
        if (r.A.empty()) r.A.assign(vocab_size_, default_addition_);
        r.A[static_cast<std::size_t>(v)] = to_weight(std::clamp(a, 0.0, 1.0));
    }
    void set_default_addition(double a) { default_addition_ = to_weight(std::clamp(a, 0.0, 1.0)); }

    // Assign one token of term v to node k. Writes the ancestor weights added
    // (parent first) into `applied`, which must hold level(k) entries.
    void apply(const TopicTree& tree, NodeId k, TermId v, std::span<Weight> applied) {
        auto& r = ensure_row(k);
        const auto vi = static_cast<std::size_t>(v);
        ++r.N[vi];
        ++r.N_total;
        r.W[vi] += kWeightOne;
        r.W_total += kWeightOne;
        std::size_t i = 0;
        for (NodeId p = tree.parent(k); p != kNoParent; p = tree.parent(p), ++i) {
            detail::require(i < applied.size(), "token record too short for node depth");
            const Weight a = addition_weight_fixed(p, v);
            auto& pr = ensure_row(p);
            pr.W[vi] += a;
            pr.W_total += a;
            applied[i] = a;
        }
    }

    // Undo an apply using the recorded amounts, never the current A.
    void retract(const TopicTree& tree, NodeId k, TermId v, std::span<const Weight> applied) {
        detail::require(has_row(k), "retract from a node without urn state");
        auto& r = row(k);
        const auto vi = static_cast<std::size_t>(v);
        if (r.N[vi] <= 0 || r.W[vi] < kWeightOne) throw InvariantError("urn count underflow on retract");
        --r.N[vi];
        --r.N_total;
        r.W[vi] -= kWeightOne;
        r.W_total -= kWeightOne;
        std::size_t i = 0;
        for (NodeId p = tree.parent(k); p != kNoParent; p = tree.parent(p), ++i) {
            detail::require(i < applied.size(), "token record too short for node depth");
            auto& pr = row(p);
            pr.W[vi] -= applied[i];
            pr.W_total -= applied[i];
            if (pr.W[vi] < 0) throw InvariantError("negative urn weight on retract");
        }
    }

    TokenRecord apply_token(const TopicTree& tree, NodeId k, TermId v) {
        TokenRecord rec{k, v, std::vector<Weight>(static_cast<std::size_t>(tree.level(k)))};
        apply(tree, k, v, rec.ancestor_weights);
        return rec;
    }

    void retract_token(const TopicTree& tree, const TokenRecord& rec) {
        retract(tree, rec.node, rec.term, rec.ancestor_weights);
    }

    bool is_empty(NodeId k) const { return !has_row(k) || (row(k).W_total == 0 && row(k).N_total == 0); }

    // Drop the row of a pruned node. The node must hold no weight.
    void release(NodeId k) {
        if (!has_row(k)) return;
        if (!is_empty(k)) throw InvariantError("releasing urn row with live weight, node " + std::to_string(k));
        rows_[static_cast<std::size_t>(k)].reset();
    }

    // Collapsed predictive (W_{k,v} + eta) / sum_v'(W_{k,v'} + eta).
    double predictive(NodeId k, TermId v, double eta) const {
        return (weight(k, v) + eta) / (total_weight(k) + static_cast<double>(vocab_size_) * eta);
    }

    std::vector<double> topic_word_distribution(NodeId k, double eta) const {
        std::vector<double> phi(vocab_size_);
        const double denom = total_weight(k) + static_cast<double>(vocab_size_) * eta;
        for (std::size_t v = 0; v < vocab_size_; ++v)
            phi[v] = (weight(k, static_cast<TermId>(v)) + eta) / denom;
        return phi;
    }

    // Recompute A for every live internal node. Entries with no evidence
    // default to one.
    void recompute_addition_matrix(const TopicTree& tree) {
        const auto live = tree.live_nodes();
        std::vector<std::vector<double>> subtree;  // only filled for ChildSubtrees
        if (scope_ == AdditionCounts::ChildSubtrees) {
            subtree.assign(static_cast<std::size_t>(tree.id_bound()), {});
            // Children have larger ids than parents, so reverse id order is bottom-up.
            for (auto it = live.rbegin(); it != live.rend(); ++it) {
                auto& acc = subtree[static_cast<std::size_t>(*it)];
                acc.assign(vocab_size_, 0.0);
                if (has_row(*it)) {
                    const auto& N = row(*it).N;
                    for (std::size_t v = 0; v < vocab_size_; ++v) acc[v] = N[v];
                }
                for (NodeId c : tree.node(*it).children) {
                    const auto& ca = subtree[static_cast<std::size_t>(c)];
                    for (std::size_t v = 0; v < vocab_size_; ++v) acc[v] += ca[v];
                }
            }
        }
        std::vector<double> totals, term_counts;
        for (NodeId k : live) {
            const auto& node = tree.node(k);
            if (node.level >= tree.depth() - 1) continue;
            auto& r = ensure_row(k);
            r.A.assign(vocab_size_, kWeightOne);
            const std::size_t C = node.children.size();
            totals.assign(C, 0.0);
            for (std::size_t c = 0; c < C; ++c) totals[c] = child_total(node.children[c], subtree);
            const double h_all = count_entropy(totals);
            if (!(h_all > 0.0)) continue;
            term_counts.resize(C);
            for (std::size_t v = 0; v < vocab_size_; ++v) {
                double s = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    term_counts[c] = child_count(node.children[c], v, subtree);
                    s += term_counts[c];
                }
                if (!(s > 0.0)) continue;
                r.A[v] = to_weight(std::min(count_entropy(term_counts) / h_all, 1.0));
            }
        }
        default_addition_ = kWeightOne;
        computed_once_ = true;
    }

    // Exact consistency check against the full list of live token records.
    // Returns an empty string when consistent, otherwise the first violation.
    std::string audit(const TopicTree& tree, std::span<const TokenRecord> records) const {
        std::vector<std::vector<Weight>> W(static_cast<std::size_t>(tree.id_bound()));
        std::vector<std::vector<std::int32_t>> N(W.size());
        for (NodeId k : tree.live_nodes()) {
            W[static_cast<std::size_t>(k)].assign(vocab_size_, 0);
            N[static_cast<std::size_t>(k)].assign(vocab_size_, 0);
        }
        for (const auto& rec : records) {
            if (!tree.alive(rec.node)) return "record on dead node " + std::to_string(rec.node);
            const auto vi = static_cast<std::size_t>(rec.term);
            W[static_cast<std::size_t>(rec.node)][vi] += kWeightOne;
            ++N[static_cast<std::size_t>(rec.node)][vi];
            std::size_t i = 0;
            for (NodeId p = tree.parent(rec.node); p != kNoParent; p = tree.parent(p), ++i) {
                if (i >= rec.ancestor_weights.size()) return "record shorter than node depth";
                const Weight a = rec.ancestor_weights[i];
                if (a < 0 || a > kWeightOne) return "recorded addition weight outside [0,1]";
                W[static_cast<std::size_t>(p)][vi] += a;
            }
        }
        return audit_against(tree, W, N);
    }

    std::string audit_against(const TopicTree& tree, const std::vector<std::vector<Weight>>& W,
                              const std::vector<std::vector<std::int32_t>>& N) const {
        for (NodeId k : tree.live_nodes()) {
            const auto ki = static_cast<std::size_t>(k);
            Weight wt = 0;
            std::int64_t nt = 0;
            for (std::size_t v = 0; v < vocab_size_; ++v) {
                const auto tv = static_cast<TermId>(v);
                if (weight_fixed(k, tv) != W[ki][v])
                    return "W mismatch at node " + std::to_string(k) + " term " + std::to_string(v);
                if (raw_count(k, tv) != N[ki][v])
                    return "N mismatch at node " + std::to_string(k) + " term " + std::to_string(v);
                if (W[ki][v] < 0) return "negative weight";
                wt += W[ki][v];
                nt += N[ki][v];
                const Weight a = addition_weight_fixed(k, tv);
                if (a < 0 || a > kWeightOne) return "addition weight outside [0,1]";
            }
            if (total_weight_fixed(k) != wt) return "W total mismatch at node " + std::to_string(k);
            if (raw_total(k) != nt) return "N total mismatch at node " + std::to_string(k);
        }
        for (std::size_t k = 0; k < rows_.size(); ++k)
            if (rows_[k] && !tree.alive(static_cast<NodeId>(k)) && !is_empty(static_cast<NodeId>(k)))
                return "urn weight on dead node " + std::to_string(k);
        return {};
    }

    // Bulk restore used when loading a model export.
    void load_row(NodeId k, std::vector<Weight> W, std::vector<std::int32_t> N) {
        auto& r = ensure_row(k);
        if (W.size() != vocab_size_ || N.size() != vocab_size_) throw DataError("urn row has wrong width");
        r.W = std::move(W);
        r.N = std::move(N);
        r.W_total = 0;
        r.N_total = 0;
        for (auto w : r.W) r.W_total += w;
        for (auto n : r.N) r.N_total += n;
    }

    void mark_computed(bool computed) {
        computed_once_ = computed;
        default_addition_ = computed ? kWeightOne : 0;
    }

private:
    struct Row {
        std::vector<Weight> W;
        std::vector<std::int32_t> N;
        std::vector<Weight> A;  // empty: use default_addition_
        Weight W_total = 0;
        std::int64_t N_total = 0;
    };

    Row& ensure_row(NodeId k) {
        if (k < 0) throw InvariantError("urn access with invalid node id");
        const auto ki = static_cast<std::size_t>(k);
        if (ki >= rows_.size()) rows_.resize(ki + 1);
        if (!rows_[ki]) {
            rows_[ki] = std::make_unique<Row>();
            rows_[ki]->W.assign(vocab_size_, 0);
            rows_[ki]->N.assign(vocab_size_, 0);
        }
        return *rows_[ki];
    }
    const Row& row(NodeId k) const { return *rows_[static_cast<std::size_t>(k)]; }
    Row& row(NodeId k) { return *rows_[static_cast<std::size_t>(k)]; }

    double child_total(NodeId c, const std::vector<std::vector<double>>& subtree) const {
        if (scope_ == AdditionCounts::ChildSubtrees) {
            double s = 0.0;
            for (double x : subtree[static_cast<std::size_t>(c)]) s += x;
            return s;
        }
        return static_cast<double>(raw_total(c));
    }
    double child_count(NodeId c, std::size_t v, const std::vector<std::vector<double>>& subtree) const {
        if (scope_ == AdditionCounts::ChildSubtrees) return subtree[static_cast<std::size_t>(c)][v];
        return static_cast<double>(raw_count(c, static_cast<TermId>(v)));
    }

    std::size_t vocab_size_;
    AdditionCounts scope_;
    std::vector<std::unique_ptr<Row>> rows_;
    Weight default_addition_ = 0;
    bool computed_once_ = false;
};

// Free-function forms of the urn operations.
inline double predictive_word_prob(const UrnState& urn, const PredictiveParams& p, NodeId k, TermId v) {
    if (!(p.eta > 0.0)) throw ConfigError("eta must be > 0");
    return urn.predictive(k, v, p.eta);
}

inline std::vector<double> topic_word_distribution(const UrnState& urn, const PredictiveParams& p, NodeId k) {
    if (!(p.eta > 0.0)) throw ConfigError("eta must be > 0");
    return urn.topic_word_distribution(k, p.eta);
}

inline double addition_weight(const UrnState& urn, const TopicTree& tree, NodeId k, TermId v) {
    if (tree.is_leaf_level(k)) throw InvariantError("addition weight requested for a leaf");
    return urn.addition_weight(k, v);
}

}  // namespace mhstm
