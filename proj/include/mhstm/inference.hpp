#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "corpus.hpp"
#include "error.hpp"
#include "hpu_urn.hpp"
#include "log.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "topic_tree.hpp"

namespace mhstm {

// log N(y; mean, rho2)
inline double response_log_density(double y, double mean, double rho2) {
    const double r = y - mean;
    return -0.5 * std::log(2.0 * std::numbers::pi * rho2) - r * r / (2.0 * rho2);
}

inline double response_log_density(double y, std::span<const double> x, std::span<const double> beta, double rho2) {
    double mean = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) mean += x[i] * beta[i];
    return response_log_density(y, mean, rho2);
}

// Collapsed log-likelihood of a block of tokens at one node. With
// `sequential`, each token also sees one count per earlier token of the same
// term in the block; otherwise every token is scored against the node's
// weights alone.
inline double block_log_likelihood(const UrnState& urn, NodeId k, std::span<const TermId> terms, double eta,
                                   bool sequential = true) {
    if (terms.empty()) return 0.0;
    const double V_eta = static_cast<double>(urn.vocab_size()) * eta;
    const double total = urn.has_row(k) ? urn.total_weight(k) : 0.0;
    double ll = 0.0;
    if (!sequential) {
        for (TermId v : terms) {
            const double w = urn.has_row(k) ? urn.weight(k, v) : 0.0;
            ll += std::log((w + eta) / (total + V_eta));
        }
        return ll;
    }
    for (std::size_t i = 0; i < terms.size(); ++i) {
        int repeats = 0;
        for (std::size_t j = 0; j < i; ++j) repeats += terms[j] == terms[i];
        const double w = urn.has_row(k) ? urn.weight(k, terms[i]) : 0.0;
        ll += std::log((w + repeats + eta) / (total + static_cast<double>(i) + V_eta));
    }
    return ll;
}

// Mutable state of one inference chain.
class GibbsState {
public:
    struct SentenceInfo {
        std::uint32_t review = 0;
        std::uint32_t first_token = 0;
        std::uint32_t length = 0;
        BrandId brand = 0;
    };
    struct ReviewInfo {
        std::uint32_t first_sentence = 0;
        std::uint32_t num_sentences = 0;
        std::uint32_t first_token = 0;
        std::uint32_t num_tokens = 0;
        BrandId brand = 0;
        double y = 0.0;
    };
    struct PathCandidate {
        NodeId node = 0;  // leaf of an existing path, or the branch node
        bool branch = false;
        double log_score = 0.0;
    };

    GibbsState(const Corpus& corpus, const FitConfig& config)
        : corpus_(&corpus),
          config_(config),
          L_(static_cast<std::size_t>(config.depth)),
          tree_(config.depth, corpus.num_brands()),
          urn_(corpus.vocab_size(), config.addition_counts) {
        config_.validate();
        std::uint32_t s = 0, t = 0;
        for (std::size_t d = 0; d < corpus.size(); ++d) {
            const auto& r = corpus.review(d);
            ReviewInfo ri;
            ri.first_sentence = s;
            ri.first_token = t;
            ri.brand = r.brand;
            ri.y = r.response;
            for (const auto& sent : r.sentences) {
                sentences_.push_back({static_cast<std::uint32_t>(d), t, static_cast<std::uint32_t>(sent.size()), r.brand});
                for (TermId v : sent) {
                    terms_.push_back(v);
                    token_sentence_.push_back(s);
                }
                t += static_cast<std::uint32_t>(sent.size());
                ++s;
            }
            ri.num_sentences = s - ri.first_sentence;
            ri.num_tokens = t - ri.first_token;
            reviews_.push_back(ri);
        }
        paths_.assign(sentences_.size() * L_, kNewNode);
        level_counts_.assign(sentences_.size() * L_, 0);
        attached_.assign(sentences_.size(), 0);
        levels_.assign(terms_.size(), 0);
        records_.assign(terms_.size() * (L_ - 1), 0);
        beta_.assign(corpus.num_brands(), {});
        doc_beta_sum_.assign(reviews_.size(), 0.0);
        groups_.resize(L_);
        repeats_.resize(L_);
        response_norm_ = -0.5 * std::log(2.0 * std::numbers::pi * config_.rho2);
        inv_two_rho2_ = 1.0 / (2.0 * config_.rho2);
        log_gamma_ = std::log(config_.gamma);
    }

    const Corpus& corpus() const { return *corpus_; }
    const FitConfig& config() const { return config_; }
    const TopicTree& tree() const { return tree_; }
    const UrnState& urn() const { return urn_; }
    UrnState& mutable_urn() { return urn_; }
    std::size_t num_sentences() const { return sentences_.size(); }
    std::size_t num_tokens() const { return terms_.size(); }
    std::size_t num_reviews() const { return reviews_.size(); }
    const SentenceInfo& sentence(std::size_t s) const { return sentences_.at(s); }
    const ReviewInfo& review(std::size_t d) const { return reviews_.at(d); }
    TermId term(std::size_t t) const { return terms_[t]; }
    int level(std::size_t t) const { return levels_[t]; }
    std::size_t sentence_of(std::size_t t) const { return token_sentence_[t]; }
    bool attached(std::size_t s) const { return attached_[s] != 0; }

    TreePath path(std::size_t s) const {
        return TreePath{std::vector<NodeId>(paths_.begin() + static_cast<std::ptrdiff_t>(s * L_),
                                            paths_.begin() + static_cast<std::ptrdiff_t>((s + 1) * L_))};
    }
    NodeId topic(std::size_t t) const { return paths_[token_sentence_[t] * L_ + static_cast<std::size_t>(levels_[t])]; }
    std::span<const std::int32_t> level_counts(std::size_t s) const {
        return {level_counts_.data() + s * L_, L_};
    }

    double beta(BrandId b, NodeId k) const {
        const auto& row = beta_[static_cast<std::size_t>(b)];
        return static_cast<std::size_t>(k) < row.size() ? row[static_cast<std::size_t>(k)] : 0.0;
    }
    void set_beta(BrandId b, NodeId k, double value) {
        auto& row = beta_[static_cast<std::size_t>(b)];
        if (row.size() <= static_cast<std::size_t>(k)) row.resize(static_cast<std::size_t>(k) + 1, 0.0);
        row[static_cast<std::size_t>(k)] = value;
        recompute_doc_sums();
    }

    // Every sentence on one root-to-leaf chain, token levels uniform, A = 0.
    void initialize(Rng& rng) {
        std::vector<NodeId> chain{tree_.root()};
        for (std::size_t l = 1; l < L_; ++l) chain.push_back(tree_.create_child(chain.back()));
        for (std::size_t t = 0; t < terms_.size(); ++t) levels_[t] = static_cast<int>(rng.uniform_index(L_));
        for (std::size_t s = 0; s < sentences_.size(); ++s) attach_sentence(s, TreePath{chain});
        recompute_doc_sums();
    }

    // Deterministic initialization from per-sentence path labels (sentences
    // sharing a label prefix share nodes) and per-token levels.
    void initialize_from_labels(const std::vector<std::vector<int>>& path_labels, const std::vector<int>& levels) {
        if (path_labels.size() != sentences_.size()) throw ConfigError("one path label list per sentence required");
        if (levels.size() != terms_.size()) throw ConfigError("one level per token required");
        std::map<std::vector<int>, NodeId> node_of_prefix;
        for (std::size_t t = 0; t < terms_.size(); ++t) {
            if (levels[t] < 0 || static_cast<std::size_t>(levels[t]) >= L_) throw ConfigError("level out of range");
            levels_[t] = levels[t];
        }
        for (std::size_t s = 0; s < sentences_.size(); ++s) {
            const auto& labels = path_labels[s];
            if (labels.size() != L_ - 1) throw ConfigError("path labels need depth-1 entries");
            TreePath p{{tree_.root()}};
            std::vector<int> prefix;
            for (int lab : labels) {
                prefix.push_back(lab);
                auto it = node_of_prefix.find(prefix);
                if (it == node_of_prefix.end())
                    it = node_of_prefix.emplace(prefix, tree_.create_child(p.nodes.back())).first;
                p.nodes.push_back(it->second);
            }
            attach_sentence(s, p);
        }
        recompute_doc_sums();
    }

    // Remove sentence s from the tree and its tokens from the urn.
    void detach_sentence(std::size_t s) {
        detail::require(attached_[s] != 0, "detach of an unattached sentence");
        const auto& si = sentences_[s];
        const auto& ri = reviews_[si.review];
        for (std::uint32_t t = si.first_token; t < si.first_token + si.length; ++t) {
            const NodeId k = paths_[s * L_ + static_cast<std::size_t>(levels_[t])];
            urn_.retract(tree_, k, terms_[t], record(t));
            doc_beta_sum_[si.review] -= beta(ri.brand, k);
        }
        auto pruned = tree_.detach(si.brand, path(s), [this](NodeId k) { return urn_.is_empty(k); });
        for (NodeId k : pruned) {
            urn_.release(k);
            for (auto& row : beta_)
                if (static_cast<std::size_t>(k) < row.size()) row[static_cast<std::size_t>(k)] = 0.0;
        }
        std::fill(paths_.begin() + static_cast<std::ptrdiff_t>(s * L_),
                  paths_.begin() + static_cast<std::ptrdiff_t>((s + 1) * L_), kNewNode);
        attached_[s] = 0;
    }

    // Attach sentence s along `p` (placeholders are created) and apply its
    // tokens at their current levels with the current A.
    TreePath attach_sentence(std::size_t s, const TreePath& p) {
        detail::require(attached_[s] == 0, "attach of an already attached sentence");
        const auto& si = sentences_[s];
        TreePath real = tree_.attach(si.brand, p);
        std::copy(real.nodes.begin(), real.nodes.end(), paths_.begin() + static_cast<std::ptrdiff_t>(s * L_));
        std::fill(level_counts_.begin() + static_cast<std::ptrdiff_t>(s * L_),
                  level_counts_.begin() + static_cast<std::ptrdiff_t>((s + 1) * L_), 0);
        for (std::uint32_t t = si.first_token; t < si.first_token + si.length; ++t) {
            const auto l = static_cast<std::size_t>(levels_[t]);
            ++level_counts_[s * L_ + l];
            const NodeId k = real.nodes[l];
            urn_.apply(tree_, k, terms_[t], record(t));
            doc_beta_sum_[si.review] += beta(si.brand, k);
        }
        attached_[s] = 1;
        return real;
    }

    // Unnormalized log posterior of every candidate path for a detached
    // sentence: word likelihood + response density + nCRP prior.
    const std::vector<PathCandidate>& path_candidates(std::size_t s) {
        detail::require(attached_[s] == 0, "path scores need a detached sentence");
        const auto& si = sentences_[s];
        const auto& ri = reviews_[si.review];
        for (auto& g : groups_) g.clear();
        for (auto& r : repeats_) r.clear();
        for (std::uint32_t t = si.first_token; t < si.first_token + si.length; ++t) {
            const auto l = static_cast<std::size_t>(levels_[t]);
            int rep = 0;
            for (TermId v : groups_[l]) rep += v == terms_[t];
            groups_[l].push_back(terms_[t]);
            repeats_[l].push_back(rep);
        }
        empty_below_.assign(L_ + 1, 0.0);
        for (std::size_t l = L_; l-- > 0;) empty_below_[l] = empty_below_[l + 1] + group_log_likelihood(kNewNode, l);
        cur_brand_ = si.brand;
        cur_y_ = ri.y;
        cur_others_ = doc_beta_sum_[si.review];
        cur_inv_n_ = 1.0 / static_cast<double>(ri.num_tokens);
        candidates_.clear();
        candidates_.reserve(tree_.num_live());
        score_subtree(tree_.root(), 0.0, 0.0, 0.0);
        return candidates_;
    }

    TreePath candidate_path(const PathCandidate& c) const {
        TreePath p;
        p.nodes.assign(L_, kNewNode);
        for (NodeId k = c.node; k != kNoParent; k = tree_.parent(k))
            p.nodes[static_cast<std::size_t>(tree_.level(k))] = k;
        return p;
    }

    TreePath sample_path(std::size_t s, Rng& rng) {
        detach_sentence(s);
        const auto& cands = path_candidates(s);
        log_scores_.resize(cands.size());
        for (std::size_t i = 0; i < cands.size(); ++i) log_scores_[i] = cands[i].log_score;
        const std::size_t pick = rng.categorical_log(log_scores_, scratch_);
        return attach_sentence(s, candidate_path(cands[pick]));
    }

    void retract_token(std::size_t t) {
        const std::size_t s = token_sentence_[t];
        const auto& si = sentences_[s];
        const NodeId k = topic(t);
        urn_.retract(tree_, k, terms_[t], record(t));
        --level_counts_[s * L_ + static_cast<std::size_t>(levels_[t])];
        doc_beta_sum_[si.review] -= beta(si.brand, k);
        levels_[t] = -1;
    }

    void assign_token(std::size_t t, int l) {
        const std::size_t s = token_sentence_[t];
        const auto& si = sentences_[s];
        levels_[t] = l;
        const NodeId k = paths_[s * L_ + static_cast<std::size_t>(l)];
        ++level_counts_[s * L_ + static_cast<std::size_t>(l)];
        urn_.apply(tree_, k, terms_[t], record(t));
        doc_beta_sum_[si.review] += beta(si.brand, k);
    }

    // Unnormalized log posterior over levels for a retracted token.
    const std::vector<double>& level_log_scores(std::size_t t) {
        detail::require(levels_[t] < 0, "level scores need a retracted token");
        const std::size_t s = token_sentence_[t];
        const auto& si = sentences_[s];
        const auto& ri = reviews_[si.review];
        const double V_eta = static_cast<double>(urn_.vocab_size()) * config_.eta;
        const double inv_n = 1.0 / static_cast<double>(ri.num_tokens);
        const double others = doc_beta_sum_[si.review];
        const TermId v = terms_[t];
        log_scores_.resize(L_);
        for (std::size_t l = 0; l < L_; ++l) {
            const NodeId k = paths_[s * L_ + l];
            const double prior = level_counts_[s * L_ + l] + config_.alpha;
            const double word = (urn_.weight(k, v) + config_.eta) / (urn_.total_weight(k) + V_eta);
            const double mean = (others + beta(si.brand, k)) * inv_n;
            log_scores_[l] = std::log(prior * word) + response_log_density(ri.y, mean, config_.rho2);
        }
        return log_scores_;
    }

    int sample_level(std::size_t t, Rng& rng) {
        retract_token(t);
        const auto& scores = level_log_scores(t);
        const int l = static_cast<int>(rng.categorical_log(scores, scratch_));
        assign_token(t, l);
        return l;
    }

    void sweep_paths(Rng& rng) {
        for (std::size_t s = 0; s < sentences_.size(); ++s) sample_path(s, rng);
    }

    void sweep_levels(Rng& rng) {
        for (std::size_t t = 0; t < terms_.size(); ++t) sample_level(t, rng);
    }

    void update_addition_matrix() { urn_.recompute_addition_matrix(tree_); }

    // x^d as (node, proportion) pairs in ascending node order.
    std::vector<std::pair<NodeId, double>> topic_proportions(std::size_t d) const {
        const auto& ri = reviews_.at(d);
        if (ri.num_tokens == 0) throw DataError("review without tokens");
        std::map<NodeId, int> counts;
        for (std::uint32_t t = ri.first_token; t < ri.first_token + ri.num_tokens; ++t) ++counts[topic(t)];
        std::vector<std::pair<NodeId, double>> out;
        for (auto [k, c] : counts) out.emplace_back(k, c / static_cast<double>(ri.num_tokens));
        return out;
    }

    // M-step: per-brand ridge least squares of y on x^d.
    void optimize_beta() {
        const auto live = tree_.live_nodes();
        std::vector<std::vector<std::pair<NodeId, double>>> xs(reviews_.size());
        for (std::size_t d = 0; d < reviews_.size(); ++d) xs[d] = topic_proportions(d);
        fit_beta(live, xs);
    }

    void fit_beta(const std::vector<NodeId>& live, const std::vector<std::vector<std::pair<NodeId, double>>>& xs) {
        std::vector<NodeId> coords;
        for (NodeId k : live)
            if (!(config_.zero_root_beta && k == tree_.root())) coords.push_back(k);
        std::vector<int> index(static_cast<std::size_t>(tree_.id_bound()), -1);
        for (std::size_t b = 0; b < beta_.size(); ++b) {
            beta_[b].assign(static_cast<std::size_t>(tree_.id_bound()), 0.0);
            // Coordinates with an all-zero column solve to exactly 0, so each
            // brand's system only spans the nodes its reviews touch.
            std::fill(index.begin(), index.end(), -1);
            std::vector<NodeId> used;
            for (std::size_t d = 0; d < reviews_.size(); ++d) {
                if (reviews_[d].brand != static_cast<BrandId>(b)) continue;
                for (const auto& [k, x] : xs[d]) {
                    const auto ki = static_cast<std::size_t>(k);
                    if (x != 0.0 && index[ki] == -1 && std::binary_search(coords.begin(), coords.end(), k)) {
                        index[ki] = 0;
                        used.push_back(k);
                    }
                }
            }
            std::sort(used.begin(), used.end());
            for (std::size_t i = 0; i < used.size(); ++i) index[static_cast<std::size_t>(used[i])] = static_cast<int>(i);
            const auto K = static_cast<Eigen::Index>(used.size());
            if (K == 0) continue;
            Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(K, K);
            Eigen::VectorXd rhs = Eigen::VectorXd::Zero(K);
            bool any = false;
            for (std::size_t d = 0; d < reviews_.size(); ++d) {
                if (reviews_[d].brand != static_cast<BrandId>(b)) continue;
                any = true;
                const auto& x = xs[d];
                for (const auto& [ki, xi] : x) {
                    const int i = ki < static_cast<NodeId>(index.size()) ? index[static_cast<std::size_t>(ki)] : -1;
                    if (i < 0) continue;
                    rhs[i] += xi * reviews_[d].y;
                    for (const auto& [kj, xj] : x) {
                        const int j = kj < static_cast<NodeId>(index.size()) ? index[static_cast<std::size_t>(kj)] : -1;
                        if (j >= 0) gram(i, j) += xi * xj;
                    }
                }
            }
            if (!any) continue;
            Eigen::VectorXd sol;
            if (config_.ridge > 0.0) {
                gram.diagonal().array() += config_.ridge;
                sol = gram.ldlt().solve(rhs);
            } else {
                sol = gram.completeOrthogonalDecomposition().solve(rhs);
            }
            for (std::size_t i = 0; i < used.size(); ++i) {
                const double v = sol[static_cast<Eigen::Index>(i)];
                if (!std::isfinite(v)) throw InvariantError("non-finite regression coefficient");
                beta_[b][static_cast<std::size_t>(used[i])] = v;
            }
        }
        recompute_doc_sums();
    }

    // Sum over tokens of the leave-one-out predictive at the assigned node
    // plus the response log density of every review.
    double joint_log_likelihood() const {
        const double V_eta = static_cast<double>(urn_.vocab_size()) * config_.eta;
        double ll = 0.0;
        for (std::size_t t = 0; t < terms_.size(); ++t) {
            const NodeId k = topic(t);
            ll += std::log((urn_.weight(k, terms_[t]) - 1.0 + config_.eta) / (urn_.total_weight(k) - 1.0 + V_eta));
        }
        for (std::size_t d = 0; d < reviews_.size(); ++d) {
            const auto& ri = reviews_[d];
            ll += response_log_density(ri.y, doc_beta_sum_[d] / ri.num_tokens, config_.rho2);
        }
        return ll;
    }

    // Full cross-check of tree counts, urn weights, level counts and cached
    // response sums against the assignments. Empty string means consistent.
    std::string audit() const {
        std::vector<std::vector<std::int64_t>> visits(static_cast<std::size_t>(tree_.id_bound()),
                                                      std::vector<std::int64_t>(tree_.num_brands(), 0));
        for (std::size_t s = 0; s < sentences_.size(); ++s) {
            if (!attached_[s]) return "unattached sentence " + std::to_string(s);
            const auto p = path(s);
            try {
                tree_.validate(p);
            } catch (const InvariantError& e) {
                return std::string("sentence path invalid: ") + e.what();
            }
            if (!p.is_existing()) return "sentence path with placeholder";
            for (NodeId k : p.nodes) ++visits[static_cast<std::size_t>(k)][static_cast<std::size_t>(sentences_[s].brand)];
            std::vector<std::int32_t> lc(L_, 0);
            for (std::uint32_t t = sentences_[s].first_token; t < sentences_[s].first_token + sentences_[s].length; ++t)
                ++lc[static_cast<std::size_t>(levels_[t])];
            for (std::size_t l = 0; l < L_; ++l)
                if (lc[l] != level_counts_[s * L_ + l]) return "level count mismatch in sentence " + std::to_string(s);
        }
        for (NodeId k : tree_.live_nodes()) {
            const auto& n = tree_.node(k);
            std::int64_t total = 0;
            for (std::size_t b = 0; b < tree_.num_brands(); ++b) {
                if (n.visits[b] != visits[static_cast<std::size_t>(k)][b])
                    return "visit count mismatch at node " + std::to_string(k);
                total += n.visits[b];
            }
            if (total != n.total_visits) return "total visit mismatch at node " + std::to_string(k);
            if (total == 0) return "live node without visits " + std::to_string(k);
            if (n.level < tree_.depth() - 1 && n.children.empty()) return "internal node without children";
            std::int64_t child_sum = 0;
            for (NodeId c : n.children) child_sum += tree_.node(c).total_visits;
            if (!n.children.empty() && child_sum != n.total_visits) return "children visits do not sum to parent";
        }
        std::vector<TokenRecord> recs;
        recs.reserve(terms_.size());
        for (std::size_t t = 0; t < terms_.size(); ++t) {
            TokenRecord r;
            r.node = topic(t);
            r.term = terms_[t];
            const auto rec = record_view(t);
            r.ancestor_weights.assign(rec.begin(), rec.begin() + tree_.level(r.node));
            recs.push_back(std::move(r));
        }
        if (auto err = urn_.audit(tree_, recs); !err.empty()) return err;
        for (std::size_t d = 0; d < reviews_.size(); ++d) {
            double sum = 0.0;
            for (std::uint32_t t = reviews_[d].first_token; t < reviews_[d].first_token + reviews_[d].num_tokens; ++t)
                sum += beta(reviews_[d].brand, topic(t));
            if (std::abs(sum - doc_beta_sum_[d]) > 1e-6 * (1.0 + std::abs(sum))) return "cached response sum drifted";
        }
        return {};
    }

    Assignments assignments() const {
        Assignments a;
        a.depth = static_cast<int>(L_);
        a.paths = paths_;
        a.levels = levels_;
        a.topics.reserve(terms_.size());
        for (std::size_t t = 0; t < terms_.size(); ++t) a.topics.push_back(topic(t));
        return a;
    }

    const std::vector<std::vector<double>>& betas() const { return beta_; }

    // Hand the tree and urn over to a Model. The state is unusable afterwards.
    Model release_model(bool keep_assignments) {
        Model m(config_, corpus_->vocabulary().terms(), corpus_->brand_names(), std::move(tree_), std::move(urn_));
        m.beta = beta_;
        for (auto& row : m.beta) row.resize(static_cast<std::size_t>(m.tree.id_bound()), 0.0);
        if (keep_assignments) m.assignments = assignments();
        return m;
    }

    void recompute_doc_sums() {
        for (std::size_t d = 0; d < reviews_.size(); ++d) {
            const auto& ri = reviews_[d];
            double sum = 0.0;
            for (std::uint32_t t = ri.first_token; t < ri.first_token + ri.num_tokens; ++t) {
                const std::size_t s = token_sentence_[t];
                if (!attached_[s] || levels_[t] < 0) continue;
                sum += beta(ri.brand, paths_[s * L_ + static_cast<std::size_t>(levels_[t])]);
            }
            doc_beta_sum_[d] = sum;
        }
    }

private:
    std::span<Weight> record(std::size_t t) { return {records_.data() + t * (L_ - 1), L_ - 1}; }
    std::span<const Weight> record_view(std::size_t t) const { return {records_.data() + t * (L_ - 1), L_ - 1}; }

    void score_subtree(NodeId k, double log_prior, double word_ll, double beta_sum) {
        const auto& n = tree_.node(k);
        const auto l = static_cast<std::size_t>(n.level);
        word_ll += group_log_likelihood(k, l);
        beta_sum += static_cast<double>(groups_[l].size()) * beta(cur_brand_, k);
        if (l + 1 == L_) {
            candidates_.push_back({k, false, log_prior + word_ll + response(beta_sum)});
            return;
        }
        const double log_denom = std::log(config_.gamma + n.visits[static_cast<std::size_t>(cur_brand_)] +
                                          static_cast<double>(n.children.size()));
        for (NodeId c : n.children) {
            const double f = log_count(tree_.visits(cur_brand_, c) + 1) - log_denom;
            score_subtree(c, log_prior + f, word_ll, beta_sum);
        }
        candidates_.push_back({k, true,
                               log_prior + log_gamma_ - log_denom + word_ll + empty_below_[l + 1] +
                                   response(beta_sum)});
    }

    // block_log_likelihood for the current sentence's level-l group, with
    // the logs taken over chunked products.
    double group_log_likelihood(NodeId k, std::size_t l) const {
        const auto& g = groups_[l];
        if (g.empty()) return 0.0;
        const auto& reps = repeats_[l];
        const double eta = config_.eta;
        const double V_eta = static_cast<double>(urn_.vocab_size()) * eta;
        const bool has = urn_.has_row(k);
        const double total = has ? urn_.total_weight(k) : 0.0;
        double num = 1.0, den = 1.0, ll = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double w = has ? urn_.weight(k, g[i]) : 0.0;
            if (config_.sequential_block) {
                num *= w + reps[i] + eta;
                den *= total + static_cast<double>(i) + V_eta;
            } else {
                num *= w + eta;
                den *= total + V_eta;
            }
            if ((i & 15) == 15) {
                ll += std::log(num / den);
                num = den = 1.0;
            }
        }
        return ll + std::log(num / den);
    }

    double response(double sentence_beta_sum) const {
        const double r = cur_y_ - (cur_others_ + sentence_beta_sum) * cur_inv_n_;
        return response_norm_ - r * r * inv_two_rho2_;
    }

    double log_count(std::int32_t n) {
        const auto i = static_cast<std::size_t>(n);
        while (i >= log_table_.size()) log_table_.push_back(std::log(static_cast<double>(log_table_.size())));
        return log_table_[i];
    }

    const Corpus* corpus_;
    FitConfig config_;
    std::size_t L_;
    TopicTree tree_;
    UrnState urn_;

    std::vector<SentenceInfo> sentences_;
    std::vector<ReviewInfo> reviews_;
    std::vector<TermId> terms_;
    std::vector<std::uint32_t> token_sentence_;
    std::vector<int> levels_;
    std::vector<Weight> records_;
    std::vector<NodeId> paths_;
    std::vector<std::int32_t> level_counts_;
    std::vector<char> attached_;
    std::vector<std::vector<double>> beta_;
    std::vector<double> doc_beta_sum_;

    // scratch
    std::vector<std::vector<TermId>> groups_;
    std::vector<std::vector<int>> repeats_;
    std::vector<double> empty_below_;
    std::vector<PathCandidate> candidates_;
    std::vector<double> log_scores_;
    std::vector<double> scratch_;
    BrandId cur_brand_ = 0;
    double cur_y_ = 0.0, cur_others_ = 0.0, cur_inv_n_ = 0.0;
    double response_norm_ = 0.0, inv_two_rho2_ = 0.0, log_gamma_ = 0.0;
    std::vector<double> log_table_;
};

// x^d over live nodes for review d.
inline std::vector<std::pair<NodeId, double>> empirical_topic_proportions(const GibbsState& state, std::size_t d) {
    return state.topic_proportions(d);
}

inline void optimize_beta(GibbsState& state) { state.optimize_beta(); }

inline double joint_log_likelihood(const GibbsState& state) { return state.joint_log_likelihood(); }

struct EmObserver {
    // Called after every iteration; return false to stop early.
    std::function<bool(const GibbsState&, const IterationStats&)> on_iteration;
};

// Stochastic EM: path sweep, level sweep, addition-matrix update and
// regression M-step per iteration, stopping on a small per-token likelihood
// gain after burn-in or at max_iters.
inline Model run_stochastic_em(const Corpus& corpus, const FitConfig& config, bool keep_assignments = true,
                               const EmObserver& observer = {}) {
    config.validate();
    using clock = std::chrono::steady_clock;
    auto secs = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };

    GibbsState state(corpus, config);
    Rng rng(config.seed, stream::sampler);
    state.initialize(rng);

    std::vector<IterationStats> trace;
    const double tokens = static_cast<double>(corpus.num_tokens());
    double prev_ll = -std::numeric_limits<double>::infinity();
    bool converged = false;

    struct Snapshot {
        std::map<NodeId, std::vector<double>> phi;
        std::vector<std::vector<std::pair<NodeId, double>>> x;
    };
    std::deque<Snapshot> window;

    for (int it = 1; it <= config.max_iters; ++it) {
        IterationStats st;
        st.iteration = it;
        auto t0 = clock::now();
        state.sweep_paths(rng);
        auto t1 = clock::now();
        state.sweep_levels(rng);
        auto t2 = clock::now();
        state.update_addition_matrix();
        auto t3 = clock::now();
        state.optimize_beta();
        auto t4 = clock::now();
        st.path_seconds = secs(t0, t1);
        st.level_seconds = secs(t1, t2);
        st.addition_seconds = secs(t2, t3);
        st.beta_seconds = secs(t3, t4);
        st.log_likelihood = state.joint_log_likelihood();
        st.live_nodes = state.tree().num_live();
        trace.push_back(st);
        log::info("iter ", it, " ll/token ", st.log_likelihood / tokens, " nodes ", st.live_nodes);

        if (config.average_last > 0 && it > config.burn_in) {
            Snapshot snap;
            for (NodeId k : state.tree().live_nodes()) snap.phi[k] = state.urn().topic_word_distribution(k, config.eta);
            snap.x.resize(state.num_reviews());
            for (std::size_t d = 0; d < state.num_reviews(); ++d) snap.x[d] = state.topic_proportions(d);
            window.push_back(std::move(snap));
            if (window.size() > static_cast<std::size_t>(config.average_last)) window.pop_front();
        }

        if (observer.on_iteration && !observer.on_iteration(state, st)) break;
        if (config.early_stop && it > config.burn_in && (st.log_likelihood - prev_ll) / tokens < config.epsilon) {
            converged = true;
            break;
        }
        prev_ll = st.log_likelihood;
    }

    std::map<NodeId, std::vector<double>> averaged_phi;
    if (!window.empty()) {
        const auto live = state.tree().live_nodes();
        for (NodeId k : live) {
            std::vector<double> acc(corpus.vocab_size(), 0.0);
            int n = 0;
            for (const auto& snap : window) {
                if (auto f = snap.phi.find(k); f != snap.phi.end()) {
                    for (std::size_t v = 0; v < acc.size(); ++v) acc[v] += f->second[v];
                    ++n;
                }
            }
            for (auto& a : acc) a /= n;
            averaged_phi[k] = std::move(acc);
        }
        std::vector<std::vector<std::pair<NodeId, double>>> xbar(state.num_reviews());
        for (std::size_t d = 0; d < state.num_reviews(); ++d) {
            std::map<NodeId, double> acc;
            for (const auto& snap : window)
                for (auto [k, x] : snap.x[d]) acc[k] += x / static_cast<double>(window.size());
            xbar[d].assign(acc.begin(), acc.end());
        }
        state.fit_beta(live, xbar);
    }

    Model m = state.release_model(keep_assignments);
    m.trace = std::move(trace);
    m.converged = converged;
    m.averaged_phi = std::move(averaged_phi);
    return m;
}

struct DepthTiming {
    int depth = 0;
    double estep_seconds = 0.0;
    double path_seconds = 0.0;
    double level_seconds = 0.0;
    double addition_seconds = 0.0;
};

// Wall time of fixed-iteration fits at several depths.
inline std::vector<DepthTiming> estep_runtime_profile(const Corpus& corpus, FitConfig config,
                                                      const std::vector<int>& depths, int iterations) {
    std::vector<DepthTiming> out;
    for (int L : depths) {
        config.depth = L;
        config.max_iters = iterations;
        config.early_stop = false;
        Model m = run_stochastic_em(corpus, config, false);
        DepthTiming dt;
        dt.depth = L;
        for (const auto& s : m.trace) {
            dt.path_seconds += s.path_seconds;
            dt.level_seconds += s.level_seconds;
            dt.addition_seconds += s.addition_seconds;
        }
        dt.estep_seconds = dt.path_seconds + dt.level_seconds;
        out.push_back(dt);
    }
    return out;
}

}  // namespace mhstm
