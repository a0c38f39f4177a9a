#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "corpus.hpp"
#include "error.hpp"
#include "inference.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "synthetic.hpp"
#include "topic_tree.hpp"

namespace mhstm {

struct BrandScore {
    BrandId brand = 0;
    double score = 0.0;
};

struct BrandRanking {
    NodeId leaf = 0;
    std::vector<BrandScore> entries;  // best first

    std::vector<BrandId> order() const {
        std::vector<BrandId> out;
        for (const auto& e : entries) out.push_back(e.brand);
        return out;
    }
    // positions()[b] = 1-based rank of brand b
    std::vector<double> positions() const {
        std::vector<double> pos(entries.size(), 0.0);
        for (std::size_t i = 0; i < entries.size(); ++i)
            pos[static_cast<std::size_t>(entries[i].brand)] = static_cast<double>(i + 1);
        return pos;
    }
};

// Brands by descending score, ties by ascending brand id.
inline BrandRanking rank_by_scores(NodeId leaf, const std::vector<double>& scores) {
    BrandRanking r;
    r.leaf = leaf;
    for (std::size_t b = 0; b < scores.size(); ++b) r.entries.push_back({static_cast<BrandId>(b), scores[b]});
    std::stable_sort(r.entries.begin(), r.entries.end(),
                     [](const BrandScore& a, const BrandScore& b) { return a.score > b.score; });
    return r;
}

inline BrandRanking rank_brands(const Model& model, NodeId leaf) {
    if (!model.tree.alive(leaf)) throw ConfigError("unknown topic node " + std::to_string(leaf));
    std::vector<double> scores;
    for (std::size_t b = 0; b < model.num_brands(); ++b) scores.push_back(model.beta_at(static_cast<BrandId>(b), leaf));
    return rank_by_scores(leaf, scores);
}

inline BrandRanking rank_brands(const GroundTruth& truth, NodeId leaf) {
    std::vector<double> scores;
    for (std::size_t b = 0; b < truth.beta.size(); ++b) scores.push_back(truth.leaf_score(static_cast<BrandId>(b), leaf));
    return rank_by_scores(leaf, scores);
}

// 1-based ranks of `v` in ascending order; ties share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

namespace detail {
inline void check_pair(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ConfigError("rank vectors differ in length");
    if (a.size() < 2) throw ConfigError("rank correlation needs at least two items");
}
}  // namespace detail

// Pearson correlation of average ranks. Returns 0 when either side is constant.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    detail::check_pair(a, b);
    const auto ra = average_ranks(a), rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// Kendall's tau-b. Returns 0 when either side is constant.
inline double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
    detail::check_pair(a, b);
    double concordant = 0.0, discordant = 0.0, ties_a = 0.0, ties_b = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = i + 1; j < a.size(); ++j) {
            const double da = a[i] - a[j], db = b[i] - b[j];
            if (da == 0.0 && db == 0.0) continue;
            if (da == 0.0) {
                ties_a += 1.0;
            } else if (db == 0.0) {
                ties_b += 1.0;
            } else if ((da > 0.0) == (db > 0.0)) {
                concordant += 1.0;
            } else {
                discordant += 1.0;
            }
        }
    }
    const double denom = std::sqrt((concordant + discordant + ties_a) * (concordant + discordant + ties_b));
    if (denom == 0.0) return 0.0;
    return (concordant - discordant) / denom;
}

template <class T>
double average_precision_at_k(const std::vector<T>& predicted, const std::vector<T>& relevant, std::size_t K) {
    if (K < 1) throw ConfigError("K must be >= 1");
    if (relevant.empty()) throw ConfigError("relevant set is empty");
    double hits = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < std::min(K, predicted.size()); ++i) {
        if (std::find(relevant.begin(), relevant.end(), predicted[i]) != relevant.end()) {
            hits += 1.0;
            sum += hits / static_cast<double>(i + 1);
        }
    }
    return sum / static_cast<double>(std::min(K, relevant.size()));
}

struct Matching {
    std::vector<int> row_to_col;  // -1 when the row is matched to padding
    double total = 0.0;
};

// Maximum-weight matching on a rectangular weight matrix, equivalent to
// padding the smaller side with zeros and solving the square assignment.
inline Matching kuhn_munkres(const std::vector<std::vector<double>>& weight) {
    Matching out;
    const std::size_t rows = weight.size();
    const std::size_t cols = rows ? weight[0].size() : 0;
    for (const auto& r : weight)
        if (r.size() != cols) throw ConfigError("ragged weight matrix");
    out.row_to_col.assign(rows, -1);
    if (rows == 0 || cols == 0) return out;
    const bool transpose = rows > cols;
    const std::size_t n = transpose ? cols : rows;  // n <= m
    const std::size_t m = transpose ? rows : cols;
    double wmax = 0.0;
    for (const auto& r : weight)
        for (double w : r) wmax = std::max(wmax, w);
    auto cost = [&](std::size_t i, std::size_t j) {
        return wmax - (transpose ? weight[j - 1][i - 1] : weight[i - 1][j - 1]);
    };
    // Shortest augmenting path Hungarian method, 1-based with sentinel 0.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0, j) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] == 0) continue;
        const std::size_t i = p[j];
        if (transpose)
            out.row_to_col[j - 1] = static_cast<int>(i - 1);
        else
            out.row_to_col[i - 1] = static_cast<int>(j - 1);
    }
    for (std::size_t r = 0; r < rows; ++r)
        if (out.row_to_col[r] >= 0) out.total += weight[r][static_cast<std::size_t>(out.row_to_col[r])];
    return out;
}

// Token-overlap contingency between two labelings of the same tokens.
struct Contingency {
    std::vector<NodeId> true_ids;     // row labels, ascending
    std::vector<NodeId> learned_ids;  // column labels, ascending
    std::vector<std::vector<double>> counts;

    static Contingency build(const std::vector<NodeId>& truth, const std::vector<NodeId>& learned) {
        if (truth.size() != learned.size()) throw DataError("true and learned assignments differ in length");
        Contingency c;
        c.true_ids = truth;
        c.learned_ids = learned;
        for (auto* ids : {&c.true_ids, &c.learned_ids}) {
            std::sort(ids->begin(), ids->end());
            ids->erase(std::unique(ids->begin(), ids->end()), ids->end());
        }
        c.counts.assign(c.true_ids.size(), std::vector<double>(c.learned_ids.size(), 0.0));
        for (std::size_t t = 0; t < truth.size(); ++t) {
            const auto i = std::lower_bound(c.true_ids.begin(), c.true_ids.end(), truth[t]) - c.true_ids.begin();
            const auto j =
                std::lower_bound(c.learned_ids.begin(), c.learned_ids.end(), learned[t]) - c.learned_ids.begin();
            c.counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] += 1.0;
        }
        return c;
    }
};

struct TopicAccuracy {
    double accuracy = 0.0;
    std::map<NodeId, NodeId> alignment;  // true node -> learned node
};

inline TopicAccuracy topic_accuracy_from_counts(const std::vector<std::vector<double>>& counts, double total) {
    TopicAccuracy out;
    if (total <= 0.0) return out;
    out.accuracy = kuhn_munkres(counts).total / total;
    return out;
}

inline TopicAccuracy topic_accuracy(const std::vector<NodeId>& truth, const std::vector<NodeId>& learned) {
    const auto c = Contingency::build(truth, learned);
    TopicAccuracy out;
    if (truth.empty()) return out;
    const auto m = kuhn_munkres(c.counts);
    out.accuracy = m.total / static_cast<double>(truth.size());
    for (std::size_t i = 0; i < m.row_to_col.size(); ++i)
        if (m.row_to_col[i] >= 0) out.alignment[c.true_ids[i]] = c.learned_ids[static_cast<std::size_t>(m.row_to_col[i])];
    return out;
}

struct Coherence {
    double value = 0.0;
    bool partial = false;  // fewer than top_n terms carried positive weight
    std::size_t terms_used = 0;
};

// Sum over ordered pairs j < i of log((DF(v_i, v_j) + 1) / DF(v_j)) across
// the node's top terms by phi.
inline Coherence coherence(const Model& model, const Vocabulary& vocab, NodeId k, std::size_t top_n) {
    if (top_n < 2) throw ConfigError("coherence needs top_n >= 2");
    if (!model.tree.alive(k)) throw ConfigError("unknown topic node " + std::to_string(k));
    Coherence out;
    std::vector<TermId> top;
    for (TermId v : model.top_terms(k, model.vocab_size())) {
        if (top.size() == top_n) break;
        if (model.urn.weight_fixed(k, v) > 0 && vocab.document_frequency(v) > 0) top.push_back(v);
    }
    out.partial = top.size() < top_n;
    out.terms_used = top.size();
    for (std::size_t i = 1; i < top.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            out.value += std::log((static_cast<double>(vocab.co_document_frequency(top[i], top[j])) + 1.0) /
                                  static_cast<double>(vocab.document_frequency(top[j])));
    return out;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

// Mean parent-child cosine over mean parent-non-child cosine, between the
// second and third levels.
inline double hierarchical_affinity(const TopicTree& tree, const std::map<NodeId, std::vector<double>>& phi) {
    if (tree.depth() < 3) throw DataError("hierarchical affinity needs at least three levels");
    const auto parents = tree.nodes_at_level(1);
    const auto grandchildren = tree.nodes_at_level(2);
    if (parents.size() < 2 || grandchildren.empty())
        throw DataError("hierarchical affinity needs two second-level nodes and a third-level node");
    double child_sum = 0.0, other_sum = 0.0;
    std::size_t child_n = 0, other_n = 0;
    for (NodeId p : parents) {
        for (NodeId c : grandchildren) {
            const double cs = cosine(phi.at(p), phi.at(c));
            if (tree.parent(c) == p) {
                child_sum += cs;
                ++child_n;
            } else {
                other_sum += cs;
                ++other_n;
            }
        }
    }
    if (child_n == 0 || other_n == 0) throw DataError("hierarchical affinity needs both child and non-child pairs");
    return (child_sum / static_cast<double>(child_n)) / std::max(other_sum / static_cast<double>(other_n), 1e-12);
}

inline double hierarchical_affinity(const Model& model) {
    std::map<NodeId, std::vector<double>> phi;
    for (NodeId k : model.tree.live_nodes())
        if (model.tree.level(k) == 1 || model.tree.level(k) == 2) phi[k] = model.phi(k);
    return hierarchical_affinity(model.tree, phi);
}

struct HeldOutResult {
    double log_likelihood = 0.0;  // sum over sentences of log p-hat
    std::size_t tokens = 0;
    std::size_t dropped_tokens = 0;
    double per_word() const { return tokens ? log_likelihood / static_cast<double>(tokens) : 0.0; }
};

namespace detail {

struct LeafPath {
    std::vector<NodeId> nodes;
};

inline std::vector<LeafPath> existing_paths(const TopicTree& tree) {
    std::vector<LeafPath> out;
    for (const auto& p : enumerate_candidate_paths(tree))
        if (p.is_existing()) out.push_back({p.nodes});
    return out;
}

// Brand-specific prior over existing paths only, renormalized.
inline std::vector<double> existing_path_prior(const TopicTree& tree, const std::vector<LeafPath>& paths, BrandId b,
                                               double gamma) {
    std::vector<double> w;
    double z = 0.0;
    for (const auto& p : paths) {
        const double lp = path_log_prior(tree, b, TreePath{p.nodes}, gamma);
        w.push_back(std::exp(lp));
        z += w.back();
    }
    for (auto& x : w) x /= z;
    return w;
}

}  // namespace detail

// Re-expresses a corpus over the model's vocabulary and brand list by name.
// Unknown terms are dropped and counted; sentences and reviews left empty are
// dropped. Unknown brands are a data error.
inline Corpus align_to_model(const Corpus& c, const Model& model, std::size_t& dropped_tokens) {
    std::unordered_map<std::string, TermId> term_id;
    for (std::size_t v = 0; v < model.vocab_size(); ++v) term_id.emplace(model.vocabulary[v], static_cast<TermId>(v));
    std::unordered_map<std::string, BrandId> brand_id;
    for (std::size_t b = 0; b < model.num_brands(); ++b) brand_id.emplace(model.brands[b], static_cast<BrandId>(b));
    dropped_tokens = 0;
    std::vector<Review> out;
    for (const auto& r : c.reviews()) {
        const auto& name = c.brand_names()[static_cast<std::size_t>(r.brand)];
        auto b = brand_id.find(name);
        if (b == brand_id.end()) throw DataError("brand '" + name + "' is not in the model");
        Review nr{b->second, r.response, r.rating, {}};
        for (const auto& s : r.sentences) {
            Sentence ns;
            for (TermId v : s) {
                auto it = term_id.find(c.vocabulary().term(v));
                if (it == term_id.end()) {
                    ++dropped_tokens;
                } else {
                    ns.push_back(it->second);
                }
            }
            if (!ns.empty()) nr.sentences.push_back(std::move(ns));
        }
        if (!nr.sentences.empty()) out.push_back(std::move(nr));
    }
    if (out.empty()) throw DataError("no held-out tokens remain after vocabulary alignment");
    Provenance p = c.provenance();
    p.dropped_tokens += dropped_tokens;
    return Corpus(Vocabulary(model.vocabulary), model.brands, std::move(out), p);
}

// Importance-sampling estimate of the held-out word likelihood. Each
// sentence draws particles (path, levels) from the prior: the brand's path
// prior over existing paths and the sequential level prior. Particle weights
// are the block word likelihood under the fitted weights.
inline HeldOutResult held_out_likelihood(const Model& model, const Corpus& heldout, std::size_t num_particles,
                                         Rng& rng) {
    if (num_particles < 1) throw ConfigError("at least one particle is required");
    if (heldout.num_brands() != model.num_brands()) throw DataError("held-out corpus has a different brand count");
    if (heldout.vocab_size() != model.vocab_size()) throw DataError("held-out corpus has a different vocabulary");
    HeldOutResult out;
    const auto paths = detail::existing_paths(model.tree);
    const auto L = static_cast<std::size_t>(model.tree.depth());
    const double alpha = model.config.alpha;
    std::vector<std::vector<double>> prior_of_brand(model.num_brands());
    for (std::size_t b = 0; b < model.num_brands(); ++b)
        prior_of_brand[b] = detail::existing_path_prior(model.tree, paths, static_cast<BrandId>(b), model.config.gamma);

    std::vector<std::vector<TermId>> groups(L);
    std::vector<int> counts(L);
    std::vector<double> level_w(L);
    std::vector<double> logw(num_particles);
    for (const auto& r : heldout.reviews()) {
        const auto& prior = prior_of_brand[static_cast<std::size_t>(r.brand)];
        for (const auto& sent : r.sentences) {
            if (sent.empty()) continue;
            for (std::size_t p = 0; p < num_particles; ++p) {
                const auto& path = paths[rng.categorical(prior)].nodes;
                for (auto& g : groups) g.clear();
                std::fill(counts.begin(), counts.end(), 0);
                for (TermId v : sent) {
                    for (std::size_t l = 0; l < L; ++l) level_w[l] = counts[l] + alpha;
                    const std::size_t l = rng.categorical(level_w);
                    ++counts[l];
                    groups[l].push_back(v);
                }
                double lw = 0.0;
                for (std::size_t l = 0; l < L; ++l)
                    lw += block_log_likelihood(model.urn, path[l], groups[l], model.config.eta,
                                               model.config.sequential_block);
                logw[p] = lw;
            }
            const double mx = *std::max_element(logw.begin(), logw.end());
            double s = 0.0;
            for (double lw : logw) s += std::exp(lw - mx);
            out.log_likelihood += mx + std::log(s / static_cast<double>(num_particles));
            out.tokens += sent.size();
        }
    }
    return out;
}

struct LeafMetrics {
    NodeId true_leaf = 0;
    NodeId learned_leaf = kNoParent;  // kNoParent when unmatched
    double spearman = 0.0;
    double kendall = 0.0;
    double ap_at_k = 0.0;
};

struct Summary {
    double mean = 0.0;
    double stderr_ = 0.0;
    std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& xs) {
    Summary s;
    s.n = xs.size();
    if (xs.empty()) return s;
    s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        s.stderr_ = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
    }
    return s;
}

struct MetricsReport {
    std::string scenario;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<LeafMetrics> leaves;
    std::size_t missing_leaves = 0;
    Summary spearman, kendall, ap_at_k;
    std::size_t ap_k = 5;
    double topic_accuracy = 0.0;
    double mean_coherence = 0.0;
    std::size_t coherence_partial = 0;
    std::optional<double> hierarchical_affinity;
    std::optional<double> held_out_per_word;
};

struct ReportOptions {
    std::size_t ap_k = 5;
    std::size_t coherence_top_n = 5;
    std::size_t particles = 2000;
    std::string scenario;
};

// FNV-1a over the config's JSON text; stable across platforms.
inline std::string config_hash(const FitConfig& c) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : to_json(c).dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

// Full metric set for a model fitted on a corpus drawn from `truth`.
inline MetricsReport multi_aspect_report(const Model& model, const Corpus& corpus, const GroundTruth& truth,
                                         const ReportOptions& opts = {}, const Corpus* heldout = nullptr,
                                         Rng* heldout_rng = nullptr) {
    if (!model.assignments) throw DataError("model carries no assignments");
    Assignments a = *model.assignments;
    fill_token_topics(a, corpus);
    if (a.topics.size() != truth.token_topics.size()) throw DataError("truth does not match the corpus");

    MetricsReport rep;
    rep.scenario = opts.scenario;
    rep.seed = model.config.seed;
    rep.config_hash = config_hash(model.config);
    rep.ap_k = opts.ap_k;

    const auto c = Contingency::build(truth.token_topics, a.topics);
    rep.topic_accuracy = kuhn_munkres(c.counts).total / static_cast<double>(a.topics.size());

    // Leaf alignment on the leaf-by-leaf block of the same contingency.
    const auto learned_leaves = model.leaves();
    std::vector<std::size_t> rows, cols;
    for (NodeId tl : truth.leaves) {
        auto it = std::lower_bound(c.true_ids.begin(), c.true_ids.end(), tl);
        rows.push_back(it != c.true_ids.end() && *it == tl ? static_cast<std::size_t>(it - c.true_ids.begin())
                                                             : c.true_ids.size());
    }
    for (NodeId ll : learned_leaves) {
        auto it = std::lower_bound(c.learned_ids.begin(), c.learned_ids.end(), ll);
        cols.push_back(it != c.learned_ids.end() && *it == ll ? static_cast<std::size_t>(it - c.learned_ids.begin())
                                                                : c.learned_ids.size());
    }
    std::vector<std::vector<double>> block(rows.size(), std::vector<double>(cols.size(), 0.0));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j)
            if (rows[i] < c.true_ids.size() && cols[j] < c.learned_ids.size()) block[i][j] = c.counts[rows[i]][cols[j]];
    const auto match = kuhn_munkres(block);

    std::vector<double> sp, kt, ap;
    for (std::size_t i = 0; i < truth.leaves.size(); ++i) {
        LeafMetrics lm;
        lm.true_leaf = truth.leaves[i];
        if (match.row_to_col.empty() || match.row_to_col[i] < 0) {
            ++rep.missing_leaves;
            rep.leaves.push_back(lm);
            continue;
        }
        lm.learned_leaf = learned_leaves[static_cast<std::size_t>(match.row_to_col[i])];
        const auto tr = rank_brands(truth, lm.true_leaf);
        const auto lr = rank_brands(model, lm.learned_leaf);
        lm.spearman = spearman(lr.positions(), tr.positions());
        lm.kendall = kendall_tau(lr.positions(), tr.positions());
        auto rel = tr.order();
        rel.resize(std::min(opts.ap_k, rel.size()));
        lm.ap_at_k = average_precision_at_k(lr.order(), rel, opts.ap_k);
        sp.push_back(lm.spearman);
        kt.push_back(lm.kendall);
        ap.push_back(lm.ap_at_k);
        rep.leaves.push_back(lm);
    }
    rep.spearman = summarize(sp);
    rep.kendall = summarize(kt);
    rep.ap_at_k = summarize(ap);

    double coh = 0.0;
    std::size_t coh_n = 0;
    for (NodeId k : model.tree.live_nodes()) {
        const auto ch = coherence(model, corpus.vocabulary(), k, opts.coherence_top_n);
        if (ch.partial) ++rep.coherence_partial;
        coh += ch.value;
        ++coh_n;
    }
    rep.mean_coherence = coh_n ? coh / static_cast<double>(coh_n) : 0.0;

    try {
        rep.hierarchical_affinity = hierarchical_affinity(model);
    } catch (const DataError& e) {
        log::warn("hierarchical affinity unavailable: ", e.what());
    }
    if (heldout != nullptr) {
        Rng fallback(model.config.seed, stream::heldout);
        Rng& rng = heldout_rng ? *heldout_rng : fallback;
        rep.held_out_per_word = held_out_likelihood(model, *heldout, opts.particles, rng).per_word();
    }
    return rep;
}

inline nlohmann::json to_json(const Summary& s) { return {{"mean", s.mean}, {"stderr", s.stderr_}, {"n", s.n}}; }

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["format"] = "mhstm-report";
    j["version"] = 1;
    j["scenario"] = r.scenario;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    auto& jl = j["leaves"] = nlohmann::json::array();
    for (const auto& l : r.leaves)
        jl.push_back({{"true_leaf", l.true_leaf},
                      {"learned_leaf", l.learned_leaf == kNoParent ? nlohmann::json() : nlohmann::json(l.learned_leaf)},
                      {"spearman", l.spearman},
                      {"kendall", l.kendall},
                      {"ap_at_k", l.ap_at_k}});
    j["missing_leaves"] = r.missing_leaves;
    j["spearman"] = to_json(r.spearman);
    j["kendall"] = to_json(r.kendall);
    j["ap_at_k"] = to_json(r.ap_at_k);
    j["ap_k"] = r.ap_k;
    j["topic_accuracy"] = r.topic_accuracy;
    j["coherence"] = r.mean_coherence;
    j["coherence_partial_nodes"] = r.coherence_partial;
    j["hierarchical_affinity"] = r.hierarchical_affinity ? nlohmann::json(*r.hierarchical_affinity) : nlohmann::json();
    j["held_out_per_word"] = r.held_out_per_word ? nlohmann::json(*r.held_out_per_word) : nlohmann::json();
    return j;
}

// One row per scenario x seed x metric.
inline std::string to_csv(const std::vector<MetricsReport>& reports, bool header = true) {
    std::ostringstream os;
    os.precision(17);
    if (header) os << "scenario,seed,metric,value\n";
    for (const auto& r : reports) {
        auto row = [&](const char* name, double v) { os << r.scenario << ',' << r.seed << ',' << name << ',' << v << '\n'; };
        row("spearman", r.spearman.mean);
        row("kendall", r.kendall.mean);
        row("ap_at_k", r.ap_at_k.mean);
        row("topic_accuracy", r.topic_accuracy);
        row("coherence", r.mean_coherence);
        if (r.hierarchical_affinity) row("hierarchical_affinity", *r.hierarchical_affinity);
        if (r.held_out_per_word) row("held_out_per_word", *r.held_out_per_word);
        row("missing_leaves", static_cast<double>(r.missing_leaves));
    }
    return os.str();
}

struct GridPoint {
    double gamma = 0.0;
    double alpha = 0.0;
    double held_out_per_word = 0.0;
};

// Fits every (gamma, alpha) pair and scores it by held-out likelihood.
// Returns all points, best first.
inline std::vector<GridPoint> grid_search(const Corpus& train, const Corpus& heldout, FitConfig base,
                                          const std::vector<double>& gammas, const std::vector<double>& alphas,
                                          std::size_t particles = 2000) {
    std::vector<GridPoint> out;
    for (double g : gammas) {
        for (double a : alphas) {
            FitConfig c = base;
            c.gamma = g;
            c.alpha = a;
            const Model m = run_stochastic_em(train, c, false);
            Rng rng(c.seed, stream::heldout);
            out.push_back({g, a, held_out_likelihood(m, heldout, particles, rng).per_word()});
        }
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const GridPoint& x, const GridPoint& y) { return x.held_out_per_word > y.held_out_per_word; });
    return out;
}

}  // namespace mhstm
