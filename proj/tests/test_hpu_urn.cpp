#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mhstm/hpu_urn.hpp"
#include "urn_fuzz.hpp"

using namespace mhstm;

namespace {

// Independent entropy-ratio oracle.
double oracle_weight(const std::vector<double>& totals, const std::vector<double>& counts) {
    auto H = [](const std::vector<double>& x) {
        double s = 0.0;
        for (double c : x) s += c;
        if (s <= 0.0) return 0.0;
        double h = 0.0;
        for (double c : x)
            if (c > 0.0) h += -(c / s) * std::log(c / s);
        return h;
    };
    double n = 0.0;
    for (double c : counts) n += c;
    if (H(totals) <= 0.0 || n <= 0.0) return 1.0;
    return std::min(H(counts) / H(totals), 1.0);
}

}  // namespace

TEST(AdditionWeight, EqualSpreadIsOne) {
    const std::vector<double> t{10, 10}, c{5, 5};
    EXPECT_DOUBLE_EQ(entropy_addition_weight(t, c), 1.0);
}

TEST(AdditionWeight, SingleChildTermIsZero) {
    const std::vector<double> t{10, 10}, c{8, 0};
    EXPECT_DOUBLE_EQ(entropy_addition_weight(t, c), 0.0);
}

TEST(AdditionWeight, HandComputedRatio) {
    const std::vector<double> t{10, 10}, c{3, 1};
    EXPECT_NEAR(count_entropy(c), 0.562335, 1e-6);
    EXPECT_NEAR(count_entropy(t), 0.693147, 1e-6);
    EXPECT_NEAR(entropy_addition_weight(t, c), 0.8113, 1e-4);
}

TEST(AdditionWeight, DegenerateCasesMapToOne) {
    const std::vector<double> one_child{5}, c{5};
    EXPECT_DOUBLE_EQ(entropy_addition_weight(one_child, c), 1.0);
    const std::vector<double> t{3, 4}, none{0, 0};
    EXPECT_DOUBLE_EQ(entropy_addition_weight(t, none), 1.0);
}

TEST(AdditionMatrix, InitiallyZero) {
    TopicTree tree(2, 1);
    const NodeId c = tree.create_child(0);
    UrnState urn(3);
    EXPECT_FALSE(urn.addition_matrix_computed());
    urn.apply_token(tree, c, 1);
    EXPECT_EQ(urn.addition_weight_fixed(0, 1), 0);
    EXPECT_EQ(urn.weight_fixed(0, 1), 0);
}

TEST(AdditionMatrix, RecomputedFromChildCounts) {
    TopicTree tree(2, 1);
    const NodeId a = tree.create_child(0), b = tree.create_child(0);
    UrnState urn(3);
    // child totals (10, 10); term 0 counts (3, 1); term 1 only in a
    for (int i = 0; i < 3; ++i) urn.apply_token(tree, a, 0);
    urn.apply_token(tree, b, 0);
    for (int i = 0; i < 7; ++i) urn.apply_token(tree, a, 1);
    for (int i = 0; i < 9; ++i) urn.apply_token(tree, b, 2);
    urn.recompute_addition_matrix(tree);
    EXPECT_NEAR(urn.addition_weight(0, 0), 0.8113, 1e-4);
    EXPECT_EQ(urn.addition_weight(0, 1), 0.0);
    EXPECT_EQ(urn.addition_weight(0, 2), 0.0);
    EXPECT_THROW(addition_weight(urn, tree, a, 0), InvariantError);
}

TEST(AdditionMatrix, UnseenTermDefaultsToOne) {
    TopicTree tree(2, 1);
    const NodeId a = tree.create_child(0), b = tree.create_child(0);
    UrnState urn(4);
    urn.apply_token(tree, a, 0);
    urn.apply_token(tree, b, 1);
    urn.recompute_addition_matrix(tree);
    EXPECT_DOUBLE_EQ(urn.addition_weight(0, 3), 1.0);
}

TEST(AdditionMatrix, MatchesBruteForceOnRandomStates) {
    std::mt19937_64 g(4);
    for (int trial = 0; trial < 30; ++trial) {
        const auto tree = test_support::random_full_tree(3, 4, g);
        const std::size_t V = 6;
        UrnState urn(V);
        const auto nodes = tree.live_nodes();
        for (int i = 0; i < 300; ++i) urn.apply_token(tree, nodes[g() % nodes.size()], static_cast<TermId>(g() % V));
        urn.recompute_addition_matrix(tree);
        for (NodeId k : nodes) {
            if (tree.is_leaf_level(k)) continue;
            const auto& ch = tree.node(k).children;
            std::vector<double> totals;
            for (NodeId c : ch) totals.push_back(static_cast<double>(urn.raw_total(c)));
            for (std::size_t v = 0; v < V; ++v) {
                std::vector<double> counts;
                for (NodeId c : ch) counts.push_back(urn.raw_count(c, static_cast<TermId>(v)));
                const double a = urn.addition_weight(k, static_cast<TermId>(v));
                EXPECT_NEAR(a, oracle_weight(totals, counts), 1e-9);
                EXPECT_GE(a, 0.0);
                EXPECT_LE(a, 1.0);
            }
        }
    }
}

TEST(ApplyToken, RootHasNoAncestors) {
    TopicTree tree(2, 1);
    tree.create_child(0);
    UrnState urn(3);
    const auto rec = urn.apply_token(tree, 0, 2);
    EXPECT_TRUE(rec.ancestor_weights.empty());
    EXPECT_EQ(urn.raw_count(0, 2), 1);
    EXPECT_DOUBLE_EQ(urn.weight(0, 2), 1.0);
    EXPECT_DOUBLE_EQ(urn.total_weight(0), 1.0);
}

TEST(ApplyToken, AncestorReceivesAdditionWeight) {
    TopicTree tree(2, 1);
    const NodeId leaf = tree.create_child(0);
    UrnState urn(3);
    urn.set_addition_weight(0, 1, 0.5);
    urn.apply_token(tree, leaf, 1);
    EXPECT_DOUBLE_EQ(urn.weight(leaf, 1), 1.0);
    EXPECT_DOUBLE_EQ(urn.weight(0, 1), 0.5);
    EXPECT_EQ(urn.raw_count(0, 1), 0);
}

TEST(ApplyToken, ExactReversalAcrossRecompute) {
    std::mt19937_64 g(8);
    const auto tree = test_support::random_full_tree(3, 3, g);
    const auto nodes = tree.live_nodes();
    UrnState urn(5);
    for (int i = 0; i < 200; ++i) urn.apply_token(tree, nodes[g() % nodes.size()], static_cast<TermId>(g() % 5));
    urn.recompute_addition_matrix(tree);
    std::vector<std::vector<Weight>> before;
    for (NodeId k : nodes) {
        before.emplace_back();
        for (TermId v = 0; v < 5; ++v) before.back().push_back(urn.weight_fixed(k, v));
    }
    const auto rec = urn.apply_token(tree, nodes.back(), 3);
    urn.recompute_addition_matrix(tree);
    urn.retract_token(tree, rec);
    for (std::size_t i = 0; i < nodes.size(); ++i)
        for (TermId v = 0; v < 5; ++v) EXPECT_EQ(urn.weight_fixed(nodes[i], v), before[i][static_cast<std::size_t>(v)]);
}

TEST(ApplyToken, CorruptRecordDetected) {
    TopicTree tree(2, 1);
    const NodeId leaf = tree.create_child(0);
    UrnState urn(2);
    urn.set_addition_weight(0, 0, 0.25);
    auto rec = urn.apply_token(tree, leaf, 0);
    rec.ancestor_weights[0] = kWeightOne;
    EXPECT_THROW(urn.retract_token(tree, rec), InvariantError);
}

TEST(Predictive, UniformWhenEmpty) {
    TopicTree tree(2, 1);
    UrnState urn(4);
    for (TermId v = 0; v < 4; ++v) EXPECT_DOUBLE_EQ(predictive_word_prob(urn, {0.1, 4}, 0, v), 0.25);
}

TEST(Predictive, HandComputed) {
    TopicTree tree(2, 1);
    UrnState urn(3);
    urn.apply_token(tree, 0, 0);
    urn.apply_token(tree, 0, 0);
    urn.apply_token(tree, 0, 2);
    EXPECT_NEAR(predictive_word_prob(urn, {0.1, 3}, 0, 0), 2.1 / 3.3, 1e-12);
    EXPECT_NEAR(predictive_word_prob(urn, {0.1, 3}, 0, 1), 0.1 / 3.3, 1e-12);
    EXPECT_NEAR(predictive_word_prob(urn, {0.1, 3}, 0, 2), 1.1 / 3.3, 1e-12);
    EXPECT_NEAR(predictive_word_prob(urn, {0.1, 3}, 0, 0), 0.6364, 1e-4);
    EXPECT_THROW(predictive_word_prob(urn, {0.0, 3}, 0, 0), ConfigError);
}

TEST(Predictive, SumsToOneAndMatchesDistribution) {
    std::mt19937_64 g(10);
    const auto tree = test_support::random_full_tree(3, 3, g);
    const auto nodes = tree.live_nodes();
    UrnState urn(7);
    for (int i = 0; i < 100; ++i) urn.apply_token(tree, nodes[g() % nodes.size()], static_cast<TermId>(g() % 7));
    urn.recompute_addition_matrix(tree);
    for (int i = 0; i < 100; ++i) urn.apply_token(tree, nodes[g() % nodes.size()], static_cast<TermId>(g() % 7));
    for (NodeId k : nodes) {
        const auto phi = topic_word_distribution(urn, {0.3, 7}, k);
        double s = 0.0;
        for (TermId v = 0; v < 7; ++v) {
            EXPECT_DOUBLE_EQ(phi[static_cast<std::size_t>(v)], predictive_word_prob(urn, {0.3, 7}, k, v));
            s += phi[static_cast<std::size_t>(v)];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Predictive, SmallEtaConcentrates) {
    TopicTree tree(2, 1);
    UrnState urn(5);
    urn.apply_token(tree, 0, 3);
    EXPECT_GT(urn.topic_word_distribution(0, 1e-9)[3], 1.0 - 1e-7);
}

TEST(UrnInvariants, RandomizedOperationsAudit) {
    const auto r = test_support::fuzz_urn(50000, 123, 500);
    EXPECT_EQ(r.violations, 0u) << r.first_violation;
    EXPECT_GT(r.audits, 0u);
}

TEST(UrnInvariants, SpuReductionWithZeroAdditionMatrix) {
    const auto r = test_support::fuzz_spu_reduction(20000, 5);
    EXPECT_EQ(r.violations, 0u) << r.first_violation;
}

TEST(UrnInvariants, SubtreeScopeMatchesOracle) {
    TopicTree tree(3, 1);
    const NodeId a = tree.create_child(0), b = tree.create_child(0);
    const NodeId a1 = tree.create_child(a);
    UrnState urn(2, AdditionCounts::ChildSubtrees);
    for (int i = 0; i < 3; ++i) urn.apply_token(tree, a1, 0);
    urn.apply_token(tree, b, 0);
    urn.apply_token(tree, b, 1);
    urn.recompute_addition_matrix(tree);
    EXPECT_NEAR(urn.addition_weight(0, 0), oracle_weight({3, 2}, {3, 1}), 1e-9);
}
