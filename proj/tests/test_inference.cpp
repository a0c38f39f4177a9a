#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <random>

#include "mhstm/inference.hpp"
#include "mhstm/synthetic.hpp"
#include "toy_oracles.hpp"

using namespace mhstm;
using test_support::SamplerToy;

namespace {

Corpus make_corpus(std::size_t V, std::vector<std::string> brands, std::vector<Review> reviews) {
    std::vector<std::string> terms;
    for (std::size_t v = 0; v < V; ++v) terms.push_back("t" + std::to_string(v));
    return Corpus(Vocabulary(terms), std::move(brands), std::move(reviews));
}

FitConfig cfg(int depth) {
    FitConfig c;
    c.depth = depth;
    return c;
}

std::pair<Corpus, GroundTruth> small_scenario(std::uint64_t seed) {
    HierarchySpec s;
    s.hierarchy = "2(2,2)";
    s.vocab_size = 30;
    s.num_brands = 3;
    s.docs_per_brand = 15;
    s.sentences_per_doc = 3;
    s.mean_sentence_length = 6;
    return generate_scenario(s, seed);
}

std::vector<double> normalize_log(const std::vector<double>& lw) {
    const double mx = *std::max_element(lw.begin(), lw.end());
    std::vector<double> p;
    double z = 0.0;
    for (double x : lw) {
        p.push_back(std::exp(x - mx));
        z += p.back();
    }
    for (auto& x : p) x /= z;
    return p;
}

}  // namespace

TEST(TopicProportions, AllAtRoot) {
    const auto c = make_corpus(3, {"x"}, {Review{0, 0.5, 0, {std::vector<TermId>(10, 1)}}});
    GibbsState st(c, cfg(2));
    st.initialize_from_labels({{0}}, std::vector<int>(10, 0));
    const auto x = empirical_topic_proportions(st, 0);
    ASSERT_EQ(x.size(), 1u);
    EXPECT_EQ(x[0].first, 0);
    EXPECT_DOUBLE_EQ(x[0].second, 1.0);
}

TEST(TopicProportions, FractionAtNode) {
    const auto c = make_corpus(3, {"x"}, {Review{0, 0.5, 0, {std::vector<TermId>(10, 1)}}});
    GibbsState st(c, cfg(2));
    st.initialize_from_labels({{0}}, {1, 1, 1, 1, 0, 0, 0, 0, 0, 0});
    const auto x = empirical_topic_proportions(st, 0);
    ASSERT_EQ(x.size(), 2u);
    EXPECT_DOUBLE_EQ(x[1].second, 0.4);
}

TEST(TopicProportions, SumToOne) {
    const auto [c, truth] = small_scenario(3);
    GibbsState st(c, cfg(3));
    Rng rng(1, stream::sampler);
    st.initialize(rng);
    st.sweep_paths(rng);
    st.sweep_levels(rng);
    for (std::size_t d = 0; d < c.size(); ++d) {
        double s = 0.0;
        for (auto [k, x] : st.topic_proportions(d)) s += x;
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(ResponseDensity, AtTheMode) {
    EXPECT_NEAR(response_log_density(0.4, 0.4, 0.5), -0.5 * std::log(2.0 * std::numbers::pi * 0.5), 1e-15);
    EXPECT_NEAR(response_log_density(0.4, 0.4, 0.5), -0.572365, 1e-6);
    const std::vector<double> x{0.5, 0.5}, b{0.2, 0.6};
    EXPECT_NEAR(response_log_density(0.4, x, b, 0.5), -0.572365, 1e-6);
}

TEST(ResponseDensity, DecreasesWithResidual) {
    double prev = response_log_density(0.5, 0.5, 0.5);
    for (double r = 0.05; r < 2.0; r += 0.05) {
        const double cur = response_log_density(0.5 + r, 0.5, 0.5);
        EXPECT_LT(cur, prev);
        EXPECT_DOUBLE_EQ(cur, response_log_density(0.5 - r, 0.5, 0.5));
        prev = cur;
    }
}

TEST(ResponseDensity, DoublingVariance) {
    EXPECT_NEAR(response_log_density(0.3, 0.3, 0.5) - response_log_density(0.3, 0.3, 1.0), 0.5 * std::log(2.0),
                1e-15);
}

TEST(BlockLikelihood, SequentialAndPlain) {
    TopicTree tree(2, 1);
    UrnState urn(3);
    urn.apply_token(tree, 0, 0);
    const std::vector<TermId> terms{0, 0, 2};
    const double eta = 0.5;
    const double seq = std::log((1 + eta) / (1 + 1.5)) + std::log((2 + eta) / (2 + 1.5)) + std::log((0 + eta) / (3 + 1.5));
    const double plain = 2 * std::log((1 + eta) / (1 + 1.5)) + std::log((0 + eta) / (1 + 1.5));
    EXPECT_NEAR(block_log_likelihood(urn, 0, terms, eta, true), seq, 1e-12);
    EXPECT_NEAR(block_log_likelihood(urn, 0, terms, eta, false), plain, 1e-12);
}

TEST(SamplePath, DegenerateSingleCandidate) {
    const auto c = make_corpus(3, {"x"}, {Review{0, 0.5, 0, {{0, 1}}}, Review{0, 0.5, 0, {{1, 2}}}});
    auto config = cfg(2);
    config.gamma = 1e-300;
    GibbsState st(c, config);
    st.initialize_from_labels({{0}, {0}}, {1, 1, 1, 1});
    Rng rng(2, stream::sampler);
    const NodeId leaf = st.path(0).nodes[1];
    for (int i = 0; i < 2000; ++i) EXPECT_EQ(st.sample_path(0, rng).nodes[1], leaf);
}

TEST(SamplePath, ScoresMatchEnumeration) {
    for (double a : {0.0, 0.5}) {
        SamplerToy toy(a);
        toy.state->detach_sentence(0);
        const auto& cands = toy.state->path_candidates(0);
        ASSERT_EQ(cands.size(), 3u);
        std::vector<double> lw(3);
        for (const auto& cd : cands) lw[cd.branch ? 2 : (cd.node == toy.A ? 0 : 1)] = cd.log_score;
        const auto p = normalize_log(lw);
        const auto exact = toy.exact_path_distribution();
        for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[static_cast<std::size_t>(i)], exact[static_cast<std::size_t>(i)], 1e-12);
    }
}

TEST(SamplePath, EmpiricalFrequenciesMatchEnumeration) {
    SamplerToy toy;
    Rng rng(7, stream::sampler);
    const std::size_t n = 100000;
    std::vector<std::size_t> counts(3, 0);
    for (std::size_t i = 0; i < n; ++i) {
        toy.state->sample_path(0, rng);
        ++counts[static_cast<std::size_t>(toy.path_outcome())];
    }
    const auto exact = toy.exact_path_distribution();
    double z = 0.0;
    EXPECT_TRUE(test_support::within_three_sigma(exact, counts, n, &z)) << "worst z " << z;
    for (int i = 0; i < 3; ++i)
        EXPECT_NEAR(static_cast<double>(counts[static_cast<std::size_t>(i)]) / n, exact[static_cast<std::size_t>(i)], 0.01);
}

TEST(SamplePath, ZeroBetaLeavesPriorTimesLikelihood) {
    SamplerToy toy;
    toy.state->set_beta(0, toy.A, 0.0);
    toy.state->set_beta(0, toy.B, 0.0);
    toy.state->detach_sentence(0);
    const auto& cands = toy.state->path_candidates(0);
    std::vector<double> lw(3);
    for (const auto& cd : cands) lw[cd.branch ? 2 : (cd.node == toy.A ? 0 : 1)] = cd.log_score;
    // Prior x word likelihood only: leaves (2/6, 3/6), new 1/6.
    const double eta = 0.1, V = 4;
    auto word = [&](double w, double t) { return (w + eta) / (t + V * eta) * (w + 1 + eta) / (t + 1 + V * eta); };
    const auto p = normalize_log(lw);
    std::vector<double> q = {2.0 / 6 * word(2, 3), 3.0 / 6 * word(0, 4), 1.0 / 6 * word(0, 0)};
    const double z = q[0] + q[1] + q[2];
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[static_cast<std::size_t>(i)], q[static_cast<std::size_t>(i)] / z, 1e-12);
}

TEST(SampleLevel, PriorCountsWithFlatLikelihood) {
    // Sentence 0: token of term 2 plus three term-0 tokens at levels (0, 0, 1).
    // Sentence 1 on the same path pads totals to 2 per node with term 1.
    const auto c = make_corpus(3, {"x"}, {Review{0, 0.5, 0, {{2, 0, 0, 0}, {1, 1, 1}}}});
    GibbsState st(c, cfg(3));
    st.initialize_from_labels({{0, 0}, {0, 0}}, {0, 0, 0, 1, 1, 2, 2});
    st.retract_token(0);
    const auto p = normalize_log(st.level_log_scores(0));
    EXPECT_NEAR(p[0], 0.5, 1e-12);
    EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(p[2], 1.0 / 6.0, 1e-12);
}

TEST(SampleLevel, SymmetricCaseIsUniform) {
    const auto c = make_corpus(3, {"x"}, {Review{0, 0.5, 0, {{2, 0, 0, 0}}}});
    GibbsState st(c, cfg(3));
    st.initialize_from_labels({{0, 0}}, {0, 0, 1, 2});
    st.retract_token(0);
    const auto p = normalize_log(st.level_log_scores(0));
    for (double x : p) EXPECT_NEAR(x, 1.0 / 3.0, 1e-12);
}

TEST(SampleLevel, EmpiricalFrequenciesMatchEnumeration) {
    for (double a : {0.0, 0.5}) {
        SamplerToy toy(a);
        Rng rng(11, stream::sampler);
        const std::size_t n = 100000;
        std::vector<std::size_t> counts(2, 0);
        for (std::size_t i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(toy.state->sample_level(0, rng))];
        const auto exact = toy.exact_level_distribution();
        double z = 0.0;
        EXPECT_TRUE(test_support::within_three_sigma(exact, counts, n, &z)) << "a=" << a << " worst z " << z;
        EXPECT_NEAR(static_cast<double>(counts[0]) / n, exact[0], 0.01);
    }
}

TEST(ExchangeTest, LevelChainMatchesExactPosterior) {
    // One path (root + leaf), V = 2, two sentences of two tokens, beta = 0.
    // The level chain's stationary law is proportional to the product of the
    // per-sentence level Polya prior and the per-node Dirichlet-multinomial.
    const auto c = make_corpus(2, {"x"}, {Review{0, 0.5, 0, {{0, 1}, {0, 0}}}});
    auto config = cfg(2);
    config.alpha = 0.7;
    config.eta = 0.3;
    GibbsState st(c, config);
    st.initialize_from_labels({{0}, {0}}, {0, 0, 0, 0});
    const std::vector<TermId> terms{0, 1, 0, 0};

    auto dcm = [&](const std::vector<TermId>& ws) {
        double p = 1.0, n0 = 0, n1 = 0;
        for (TermId w : ws) {
            const double nw = w == 0 ? n0 : n1;
            p *= (nw + config.eta) / (n0 + n1 + 2 * config.eta);
            (w == 0 ? n0 : n1) += 1;
        }
        return p;
    };
    auto polya = [&](int l0, int l1) {
        double p = 1.0, c0 = 0, c1 = 0;
        for (int l : {l0, l1}) {
            p *= ((l ? c1 : c0) + config.alpha) / (c0 + c1 + 2 * config.alpha);
            (l ? c1 : c0) += 1;
        }
        return p;
    };
    std::vector<double> exact(16);
    for (int m = 0; m < 16; ++m) {
        std::vector<TermId> g0, g1;
        for (int t = 0; t < 4; ++t) ((m >> t) & 1 ? g1 : g0).push_back(terms[static_cast<std::size_t>(t)]);
        exact[static_cast<std::size_t>(m)] = polya(m & 1, (m >> 1) & 1) * polya((m >> 2) & 1, (m >> 3) & 1) * dcm(g0) * dcm(g1);
    }
    const double z = std::accumulate(exact.begin(), exact.end(), 0.0);
    for (auto& x : exact) x /= z;

    Rng rng(5, stream::sampler);
    const std::size_t n = 100000;
    std::vector<std::size_t> counts(16, 0);
    for (int burn = 0; burn < 100; ++burn) st.sweep_levels(rng);
    for (std::size_t i = 0; i < n; ++i) {
        for (int thin = 0; thin < 5; ++thin) st.sweep_levels(rng);
        int m = 0;
        for (std::size_t t = 0; t < 4; ++t) m |= st.level(t) << t;
        ++counts[static_cast<std::size_t>(m)];
    }
    double worst = 0.0;
    EXPECT_TRUE(test_support::within_three_sigma(exact, counts, n, &worst)) << "worst z " << worst;
}

TEST(OptimizeBeta, OrthogonalDesign) {
    const auto c = make_corpus(2, {"x"}, {Review{0, 0.3, 0, {{0}}}, Review{0, 0.7, 0, {{1}}}});
    auto config = cfg(2);
    config.ridge = 0.0;
    GibbsState st(c, config);
    st.initialize_from_labels({{0}, {1}}, {1, 1});
    st.fit_beta({0, 1, 2}, {{{1, 1.0}}, {{2, 1.0}}});
    EXPECT_NEAR(st.beta(0, 1), 0.3, 1e-12);
    EXPECT_NEAR(st.beta(0, 2), 0.7, 1e-12);
    EXPECT_EQ(st.beta(0, 0), 0.0);
}

TEST(OptimizeBeta, TwoByTwoSystem) {
    const auto c = make_corpus(2, {"x"}, {Review{0, 0.5, 0, {{0}}}, Review{0, 0.4, 0, {{1}}}});
    auto config = cfg(2);
    config.ridge = 0.0;
    GibbsState st(c, config);
    st.initialize_from_labels({{0}, {1}}, {1, 1});
    st.fit_beta({0, 1, 2}, {{{1, 0.5}, {2, 0.5}}, {{1, 1.0}}});
    EXPECT_NEAR(st.beta(0, 1), 0.4, 1e-12);
    EXPECT_NEAR(st.beta(0, 2), 0.6, 1e-12);
}

TEST(OptimizeBeta, UnvisitedNodeIsZero) {
    const auto c = make_corpus(2, {"x", "y"}, {Review{0, 0.5, 0, {{0}}}, Review{1, 0.4, 0, {{1}}}});
    GibbsState st(c, cfg(2));
    st.initialize_from_labels({{0}, {1}}, {1, 1});
    st.optimize_beta();
    EXPECT_EQ(st.beta(0, 2), 0.0);
    EXPECT_EQ(st.beta(1, 1), 0.0);
    EXPECT_NEAR(st.beta(0, 1), 0.5, 1e-5);
}

TEST(OptimizeBeta, ShiftInvariance) {
    std::mt19937_64 g(31);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Review> reviews, shifted;
        std::vector<std::vector<std::pair<NodeId, double>>> xs;
        const double shift = 0.1 + 0.2 * u(g);
        for (int d = 0; d < 12; ++d) {
            const double y = 0.5 * u(g);
            reviews.push_back(Review{0, y, 0, {{0}}});
            shifted.push_back(Review{0, y + shift, 0, {{0}}});
            double a = u(g), b = u(g), cc = u(g);
            const double s = a + b + cc;
            xs.push_back({{1, a / s}, {2, b / s}, {3, cc / s}});
        }
        auto fit = [&](const std::vector<Review>& rv) {
            const auto c = make_corpus(1, {"x"}, rv);
            auto config = cfg(2);
            config.ridge = 0.0;
            GibbsState st(c, config);
            std::vector<std::vector<int>> labels(rv.size(), std::vector<int>{0});
            labels[1] = {1};
            labels[2] = {2};
            st.initialize_from_labels(labels, std::vector<int>(rv.size(), 1));
            st.fit_beta({0, 1, 2, 3}, xs);
            return std::vector<double>{st.beta(0, 1), st.beta(0, 2), st.beta(0, 3)};
        };
        const auto b0 = fit(reviews), b1 = fit(shifted);
        for (int k = 0; k < 3; ++k) EXPECT_NEAR(b1[static_cast<std::size_t>(k)] - b0[static_cast<std::size_t>(k)], shift, 1e-9);
    }
}

TEST(JointLikelihood, SingleRootToken) {
    const auto c = make_corpus(4, {"x"}, {Review{0, 0.25, 0, {{2}}}});
    GibbsState st(c, cfg(2));
    st.initialize_from_labels({{0}}, {0});
    const double eta = 0.1;
    EXPECT_NEAR(st.joint_log_likelihood(), std::log(eta / (4 * eta)) + response_log_density(0.25, 0.0, 0.5), 1e-12);
}

TEST(JointLikelihood, InvariantUnderNodeRelabeling) {
    const auto c = make_corpus(3, {"x"},
                               {Review{0, 0.2, 0, {{0, 1}}}, Review{0, 0.6, 0, {{1, 2, 2}}}, Review{0, 0.9, 0, {{0, 2}}}});
    const std::vector<int> levels{1, 0, 1, 1, 0, 0, 1};
    GibbsState a(c, cfg(2));
    a.initialize_from_labels({{0}, {1}, {1}}, levels);
    GibbsState b(c, cfg(2));
    b.initialize_from_labels({{0}, {0}, {0}}, levels);
    b.detach_sentence(1);
    const auto p = b.attach_sentence(1, TreePath{{0, kNewNode}});
    b.detach_sentence(2);
    b.attach_sentence(2, p);
    b.detach_sentence(0);
    b.attach_sentence(0, TreePath{{0, kNewNode}});
    ASSERT_NE(a.path(0).nodes[1], b.path(0).nodes[1]);
    EXPECT_NEAR(a.joint_log_likelihood(), b.joint_log_likelihood(), 1e-10);
}

TEST(Auditor, ConsistentAfterSweeps) {
    const auto [c, truth] = small_scenario(9);
    GibbsState st(c, cfg(3));
    Rng rng(9, stream::sampler);
    st.initialize(rng);
    EXPECT_EQ(st.audit(), "");
    for (int it = 0; it < 5; ++it) {
        st.sweep_paths(rng);
        EXPECT_EQ(st.audit(), "");
        st.sweep_levels(rng);
        st.update_addition_matrix();
        st.optimize_beta();
        EXPECT_EQ(st.audit(), "");
    }
}

TEST(StochasticEm, RejectsDepthOne) {
    const auto [c, truth] = small_scenario(1);
    EXPECT_THROW(run_stochastic_em(c, cfg(1)), ConfigError);
}

TEST(StochasticEm, RejectsZeroIterations) {
    const auto [c, truth] = small_scenario(1);
    auto config = cfg(3);
    config.max_iters = 0;
    EXPECT_THROW(run_stochastic_em(c, config), ConfigError);
}

TEST(StochasticEm, DeterministicGivenSeed) {
    const auto [c, truth] = small_scenario(4);
    auto config = cfg(3);
    config.max_iters = 8;
    config.seed = 17;
    const auto a = strip_timings(model_to_json(run_stochastic_em(c, config))).dump();
    const auto b = strip_timings(model_to_json(run_stochastic_em(c, config))).dump();
    EXPECT_EQ(a, b);
    config.seed = 18;
    EXPECT_NE(a, strip_timings(model_to_json(run_stochastic_em(c, config))).dump());
}

TEST(StochasticEm, InitialAdditionMatrixIsZero) {
    const auto [c, truth] = small_scenario(2);
    GibbsState st(c, cfg(3));
    Rng rng(2, stream::sampler);
    st.initialize(rng);
    EXPECT_FALSE(st.urn().addition_matrix_computed());
    EXPECT_EQ(st.tree().num_live(), 3u);
    EXPECT_EQ(st.urn().addition_weight_fixed(0, 0), 0);
}

TEST(StochasticEm, ModelRoundTrip) {
    const auto [c, truth] = small_scenario(5);
    auto config = cfg(3);
    config.max_iters = 4;
    config.average_last = 2;
    config.burn_in = 1;
    const auto m = run_stochastic_em(c, config);
    const auto j = strip_timings(model_to_json(m));
    EXPECT_EQ(strip_timings(model_to_json(model_from_json(nlohmann::json::parse(j.dump())))), j);
}

TEST(ModelAudit, FittedModelIsConsistentAndCorruptionIsCaught) {
    const auto [c, truth] = small_scenario(6);
    auto config = cfg(3);
    config.max_iters = 3;
    const auto m = run_stochastic_em(c, config);
    EXPECT_EQ(audit_model(m), "");
    auto j = model_to_json(m);
    j["tree"]["nodes"][0]["visits"][0] = j["tree"]["nodes"][0]["visits"][0].get<int>() + 1;
    EXPECT_NE(audit_model(model_from_json(j)), "");
}

TEST(StochasticEm, LikelihoodTrendImproves) {
    std::vector<double> gains;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto [c, truth] = small_scenario(seed);
        auto config = cfg(3);
        config.max_iters = 20;
        config.early_stop = false;
        config.seed = seed;
        const auto m = run_stochastic_em(c, config);
        gains.push_back(m.trace.back().log_likelihood - m.trace.front().log_likelihood);
    }
    std::sort(gains.begin(), gains.end());
    EXPECT_GT(gains[gains.size() / 2], 0.0);
}

TEST(RuntimeProfile, PhasesArePopulated) {
    const auto [c, truth] = small_scenario(6);
    const auto prof = estep_runtime_profile(c, cfg(3), {2, 3}, 1);
    ASSERT_EQ(prof.size(), 2u);
    for (const auto& p : prof) {
        EXPECT_GT(p.path_seconds, 0.0);
        EXPECT_GT(p.level_seconds, 0.0);
    }
}
