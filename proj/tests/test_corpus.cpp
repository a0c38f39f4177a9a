#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "mhstm/corpus.hpp"

using namespace mhstm;

TEST(Tokenize, EmptyInput) { EXPECT_TRUE(tokenize_sentences("").empty()); }

TEST(Tokenize, SplitsSentencesOnTerminalPunctuation) {
    const auto s = tokenize_sentences("Great screen. Battery died!");
    ASSERT_EQ(s.size(), 2u);
    EXPECT_EQ(s[0], (std::vector<std::string>{"great", "screen"}));
    EXPECT_EQ(s[1], (std::vector<std::string>{"battery", "died"}));
}

TEST(Tokenize, DropsDigitsPunctuationAndStopwords) {
    const auto s = tokenize_sentences("The BATTERY is 100% ok.", {"the", "is", "ok"});
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s[0], (std::vector<std::string>{"battery"}));
}

TEST(Vocabulary, CountsDocumentFrequency) {
    const auto v = build_vocabulary({{{"a", "b"}}, {{"a", "c"}}}, 1);
    ASSERT_EQ(v.size(), 3u);
    EXPECT_EQ(v.terms(), (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_EQ(v.document_frequencies(), (std::vector<int>{2, 1, 1}));
}

TEST(Vocabulary, MinDfFilters) {
    const auto v = build_vocabulary({{{"a", "b"}}, {{"a", "c"}}}, 2);
    EXPECT_EQ(v.terms(), (std::vector<std::string>{"a"}));
}

TEST(Vocabulary, SingleDocument) {
    const auto v = build_vocabulary({{{"x"}}}, 1);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v.document_frequency(0), 1);
}

TEST(Vocabulary, EmptyAfterFilterIsError) { EXPECT_THROW(build_vocabulary({{{"x"}}}, 2), DataError); }

TEST(Vocabulary, IndependentOfDocumentOrder) {
    std::vector<TokenSentences> docs = {{{"a", "b"}, {"c"}}, {{"b", "d"}}, {{"a"}}, {{"e", "a", "d"}}};
    const auto ref = build_vocabulary(docs, 1);
    std::mt19937 g(3);
    for (int i = 0; i < 10; ++i) {
        std::shuffle(docs.begin(), docs.end(), g);
        const auto v = build_vocabulary(docs, 1);
        EXPECT_EQ(v.terms(), ref.terms());
        EXPECT_EQ(v.document_frequencies(), ref.document_frequencies());
    }
}

TEST(NormalizeRatings, FivePointScale) {
    EXPECT_EQ(normalize_ratings({1, 2, 3, 4, 5}), (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
}

TEST(NormalizeRatings, Identity) { EXPECT_EQ(normalize_ratings({0, 1}), (std::vector<double>{0.0, 1.0})); }

TEST(NormalizeRatings, Unordered) { EXPECT_EQ(normalize_ratings({10, 30, 20}), (std::vector<double>{0.0, 1.0, 0.5})); }

TEST(NormalizeRatings, ConstantWithoutScaleIsError) { EXPECT_THROW(normalize_ratings({3, 3}), DataError); }

TEST(NormalizeRatings, ExplicitScale) {
    EXPECT_EQ(normalize_ratings({3, 3}, std::make_pair(1.0, 5.0)), (std::vector<double>{0.5, 0.5}));
}

TEST(NormalizeRatings, Monotone) {
    std::mt19937 g(11);
    std::uniform_real_distribution<double> u(-5, 5);
    std::vector<double> y(50);
    for (auto& v : y) v = u(g);
    const auto n = normalize_ratings(y);
    for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t j = 0; j < y.size(); ++j)
            if (y[i] <= y[j]) EXPECT_LE(n[i], n[j]);
}

namespace {
Corpus load(const std::string& text, int min_df = 1) {
    std::istringstream in(text);
    PreprocessOptions opts;
    opts.min_df = min_df;
    return load_reviews_stream(in, opts);
}
}  // namespace

TEST(LoadReviews, DenseBrandIds) {
    const auto c = load(R"({"brand":"X","rating":1,"text":"good screen."}
{"brand":"Y","rating":5,"text":"bad screen."}
)");
    EXPECT_EQ(c.num_brands(), 2u);
    EXPECT_EQ(c.brand_names(), (std::vector<std::string>{"X", "Y"}));
    EXPECT_EQ(c.review(0).brand, 0);
    EXPECT_EQ(c.review(1).brand, 1);
}

TEST(LoadReviews, MaxRatingMapsToOne) {
    const auto c = load(R"({"brand":"X","rating":1,"text":"good screen."}
{"brand":"X","rating":3,"text":"fine screen."}
{"brand":"X","rating":5,"text":"bad screen."}
)");
    EXPECT_DOUBLE_EQ(c.review(2).response, 1.0);
    EXPECT_DOUBLE_EQ(c.review(1).response, 0.5);
}

TEST(LoadReviews, PreTokenizedUnknownTokensDropped) {
    const auto c = load(R"({"brand":"X","rating":1,"sentences":[["screen","rare"]]}
{"brand":"X","rating":2,"sentences":[["screen","good"],["good"]]}
)",
                        2);
    ASSERT_EQ(c.vocab_size(), 1u);
    EXPECT_EQ(c.vocabulary().term(0), "screen");
    EXPECT_EQ(c.review(0).sentences, (std::vector<Sentence>{{0}}));
    EXPECT_EQ(c.review(1).sentences, (std::vector<Sentence>{{0}}));
}

TEST(LoadReviews, ParseErrorCarriesLineNumber) {
    try {
        load("{\"brand\":\"X\",\"rating\":1,\"text\":\"a.\"}\n{oops\n");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

TEST(LoadReviews, SchemaViolations) {
    EXPECT_THROW(load(R"({"brand":"X","text":"a."})"), DataError);
    EXPECT_THROW(load(R"({"brand":"X","rating":1,"text":"a.","sentences":[["a"]]})"), DataError);
    EXPECT_THROW(load(R"({"brand":"X","rating":1,"text":"a.","extra":2})"), DataError);
    EXPECT_THROW(load(""), DataError);
}

TEST(LoadReviews, Deterministic) {
    const std::string text = R"({"brand":"B","rating":2,"text":"screen is fine. battery weak!"}
{"brand":"A","rating":4,"text":"battery great. screen great."}
{"brand":"B","rating":5,"text":"love the screen"}
)";
    EXPECT_EQ(corpus_to_json(load(text)).dump(), corpus_to_json(load(text)).dump());
}

TEST(CorpusRoundTrip, TokenIdentical) {
    const auto c = load(R"({"brand":"B","rating":2,"text":"screen is fine. battery weak!"}
{"brand":"A","rating":4,"text":"battery great. screen great."}
{"brand":"B","rating":5,"text":"love the screen"}
)");
    const auto r = corpus_from_json(nlohmann::json::parse(corpus_to_json(c).dump()));
    EXPECT_EQ(r.vocabulary().terms(), c.vocabulary().terms());
    EXPECT_EQ(r.vocabulary().document_frequencies(), c.vocabulary().document_frequencies());
    EXPECT_EQ(r.brand_names(), c.brand_names());
    ASSERT_EQ(r.size(), c.size());
    for (std::size_t d = 0; d < c.size(); ++d) {
        EXPECT_EQ(r.review(d).brand, c.review(d).brand);
        EXPECT_EQ(r.review(d).response, c.review(d).response);
        EXPECT_EQ(r.review(d).sentences, c.review(d).sentences);
    }
}

TEST(CorpusInvariants, SentenceLengthsSumToReviewLength) {
    const auto c = load(R"({"brand":"B","rating":2,"text":"screen is fine. battery weak!"}
{"brand":"A","rating":4,"text":"battery great. screen great. ok"}
)");
    std::size_t total = 0;
    for (const auto& r : c.reviews()) {
        std::size_t n = 0;
        for (const auto& s : r.sentences) n += s.size();
        EXPECT_EQ(n, r.num_tokens());
        total += n;
    }
    EXPECT_EQ(total, c.num_tokens());
}

TEST(CorpusInvariants, RejectsOutOfRangeTokens) {
    Vocabulary v({"a"});
    EXPECT_THROW(Corpus(v, {"X"}, {Review{0, 0.5, 0.5, {{1}}}}), DataError);
    EXPECT_THROW(Corpus(v, {"X"}, {Review{0, 1.5, 1.5, {{0}}}}), DataError);
    EXPECT_THROW(Corpus(v, {"X"}, {Review{0, 0.5, 0.5, {{}}}}), DataError);
}

TEST(CoDocumentFrequency, CountsSharedDocuments) {
    Vocabulary v({"a", "b", "c"});
    Corpus c(v, {"X"}, {Review{0, 0.5, 0, {{0, 1}}}, Review{0, 0.5, 0, {{0}, {1}}}, Review{0, 0.5, 0, {{0, 2}}}});
    EXPECT_EQ(c.vocabulary().document_frequency(0), 3);
    EXPECT_EQ(c.vocabulary().co_document_frequency(0, 1), 2);
    EXPECT_EQ(c.vocabulary().co_document_frequency(1, 2), 0);
}
