#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "log.hpp"

namespace mhstm {

using TermId = std::int32_t;
using BrandId = std::int32_t;
using Sentence = std::vector<TermId>;
using TokenSentences = std::vector<std::vector<std::string>>;

struct Review {
    BrandId brand = 0;
    double response = 0.0;  // normalized polarity in [0, 1]
    double rating = 0.0;    // raw rating before normalization
    std::vector<Sentence> sentences;

    std::size_t num_tokens() const {
        std::size_t n = 0;
        for (const auto& s : sentences) n += s.size();
        return n;
    }
};

// Dense term <-> id bijection plus document statistics.
class Vocabulary {
public:
    Vocabulary() = default;

    explicit Vocabulary(std::vector<std::string> terms) : terms_(std::move(terms)) {
        index_.reserve(terms_.size());
        for (std::size_t i = 0; i < terms_.size(); ++i) {
            auto [it, fresh] = index_.emplace(terms_[i], static_cast<TermId>(i));
            if (!fresh) throw DataError("duplicate vocabulary term '" + terms_[i] + "'");
        }
        df_.assign(terms_.size(), 0);
        postings_.assign(terms_.size(), {});
    }

    std::size_t size() const { return terms_.size(); }
    const std::string& term(TermId id) const { return terms_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& terms() const { return terms_; }

    std::optional<TermId> find(std::string_view term) const {
        auto it = index_.find(std::string(term));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    int document_frequency(TermId id) const { return df_.at(static_cast<std::size_t>(id)); }
    const std::vector<int>& document_frequencies() const { return df_; }

    // Number of documents containing both terms.
    int co_document_frequency(TermId a, TermId b) const {
        const auto& pa = postings_.at(static_cast<std::size_t>(a));
        const auto& pb = postings_.at(static_cast<std::size_t>(b));
        if (a == b) return static_cast<int>(pa.size());
        int n = 0;
        auto ia = pa.begin();
        auto ib = pb.begin();
        while (ia != pa.end() && ib != pb.end()) {
            if (*ia < *ib) ++ia;
            else if (*ib < *ia) ++ib;
            else { ++n; ++ia; ++ib; }
        }
        return n;
    }

    // Recompute DF and postings from id-encoded documents.
    void index_documents(const std::vector<Review>& docs) {
        df_.assign(terms_.size(), 0);
        postings_.assign(terms_.size(), {});
        std::vector<std::int32_t> last_seen(terms_.size(), -1);
        for (std::size_t d = 0; d < docs.size(); ++d) {
            for (const auto& s : docs[d].sentences) {
                for (TermId v : s) {
                    auto vi = static_cast<std::size_t>(v);
                    if (last_seen[vi] == static_cast<std::int32_t>(d)) continue;
                    last_seen[vi] = static_cast<std::int32_t>(d);
                    ++df_[vi];
                    postings_[vi].push_back(static_cast<std::uint32_t>(d));
                }
            }
        }
    }

    void set_document_frequencies(std::vector<int> df) { df_ = std::move(df); }

private:
    std::vector<std::string> terms_;
    std::unordered_map<std::string, TermId> index_;
    std::vector<int> df_;
    std::vector<std::vector<std::uint32_t>> postings_;
};

struct PreprocessOptions {
    std::unordered_set<std::string> stopwords;
    int min_df = 5;
    std::optional<std::pair<double, double>> rating_scale;  // (min, max)
};

struct Provenance {
    std::string source;
    int min_df = 0;
    std::size_t stopword_count = 0;
    double rating_min = 0.0;
    double rating_max = 1.0;
    std::size_t dropped_reviews = 0;
    std::size_t dropped_tokens = 0;
};

// Brand-grouped, immutable review collection.
class Corpus {
public:
    Corpus(Vocabulary vocab, std::vector<std::string> brands, std::vector<Review> reviews,
           Provenance provenance = {})
        : vocab_(std::move(vocab)), brands_(std::move(brands)), provenance_(std::move(provenance)) {
        if (reviews.empty()) throw DataError("corpus has no reviews");
        if (brands_.empty()) throw DataError("corpus has no brands");
        std::stable_sort(reviews.begin(), reviews.end(),
                         [](const Review& a, const Review& b) { return a.brand < b.brand; });
        const auto V = static_cast<TermId>(vocab_.size());
        const auto B = static_cast<BrandId>(brands_.size());
        brand_offsets_.assign(brands_.size() + 1, 0);
        for (const auto& r : reviews) {
            if (r.brand < 0 || r.brand >= B) throw DataError("review brand id out of range");
            if (!(r.response >= 0.0 && r.response <= 1.0))
                throw DataError("review response outside [0,1]");
            if (r.sentences.empty()) throw DataError("review without sentences");
            for (const auto& s : r.sentences) {
                if (s.empty()) throw DataError("empty sentence in review");
                for (TermId v : s)
                    if (v < 0 || v >= V) throw DataError("token id out of vocabulary range");
            }
            ++brand_offsets_[static_cast<std::size_t>(r.brand) + 1];
            num_tokens_ += r.num_tokens();
            num_sentences_ += r.sentences.size();
        }
        for (std::size_t b = 0; b < brands_.size(); ++b) brand_offsets_[b + 1] += brand_offsets_[b];
        reviews_ = std::move(reviews);
        vocab_.index_documents(reviews_);
    }

    const Vocabulary& vocabulary() const { return vocab_; }
    std::size_t vocab_size() const { return vocab_.size(); }
    std::size_t num_brands() const { return brands_.size(); }
    const std::vector<std::string>& brand_names() const { return brands_; }
    const std::vector<Review>& reviews() const { return reviews_; }
    const Review& review(std::size_t d) const { return reviews_.at(d); }
    std::size_t size() const { return reviews_.size(); }
    std::size_t num_tokens() const { return num_tokens_; }
    std::size_t num_sentences() const { return num_sentences_; }
    const Provenance& provenance() const { return provenance_; }

    std::size_t reviews_of_brand(BrandId b) const {
        auto i = static_cast<std::size_t>(b);
        return brand_offsets_.at(i + 1) - brand_offsets_.at(i);
    }

private:
    Vocabulary vocab_;
    std::vector<std::string> brands_;
    std::vector<Review> reviews_;
    std::vector<std::size_t> brand_offsets_;
    Provenance provenance_;
    std::size_t num_tokens_ = 0;
    std::size_t num_sentences_ = 0;
};

// Lowercase, split into sentences on . ! ?, split tokens on any
// non-alphabetic byte, drop stopwords and empty sentences.
inline TokenSentences tokenize_sentences(std::string_view raw_text,
                                         const std::unordered_set<std::string>& stopwords = {}) {
    TokenSentences out;
    std::vector<std::string> current;
    std::string word;
    auto flush_word = [&] {
        if (!word.empty()) {
            if (!stopwords.contains(word)) current.push_back(word);
            word.clear();
        }
    };
    auto flush_sentence = [&] {
        flush_word();
        if (!current.empty()) out.push_back(std::move(current));
        current.clear();
    };
    for (char ch : raw_text) {
        auto c = static_cast<unsigned char>(ch);
        if (c < 0x80 && std::isalpha(c)) {
            word.push_back(static_cast<char>(std::tolower(c)));
        } else if (ch == '.' || ch == '!' || ch == '?') {
            flush_sentence();
        } else {
            flush_word();
        }
    }
    flush_sentence();
    return out;
}

// Terms with document frequency below min_df are dropped; surviving terms get
// ids in lexicographic order.
inline Vocabulary build_vocabulary(const std::vector<TokenSentences>& docs, int min_df) {
    if (min_df < 1) throw ConfigError("min_df must be >= 1");
    std::map<std::string, int> df;
    for (const auto& doc : docs) {
        std::set<std::string_view> seen;
        for (const auto& sent : doc)
            for (const auto& tok : sent) seen.insert(tok);
        for (auto t : seen) ++df[std::string(t)];
    }
    std::vector<std::string> terms;
    std::vector<int> counts;
    for (const auto& [t, n] : df) {
        if (n >= min_df) {
            terms.push_back(t);
            counts.push_back(n);
        }
    }
    if (terms.empty()) throw DataError("vocabulary is empty after min_df filtering");
    Vocabulary vocab(std::move(terms));
    vocab.set_document_frequencies(std::move(counts));
    return vocab;
}

// Min-max normalization onto [0, 1].
inline std::vector<double> normalize_ratings(const std::vector<double>& values,
                                             std::optional<std::pair<double, double>> scale = {}) {
    double lo = 0.0, hi = 0.0;
    if (scale) {
        std::tie(lo, hi) = *scale;
        if (!(hi > lo)) throw ConfigError("rating scale requires max > min");
    } else {
        if (values.empty()) return {};
        auto [mn, mx] = std::minmax_element(values.begin(), values.end());
        lo = *mn;
        hi = *mx;
        if (!(hi > lo))
            throw DataError("cannot normalize ratings: all values equal and no scale given");
    }
    std::vector<double> out;
    out.reserve(values.size());
    for (double y : values) {
        if (y < lo || y > hi) throw DataError("rating " + std::to_string(y) + " outside declared scale");
        out.push_back((y - lo) / (hi - lo));
    }
    return out;
}

namespace detail {

struct RawRecord {
    std::string brand;
    double rating = 0.0;
    TokenSentences sentences;
    bool pretokenized = false;
};

inline RawRecord parse_record(const nlohmann::json& j, std::size_t line_no,
                              const std::unordered_set<std::string>& stopwords) {
    auto fail = [&](const std::string& msg) {
        return DataError("line " + std::to_string(line_no) + ": " + msg);
    };
    if (!j.is_object()) throw fail("record is not an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        if (k != "brand" && k != "rating" && k != "text" && k != "sentences")
            throw fail("unknown field '" + k + "'");
    }
    RawRecord rec;
    if (!j.contains("brand") || !j["brand"].is_string()) throw fail("missing string field 'brand'");
    if (!j.contains("rating") || !j["rating"].is_number()) throw fail("missing numeric field 'rating'");
    rec.brand = j["brand"].get<std::string>();
    rec.rating = j["rating"].get<double>();
    const bool has_text = j.contains("text");
    const bool has_sent = j.contains("sentences");
    if (has_text == has_sent) throw fail("exactly one of 'text' or 'sentences' is required");
    if (has_text) {
        if (!j["text"].is_string()) throw fail("'text' must be a string");
        rec.sentences = tokenize_sentences(j["text"].get<std::string>(), stopwords);
    } else {
        const auto& s = j["sentences"];
        if (!s.is_array()) throw fail("'sentences' must be an array of arrays of strings");
        for (const auto& sent : s) {
            if (!sent.is_array()) throw fail("'sentences' must be an array of arrays of strings");
            std::vector<std::string> toks;
            for (const auto& t : sent) {
                if (!t.is_string()) throw fail("sentence tokens must be strings");
                toks.push_back(t.get<std::string>());
            }
            rec.sentences.push_back(std::move(toks));
        }
        rec.pretokenized = true;
    }
    return rec;
}

}  // namespace detail

// Build a corpus from line-delimited review records (one JSON object per line).
inline Corpus load_reviews_stream(std::istream& in, const PreprocessOptions& opts,
                                  const std::string& source = "<stream>") {
    std::vector<detail::RawRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError("line " + std::to_string(line_no) + ": parse error: " + e.what());
        }
        records.push_back(detail::parse_record(j, line_no, opts.stopwords));
    }
    if (records.empty()) throw DataError("no review records in " + source);

    std::vector<TokenSentences> docs;
    docs.reserve(records.size());
    for (const auto& r : records) docs.push_back(r.sentences);
    Vocabulary vocab = build_vocabulary(docs, opts.min_df);

    std::set<std::string> brand_set;
    for (const auto& r : records) brand_set.insert(r.brand);
    std::vector<std::string> brands(brand_set.begin(), brand_set.end());
    std::unordered_map<std::string, BrandId> brand_index;
    for (std::size_t i = 0; i < brands.size(); ++i) brand_index[brands[i]] = static_cast<BrandId>(i);

    std::vector<double> ratings;
    for (const auto& r : records) ratings.push_back(r.rating);
    std::vector<double> normalized = normalize_ratings(ratings, opts.rating_scale);

    Provenance prov;
    prov.source = source;
    prov.min_df = opts.min_df;
    prov.stopword_count = opts.stopwords.size();
    if (opts.rating_scale) {
        std::tie(prov.rating_min, prov.rating_max) = *opts.rating_scale;
    } else {
        auto [mn, mx] = std::minmax_element(ratings.begin(), ratings.end());
        prov.rating_min = *mn;
        prov.rating_max = *mx;
    }

    std::vector<Review> reviews;
    for (std::size_t i = 0; i < records.size(); ++i) {
        Review rev;
        rev.brand = brand_index.at(records[i].brand);
        rev.rating = records[i].rating;
        rev.response = normalized[i];
        for (const auto& sent : records[i].sentences) {
            Sentence ids;
            for (const auto& tok : sent) {
                if (auto id = vocab.find(tok)) ids.push_back(*id);
                else ++prov.dropped_tokens;
            }
            if (!ids.empty()) rev.sentences.push_back(std::move(ids));
        }
        if (rev.sentences.empty()) {
            ++prov.dropped_reviews;
            continue;
        }
        reviews.push_back(std::move(rev));
    }
    if (prov.dropped_reviews > 0)
        log::warn("dropped ", prov.dropped_reviews, " reviews with no in-vocabulary tokens");
    if (reviews.empty()) throw DataError("corpus is empty after preprocessing");
    return Corpus(std::move(vocab), std::move(brands), std::move(reviews), std::move(prov));
}

inline Corpus load_reviews(const std::string& path, const PreprocessOptions& opts) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open review file '" + path + "'");
    return load_reviews_stream(in, opts, path);
}

// Structured corpus export: vocabulary, brand table and token-id reviews.
inline nlohmann::json corpus_to_json(const Corpus& c) {
    nlohmann::json j;
    j["format"] = "mhstm-corpus";
    j["version"] = 1;
    j["vocabulary"] = c.vocabulary().terms();
    j["document_frequency"] = c.vocabulary().document_frequencies();
    j["brands"] = c.brand_names();
    auto& revs = j["reviews"] = nlohmann::json::array();
    for (const auto& r : c.reviews()) {
        revs.push_back({{"brand", r.brand}, {"rating", r.rating}, {"response", r.response},
                        {"sentences", r.sentences}});
    }
    const auto& p = c.provenance();
    j["provenance"] = {{"source", p.source},
                       {"min_df", p.min_df},
                       {"stopword_count", p.stopword_count},
                       {"rating_min", p.rating_min},
                       {"rating_max", p.rating_max},
                       {"dropped_reviews", p.dropped_reviews},
                       {"dropped_tokens", p.dropped_tokens}};
    return j;
}

inline Corpus corpus_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", "") != "mhstm-corpus") throw DataError("not an mhstm-corpus document");
        Vocabulary vocab(j.at("vocabulary").get<std::vector<std::string>>());
        auto brands = j.at("brands").get<std::vector<std::string>>();
        std::vector<Review> reviews;
        for (const auto& jr : j.at("reviews")) {
            Review r;
            r.brand = jr.at("brand").get<BrandId>();
            r.rating = jr.value("rating", 0.0);
            r.response = jr.at("response").get<double>();
            r.sentences = jr.at("sentences").get<std::vector<Sentence>>();
            reviews.push_back(std::move(r));
        }
        Provenance p;
        if (j.contains("provenance")) {
            const auto& jp = j["provenance"];
            p.source = jp.value("source", "");
            p.min_df = jp.value("min_df", 0);
            p.stopword_count = jp.value("stopword_count", std::size_t{0});
            p.rating_min = jp.value("rating_min", 0.0);
            p.rating_max = jp.value("rating_max", 1.0);
            p.dropped_reviews = jp.value("dropped_reviews", std::size_t{0});
            p.dropped_tokens = jp.value("dropped_tokens", std::size_t{0});
        }
        return Corpus(std::move(vocab), std::move(brands), std::move(reviews), std::move(p));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("corpus schema violation: ") + e.what());
    }
}

// Accepts either a structured corpus export or a line-delimited review file.
inline Corpus load_corpus_file(const std::string& path, const PreprocessOptions& opts) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        auto j = nlohmann::json::parse(text, nullptr, false);
        if (!j.is_discarded() && j.is_object() && j.contains("vocabulary")) return corpus_from_json(j);
    }
    std::istringstream lines(text);
    return load_reviews_stream(lines, opts, path);
}

}  // namespace mhstm
