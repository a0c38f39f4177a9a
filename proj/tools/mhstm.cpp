#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mhstm/corpus.hpp"
#include "mhstm/error.hpp"
#include "mhstm/evaluation.hpp"
#include "mhstm/inference.hpp"
#include "mhstm/log.hpp"
#include "mhstm/model.hpp"
#include "mhstm/synthetic.hpp"

using namespace mhstm;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kConfig = 1, kData = 2, kInvariant = 3 };

std::vector<double> parse_number_list(const std::string& s, const char* what) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError(std::string("bad number in ") + what + ": '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError(std::string(what) + " is empty");
    return out;
}

// Writes to `path`, or stdout when the path is empty or "-".
void emit(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << text;
}

std::string json_text(const json& j) { return j.dump(2) + "\n"; }

// Fills options that were not given on the command line from a JSON object.
// Keys are long option names without the leading dashes.
void apply_config_file(CLI::App& cmd, const std::string& path) {
    const json j = read_json_file(path);
    if (!j.is_object()) throw ConfigError("config file '" + path + "' must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "config") throw ConfigError("config files cannot include other config files");
        CLI::Option* opt = cmd.get_option_no_throw("--" + key);
        if (opt == nullptr) throw ConfigError("unknown config key '" + key + "' for '" + cmd.get_name() + "'");
        if (opt->count() > 0) continue;
        std::string text;
        if (value.is_string()) {
            text = value.get<std::string>();
        } else if (value.is_boolean()) {
            text = value.get<bool>() ? "true" : "false";
        } else if (value.is_number()) {
            text = value.dump();
        } else if (value.is_array()) {
            for (const auto& x : value) {
                if (!x.is_number()) throw ConfigError("config key '" + key + "' must be a list of numbers");
                text += (text.empty() ? "" : ",") + x.dump();
            }
        } else {
            throw ConfigError("config key '" + key + "' has an unsupported type");
        }
        try {
            opt->add_result(text);
            opt->run_callback();
        } catch (const CLI::Error& e) {
            throw ConfigError("config key '" + key + "': " + e.what());
        }
    }
}

struct FitFlags {
    FitConfig cfg;
    bool no_early_stop = false;

    void add(CLI::App& cmd) {
        cmd.add_option("--depth", cfg.depth, "Tree depth L");
        cmd.add_option("--gamma", cfg.gamma, "nCRP concentration");
        cmd.add_option("--alpha", cfg.alpha, "Level prior concentration");
        cmd.add_option("--eta", cfg.eta, "Topic-word smoothing");
        cmd.add_option("--rho2", cfg.rho2, "Response variance");
        cmd.add_option("--iters", cfg.max_iters, "Maximum EM iterations");
        cmd.add_option("--burnin", cfg.burn_in, "Iterations before early stopping may trigger");
        cmd.add_option("--epsilon", cfg.epsilon, "Per-token log-likelihood gain threshold");
        cmd.add_option("--average-last", cfg.average_last, "Average phi and x over this many final sweeps");
        cmd.add_flag("--no-early-stop", no_early_stop, "Always run --iters iterations");
    }

    FitConfig config(std::uint64_t seed) const {
        FitConfig c = cfg;
        c.seed = seed;
        if (no_early_stop) c.early_stop = false;
        c.validate();
        return c;
    }
};

struct CorpusFlags {
    std::string path;
    int min_df = 5;
    std::string stopwords;

    void add(CLI::App& cmd, const char* name = "--corpus") {
        cmd.add_option(name, path, "Corpus file (structured export or line-delimited reviews)")->required();
        cmd.add_option("--min-df", min_df, "Minimum document frequency for raw review files");
        cmd.add_option("--stopwords", stopwords, "File with one stopword per line");
    }

    Corpus load() const {
        PreprocessOptions opts;
        opts.min_df = min_df;
        if (!stopwords.empty()) {
            std::ifstream in(stopwords);
            if (!in) throw DataError("cannot open stopword file '" + stopwords + "'");
            for (std::string w; std::getline(in, w);)
                if (!w.empty()) opts.stopwords.insert(w);
        }
        return load_corpus_file(path, opts);
    }
};

std::string dot_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out;
}

std::string tree_to_dot(const Model& m, std::size_t top_n) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "digraph mhstm {\n  node [shape=box, fontname=\"Helvetica\"];\n";
    for (NodeId k : m.tree.live_nodes()) {
        const auto phi = m.phi(k);
        std::ostringstream label;
        label << std::fixed << std::setprecision(4);
        label << "node " << k << " (level " << m.tree.level(k) << ")\\n";
        for (TermId v : m.top_terms(k, top_n))
            label << dot_escape(m.vocabulary[static_cast<std::size_t>(v)]) << " " << phi[static_cast<std::size_t>(v)]
                  << "\\n";
        label << "beta:";
        for (std::size_t b = 0; b < m.num_brands(); ++b)
            label << " " << dot_escape(m.brands[b]) << "=" << m.beta_at(static_cast<BrandId>(b), k);
        os << "  n" << k << " [label=\"" << label.str() << "\"];\n";
    }
    for (NodeId k : m.tree.live_nodes())
        for (NodeId c : m.tree.node(k).children) os << "  n" << k << " -> n" << c << ";\n";
    os << "}\n";
    return os.str();
}

json tree_to_structured(const Model& m, std::size_t top_n) {
    json nodes = json::array();
    for (NodeId k : m.tree.live_nodes()) {
        const auto phi = m.phi(k);
        json top = json::array();
        for (TermId v : m.top_terms(k, top_n))
            top.push_back({{"term", m.vocabulary[static_cast<std::size_t>(v)]}, {"prob", phi[static_cast<std::size_t>(v)]}});
        json beta = json::object();
        for (std::size_t b = 0; b < m.num_brands(); ++b) beta[m.brands[b]] = m.beta_at(static_cast<BrandId>(b), k);
        nodes.push_back({{"node", k},
                         {"level", m.tree.level(k)},
                         {"parent", k == m.tree.root() ? json() : json(m.tree.parent(k))},
                         {"children", m.tree.node(k).children},
                         {"visits", m.tree.node(k).total_visits},
                         {"top_terms", top},
                         {"beta", beta}});
    }
    return {{"format", "mhstm-tree"}, {"version", 1}, {"depth", m.tree.depth()}, {"nodes", nodes}};
}

Model load_model(const std::string& path) {
    Model m = model_from_json(read_json_file(path));
    if (const auto msg = audit_model(m); !msg.empty()) throw InvariantError("model '" + path + "': " + msg);
    return m;
}

void require_format(const std::string& format, std::initializer_list<const char*> allowed) {
    for (const char* a : allowed)
        if (format == a) return;
    throw ConfigError("format '" + format + "' is not supported by this command");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-aspect hierarchical sentiment-topic model"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "mhstm 1.0");

    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_path;
    std::string format;
    std::map<const CLI::App*, std::string> default_format_of;

    auto common = [&](CLI::App* cmd, const char* default_format) {
        cmd->add_option("--config", config_path, "JSON file with option values; command-line flags take precedence");
        cmd->add_option("--seed", seed, "Random seed");
        cmd->add_option("--out", out_path, "Output path (stdout when omitted)");
        cmd->add_option("--format", format, "Output format: json, csv or dot")->check(CLI::IsMember({"json", "csv", "dot"}));
        default_format_of[cmd] = default_format;
    };

    // generate
    auto* gen = app.add_subcommand("generate", "Sample a synthetic corpus and its ground truth");
    HierarchySpec hs;
    std::string scenario, sigma_text = "1,2,3", path_mode = "fixed", truth_path;
    bool no_clip = false;
    common(gen, "json");
    gen->add_option("--scenario", scenario, "Preset scenario")->check(CLI::IsMember({"grid"}));
    gen->add_option("--hierarchy", hs.hierarchy, "Truth tree shape, e.g. 3(3,2,4)");
    gen->add_option("--vocab", hs.vocab_size, "Vocabulary size");
    gen->add_option("--eta", hs.eta, "Dirichlet concentration of topic-word distributions");
    gen->add_option("--alpha", hs.alpha, "Dirichlet concentration of level proportions");
    gen->add_option("--sigma", sigma_text, "Comma-separated beta standard deviations per level");
    gen->add_option("--mu", hs.mu, "Mean of beta");
    gen->add_option("--rho", hs.rho, "Response noise standard deviation");
    gen->add_option("--brands", hs.num_brands, "Number of brands");
    gen->add_option("--docs", hs.docs_per_brand, "Documents per brand");
    gen->add_option("--sentences", hs.sentences_per_doc, "Sentences per document");
    gen->add_option("--length", hs.mean_sentence_length, "Mean sentence length");
    gen->add_option("--paths", path_mode, "Sentence path law")->check(CLI::IsMember({"fixed", "ncrp"}));
    gen->add_option("--gamma", hs.gamma, "nCRP concentration for --paths ncrp");
    gen->add_flag("--no-clip", no_clip, "Keep responses outside [0,1] and rescale instead of clipping");
    gen->add_option("--truth", truth_path, "Truth output path (default: <out>.truth.json)");

    // train
    auto* train = app.add_subcommand("train", "Fit the model by stochastic EM");
    FitFlags train_fit;
    CorpusFlags train_corpus;
    common(train, "json");
    train_fit.add(*train);
    train_corpus.add(*train);
    bool drop_assignments = false, with_timings = false;
    train->add_flag("--no-assignments", drop_assignments, "Omit per-token assignments from the model file");
    train->add_flag("--timings", with_timings, "Keep per-iteration wall times in the trace");

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "Score a fitted model against synthetic ground truth");
    CorpusFlags eval_corpus;
    std::string eval_model, eval_truth, heldout_path;
    ReportOptions ropts;
    common(eval, "json");
    eval_corpus.add(*eval);
    eval->add_option("--model", eval_model, "Model file")->required();
    eval->add_option("--truth", eval_truth, "Truth file")->required();
    eval->add_option("--heldout", heldout_path, "Held-out corpus (default: fresh sample from the truth)");
    eval->add_option("--particles", ropts.particles, "Importance-sampling particles per sentence");
    eval->add_option("--ap-k", ropts.ap_k, "Cutoff K for AP@K");
    eval->add_option("--top-n", ropts.coherence_top_n, "Top terms per topic for coherence");
    eval->add_option("--scenario", ropts.scenario, "Scenario label for the report");

    // rank
    auto* rank = app.add_subcommand("rank", "Rank brands on one topic by their regression coefficient");
    std::string rank_model;
    NodeId rank_topic = 0;
    common(rank, "csv");
    rank->add_option("--model", rank_model, "Model file")->required();
    rank->add_option("--topic", rank_topic, "Topic node id")->required();

    // export-tree
    auto* exp = app.add_subcommand("export-tree", "Render the learned tree");
    std::string exp_model;
    std::size_t exp_top = 10;
    common(exp, "dot");
    exp->add_option("--model", exp_model, "Model file")->required();
    exp->add_option("--top", exp_top, "Top terms per node");

    // likelihood
    auto* lik = app.add_subcommand("likelihood", "Held-out per-word log-likelihood");
    std::string lik_model;
    CorpusFlags lik_corpus;
    std::size_t lik_particles = 2000;
    common(lik, "json");
    lik->add_option("--model", lik_model, "Model file")->required();
    lik_corpus.add(*lik);
    lik->add_option("--particles", lik_particles, "Importance-sampling particles per sentence");

    // profile
    auto* prof = app.add_subcommand("profile", "E-step wall time by tree depth");
    FitFlags prof_fit;
    std::string prof_corpus, depths_text = "2,3,4";
    int prof_iters = 3;
    common(prof, "json");
    prof_fit.add(*prof);
    prof->add_option("--corpus", prof_corpus, "Corpus file (default: the standard 3(3,2,4) workload)");
    prof->add_option("--depths", depths_text, "Comma-separated depths");
    prof->add_option("--profile-iters", prof_iters, "Iterations per depth");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfig;
    }

    try {
        CLI::App* cmd = app.get_subcommands().front();
        if (!config_path.empty()) apply_config_file(*cmd, config_path);
        if (format.empty()) format = default_format_of.at(cmd);

        if (cmd == gen) {
            require_format(format, {"json"});
            if (out_path.empty()) throw ConfigError("generate needs --out for the corpus file");
            hs.sigma_by_level = parse_number_list(sigma_text, "--sigma");
            hs.clip_response = !no_clip;
            hs.path_mode = path_mode == "ncrp" ? PathMode::NestedCrp : PathMode::FixedBrandDistributions;
            std::pair<Corpus, GroundTruth> data = [&] {
                if (scenario == "grid") {
                    hs = grid_spec();
                    return generate_grid_corpus(seed);
                }
                return generate_scenario(hs, seed);
            }();
            if (truth_path.empty()) {
                std::string base = out_path;
                if (base.size() > 5 && base.ends_with(".json")) base.resize(base.size() - 5);
                truth_path = base + ".truth.json";
            }
            write_json_file(out_path, corpus_to_json(data.first));
            write_json_file(truth_path, truth_to_json(data.second, hs));
            std::cout << "brands " << data.first.num_brands() << " documents " << data.first.size() << " sentences "
                      << data.first.num_sentences() << " tokens " << data.first.num_tokens() << " vocabulary "
                      << data.first.vocab_size() << " truth_nodes " << data.second.tree.num_live() << "\n";
        } else if (cmd == train) {
            require_format(format, {"json"});
            const FitConfig c = train_fit.config(seed);
            const Corpus corpus = train_corpus.load();
            const Model m = run_stochastic_em(corpus, c, !drop_assignments);
            const json mj = model_to_json(m);
            emit(out_path, json_text(with_timings ? mj : strip_timings(mj)));
            const auto& last = m.trace.back();
            std::cerr << "iterations " << m.trace.size() << " converged " << (m.converged ? "yes" : "no")
                      << " nodes " << m.tree.num_live() << " log_likelihood " << last.log_likelihood << "\n";
        } else if (cmd == eval) {
            require_format(format, {"json", "csv"});
            const Corpus corpus = eval_corpus.load();
            const Model m = load_model(eval_model);
            auto [truth, spec] = truth_from_json(read_json_file(eval_truth));
            std::size_t dropped = 0;
            std::optional<Corpus> heldout;
            if (heldout_path.empty()) {
                Rng hrng(seed, stream::heldout_corpus);
                heldout = align_to_model(generate_corpus(truth, spec, hrng).first, m, dropped);
            } else {
                PreprocessOptions opts;
                opts.min_df = eval_corpus.min_df;
                heldout = align_to_model(load_corpus_file(heldout_path, opts), m, dropped);
            }
            if (dropped > 0) log::warn("dropped ", dropped, " out-of-vocabulary held-out tokens");
            if (ropts.scenario.empty()) ropts.scenario = spec.hierarchy;
            Rng rng(seed, stream::heldout);
            const auto rep = multi_aspect_report(m, corpus, truth, ropts, &*heldout, &rng);
            emit(out_path, format == "csv" ? to_csv({rep}) : json_text(to_json(rep)));
        } else if (cmd == rank) {
            require_format(format, {"json", "csv"});
            const Model m = load_model(rank_model);
            const auto r = rank_brands(m, rank_topic);
            if (format == "csv") {
                std::ostringstream os;
                os.precision(17);
                os << "rank,brand,score\n";
                for (std::size_t i = 0; i < r.entries.size(); ++i)
                    os << i + 1 << ',' << m.brands[static_cast<std::size_t>(r.entries[i].brand)] << ','
                       << r.entries[i].score << '\n';
                emit(out_path, os.str());
            } else {
                json rows = json::array();
                for (std::size_t i = 0; i < r.entries.size(); ++i)
                    rows.push_back({{"rank", i + 1},
                                    {"brand", m.brands[static_cast<std::size_t>(r.entries[i].brand)]},
                                    {"score", r.entries[i].score}});
                emit(out_path, json_text({{"topic", rank_topic}, {"ranking", rows}}));
            }
        } else if (cmd == exp) {
            require_format(format, {"dot", "json"});
            const Model m = load_model(exp_model);
            emit(out_path, format == "dot" ? tree_to_dot(m, exp_top) : json_text(tree_to_structured(m, exp_top)));
        } else if (cmd == lik) {
            require_format(format, {"json"});
            const Model m = load_model(lik_model);
            std::size_t dropped = 0;
            const Corpus held = align_to_model(lik_corpus.load(), m, dropped);
            Rng rng(seed, stream::heldout);
            auto r = held_out_likelihood(m, held, lik_particles, rng);
            r.dropped_tokens = dropped;
            emit(out_path, json_text({{"log_likelihood", r.log_likelihood},
                                      {"tokens", r.tokens},
                                      {"dropped_tokens", r.dropped_tokens},
                                      {"per_word", r.per_word()},
                                      {"particles", lik_particles}}));
        } else if (cmd == prof) {
            require_format(format, {"json", "csv"});
            const FitConfig c = prof_fit.config(seed);
            const Corpus corpus =
                prof_corpus.empty() ? generate_scenario(HierarchySpec{}, seed).first
                                    : load_corpus_file(prof_corpus, PreprocessOptions{});
            std::vector<int> depths;
            for (double d : parse_number_list(depths_text, "--depths")) depths.push_back(static_cast<int>(d));
            const auto rows = estep_runtime_profile(corpus, c, depths, prof_iters);
            if (format == "csv") {
                std::ostringstream os;
                os << "depth,estep_seconds,path_seconds,level_seconds,addition_seconds\n";
                for (const auto& r : rows)
                    os << r.depth << ',' << r.estep_seconds << ',' << r.path_seconds << ',' << r.level_seconds << ','
                       << r.addition_seconds << '\n';
                emit(out_path, os.str());
            } else {
                json j = json::array();
                for (const auto& r : rows)
                    j.push_back({{"depth", r.depth},
                                 {"estep_seconds", r.estep_seconds},
                                 {"path_seconds", r.path_seconds},
                                 {"level_seconds", r.level_seconds},
                                 {"addition_seconds", r.addition_seconds}});
                emit(out_path, json_text({{"iterations", prof_iters}, {"tokens", corpus.num_tokens()}, {"depths", j}}));
            }
        }
        return kOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const InvariantError& e) {
        std::cerr << "invariant violation: " << e.what() << "\n";
        return kInvariant;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kInvariant;
    }
}
