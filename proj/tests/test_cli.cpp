#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Cli : public ::testing::Test {
protected:
    static fs::path dir;

    static void SetUpTestSuite() {
        dir = fs::temp_directory_path() / ("mhstm_cli_" + std::to_string(::getpid()));
        fs::create_directories(dir);
        ASSERT_EQ(run("generate --hierarchy \"3(3,2,4)\" --brands 3 --docs 20 --sentences 3 --vocab 30 --seed 2 "
                      "--out " + path("small.json")),
                  0);
        ASSERT_EQ(run("train --corpus " + path("small.json") + " --iters 5 --seed 3 --out " + path("model.json")), 0);
    }

    static void TearDownTestSuite() { fs::remove_all(dir); }

    static std::string path(const std::string& name) { return (dir / name).string(); }

    // Runs the CLI with stdout to `stdout_file` (discarded when empty).
    static int run(const std::string& args, const std::string& stdout_file = "") {
        const std::string out = stdout_file.empty() ? "/dev/null" : path(stdout_file);
        const std::string cmd = std::string(MHSTM_CLI_PATH) + " " + args + " > " + out + " 2> " + path("stderr.txt");
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    static std::string slurp(const std::string& name) {
        std::ifstream in(path(name));
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    static json read(const std::string& name) { return json::parse(slurp(name)); }
};

fs::path Cli::dir;

}  // namespace

TEST_F(Cli, GenerateGridScenario) {
    ASSERT_EQ(run("generate --scenario grid --seed 1 --out " + path("grid.json")), 0);
    const auto c = read("grid.json");
    EXPECT_EQ(c["reviews"].size(), 2000u);
    EXPECT_EQ(c["vocabulary"].size(), 9u);
    EXPECT_EQ(c["brands"].size(), 10u);
    EXPECT_EQ(read("grid.truth.json")["tree"]["nodes"].size(), 13u);
}

TEST_F(Cli, GenerateIsByteIdentical) {
    for (const char* name : {"a.json", "b.json"})
        ASSERT_EQ(run("generate --hierarchy \"3(3,2,4)\" --eta 0.1 --seed 7 --out " + path(name)), 0);
    EXPECT_EQ(slurp("a.json"), slurp("b.json"));
    EXPECT_EQ(slurp("a.truth.json"), slurp("b.truth.json"));
}

TEST_F(Cli, GenerateFourBranchHierarchy) {
    ASSERT_EQ(run("generate --hierarchy \"4(6,5,2,4)\" --docs 5 --out " + path("h.json")), 0);
    EXPECT_EQ(read("h.truth.json")["tree"]["nodes"].size(), 22u);
}

TEST_F(Cli, GenerateRejectsBadHierarchy) {
    EXPECT_EQ(run("generate --hierarchy \"3(3,2)\" --out " + path("bad.json")), 1);
}

TEST_F(Cli, TrainAppliesDefaults) {
    const auto m = read("model.json");
    EXPECT_EQ(m["format"], "mhstm-model");
    EXPECT_DOUBLE_EQ(m["config"]["rho2"].get<double>(), 0.5);
    EXPECT_DOUBLE_EQ(m["config"]["eta"].get<double>(), 0.1);
    EXPECT_EQ(m["config"]["depth"], 3);
    EXPECT_EQ(m["trace"].size(), 5u);
}

TEST_F(Cli, TrainRejectsZeroIterations) {
    EXPECT_EQ(run("train --corpus " + path("small.json") + " --iters 0"), 1);
}

TEST_F(Cli, TrainIsDeterministic) {
    for (const char* name : {"m1.json", "m2.json"})
        ASSERT_EQ(run("train --corpus " + path("small.json") + " --iters 4 --seed 11 --out " + path(name)), 0);
    EXPECT_EQ(slurp("m1.json"), slurp("m2.json"));
}

TEST_F(Cli, ConfigFileWithFlagPrecedence) {
    std::ofstream(path("cfg.json")) << R"({"iters": 2, "gamma": 0.5, "alpha": 2})";
    ASSERT_EQ(run("train --config " + path("cfg.json") + " --corpus " + path("small.json") + " --gamma 2 --out " +
                  path("mc.json")),
              0);
    const auto m = read("mc.json");
    EXPECT_DOUBLE_EQ(m["config"]["gamma"].get<double>(), 2.0);
    EXPECT_DOUBLE_EQ(m["config"]["alpha"].get<double>(), 2.0);
    EXPECT_EQ(m["config"]["max_iters"], 2);
}

TEST_F(Cli, ConfigFileRejectsUnknownKeys) {
    std::ofstream(path("bad_cfg.json")) << R"({"iters": 2, "temperature": 1})";
    EXPECT_EQ(run("train --config " + path("bad_cfg.json") + " --corpus " + path("small.json")), 1);
}

TEST_F(Cli, EvaluateReportsEveryMetricFamily) {
    ASSERT_EQ(run("evaluate --corpus " + path("small.json") + " --model " + path("model.json") + " --truth " +
                      path("small.truth.json") + " --particles 50",
                  "report.json"),
              0);
    const auto r = read("report.json");
    for (const char* key :
         {"spearman", "kendall", "ap_at_k", "topic_accuracy", "held_out_per_word", "coherence", "hierarchical_affinity"})
        EXPECT_FALSE(r[key].is_null()) << key;
    EXPECT_EQ(r["seed"], 3);
    ASSERT_EQ(run("evaluate --format csv --corpus " + path("small.json") + " --model " + path("model.json") +
                      " --truth " + path("small.truth.json") + " --particles 50",
                  "report.csv"),
              0);
    EXPECT_EQ(slurp("report.csv").rfind("scenario,seed,metric,value\n", 0), 0u);
}

TEST_F(Cli, ExportTreeDot) {
    ASSERT_EQ(run("export-tree --model " + path("model.json"), "tree.dot"), 0);
    const std::string dot = slurp("tree.dot");
    const auto m = read("model.json");
    const std::regex node_re(R"(\n  n\d+ \[label=)"), edge_re(R"(\n  n\d+ -> n\d+;)");
    const auto nodes = std::distance(std::sregex_iterator(dot.begin(), dot.end(), node_re), std::sregex_iterator());
    const auto edges = std::distance(std::sregex_iterator(dot.begin(), dot.end(), edge_re), std::sregex_iterator());
    EXPECT_EQ(static_cast<std::size_t>(nodes), m["tree"]["nodes"].size());
    EXPECT_EQ(edges, nodes - 1);
    EXPECT_NE(dot.find("beta: brand0="), std::string::npos);
    ASSERT_EQ(run("export-tree --format json --model " + path("model.json"), "tree.json"), 0);
    EXPECT_EQ(read("tree.json")["nodes"].size(), m["tree"]["nodes"].size());
}

TEST_F(Cli, RankThreeBrandsDescending) {
    const auto m = read("model.json");
    int leaf = -1;
    for (const auto& n : m["tree"]["nodes"])
        if (n["level"] == 2) leaf = n["id"].get<int>();
    ASSERT_GE(leaf, 0);
    ASSERT_EQ(run("rank --format json --model " + path("model.json") + " --topic " + std::to_string(leaf), "rank.json"),
              0);
    const auto rows = read("rank.json")["ranking"];
    ASSERT_EQ(rows.size(), 3u);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_GE(rows[i - 1]["score"], rows[i]["score"]);
    ASSERT_EQ(run("rank --model " + path("model.json") + " --topic " + std::to_string(leaf), "rank.csv"), 0);
    const auto csv = slurp("rank.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    EXPECT_EQ(run("rank --model " + path("model.json") + " --topic 99999"), 1);
}

TEST_F(Cli, LikelihoodOnFreshCorpus) {
    ASSERT_EQ(run("generate --hierarchy \"3(3,2,4)\" --brands 3 --docs 5 --sentences 3 --vocab 30 --seed 9 --out " +
                  path("fresh.json")),
              0);
    ASSERT_EQ(run("likelihood --model " + path("model.json") + " --corpus " + path("fresh.json") + " --particles 50",
                  "lik.json"),
              0);
    const auto r = read("lik.json");
    EXPECT_LT(r["per_word"].get<double>(), 0.0);
    EXPECT_TRUE(std::isfinite(r["per_word"].get<double>()));
    EXPECT_EQ(r["dropped_tokens"], 0);
}

TEST_F(Cli, ProfileReportsEachDepth) {
    ASSERT_EQ(run("profile --corpus " + path("small.json") + " --depths 2,4 --profile-iters 1", "prof.json"), 0);
    const auto p = read("prof.json");
    ASSERT_EQ(p["depths"].size(), 2u);
    EXPECT_EQ(p["depths"][1]["depth"], 4);
    EXPECT_GE(p["depths"][0]["estep_seconds"].get<double>(), 0.0);
}

TEST_F(Cli, ExitCodes) {
    EXPECT_EQ(run(""), 1);
    EXPECT_EQ(run("train --corpus " + path("small.json") + " --gamma"), 1);
    EXPECT_EQ(run("train --corpus " + path("missing.json")), 2);
    std::ofstream(path("broken.json")) << "{\"format\": \"mhstm-model\", \"config\": ";
    EXPECT_EQ(run("rank --model " + path("broken.json") + " --topic 0"), 2);
    auto m = read("model.json");
    m["tree"]["nodes"][0]["visits"][0] = m["tree"]["nodes"][0]["visits"][0].get<int>() + 1;
    std::ofstream(path("corrupt.json")) << m.dump();
    EXPECT_EQ(run("rank --model " + path("corrupt.json") + " --topic 0"), 3);
    EXPECT_EQ(run("--help"), 0);
}
