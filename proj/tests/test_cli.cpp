#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctrlkit/ctrlkit.hpp"
#include "test_util.hpp"

using namespace ctrlkit;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

Run ctrlkit_cli(const std::string& args) {
  const std::string cmd = "\"" CTRLKIT_CLI "\" " + args + " 2>&1";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ctrlkit_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // tiny.ckpt with a matching 50-id vocabulary that has news/wiki codes.
  std::string tiny_model_dir() {
    const auto m = dir_ / "tiny";
    fs::create_directories(m);
    fs::copy_file(std::string(CTRLKIT_FIXTURES) + "/tiny.ckpt", m / "model.ckpt");
    std::vector<std::string> alphabet;
    for (int i = 0; i < 44; ++i) alphabet.push_back(std::string(1, static_cast<char>('0' + i)));
    save_vocab((m / "vocab.txt").string(), add_control_codes(Vocab(alphabet, {}), ctrlkit::testing::two_genre_table()));
    return m.string();
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, UnknownVerbAndBadOptionsExitTwo) {
  auto r = ctrlkit_cli("frobnicate");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("usage"), std::string::npos);
  EXPECT_EQ(ctrlkit_cli("").code, 2);
  EXPECT_EQ(ctrlkit_cli("generate --occ news").code, 2);  // --model missing
  EXPECT_EQ(ctrlkit_cli("index").code, 2);
}

TEST_F(CliTest, HelpExitsZero) {
  EXPECT_EQ(ctrlkit_cli("--help").code, 0);
  auto r = ctrlkit_cli("grid --help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("--p-values"), std::string::npos);
}

TEST_F(CliTest, RuntimeErrorsExitOneWithMessage) {
  auto r = ctrlkit_cli("perplexity --model " + path("missing") + " --texts " + path("none.txt"));
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.output.rfind("error: ", 0), 0u) << r.output;
  const auto m = tiny_model_dir();
  EXPECT_EQ(ctrlkit_cli("generate --model " + m + " --occ sport --prompt 1").code, 1);
  EXPECT_EQ(ctrlkit_cli("generate --model " + m + " --occ news --preset M9").code, 1);
  EXPECT_EQ(ctrlkit_cli("generate --model " + m + " --occ news --temperature 1.5").code, 1);
}

TEST_F(CliTest, GeneratePresetRecordsItsParameters) {
  const auto m = tiny_model_dir();
  auto r = ctrlkit_cli("--seed 10 --out " + path("g.jsonl") + " generate --model " + m +
                      " --occ news --prompt 123 --preset M3 --count 2 --max-tokens 12");
  ASSERT_EQ(r.code, 0) << r.output;
  std::istringstream lines(slurp(path("g.jsonl")));
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["params"]["preset"], "M3");
    EXPECT_DOUBLE_EQ(j["params"]["r"].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(j["params"]["p"].get<double>(), 0.9);
    EXPECT_DOUBLE_EQ(j["params"]["T"].get<double>(), 1.0);
    EXPECT_EQ(j["params"]["seed"].get<int>(), 10 + n);
    EXPECT_EQ(j["occ"], "news");
    EXPECT_LE(j["ids"].size(), 12u);
    ++n;
  }
  EXPECT_EQ(n, 2);

  // Same seed, same bytes; an explicit override drops the preset tag.
  ASSERT_EQ(ctrlkit_cli("--seed 10 --out " + path("h.jsonl") + " generate --model " + m +
                        " --occ news --prompt 123 --preset M3 --count 2 --max-tokens 12")
                .code,
            0);
  EXPECT_EQ(slurp(path("g.jsonl")), slurp(path("h.jsonl")));
  auto o = ctrlkit_cli("generate --model " + m + " --occ news --prompt 1 --preset M3 --top-p 0.5 --max-tokens 3");
  ASSERT_EQ(o.code, 0);
  EXPECT_EQ(nlohmann::json::parse(o.output)["params"].count("preset"), 0u);
}

TEST_F(CliTest, GreedyGenerationIgnoresSeed) {
  const auto m = tiny_model_dir();
  auto a = ctrlkit_cli("--seed 1 generate --model " + m + " --occ wiki --prompt 12 --temperature 0 --max-tokens 10");
  auto b = ctrlkit_cli("--seed 99 generate --model " + m + " --occ wiki --prompt 12 --temperature 0 --max-tokens 10");
  ASSERT_EQ(a.code, 0) << a.output;
  EXPECT_EQ(nlohmann::json::parse(a.output)["ids"], nlohmann::json::parse(b.output)["ids"]);
}

TEST_F(CliTest, IndexBuildSearchOverlap) {
  {
    std::ofstream c(path("c.tsv"), std::ios::binary);
    write_corpus(c, {ctrlkit::testing::make_doc(0, "news", "ett två tre fyra fem"),
                     ctrlkit::testing::make_doc(1, "wiki", "tre fyra fem sex")});
    std::ofstream e(path("eval.txt"), std::ios::binary);
    e << "ett två tre\ntre fyra fem sex sju\nx\n";
  }
  ASSERT_EQ(ctrlkit_cli("--out " + path("i.idx") + " index build --corpus " + path("c.tsv") + " --k 3").code, 0);
  auto s = ctrlkit_cli("index search --idx " + path("i.idx") + " --query \"tre fyra\"");
  ASSERT_EQ(s.code, 0);
  // One row per matching k-gram; the smallest posting stands for it.
  EXPECT_EQ(s.output,
            "kgram\ttf\tdoc_id\tcategory\tprovenance\turl\n"
            "två tre fyra\t1\t0\tnews\ta\t-\n"
            "tre fyra fem\t2\t0\tnews\ta\t-\n");
  auto o = ctrlkit_cli("index-overlap --idx " + path("i.idx") + " --eval " + path("eval.txt") + " --threshold 1,2");
  ASSERT_EQ(o.code, 0);
  // Eval 3-grams: (ett två tre) tf1, (tre fyra fem) tf2, (fyra fem sex) tf1, (fem sex sju) absent.
  EXPECT_EQ(o.output, "dataset,N_short%,O_1^3,O_2^3\neval.txt,33.33,75.00,25.00\n");
  {
    std::ofstream e(path("rep.txt"), std::ios::binary);
    e << "tre fyra fem tre fyra fem\n";
  }
  // Occurrences: 4 grams, 2 of them (tre fyra fem) with tf 2. Types: 3 distinct grams, 1 with tf 2.
  auto occ = ctrlkit_cli("index overlap --idx " + path("i.idx") + " --eval " + path("rep.txt") + " --threshold 2");
  auto typ = ctrlkit_cli("index overlap --types --idx " + path("i.idx") + " --eval " + path("rep.txt") + " --threshold 2");
  EXPECT_EQ(occ.output, "dataset,N_short%,O_2^3\nrep.txt,0.00,50.00\n");
  EXPECT_EQ(typ.output, "dataset,N_short%,O_2^3\nrep.txt,0.00,33.33\n");
}

TEST_F(CliTest, BaselineEvaluationWritesTaskCsv) {
  {
    std::ofstream t(path("test.jsonl"), std::ios::binary);
    t << R"({"text": "a", "label": "Ja"})" << '\n' << R"({"text": "b", "label": "Ja"})" << '\n'
      << R"({"text": "c", "label": "Nej"})" << '\n';
  }
  auto r = ctrlkit_cli("eval-task --baseline --task dalaj-ged --test " + path("test.jsonl"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output.rfind(kTaskCsvHeader, 0), 0u);
  EXPECT_NE(r.output.find("dalaj-ged,base,"), std::string::npos) << r.output;
  EXPECT_EQ(ctrlkit_cli("eval-task --task dalaj-ged --test " + path("test.jsonl")).code, 1);
}

TEST_F(CliTest, PerplexityReportsPerTextAndPooled) {
  const auto m = tiny_model_dir();
  {
    std::ofstream t(path("t.txt"), std::ios::binary);
    t << "12345\n0;;:\n";
  }
  auto r = ctrlkit_cli("perplexity --model " + m + " --texts " + path("t.txt") + " --window 4");
  ASSERT_EQ(r.code, 0) << r.output;
  std::istringstream in(r.output);
  std::string header, a, b, all;
  std::getline(in, header);
  std::getline(in, a);
  std::getline(in, b);
  std::getline(in, all);
  EXPECT_EQ(header, "text,tokens,window,perplexity");  // tokens = predicted positions
  EXPECT_EQ(a.rfind("0,4,4,", 0), 0u);
  EXPECT_EQ(all.rfind("all,7,4,", 0), 0u);
}
