#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "das/commands.hpp"
#include "run_support.hpp"
#include "support.hpp"

using namespace das;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

fs::path write_config(const fs::path& dir, const RunConfig& cfg, const std::string& name = "tiny.json") {
  auto path = dir / name;
  std::ofstream(path) << run_config_json(cfg).dump(2);
  return path;
}

}  // namespace

TEST(CmdRun, InvalidConfigListsViolations) {
  TempDir tmp("das_cli_invalid");
  std::ofstream(tmp.path / "bad.json") << R"({"train": {"lambda": 1.0, "lr": 0.001, "batch_size": 4, "steps": 2}, "oops": 1})";
  std::ostringstream out, err;
  EXPECT_EQ(cmd_run((tmp.path / "bad.json").string(), {}, out, err), 2);
  EXPECT_NE(err.str().find("train.tau is required"), std::string::npos);
  EXPECT_NE(err.str().find("unknown key 'oops'"), std::string::npos);
}

TEST(CmdRun, WritesReportsAndArtifacts) {
  TempDir tmp("das_cli_run");
  auto cfg = das::testing::tiny_run_config(2);
  cfg.save_checkpoints = true;
  cfg.methods = {Method::das};
  auto path = write_config(tmp.path, cfg);
  std::ostringstream out, err;
  ASSERT_EQ(cmd_run(path.string(), {{}, std::nullopt, (tmp.path / "out").string()}, out, err), 0) << err.str();
  const auto dir = tmp.path / "out";
  for (const char* f : {"results.json", "results.csv", "importance_similarity.csv"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto seed = seed_dir(dir, Method::das, 0);
  EXPECT_TRUE(fs::exists(seed / "train_log.1.jsonl"));
  EXPECT_TRUE(fs::exists(seed / "importance" / "2-domain2.json"));
  EXPECT_TRUE(fs::exists(seed / "checkpoints" / "2-domain2.json"));
  std::ifstream log(seed / "train_log.1.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("mlm_loss") && j.contains("contrast_loss") && j.contains("total") && j.contains("step"));
  }
  EXPECT_EQ(lines, cfg.train.steps);
  auto results = load_results_file(dir / "results.json");
  EXPECT_EQ(results.config, run_config_json(cfg));
}

TEST(CmdRun, MethodOverrideForcesNcl) {
  TempDir tmp("das_cli_ncl");
  auto cfg = das::testing::tiny_run_config(2);
  auto path = write_config(tmp.path, cfg);
  std::ostringstream out, err;
  ASSERT_EQ(cmd_run(path.string(), {{7}, Method::ncl, (tmp.path / "out").string()}, out, err), 0) << err.str();
  auto j = nlohmann::json::parse(slurp(tmp.path / "out" / "results.json"));
  EXPECT_EQ(j["config"]["methods"], nlohmann::json::array({"ncl"}));
  EXPECT_EQ(j["seeds"], nlohmann::json::array({7}));
  const auto& run = j["methods"]["ncl"]["runs"][0];
  for (const auto& l : run["losses"]) EXPECT_EQ(l["mean"]["contrast_loss"], 0.0);
  EXPECT_TRUE(run["importance_similarity"]["labels"].empty());
}

TEST(CmdRun, SameConfigSameBytes) {
  TempDir tmp("das_cli_repro");
  auto cfg = das::testing::tiny_run_config(2);
  auto path = write_config(tmp.path, cfg);
  std::ostringstream out, err;
  ASSERT_EQ(cmd_run(path.string(), {{}, std::nullopt, (tmp.path / "a").string()}, out, err), 0);
  ASSERT_EQ(cmd_run(path.string(), {{}, std::nullopt, (tmp.path / "b").string()}, out, err), 0);
  EXPECT_EQ(slurp(tmp.path / "a" / "results.json"), slurp(tmp.path / "b" / "results.json"));
  EXPECT_EQ(slurp(tmp.path / "a" / "results.csv"), slurp(tmp.path / "b" / "results.csv"));
}

TEST(CmdRun, OutputRootFromEnvironment) {
  TempDir tmp("das_cli_env");
  RunConfig cfg = das::testing::tiny_run_config(1);
  EXPECT_EQ(resolve_output_dir("x/exp.json", cfg, "flag"), fs::path("flag"));
  ::setenv(output_root_env, tmp.path.c_str(), 1);
  EXPECT_EQ(resolve_output_dir("x/exp.json", cfg, ""), tmp.path / "exp");
  ::unsetenv(output_root_env);
  EXPECT_EQ(resolve_output_dir("x/exp.json", cfg, ""), fs::path("runs") / "exp");
  cfg.output_dir = "set";
  EXPECT_EQ(resolve_output_dir("x/exp.json", cfg, ""), fs::path("set"));
}

TEST(CmdRun, MidRunFailureWritesPartialReport) {
  TempDir tmp("das_cli_fail");
  std::ofstream(tmp.path / "c.txt") << "a b c d a b c d a b";
  std::ofstream(tmp.path / "train.tsv") << "0\ta b\n1\tc d\n";
  std::ofstream(tmp.path / "test.tsv") << "0\ta b\n5\tc d\n";  // label 5 is outside the class set
  auto cfg = das::testing::tiny_run_config(1);
  cfg.methods = {Method::ncl};
  DomainSpec file;
  file.name = "files";
  file.corpus_file = (tmp.path / "c.txt").string();
  file.task_train_file = (tmp.path / "train.tsv").string();
  file.task_test_file = (tmp.path / "test.tsv").string();
  cfg.domains.push_back(file);
  auto path = write_config(tmp.path, cfg);
  std::ostringstream out, err;
  EXPECT_EQ(cmd_run(path.string(), {{}, std::nullopt, (tmp.path / "out").string()}, out, err), 1);
  auto j = nlohmann::json::parse(slurp(tmp.path / "out" / "results.json"));
  EXPECT_EQ(j["status"], "failed");
  EXPECT_EQ(j["methods"]["ncl"]["runs"][0]["matrix"]["accuracy"].size(), 1u);
}

TEST(CmdImportance, SnapshotEqualsLibraryAndListsTopK) {
  TempDir tmp("das_cli_importance");
  auto cfg = das::testing::tiny_run_config(1);
  auto prep = prepare_run(cfg, 0);
  GatedTransformer model(prep.model, 3);
  model.save((tmp.path / "ckpt.json").string(), prep.vocab);
  write_corpus(prep.domains[0].corpus.get(), prep.vocab, (tmp.path / "corpus.txt").string());
  ImportanceArgs a;
  a.checkpoint = (tmp.path / "ckpt.json").string();
  a.corpus = (tmp.path / "corpus.txt").string();
  a.config = write_config(tmp.path, cfg).string();
  a.tokens = 64;
  a.top_k = 3;
  a.seed = 2;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_importance(a, out, err), 0) << err.str();
  auto snap = snapshot_from_json(nlohmann::json::parse(slurp(tmp.path / "importance.json")));
  auto subset = sample_subset(prep.domains[0].corpus.get(), 64, 32, 2);
  EXPECT_EQ(snap.accumulated, initialize_general_importance(model, subset, 2));
  std::istringstream lines(out.str());
  std::string line;
  std::getline(lines, line);
  for (std::size_t l = 0; l < prep.model.n_layers; ++l) {
    ASSERT_TRUE(std::getline(lines, line));
    EXPECT_EQ(std::count(line.begin(), line.end(), '='), 3) << line;
  }
}

TEST(CmdImportance, ZeroDropoutGivesZeros) {
  TempDir tmp("das_cli_importance0");
  auto cfg = das::testing::tiny_run_config(1);
  cfg.model.dropout_p = 0.0;
  auto prep = prepare_run(cfg, 0);
  GatedTransformer(prep.model, 3).save((tmp.path / "ckpt.json").string(), prep.vocab);
  write_corpus(prep.domains[0].corpus.get(), prep.vocab, (tmp.path / "corpus.txt").string());
  ImportanceArgs a;
  a.checkpoint = (tmp.path / "ckpt.json").string();
  a.corpus = (tmp.path / "corpus.txt").string();
  a.tokens = 64;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_importance(a, out, err), 0) << err.str();
  snapshot_from_json(nlohmann::json::parse(slurp(tmp.path / "importance.json")))
      .accumulated.scores.for_each([](double v) { EXPECT_EQ(v, 0.0); });
}

TEST(CmdImportance, ShapeMismatchIsAnError) {
  TempDir tmp("das_cli_importance_shape");
  auto cfg = das::testing::tiny_run_config(1);
  auto prep = prepare_run(cfg, 0);
  GatedTransformer(prep.model, 3).save((tmp.path / "ckpt.json").string(), prep.vocab);
  write_corpus(prep.domains[0].corpus.get(), prep.vocab, (tmp.path / "corpus.txt").string());
  cfg.model.d_ff = 32;
  ImportanceArgs a;
  a.checkpoint = (tmp.path / "ckpt.json").string();
  a.corpus = (tmp.path / "corpus.txt").string();
  a.config = write_config(tmp.path, cfg).string();
  std::ostringstream out, err;
  EXPECT_EQ(cmd_importance(a, out, err), 2);
  EXPECT_NE(err.str().find("does not match"), std::string::npos);
}

TEST(CmdReport, HandBuiltResultsPrintOracleForgetting) {
  TempDir tmp("das_cli_report");
  auto cfg = das::testing::tiny_run_config(3);
  cfg.methods = {Method::das};
  cfg.seeds = {0};
  SeedRun r;
  r.domain_names = {"domain1", "domain2", "domain3"};
  r.matrix.rows = {{{0.9, 0.9}}, {{0.8, 0.8}, {0.7, 0.7}}, {{0.6, 0.6}, {0.65, 0.65}, {0.5, 0.5}}};
  write_report(tmp.path, cfg, {r});
  const double oracle = ((0.9 - 0.6) + (0.7 - 0.65)) / 2;  // 0.175
  std::ostringstream out, err;
  ASSERT_EQ(cmd_report({tmp.path.string(), Metric::accuracy, ""}, out, err), 0) << err.str();
  EXPECT_NE(out.str().find("forgetting: " + format_fixed(oracle) + " +- 0.0000 (n=1)"), std::string::npos) << out.str();
}

TEST(CmdReport, PlotsAndGracefulSkip) {
  TempDir tmp("das_cli_plots");
  auto cfg = das::testing::tiny_run_config(2);
  cfg.methods = {Method::das};
  SeedRun r;
  r.domain_names = {"domain1", "domain2"};
  r.matrix.rows = {{{0.9, 0.9}}, {{0.8, 0.8}, {0.7, 0.7}}};
  write_report(tmp.path, cfg, {r});
  std::ostringstream out, err;
  ASSERT_EQ(cmd_report({tmp.path.string(), Metric::macro_f1, (tmp.path / "plots").string()}, out, err), 0);
  EXPECT_TRUE(fs::exists(tmp.path / "plots" / "das-macro_f1.svg"));
  std::ofstream(tmp.path / "blocker") << "x";
  std::ostringstream out2;
  ASSERT_EQ(cmd_report({tmp.path.string(), Metric::accuracy, (tmp.path / "blocker" / "p").string()}, out2, err), 0);
  EXPECT_NE(out2.str().find("plots skipped"), std::string::npos);
  EXPECT_NE(out2.str().find("forgetting"), std::string::npos);
}

TEST(CmdReport, CorruptResultsFile) {
  TempDir tmp("das_cli_corrupt");
  std::ofstream(tmp.path / "results.json") << "{ not json";
  std::ostringstream out, err;
  EXPECT_EQ(cmd_report({tmp.path.string(), Metric::accuracy, ""}, out, err), 1);
  EXPECT_NE(err.str().find("corrupt"), std::string::npos);
}
