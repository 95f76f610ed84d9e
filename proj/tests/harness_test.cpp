#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "das/harness.hpp"
#include "das/report.hpp"
#include "run_support.hpp"
#include "support.hpp"

using namespace das;
using das::testing::bit_equal;
using das::testing::tiny_run_config;

namespace {

AccuracyMatrix matrix_of(const std::vector<std::vector<double>>& acc) {
  AccuracyMatrix A;
  for (const auto& row : acc) {
    A.rows.emplace_back();
    for (double v : row) A.rows.back().push_back({v, v / 2});
  }
  return A;
}

}  // namespace

TEST(Forgetting, NoChangeIsZero) {
  EXPECT_EQ(forgetting_rate(matrix_of({{0.8}, {0.8, 0.6}, {0.8, 0.6, 0.5}})), 0.0);
}

TEST(Forgetting, HandArithmeticAndAntisymmetry) {
  auto A = matrix_of({{0.8}, {0.75, 0.7}, {0.7, 0.8, 0.9}});
  EXPECT_NEAR(forgetting_rate(A), ((0.8 - 0.7) + (0.7 - 0.8)) / 2, 1e-15);
  auto B = matrix_of({{0.9}, {0.5, 0.6}, {0.7, 0.2, 0.4}});
  EXPECT_NEAR(forgetting_rate(B), ((0.9 - 0.7) + (0.6 - 0.2)) / 2, 1e-15);
  auto swapped = matrix_of({{0.7}, {0.5, 0.2}, {0.9, 0.6, 0.4}});
  EXPECT_NEAR(forgetting_rate(swapped), -forgetting_rate(B), 1e-15);
  EXPECT_NEAR(forgetting_rate(B, Metric::macro_f1), forgetting_rate(B) / 2, 1e-15);
}

TEST(Forgetting, UndefinedForOneDomain) {
  auto A = matrix_of({{0.8}});
  EXPECT_THROW(forgetting_rate(A), Error);
  EXPECT_FALSE(forgetting_if_defined(A, Metric::accuracy));
}

TEST(Plans, AblationsAreDistinct) {
  TrainConfig t;
  std::set<std::tuple<double, bool, bool, int>> seen;
  for (auto m : all_methods()) {
    auto p = plan_for(m, t);
    EXPECT_TRUE(seen.insert({p.lambda, p.softmask, p.init_general, static_cast<int>(p.importance)}).second)
        << method_name(m);
  }
  auto ncl = plan_for(Method::ncl, t);
  EXPECT_EQ(ncl.lambda, 0.0);
  EXPECT_FALSE(ncl.softmask);
  EXPECT_EQ(ncl.importance, ImportanceMode::none);
}

TEST(RunSequence, OneDomainGivesOneByOneMatrix) {
  auto cfg = tiny_run_config(1);
  auto run = run_sequence(prepare_run(cfg, 0), Method::das, cfg, 0);
  ASSERT_TRUE(run.ok()) << run.error;
  EXPECT_EQ(run.matrix.size(), 1u);
  EXPECT_FALSE(forgetting_if_defined(run.matrix, Metric::accuracy));
  auto j = seed_run_json(run);
  EXPECT_TRUE(j["forgetting"]["accuracy"].is_null());
}

TEST(RunSequence, NclEqualsPlainSequentialTrainer) {
  auto cfg = tiny_run_config(2);
  std::vector<double> after_ncl;
  RunHooks hooks;
  hooks.on_domain_end = [&](std::size_t t, const GatedTransformer& m, const DomainResult&, const auto&) {
    if (t == 1) after_ncl = m.flat_parameters();
  };
  auto run = run_sequence(prepare_run(cfg, 3), Method::ncl, cfg, 3, hooks);
  ASSERT_TRUE(run.ok()) << run.error;
  EXPECT_EQ(run.final_store.accumulated, ImportanceStore::zeros(prepare_run(cfg, 3).model).accumulated);

  // Oracle: the plain MLM trainer over the same corpora, seeds and optimizer.
  auto prep = prepare_run(cfg, 3);
  GatedTransformer model(prep.model, model_seed(3));
  Optimizer opt(cfg.train.optimizer);
  for (std::size_t t = 0; t < prep.domains.size(); ++t) {
    TrainConfig tc = cfg.train;
    tc.seed = domain_train_seed(3, t);
    train_domain_naive(model, prep.domains[t].corpus, tc, opt);
  }
  EXPECT_TRUE(bit_equal(model.flat_parameters(), after_ncl));
}

TEST(RunSequence, FinishedCorporaAreReleased) {
  auto cfg = tiny_run_config(2);
  std::vector<std::vector<bool>> availability;
  RunHooks hooks;
  hooks.on_domain_end = [&](std::size_t, const GatedTransformer&, const DomainResult&,
                            const std::vector<PreparedDomain>& domains) {
    availability.emplace_back();
    for (const auto& d : domains) availability.back().push_back(d.corpus.available());
    EXPECT_THROW(domains.front().corpus.get(), DataIsolationError);
  };
  auto run = run_sequence(prepare_run(cfg, 1), Method::das, cfg, 1, hooks);
  ASSERT_TRUE(run.ok()) << run.error;
  EXPECT_EQ(availability, (std::vector<std::vector<bool>>{{false, true}, {false, false}}));
}

TEST(RunSequence, EveryMethodRunsAndStoresDiffer) {
  auto cfg = tiny_run_config(2);
  std::vector<UnitValues> stores;
  for (auto m : all_methods()) {
    auto run = run_sequence(prepare_run(cfg, 2), m, cfg, 2);
    ASSERT_TRUE(run.ok()) << method_name(m) << ": " << run.error;
    EXPECT_EQ(run.matrix.size(), 2u);
    EXPECT_EQ(run.general_importance.has_value(), plan_for(m, cfg.train).init_general && m != Method::ncl)
        << method_name(m);
    for (const auto& d : run.domains) {
      for (const auto& l : d.log) {
        if (plan_for(m, cfg.train).lambda == 0.0) EXPECT_EQ(l.contrast, 0.0);
        else EXPECT_GT(l.contrast, 0.0);
      }
    }
  }
}

TEST(RunSequence, DomainOrderMatters) {
  auto cfg = tiny_run_config(2);
  auto a = run_sequence(prepare_run(cfg, 4), Method::das, cfg, 4);
  std::swap(cfg.domains[0], cfg.domains[1]);
  auto b = run_sequence(prepare_run(cfg, 4), Method::das, cfg, 4);
  ASSERT_TRUE(a.ok() && b.ok());
  EXPECT_NE(a.final_store.accumulated, b.final_store.accumulated);
}

TEST(RunSequence, FailureKeepsPartialRows) {
  auto cfg = tiny_run_config(2);
  auto prep = prepare_run(cfg, 5);
  prep.domains[1].task.train_y[0] = 7;  // outside the class set
  auto run = run_sequence(std::move(prep), Method::ncl, cfg, 5);
  EXPECT_FALSE(run.ok());
  EXPECT_EQ(run.matrix.size(), 1u);
}

TEST(Report, RoundTripAndCsvRowCount) {
  auto cfg = tiny_run_config(3);
  cfg.methods = {Method::das};
  std::vector<SeedRun> runs{run_sequence(prepare_run(cfg, 0), Method::das, cfg, 0)};
  ASSERT_TRUE(runs[0].ok()) << runs[0].error;
  auto loaded = load_results(nlohmann::json::parse(dump_results(results_json(cfg, runs))));
  ASSERT_EQ(loaded.runs.size(), 1u);
  EXPECT_EQ(loaded.runs[0].matrix, runs[0].matrix);
  auto csv = results_csv(runs);
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), 1u + (1 + 2 + 3));
}

TEST(Report, EmptyMatrixHasExplicitNulls) {
  auto cfg = tiny_run_config(2);
  cfg.methods = {Method::das};
  SeedRun r;
  r.domain_names = {"domain1", "domain2"};
  r.error = "stopped";
  auto j = results_json(cfg, {r});
  EXPECT_EQ(j["status"], "failed");
  const auto& run = j["methods"]["das"]["runs"][0];
  EXPECT_TRUE(run["matrix"]["accuracy"].empty());
  EXPECT_TRUE(run["forgetting"]["accuracy"].is_null());
  EXPECT_TRUE(j["methods"]["das"]["summary"]["forgetting"]["accuracy"].is_null());
}

TEST(Report, SummaryUsesSampleStd) {
  auto s = summarize({1.0, 2.0, 4.0});
  EXPECT_NEAR(s.mean, 7.0 / 3, 1e-15);
  EXPECT_NEAR(s.std, std::sqrt(((1 - 7.0 / 3) * (1 - 7.0 / 3) + (2 - 7.0 / 3) * (2 - 7.0 / 3) + (4 - 7.0 / 3) * (4 - 7.0 / 3)) / 2), 1e-15);
  EXPECT_EQ(summarize({3.0}).std, 0.0);
}

TEST(Report, SimilarityTableIsSymmetricWithUnitDiagonal) {
  auto cfg = tiny_run_config(2);
  auto run = run_sequence(prepare_run(cfg, 6), Method::das, cfg, 6);
  ASSERT_TRUE(run.ok());
  auto t = importance_similarity_table(run);
  EXPECT_EQ(t.labels, (std::vector<std::string>{"general", "domain1", "domain2"}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      if (std::isnan(t.values[i][j])) continue;
      EXPECT_NEAR(t.values[i][j], t.values[j][i], 1e-15);
      if (i == j) EXPECT_NEAR(t.values[i][i], 1.0, 1e-12);
    }
}

TEST(Report, WriteReportFailsOnUnwritableDirectory) {
  auto cfg = tiny_run_config(1);
  const auto file = std::filesystem::temp_directory_path() / "das_not_a_dir";
  { std::ofstream(file) << "x"; }
  EXPECT_THROW(write_report(file / "sub", cfg, {}), std::exception);
  std::filesystem::remove(file);
}
