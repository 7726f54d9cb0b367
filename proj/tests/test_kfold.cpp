#include <random>
#include <set>

#include <gtest/gtest.h>

#include "support.hpp"
#include "symkfcv/io.hpp"
#include "symkfcv/kfold.hpp"

using namespace symkfcv;
namespace ts = testsupport;

namespace {

void expect_partition(const FoldAssignment& a, std::size_t n, int k) {
  ASSERT_EQ(a.fold_of.size(), n);
  std::vector<std::size_t> sizes(static_cast<std::size_t>(k));
  for (int f : a.fold_of) {
    ASSERT_GE(f, 0);
    ASSERT_LT(f, k);
    ++sizes[static_cast<std::size_t>(f)];
  }
  std::vector<int> validated(n, 0);
  for (int f = 0; f < k; ++f) {
    const auto val = a.members(f);
    const auto train = a.complement(f);
    ASSERT_EQ(val.size() + train.size(), n);
    for (auto i : val) ++validated[i];
  }
  for (int v : validated) ASSERT_EQ(v, 1);
  const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
  ASSERT_GE(*lo, 1u);
  ASSERT_LE(*hi - *lo, 1u);
}

ExperimentConfig toy_config(Protocol p) {
  ExperimentConfig cfg;
  cfg.protocol = p;
  cfg.model.embed_dim = 16;
  cfg.model.heads = 2;
  cfg.model.layers = 1;
  cfg.model.epochs = 2;
  cfg.model.batch_size = 4;
  cfg.master_seed = 42;
  return cfg;
}

std::vector<DatasetIndex> toy_dataset(std::size_t n) {
  GrammarConfig g;
  g.max_depth = 3;
  g.min_points = 10;
  g.max_points = 20;
  return generate_dataset(g, n, 8).indices;
}

}  // namespace

TEST(Folds, ExactDivision) {
  const auto a = make_folds(10, 5, 1);
  expect_partition(a, 10, 5);
  for (int f = 0; f < 5; ++f) EXPECT_EQ(a.members(f).size(), 2u);
}

TEST(Folds, RemainderGoesToFirstFolds) {
  const auto a = make_folds(7, 3, 1);
  EXPECT_EQ(a.members(0).size(), 3u);
  EXPECT_EQ(a.members(1).size(), 2u);
  EXPECT_EQ(a.members(2).size(), 2u);
}

TEST(Folds, FullScale) {
  // 15,000 indices, k = 5
  const auto a = make_folds(15000, 5, 3);
  for (int f = 0; f < 5; ++f) EXPECT_EQ(a.members(f).size(), 3000u);
}

TEST(Folds, Deterministic) {
  EXPECT_EQ(make_folds(100, 4, 9).fold_of, make_folds(100, 4, 9).fold_of);
  EXPECT_NE(make_folds(100, 4, 9).fold_of, make_folds(100, 4, 10).fold_of);
}

TEST(Folds, InvalidK) {
  EXPECT_THROW(make_folds(10, 1, 0), std::invalid_argument);
  EXPECT_THROW(make_folds(3, 4, 0), std::invalid_argument);
}

TEST(Folds, RandomTriples) {
  std::mt19937_64 rng(123);
  for (int t = 0; t < 50; ++t) {
    const int k = std::uniform_int_distribution<int>(2, 10)(rng);
    const auto n = std::uniform_int_distribution<std::size_t>(static_cast<std::size_t>(k), 800)(rng);
    expect_partition(make_folds(n, k, rng()), n, k);
  }
}

TEST(Averages, Table1) {
  const auto [t, v] = average_losses(ts::table1());
  EXPECT_NEAR(t, ts::kTable1OverallTrain, 1e-9);
  EXPECT_NEAR(v, ts::kTable1OverallVal, 1e-9);
}

TEST(Averages, Table2) {
  const auto [t, v] = average_losses(ts::table2());
  EXPECT_NEAR(t, ts::kTable2OverallTrain, 1e-5);
  EXPECT_NEAR(v, ts::kTable2OverallVal, 1e-5);
  std::vector<double> col(ts::kTable2Val.begin(), ts::kTable2Val.end());
  EXPECT_NEAR(v, ts::column_mean(col), 1e-15);
}

TEST(Averages, SingleAndEmpty) {
  const std::vector<LossRecord> one = {{1, 0.25, 0.75}};
  EXPECT_EQ(average_losses(one), std::make_pair(0.25, 0.75));
  EXPECT_THROW(average_losses(std::vector<LossRecord>{}), std::invalid_argument);
}

TEST(Improvement, Examples) {
  const double old_val = ts::column_mean({ts::kTable1Val.begin(), ts::kTable1Val.end()});
  const double new_val = ts::column_mean({ts::kTable2Val.begin(), ts::kTable2Val.end()});
  EXPECT_NEAR(relative_improvement(old_val, new_val), ts::kHeadlineImprovement, 0.01);
  EXPECT_EQ(relative_improvement(0.4, 0.4), 0.0);
  EXPECT_DOUBLE_EQ(relative_improvement(0.25, 0.5), -100.0);
  EXPECT_THROW(relative_improvement(0.0, 1.0), std::invalid_argument);
}

TEST(Improvement, Algebra) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> ua(1e-3, 10), up(-99.9, 99.9);
  for (int i = 0; i < 1000; ++i) {
    const double a = ua(rng), p = up(rng);
    ASSERT_NEAR(relative_improvement(a, a * (1 - p / 100)), p, 1e-9);
  }
}

TEST(SummaryFiles, RoundTrip) {
  const auto dir = ts::temp_dir("summary");
  const LossSummary s = summarize(LossUnit::Epoch, ts::table1());
  write_summary(s, dir / "summary.json");
  const LossSummary back = read_summary(dir / "summary.json");
  EXPECT_EQ(back.records, s.records);
  EXPECT_EQ(back.avg_train, s.avg_train);
  EXPECT_EQ(back.avg_val, s.avg_val);
  EXPECT_EQ(parse_loss_csv(loss_csv(s.records)), s.records);
}

TEST(SummaryFiles, RejectsTamperedAverages) {
  auto j = summary_to_json(summarize(LossUnit::Fold, ts::table2()));
  j["avg_val"] = 0.27858;
  EXPECT_THROW(summary_from_json(j), SummaryFormatError);
  j.erase("avg_val");
  EXPECT_THROW(summary_from_json(j), SummaryFormatError);
}

TEST(Protocols, KfcvStructure) {
  auto data = toy_dataset(4);
  auto cfg = toy_config(Protocol::Kfcv);
  cfg.k = 2;
  const auto r = run_kfcv(data, cfg);
  ASSERT_EQ(r.summary.records.size(), 2u);
  EXPECT_EQ(r.summary.unit, LossUnit::Fold);
  ASSERT_EQ(r.rounds.size(), 2u);
  std::vector<int> validated(4, 0);
  for (const auto& [train, val] : r.rounds) {
    for (auto i : val) {
      ++validated[i];
      EXPECT_EQ(std::find(train.begin(), train.end(), i), train.end());
    }
  }
  EXPECT_EQ(validated, std::vector<int>(4, 1));
  ASSERT_EQ(r.summary.trajectories.size(), 2u);
  for (std::size_t f = 0; f < 2; ++f) {
    EXPECT_EQ(r.summary.trajectories[f].size(), 2u);
    EXPECT_EQ(r.summary.records[f].train_loss, r.summary.trajectories[f].back().train_loss);
    EXPECT_EQ(r.summary.records[f].val_loss, r.summary.trajectories[f].back().val_loss);
  }
  ASSERT_TRUE(r.summary.representative_fold);
  ASSERT_TRUE(r.model);
}

TEST(Protocols, KfcvDeterministic) {
  auto data = toy_dataset(12);
  auto cfg = toy_config(Protocol::Kfcv);
  cfg.k = 3;
  const auto a = run_kfcv(data, cfg), b = run_kfcv(data, cfg);
  EXPECT_EQ(a.summary.records, b.summary.records);
  EXPECT_EQ(a.rounds, b.rounds);
}

TEST(Protocols, BaselineSplitAndEpochs) {
  auto data = toy_dataset(20);
  auto cfg = toy_config(Protocol::Baseline);
  cfg.model.epochs = 1;
  const auto a = run_baseline(data, cfg);
  ASSERT_EQ(a.summary.records.size(), 1u);
  EXPECT_EQ(a.summary.avg_train, a.summary.records[0].train_loss);
  EXPECT_EQ(a.summary.avg_val, a.summary.records[0].val_loss);
  ASSERT_EQ(a.rounds.size(), 1u);
  EXPECT_EQ(a.rounds[0].first.size(), 16u);
  EXPECT_EQ(a.rounds[0].second.size(), 4u);
  const auto b = run_baseline(data, cfg);
  EXPECT_EQ(a.rounds, b.rounds);
  EXPECT_EQ(a.summary.records, b.summary.records);
}

TEST(Protocols, RetrainAll) {
  auto data = toy_dataset(6);
  auto cfg = toy_config(Protocol::Kfcv);
  cfg.k = 2;
  cfg.model.epochs = 1;
  cfg.retrain_all = true;
  const auto r = run_kfcv(data, cfg);
  EXPECT_FALSE(r.summary.representative_fold);
  ASSERT_TRUE(r.model);
  EXPECT_EQ(r.fold_models.size(), 2u);
}

TEST(Protocols, ExperimentDirectory) {
  const auto dir = ts::temp_dir("experiment");
  auto data = toy_dataset(6);
  auto cfg = toy_config(Protocol::Kfcv);
  cfg.k = 3;
  cfg.model.epochs = 1;
  cfg.output_dir = dir;
  const auto r = run_kfcv(data, cfg);
  write_experiment(r, cfg);
  for (int f = 1; f <= 3; ++f) {
    EXPECT_TRUE(std::filesystem::exists(dir / ("fold_" + std::to_string(f)) / "epochs.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / ("fold_" + std::to_string(f)) / "checkpoint"));
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint"));
  const auto s = read_summary(dir / "summary.json");
  EXPECT_EQ(s.records, r.summary.records);
  EXPECT_EQ(parse_loss_csv(read_file(dir / "epochs.csv")), r.summary.records);
}
