#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "conslide/errors.hpp"
#include "conslide/metrics.hpp"
#include "support.hpp"

namespace conslide {
namespace {

// ---- direct-formula oracles ----

double oracle_pair_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double credit = 0.0;
  for (double p : pos)
    for (double n : neg) credit += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return credit / static_cast<double>(pos.size() * neg.size());
}

double oracle_bwt(const AccuracyMatrix& r) {
  const std::size_t t = r.tasks();
  double s = 0.0;
  for (std::size_t i = 0; i < t - 1; ++i) s += r(t - 1, i) - r(i, i);
  return s / static_cast<double>(t - 1);
}

double oracle_forgetting(const AccuracyMatrix& r, std::size_t final_row) {
  const std::size_t t = r.tasks();
  double s = 0.0;
  for (std::size_t i = 0; i < t - 1; ++i) {
    double best = r(0, i);
    for (std::size_t k = 0; k < t - 1; ++k) best = std::max(best, r(k, i));
    s += best - r(final_row, i);
  }
  return s / static_cast<double>(t - 1);
}

AccuracyMatrix random_matrix(Rng& rng, std::size_t t) {
  std::uniform_int_distribution<int> d(0, 40);  // multiples of 1/40 exercise ties
  AccuracyMatrix m(t);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j) m.set(i, j, d(rng) / 40.0);
  return m;
}

TEST(AccuracyTest, Examples) {
  EXPECT_EQ(accuracy(std::vector<std::size_t>{1, 2, 3}, std::vector<std::size_t>{1, 2, 3}), 1.0);
  EXPECT_EQ(accuracy(std::vector<std::size_t>{0, 0}, std::vector<std::size_t>{1, 1}), 0.0);
  EXPECT_EQ(accuracy(std::vector<std::size_t>{1, 0, 1, 1}, std::vector<std::size_t>{1, 0, 1, 0}), 0.75);
  EXPECT_THROW(accuracy(std::vector<std::size_t>{}, std::vector<std::size_t>{}), ConfigError);
  EXPECT_THROW(accuracy(std::vector<std::size_t>{1}, std::vector<std::size_t>{1, 2}), ConfigError);
}

std::vector<TaskInfo> two_tasks() { return {{0, "a", 0, 2}, {1, "b", 2, 4}}; }

TEST(MaskedAccuracyTest, SingleTaskEqualsAccuracy) {
  ScoreMatrix s{3, 2, {0.9, 0.1, 0.3, 0.7, 0.6, 0.4}};
  std::vector<std::size_t> labels{0, 1, 1};
  std::vector<std::uint32_t> tasks{0, 0, 0};
  std::vector<TaskInfo> map{{0, "only", 0, 2}};
  EXPECT_DOUBLE_EQ(masked_accuracy(s, labels, tasks, map), 2.0 / 3.0);
}

TEST(MaskedAccuracyTest, HandCaseGlobalWrongWithinTaskRight) {
  // Each sample's largest logit belongs to the other task.
  ScoreMatrix s{2, 4, {0.2, 0.1, 0.9, 0.0, 0.8, 0.1, 0.3, 0.5}};
  std::vector<std::size_t> labels{0, 3};
  std::vector<std::uint32_t> tasks{0, 1};
  std::vector<std::size_t> all{0, 1, 2, 3};
  std::vector<std::size_t> preds{argmax_over(s, 0, all), argmax_over(s, 1, all)};
  EXPECT_EQ(accuracy(preds, labels), 0.0);
  EXPECT_EQ(masked_accuracy(s, labels, tasks, two_tasks()), 1.0);
}

TEST(MaskedAccuracyTest, ErrorsOnBadLabelOrTask) {
  ScoreMatrix s{1, 4, {0.1, 0.2, 0.3, 0.4}};
  EXPECT_THROW(masked_accuracy(s, std::vector<std::size_t>{3}, std::vector<std::uint32_t>{0}, two_tasks()), ConfigError);
  EXPECT_THROW(masked_accuracy(s, std::vector<std::size_t>{0}, std::vector<std::uint32_t>{7}, two_tasks()), ConfigError);
}

TEST(MaskedAccuracyTest, NeverBelowUnmaskedOnRandomInstances) {
  Rng rng(1);
  std::uniform_int_distribution<int> tiny(0, 3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t tasks = 1 + trial % 4, per = 1 + trial % 3, k = tasks * per, n = 1 + trial % 17;
    std::vector<TaskInfo> map;
    for (std::size_t t = 0; t < tasks; ++t)
      map.push_back({static_cast<std::uint32_t>(t), "", static_cast<std::uint32_t>(t * per), static_cast<std::uint32_t>((t + 1) * per)});
    ScoreMatrix s{n, k, {}};
    for (std::size_t i = 0; i < n * k; ++i) s.values.push_back(tiny(rng) / 3.0);
    std::vector<std::size_t> labels, preds, all(k);
    std::iota(all.begin(), all.end(), 0);
    std::vector<std::uint32_t> tids;
    for (std::size_t i = 0; i < n; ++i) {
      labels.push_back(std::uniform_int_distribution<std::size_t>(0, k - 1)(rng));
      tids.push_back(static_cast<std::uint32_t>(labels.back() / per));
      preds.push_back(argmax_over(s, i, all));
    }
    EXPECT_GE(masked_accuracy(s, labels, tids, map), accuracy(preds, labels));
  }
}

TEST(AucTest, Examples) {
  ScoreMatrix perfect{4, 2, {0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.1, 0.9}};
  EXPECT_EQ(auc_ovr(perfect, std::vector<std::size_t>{0, 0, 1, 1}).macro, 1.0);
  ScoreMatrix tied{4, 2, std::vector<double>(8, 0.5)};
  EXPECT_EQ(auc_ovr(tied, std::vector<std::size_t>{0, 1, 0, 1}).macro, 0.5);
  std::vector<double> scores{0.9, 0.4, 0.5, 0.1};
  const bool positive[] = {true, true, false, false};
  EXPECT_EQ(*binary_auc(scores, positive), 0.75);
}

TEST(AucTest, AbsentClassesSkippedAndAllAbsentIsError) {
  ScoreMatrix s{3, 3, {0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.6, 0.3, 0.1}};
  auto r = auc_ovr(s, std::vector<std::size_t>{0, 1, 0});
  EXPECT_TRUE(r.per_class[0].has_value());
  EXPECT_TRUE(r.per_class[1].has_value());
  EXPECT_FALSE(r.per_class[2].has_value());
  EXPECT_DOUBLE_EQ(r.macro, (*r.per_class[0] + *r.per_class[1]) / 2.0);
  ScoreMatrix one{2, 2, {0.5, 0.5, 0.2, 0.8}};
  EXPECT_THROW(auc_ovr(one, std::vector<std::size_t>{0, 0}), ConfigError);
}

TEST(AucTest, MatchesPairCountingOracleExactly) {
  Rng rng(2);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t k = 2 + trial % 4, n = 4 + static_cast<std::size_t>(trial % 50);
    std::uniform_int_distribution<int> level(0, trial % 2 ? 5 : 1000);
    ScoreMatrix s{n, k, {}};
    for (std::size_t i = 0; i < n * k; ++i) s.values.push_back(level(rng) / 7.0);
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < n; ++i) labels.push_back(std::uniform_int_distribution<std::size_t>(0, k - 1)(rng));
    double total = 0.0;
    std::size_t scored = 0;
    std::vector<std::optional<double>> expected;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> pos, neg;
      for (std::size_t i = 0; i < n; ++i) (labels[i] == c ? pos : neg).push_back(s(i, c));
      if (pos.empty() || neg.empty()) {
        expected.push_back(std::nullopt);
        continue;
      }
      expected.push_back(oracle_pair_auc(pos, neg));
      total += *expected.back();
      ++scored;
    }
    if (scored == 0) continue;
    auto r = auc_ovr(s, labels);
    EXPECT_EQ(r.per_class, expected);
    EXPECT_EQ(r.macro, total / static_cast<double>(scored));
  }
}

TEST(AucTest, InvariantToSampleOrder) {
  Rng rng(3);
  const std::size_t n = 30, k = 3;
  ScoreMatrix s{n, k, {}};
  for (std::size_t i = 0; i < n * k; ++i) s.values.push_back(std::uniform_int_distribution<int>(0, 9)(rng) / 9.0);
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < n; ++i) labels.push_back(i % k);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  ScoreMatrix sp{n, k, {}};
  std::vector<std::size_t> lp;
  for (auto p : perm) {
    for (std::size_t c = 0; c < k; ++c) sp.values.push_back(s(p, c));
    lp.push_back(labels[p]);
  }
  EXPECT_EQ(auc_ovr(s, labels).macro, auc_ovr(sp, lp).macro);
}

TEST(MatrixMetricsTest, Examples) {
  AccuracyMatrix two(2, {0.9, 0.0, 0.8, 0.95});
  EXPECT_NEAR(*bwt(two), -0.1, 1e-15);
  EXPECT_NEAR(*forgetting(two), 0.1, 1e-15);
  AccuracyMatrix same(3, {0.5, 0, 0, 0.5, 0.6, 0, 0.5, 0.6, 0.9});
  EXPECT_EQ(*bwt(same), 0.0);
  EXPECT_EQ(*forgetting(same), 0.0);
  AccuracyMatrix drop(3, {0.8, 0, 0, 0.8, 0.7, 0, 0.6, 0.5, 0.9});
  EXPECT_NEAR(*bwt(drop), -0.2, 1e-15);
  EXPECT_FALSE(bwt(AccuracyMatrix(1)).has_value());
  EXPECT_FALSE(forgetting(AccuracyMatrix(1)).has_value());
  EXPECT_THROW(AccuracyMatrix(2).set(0, 0, 1.5), ConfigError);
  EXPECT_THROW(AccuracyMatrix(0), ConfigError);
}

TEST(MatrixMetricsTest, MatchDirectFormulaOnRandomMatrices) {
  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    auto r = random_matrix(rng, 2 + static_cast<std::size_t>(trial % 6));
    EXPECT_EQ(*bwt(r), oracle_bwt(r));
    EXPECT_EQ(*forgetting(r), oracle_forgetting(r, r.tasks() - 1));
    EXPECT_EQ(*forgetting(r, ForgettingForm::kLiteral), oracle_forgetting(r, r.tasks() - 2));
  }
}

TEST(MatrixMetricsTest, TwoTaskForgettingIsNegatedBwt) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    auto r = random_matrix(rng, 2);
    if (r(0, 0) < r(1, 0)) continue;
    EXPECT_DOUBLE_EQ(*forgetting(r), -*bwt(r));
  }
}

}  // namespace
}  // namespace conslide
