#include "reachpred/accumulate.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace reachpred;
using namespace reachpred::accumulate;
using Eigen::VectorXd;

namespace {

VectorXd random_simplex(int l, std::mt19937_64& rng, double concentration = 1.0) {
  std::gamma_distribution<double> g(concentration, 1.0);
  VectorXd v(l);
  for (auto& e : v) e = g(rng) + 1e-300;
  return v / v.sum();
}

// Noisy posteriors drifting towards the true label.
TrialEvidence synthetic_trial(int label, int length, int classes, double drift, std::mt19937_64& rng) {
  TrialEvidence ev;
  ev.label = label;
  ev.posteriors.resize(length, classes);
  ev.log_density.resize(length, classes);
  for (int t = 0; t < length; ++t) {
    VectorXd p = random_simplex(classes, rng, 0.7);
    const double w = std::min(1.0, drift * t / length);
    p *= 1.0 - w;
    p[label - 1] += w;
    ev.posteriors.row(t) = p.transpose();
    ev.log_density.row(t) = (p.array() * 0.01).log().transpose();
  }
  return ev;
}

std::vector<TrialEvidence> synthetic_set(int n, int classes, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::vector<TrialEvidence> out;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) labels.push_back(1 + i % classes);
  const auto folds = stratified_kfold(labels, 5, seed);
  for (int i = 0; i < n; ++i) {
    auto ev = synthetic_trial(labels[static_cast<std::size_t>(i)], 80 + static_cast<int>(rng() % 60), classes, 1.5, rng);
    ev.trial_id = i + 1;
    ev.fold = folds[static_cast<std::size_t>(i)];
    out.push_back(std::move(ev));
  }
  return out;
}

}  // namespace

TEST(Accumulator, SumCriterionEqualsElapsedSamples) {
  std::mt19937_64 rng(1);
  for (int classes : {2, 4, 8}) {
    auto s = make_accumulator(classes);
    for (int t = 1; t <= 500; ++t) {
      s = accumulate_step(std::move(s), random_simplex(classes, rng, 0.1));
      ASSERT_NEAR(sum_criterion(s), static_cast<double>(t), 1e-9 * t);
      ASSERT_NEAR(s.alpha_norm.sum(), 1.0, 1e-12);
      ASSERT_TRUE((s.alpha_norm.array() >= 0).all());
    }
  }
}

TEST(Accumulator, RatioCriterionFromTopTwo) {
  VectorXd a(4);
  a << 0.1, 0.5, 0.25, 0.15;
  EXPECT_DOUBLE_EQ(ratio_criterion(a), 0.5);
  a << 0.25, 0.25, 0.25, 0.25;
  EXPECT_DOUBLE_EQ(ratio_criterion(a), 0.0);
  a << 0, 1, 0, 0;
  EXPECT_DOUBLE_EQ(ratio_criterion(a), 1.0);
  EXPECT_THROW(ratio_criterion(VectorXd::Ones(1)), Error);
}

TEST(Accumulator, PredictionBeforeEvidenceThrows) {
  const auto s = make_accumulator(4);
  EXPECT_THROW(current_prediction(s), Error);
  EXPECT_THROW(ratio_criterion(s), Error);
  auto t = accumulate_step(s, (VectorXd(4) << 0.25, 0.25, 0.25, 0.25).finished());
  EXPECT_EQ(current_prediction(t), 1);  // tie to the lowest index
  EXPECT_THROW(accumulate_step(t, VectorXd::Ones(3) / 3), Error);
}

TEST(StoppingRule, FiresOnEitherCriterion) {
  StoppingConfig cfg;
  cfg.th_r = 0.6;
  cfg.th_s = 3.5;
  auto s = make_accumulator(2);
  s = accumulate_step(s, (VectorXd(2) << 0.9, 0.1).finished());
  auto d = should_stop(s, cfg);
  EXPECT_EQ(d.kind, StopKind::stop);  // 1 - 0.1/0.9 > 0.6
  EXPECT_EQ(d.prediction, 1);
  s = make_accumulator(2);
  for (int i = 0; i < 3; ++i) s = accumulate_step(s, (VectorXd(2) << 0.4, 0.6).finished());
  EXPECT_EQ(should_stop(s, cfg).kind, StopKind::proceed);
  s = accumulate_step(s, (VectorXd(2) << 0.4, 0.6).finished());
  d = should_stop(s, cfg);
  EXPECT_EQ(d.kind, StopKind::stop);  // C_s = 4 > 3.5
  EXPECT_EQ(d.prediction, 2);
  EXPECT_DOUBLE_EQ(d.c_s, 4.0);
}

TEST(StoppingRule, AbortsAfterTimeout) {
  StoppingConfig cfg;
  cfg.th_r = 0.99;
  cfg.th_s = 1e9;
  cfg.timeout = 10;
  auto s = make_accumulator(3);
  for (int t = 1; t <= 11; ++t) {
    s = accumulate_step(s, VectorXd::Ones(3) / 3);
    EXPECT_EQ(should_stop(s, cfg).kind, t > 10 ? StopKind::abort : StopKind::proceed);
  }
}

TEST(StoppingRule, ConfigValidation) {
  StoppingConfig c;
  c.th_r = 1.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.th_s = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.timeout = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(StoppingRule, StopIndexMonotoneInBothThresholds) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 50; ++rep) {
    const auto ev = synthetic_trial(1 + rep % 4, 150, 4, 1.0, rng);
    const auto rs = default_ratio_grid();
    const auto ss = default_sum_grid();
    for (std::size_t i = 0; i < rs.size(); ++i)
      for (std::size_t j = 0; j < ss.size(); ++j) {
        const int here = replay_trial(ev, rs[i], ss[j]).stop_index;
        if (i + 1 < rs.size()) EXPECT_LE(here, replay_trial(ev, rs[i + 1], ss[j]).stop_index);
        if (j + 1 < ss.size()) EXPECT_LE(here, replay_trial(ev, rs[i], ss[j + 1]).stop_index);
      }
  }
}

TEST(StoppingRule, RawDensityModeSumsDensities) {
  TrialEvidence ev;
  ev.label = 1;
  ev.posteriors = Eigen::MatrixXd::Constant(50, 3, 1.0 / 3);
  ev.log_density = Eigen::MatrixXd::Constant(50, 3, std::log(1e-4));
  const auto o = replay_trial(ev, 0.5, 25 * 3e-4 + 1e-9, SumMode::raw_density);
  // three densities of 1e-4 per sample pass 0.0075 on the 26th
  EXPECT_TRUE(o.stopped);
  EXPECT_EQ(o.stop_index, 26);
}

TEST(StoppingRule, ReachEndingFirstUsesLastEvidence) {
  TrialEvidence ev;
  ev.label = 3;
  ev.posteriors = Eigen::MatrixXd::Zero(5, 3);
  ev.posteriors.col(2).setConstant(0.5);
  ev.posteriors.col(1).setConstant(0.5 - 1e-3);
  ev.posteriors.col(0).setConstant(1e-3);
  const auto o = replay_trial(ev, 0.9, 100.0);
  EXPECT_FALSE(o.stopped);
  EXPECT_EQ(o.stop_index, 5);
  EXPECT_EQ(o.prediction, 3);
}

TEST(Folds, StratifiedAndBalanced) {
  std::vector<int> labels;
  for (int i = 0; i < 80; ++i) labels.push_back(1 + i % 4);
  const auto f = stratified_kfold(labels, 5, 7);
  std::map<int, std::map<int, int>> count;
  std::map<int, int> size;
  for (std::size_t i = 0; i < f.size(); ++i) count[f[i]][labels[i]]++, size[f[i]]++;
  ASSERT_EQ(count.size(), 5u);
  for (auto& [k, per] : count)
    for (int c = 1; c <= 4; ++c) EXPECT_EQ(per[c], 4);
  // uneven class sizes still give near-equal folds
  std::vector<int> uneven;
  for (int i = 0; i < 23; ++i) uneven.push_back(1 + i % 3);
  size.clear();
  for (int v : stratified_kfold(uneven, 5, 1)) size[v]++;
  for (auto& [k, n] : size) EXPECT_LE(std::abs(n - 23 / 5.0), 1.0);
  EXPECT_EQ(stratified_kfold(labels, 5, 7), f);
  EXPECT_NE(stratified_kfold(labels, 5, 8), f);
  EXPECT_THROW(stratified_kfold({1, 1, 2}, 2, 1), Error);
}

TEST(Grid, SelectionMeetsTargetWithSmallestTime) {
  const auto trials = synthetic_set(120, 4, 4);
  const auto g = grid_search(trials, default_ratio_grid(), default_sum_grid(), 0.9);
  ASSERT_TRUE(g.target_met);
  EXPECT_GE(g.selected.mean_acc, 0.9);
  for (const auto& row : g.frontier)
    if (row.mean_acc >= 0.9) EXPECT_GE(row.mean_time_s, g.selected.mean_time_s - 1e-12);
  EXPECT_EQ(g.frontier.size(), default_ratio_grid().size() * default_sum_grid().size());
  EXPECT_EQ(g.config.th_r, g.selected.th_r);
  EXPECT_EQ(g.config.th_s, g.selected.th_s);
}

TEST(Grid, FrontierTimeMonotoneInThresholds) {
  const auto trials = synthetic_set(80, 4, 5);
  const auto rs = default_ratio_grid();
  const auto ss = default_sum_grid();
  const auto g = grid_search(trials, rs, ss, 0.95);
  auto at = [&](std::size_t i, std::size_t j) { return g.frontier[i * ss.size() + j]; };
  for (std::size_t i = 0; i < rs.size(); ++i)
    for (std::size_t j = 0; j < ss.size(); ++j) {
      if (i + 1 < rs.size()) EXPECT_LE(at(i, j).mean_time_s, at(i + 1, j).mean_time_s + 1e-12);
      if (j + 1 < ss.size()) EXPECT_LE(at(i, j).mean_time_s, at(i, j + 1).mean_time_s + 1e-12);
      EXPECT_GE(at(i, j).mean_pct_trajectory, 0.0);
      EXPECT_LE(at(i, j).mean_pct_trajectory, 100.0);
    }
}

TEST(Grid, UnreachableTargetFallsBackToMostAccurate) {
  const auto trials = synthetic_set(40, 4, 6);
  const auto g = grid_search(trials, {0.5, 0.6}, {5, 10}, 1.01);
  EXPECT_FALSE(g.target_met);
  for (const auto& row : g.frontier) EXPECT_LE(row.mean_acc, g.selected.mean_acc);
  EXPECT_THROW(grid_search(trials, {}, {5}, 0.9), Error);
}

TEST(Grid, FoldSpreadIsSampleStd) {
  std::vector<TrialEvidence> trials;
  for (int fold = 0; fold < 2; ++fold)
    for (int i = 0; i < 2; ++i) {
      TrialEvidence ev;
      ev.fold = fold;
      ev.label = (fold == 0 || i == 0) ? 1 : 2;  // fold 0 all right, fold 1 half
      ev.posteriors = (Eigen::MatrixXd(1, 2) << 0.9, 0.1).finished();
      trials.push_back(ev);
    }
  const auto row = evaluate_cell(trials, 0.5, 100.0);
  EXPECT_DOUBLE_EQ(row.mean_acc, 0.75);
  EXPECT_NEAR(row.std_acc, std::sqrt(0.125), 1e-12);
  EXPECT_DOUBLE_EQ(row.mean_time_s, 0.01);
  EXPECT_DOUBLE_EQ(row.mean_pct_trajectory, 100.0);
}
