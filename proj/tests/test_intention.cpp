#include "reachpred/intention.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace reachpred;
using intention::HmmModel;

namespace {

HmmModel truth_model() {
  HmmModel m;
  m.initial = {0.9, 0.1};
  m.transition = {{{0.97, 0.03}, {0.05, 0.95}}};
  m.mean = {0.1, 2.0};
  m.variance = {0.04, 0.5};
  return m;
}

std::vector<double> sample(const HmmModel& m, std::size_t n, std::mt19937_64& rng, std::vector<int>* states = nullptr) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(n);
  int s = u(rng) < m.initial[0] ? 0 : 1;
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0) s = u(rng) < m.transition[static_cast<std::size_t>(s)][0] ? 0 : 1;
    x[t] = m.mean[static_cast<std::size_t>(s)] + std::sqrt(m.variance[static_cast<std::size_t>(s)]) * g(rng);
    if (states) states->push_back(s);
  }
  return x;
}

// p(state at the last step | x) by summing over every path. The filter starts
// from the initial distribution pushed once through the transitions.
std::array<double, 2> brute_force_posterior(const HmmModel& m, const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::array<double, 2> mass{0.0, 0.0};
  for (unsigned path = 0; path < (1u << n); ++path) {
    double p = 0.0;
    const int s0 = path & 1u;
    for (int j = 0; j < 2; ++j) p += m.initial[static_cast<std::size_t>(j)] * m.transition[static_cast<std::size_t>(j)][static_cast<std::size_t>(s0)];
    p *= std::exp(intention::log_gauss(x[0], m.mean[static_cast<std::size_t>(s0)], m.variance[static_cast<std::size_t>(s0)]));
    int prev = s0;
    for (std::size_t t = 1; t < n; ++t) {
      const int s = (path >> t) & 1u;
      p *= m.transition[static_cast<std::size_t>(prev)][static_cast<std::size_t>(s)] * std::exp(intention::log_gauss(x[t], m.mean[static_cast<std::size_t>(s)], m.variance[static_cast<std::size_t>(s)]));
      prev = s;
    }
    mass[static_cast<std::size_t>(prev)] += p;
  }
  const double z = mass[0] + mass[1];
  return {mass[0] / z, mass[1] / z};
}

}  // namespace

TEST(Forward, MatchesPathEnumeration) {
  const HmmModel m = truth_model();
  std::mt19937_64 rng(42);
  for (int rep = 0; rep < 20; ++rep) {
    const auto x = sample(m, 10, rng);
    auto b = intention::initial_belief(m);
    for (double v : x) b = intention::forward_step(m, b, v);
    const auto want = brute_force_posterior(m, x);
    EXPECT_NEAR(b.posterior[0], want[0], 1e-12);
    EXPECT_NEAR(b.posterior[1], want[1], 1e-12);
    EXPECT_EQ(b.sample_index, 9);
    EXPECT_EQ(b.last_observable, x.back());
  }
}

TEST(Forward, PosteriorStaysOnSimplexForExtremeInputs) {
  const HmmModel m = truth_model();
  auto b = intention::initial_belief(m);
  const double xs[] = {1e6, -1e6, 0.0, 1e300, -1e300, 2.0, 1e6, 1e6, -1e6, 0.05};
  for (double x : xs) {
    b = intention::forward_step(m, b, x);
    EXPECT_TRUE(std::isfinite(b.posterior[0]) && std::isfinite(b.posterior[1]));
    EXPECT_GE(b.posterior[0], 0.0);
    EXPECT_GE(b.posterior[1], 0.0);
    EXPECT_NEAR(b.posterior[0] + b.posterior[1], 1.0, 1e-12);
  }
}

TEST(Forward, ExtremeHighInputIsMotion) {
  const HmmModel m = truth_model();
  auto b = intention::forward_step(m, intention::initial_belief(m), 1e6);
  EXPECT_EQ(intention::predict_intention(b), Activity::motion);
  b = intention::forward_step(m, b, 0.1);
  b = intention::forward_step(m, b, 0.1);
  b = intention::forward_step(m, b, 0.1);
  EXPECT_EQ(intention::predict_intention(b), Activity::rest);
}

TEST(BaumWelch, RecoversGeneratingModel) {
  const HmmModel m = truth_model();
  std::mt19937_64 rng(7);
  std::vector<std::vector<double>> seqs;
  for (int i = 0; i < 10; ++i) seqs.push_back(sample(m, 2000, rng));
  const auto res = intention::baum_welch(seqs, intention::initial_model(seqs));
  const auto& f = res.model;
  EXPECT_NEAR(f.mean[0], 0.1, 0.02);
  EXPECT_NEAR(f.mean[1], 2.0, 0.05);
  EXPECT_NEAR(f.variance[0], 0.04, 0.005);
  EXPECT_NEAR(f.variance[1], 0.5, 0.05);
  EXPECT_NEAR(f.transition[0][1], 0.03, 0.01);
  EXPECT_NEAR(f.transition[1][0], 0.05, 0.015);
  f.validate();
  EXPECT_TRUE(res.warnings.empty());
}

TEST(BaumWelch, DecodesGeneratingStates) {
  const HmmModel m = truth_model();
  std::mt19937_64 rng(8);
  std::vector<int> states;
  const auto x = sample(m, 5000, rng, &states);
  std::vector<std::vector<double>> seqs{x};
  const auto fit = intention::baum_welch(seqs, intention::initial_model(seqs)).model;
  auto b = intention::initial_belief(fit);
  int agree = 0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    b = intention::forward_step(fit, b, x[t]);
    agree += static_cast<int>(intention::predict_intention(b)) == states[t];
  }
  EXPECT_GT(agree / 5000.0, 0.97);
}

TEST(BaumWelch, LogLikelihoodNeverDecreasesOverHundredSeeds) {
  for (unsigned seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    HmmModel m = truth_model();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    m.mean = {u(rng), 1.0 + 2.0 * u(rng)};
    m.variance = {0.01 + 0.2 * u(rng), 0.1 + u(rng)};
    std::vector<std::vector<double>> seqs;
    for (int i = 0; i < 3; ++i) seqs.push_back(sample(m, 300, rng));
    // start from a deliberately poor guess
    HmmModel init;
    init.initial = {0.5, 0.5};
    init.mean = {-1.0 + u(rng), 4.0 * u(rng)};
    init.variance = {1.0, 2.0};
    intention::BaumWelchOptions opt;
    opt.tol = 0.0;
    opt.max_iter = 40;
    const auto res = intention::baum_welch(seqs, init, opt);
    const auto& tr = res.model.ll_trace;
    ASSERT_GE(tr.size(), 2u);
    for (std::size_t i = 1; i < tr.size(); ++i) EXPECT_GE(tr[i], tr[i - 1] - 1e-7 * std::abs(tr[i - 1])) << "seed " << seed << " iter " << i;
  }
}

TEST(BaumWelch, TraceMatchesIndependentLikelihood) {
  const HmmModel m = truth_model();
  std::mt19937_64 rng(2);
  std::vector<std::vector<double>> seqs{sample(m, 500, rng)};
  EXPECT_NEAR(intention::sequence_log_likelihood(m, seqs), intention::baum_welch(seqs, m, {0.0, 1, intention::kVarianceFloor}).model.ll_trace.front(), 1e-9);
}

TEST(BaumWelch, RestStateHasTheSmallerMean) {
  const HmmModel m = truth_model();
  std::mt19937_64 rng(3);
  std::vector<std::vector<double>> seqs{sample(m, 3000, rng)};
  HmmModel init;
  init.mean = {3.0, 0.0};  // labels swapped on purpose
  const auto fit = intention::baum_welch(seqs, init).model;
  EXPECT_LT(fit.mean[0], fit.mean[1]);
  EXPECT_NEAR(fit.mean[0], 0.1, 0.03);
}

TEST(BaumWelch, ConstantObservableFloorsVariance) {
  std::vector<std::vector<double>> seqs{std::vector<double>(200, 1.0)};
  const auto res = intention::baum_welch(seqs, intention::initial_model(seqs));
  EXPECT_FALSE(res.warnings.empty());
  EXPECT_GE(res.model.variance[0], intention::kVarianceFloor);
  EXPECT_GE(res.model.variance[1], intention::kVarianceFloor);
}

TEST(BaumWelch, RejectsEmptyAndShortInput) {
  std::vector<std::vector<double>> none;
  EXPECT_THROW(intention::baum_welch(none, HmmModel{}), Error);
  std::vector<std::vector<double>> tiny{std::vector<double>(5, 0.0)};
  EXPECT_THROW(intention::baum_welch(tiny, HmmModel{}), Error);
}

TEST(Model, ValidateCatchesBadRows) {
  HmmModel m;
  m.transition[0] = {0.7, 0.7};
  EXPECT_THROW(m.validate(), Error);
  m = HmmModel{};
  m.variance[1] = 0.0;
  EXPECT_THROW(m.validate(), Error);
}
