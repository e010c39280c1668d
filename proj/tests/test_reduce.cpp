#include "reachpred/reduce.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace reachpred;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd gaussian(Eigen::Index n, Eigen::Index m, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  MatrixXd x(n, m);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
  return x;
}

MatrixXd uniform(Eigen::Index n, Eigen::Index m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MatrixXd x(n, m);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  return x;
}

double fisher_ratio(const MatrixXd& x, const std::vector<int>& labels, const VectorXd& v) {
  const VectorXd p = x * v;
  std::map<int, std::pair<double, int>> sums;
  double mean = p.mean();
  for (std::size_t i = 0; i < labels.size(); ++i) sums[labels[i]].first += p[static_cast<Eigen::Index>(i)], sums[labels[i]].second++;
  double sw = 0, sb = 0;
  for (auto& [k, s] : sums) {
    const double mu = s.first / s.second;
    sb += s.second * (mu - mean) * (mu - mean);
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& s = sums[labels[i]];
    const double d = p[static_cast<Eigen::Index>(i)] - s.first / s.second;
    sw += d * d;
  }
  return sb / sw;
}

// Three shifted Gaussian classes in 6-D with anisotropic noise.
void labelled_blobs(MatrixXd& x, std::vector<int>& labels, std::mt19937_64& rng) {
  const int per = 200;
  x = gaussian(3 * per, 6, rng);
  VectorXd scale(6);
  scale << 3.0, 0.5, 1.0, 2.0, 0.3, 1.0;
  x = x * scale.asDiagonal();
  labels.clear();
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < per; ++i) {
      x(c * per + i, c) += 2.0;
      x(c * per + i, 4) += 0.5 * c;
      labels.push_back(c + 1);
    }
}

}  // namespace

TEST(Pca, MatchesSvdOfCentredData) {
  std::mt19937_64 rng(1);
  MatrixXd mix = gaussian(5, 5, rng);
  const MatrixXd x = gaussian(400, 5, rng) * mix;
  const auto fit = reduce::fit_pca(x, 1.0);
  ASSERT_EQ(fit.dim, 5);
  const MatrixXd c = x.rowwise() - x.colwise().mean();
  Eigen::JacobiSVD<MatrixXd> svd(c, Eigen::ComputeThinV);
  for (int k = 0; k < 5; ++k) {
    const double s = svd.singularValues()[k];
    EXPECT_NEAR(fit.eigenvalues[k], s * s / 399.0, 1e-8 * s * s);
    EXPECT_NEAR(std::abs(fit.components.row(k).dot(svd.matrixV().col(k))), 1.0, 1e-8);
  }
  EXPECT_NEAR(fit.explained_ratio.sum(), 1.0, 1e-12);
}

TEST(Pca, DimensionIsSmallestReachingTarget) {
  std::mt19937_64 rng(2);
  // two strong directions, four weak ones
  MatrixXd x = gaussian(1000, 6, rng);
  x.col(0) *= 10.0;
  x.col(1) *= 8.0;
  x.rightCols(4) *= 0.2;
  EXPECT_EQ(reduce::fit_pca(x, 0.90).dim, 2);
  EXPECT_EQ(reduce::fit_pca(x, 0.5).dim, 1);
}

TEST(Pca, ComponentsOrthonormalWithCanonicalSigns) {
  std::mt19937_64 rng(3);
  const auto fit = reduce::fit_pca(gaussian(300, 8, rng), 1.0);
  const MatrixXd g = fit.components * fit.components.transpose();
  EXPECT_TRUE(g.isApprox(MatrixXd::Identity(g.rows(), g.cols()), 1e-10));
  for (Eigen::Index k = 0; k < fit.components.rows(); ++k) {
    Eigen::Index arg;
    fit.components.row(k).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(fit.components(k, arg), 0.0);
  }
}

TEST(Pca, RejectsDegenerateInput) {
  EXPECT_THROW(reduce::fit_pca(MatrixXd::Zero(1, 3)), Error);
  EXPECT_THROW(reduce::fit_pca(MatrixXd::Ones(10, 3)), Error);
  EXPECT_THROW(reduce::fit_pca(MatrixXd::Random(10, 3), 1.5), Error);
}

TEST(Fda, TwoClassDirectionIsWithinScatterSolve) {
  std::mt19937_64 rng(4);
  MatrixXd x = gaussian(600, 4, rng);
  std::vector<int> labels(600);
  for (int i = 0; i < 600; ++i) {
    labels[static_cast<std::size_t>(i)] = i < 300 ? 1 : 2;
    if (i >= 300) x.row(i) += Eigen::RowVector4d(1.0, 0.5, 0.0, -0.5);
  }
  x.col(2) *= 3.0;
  const auto fit = reduce::fit_fda(x, labels, {0.0});
  ASSERT_EQ(fit.dim, 1);
  // closed form: w ~ S_W^-1 (mu2 - mu1)
  const VectorXd mu1 = x.topRows(300).colwise().mean().transpose(), mu2 = x.bottomRows(300).colwise().mean().transpose();
  const MatrixXd c1 = x.topRows(300).rowwise() - mu1.transpose(), c2 = x.bottomRows(300).rowwise() - mu2.transpose();
  const MatrixXd sw = c1.transpose() * c1 + c2.transpose() * c2;
  const VectorXd w = sw.ldlt().solve(mu2 - mu1).normalized();
  EXPECT_NEAR(std::abs(fit.components.row(0).dot(w)), 1.0, 1e-9);
}

TEST(Fda, LeadingDirectionBeatsRandomProjections) {
  std::mt19937_64 rng(5);
  MatrixXd x;
  std::vector<int> labels;
  labelled_blobs(x, labels, rng);
  const auto fit = reduce::fit_fda(x, labels);
  ASSERT_EQ(fit.dim, 2);
  const double best = fisher_ratio(x, labels, fit.components.row(0).transpose());
  // eigenvalue of S_W^-1 (S_W + S_B) is 1 + J
  EXPECT_NEAR(fit.eigenvalues[0], 1.0 + best, 1e-4 * (1.0 + best));
  std::normal_distribution<double> g;
  for (int r = 0; r < 2000; ++r) {
    VectorXd v(6);
    for (auto& e : v) e = g(rng);
    EXPECT_LE(fisher_ratio(x, labels, v), best + 1e-9);
  }
  EXPECT_GE(fit.eigenvalues[0], fit.eigenvalues[1]);
}

TEST(Fda, RejectsBadLabels) {
  MatrixXd x = MatrixXd::Random(10, 3);
  EXPECT_THROW(reduce::fit_fda(x, std::vector<int>(10, 1)), Error);
  EXPECT_THROW(reduce::fit_fda(x, std::vector<int>(9, 1)), Error);
  std::vector<int> one_sample(10, 1);
  one_sample[0] = 2;
  EXPECT_THROW(reduce::fit_fda(x, one_sample), Error);
}

TEST(Nmf, ObjectiveNeverIncreases) {
  std::mt19937_64 rng(6);
  const MatrixXd x = uniform(200, 8, rng);
  reduce::NmfOptions opt;
  opt.vaf_target = 0.99;
  opt.tol = 0.0;
  const auto fit = reduce::fit_nmf(x, opt);
  ASSERT_GT(fit.objective_trace.size(), 10u);
  for (std::size_t i = 1; i < fit.objective_trace.size(); ++i) EXPECT_LE(fit.objective_trace[i], fit.objective_trace[i - 1] * (1 + 1e-12));
  EXPECT_TRUE((fit.synergies.array() >= 0).all());
  EXPECT_TRUE((fit.activations.array() >= 0).all());
}

TEST(Nmf, RankOneRecoveredExactly) {
  std::mt19937_64 rng(7);
  const MatrixXd w = uniform(300, 1, rng), h = uniform(1, 8, rng);
  const auto fit = reduce::fit_nmf(w * h);
  EXPECT_EQ(fit.dim, 1);
  EXPECT_GT(fit.vaf, 0.999);
  EXPECT_NEAR(fit.synergies.row(0).normalized().dot(h.row(0).normalized()), 1.0, 1e-6);
}

TEST(Nmf, RecoversThreeSynergies) {
  std::mt19937_64 rng(8);
  MatrixXd h(3, 8);
  h << 1.0, 0.8, 0.0, 0.0, 0.1, 0.0, 0.0, 0.2,
      0.0, 0.1, 1.0, 0.9, 0.0, 0.0, 0.1, 0.0,
      0.0, 0.0, 0.0, 0.1, 1.0, 0.7, 0.6, 0.0;
  MatrixXd w = uniform(500, 3, rng);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = std::pow(w.data()[i], 3);  // sparse-ish activations
  reduce::NmfOptions opt;
  opt.vaf_target = 0.99;
  opt.max_iter = 3000;
  opt.tol = 1e-9;
  const auto fit = reduce::fit_nmf(w * h, opt);
  EXPECT_EQ(fit.dim, 3);
  for (int k = 0; k < 3; ++k) {
    double best = 0;
    for (int j = 0; j < 3; ++j) best = std::max(best, fit.synergies.row(j).normalized().dot(h.row(k).normalized()));
    EXPECT_GT(best, 0.98) << "synergy " << k;
  }
  // VAF by dimension rises up to the pick
  for (std::size_t i = 1; i < fit.vaf_by_dim.size(); ++i) EXPECT_GT(fit.vaf_by_dim[i], fit.vaf_by_dim[i - 1]);
}

TEST(Nmf, ZeroAndNegativeInputs) {
  const auto z = reduce::fit_nmf(MatrixXd::Zero(20, 4));
  EXPECT_EQ(z.dim, 1);
  EXPECT_FALSE(z.warnings.empty());
  MatrixXd neg = MatrixXd::Ones(5, 3);
  neg(2, 1) = -0.1;
  EXPECT_THROW(reduce::fit_nmf(neg), Error);
}

TEST(Vaf, PerfectAndMeanReconstructions) {
  std::mt19937_64 rng(9);
  const MatrixXd x = uniform(50, 4, rng);
  EXPECT_DOUBLE_EQ(reduce::variance_accounted_for(x, x), 1.0);
  const MatrixXd mean = x.colwise().mean().replicate(50, 1);
  EXPECT_NEAR(reduce::variance_accounted_for(x, mean), 0.0, 1e-12);
}

TEST(Nnls, MatchesActiveSetEnumeration) {
  std::mt19937_64 rng(10);
  for (int rep = 0; rep < 50; ++rep) {
    const MatrixXd h = uniform(4, 8, rng);
    const VectorXd x = gaussian(8, 1, rng).col(0) + VectorXd::Constant(8, 0.3);
    const VectorXd got = reduce::nnls_activations(h, h * h.transpose(), x, 20000, 1e-15);
    // brute force over supports
    double best = std::numeric_limits<double>::infinity();
    VectorXd best_w = VectorXd::Zero(4);
    for (unsigned s = 0; s < 16; ++s) {
      std::vector<Eigen::Index> idx;
      for (Eigen::Index k = 0; k < 4; ++k)
        if (s >> k & 1u) idx.push_back(k);
      VectorXd w = VectorXd::Zero(4);
      if (!idx.empty()) {
        MatrixXd a(8, static_cast<Eigen::Index>(idx.size()));
        for (std::size_t j = 0; j < idx.size(); ++j) a.col(static_cast<Eigen::Index>(j)) = h.row(idx[j]).transpose();
        const VectorXd sol = a.colPivHouseholderQr().solve(x);
        if ((sol.array() < 0).any()) continue;
        for (std::size_t j = 0; j < idx.size(); ++j) w[idx[j]] = sol[static_cast<Eigen::Index>(j)];
      }
      const double r = (x - h.transpose() * w).squaredNorm();
      if (r < best) best = r, best_w = w;
    }
    EXPECT_TRUE((got.array() >= 0).all());
    EXPECT_NEAR((x - h.transpose() * got).squaredNorm(), best, 1e-8);
    EXPECT_LT((got - best_w).norm(), 1e-5);
  }
}

TEST(Variant, ParseAndPrint) {
  for (auto v : {reduce::Variant::pca, reduce::Variant::pcanmf, reduce::Variant::fda, reduce::Variant::fda_imu}) EXPECT_EQ(reduce::parse_variant(reduce::to_string(v)), v);
  EXPECT_EQ(reduce::parse_variant("fda-imu"), reduce::Variant::fda_imu);
  EXPECT_THROW(reduce::parse_variant("ica"), Error);
}

TEST(Variant, MapShapesAndTransform) {
  std::mt19937_64 rng(11);
  MatrixXd x = uniform(400, static_cast<Eigen::Index>(kChannels), rng);
  std::vector<int> labels(400);
  for (int i = 0; i < 400; ++i) {
    labels[static_cast<std::size_t>(i)] = 1 + i % 4;
    x(i, i % 4) += 1.0;
    x(i, 20 + i % 4) += 1.0;
  }
  const auto fda = reduce::fit_variant(reduce::Variant::fda, x, labels, 1).map;
  EXPECT_EQ(fda.dim(), 3);
  const VectorXd f0 = x.row(0).transpose();
  EXPECT_TRUE(reduce::transform(fda, f0).isApprox(fda.projection * (f0 - fda.offset)));
  const auto imu = reduce::fit_variant(reduce::Variant::fda_imu, x, labels, 1).map;
  EXPECT_EQ(imu.dim(), 3);
  EXPECT_EQ(imu.input_channels(), static_cast<int>(kImuChannels));
  const auto pn = reduce::fit_variant(reduce::Variant::pcanmf, x, labels, 1).map;
  EXPECT_GT(pn.synergies.rows(), 0);
  const VectorXd t = reduce::transform(pn, f0);
  EXPECT_TRUE((t.tail(pn.synergies.rows()).array() >= 0).all());
  EXPECT_THROW(reduce::transform(pn, VectorXd::Zero(10)), Error);
  VectorXd bad = f0;
  bad[3] = std::nan("");
  EXPECT_THROW(reduce::transform(fda, bad), Error);
  EXPECT_THROW(reduce::fit_variant(reduce::Variant::pca, MatrixXd::Random(10, 5), labels, 1), Error);
}
