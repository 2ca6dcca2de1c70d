#include "metric_oracles.hpp"
#include "rnafm/data_metrics.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace rnafm;
using tsupport::rel_err;

namespace {

std::vector<double> randvec(Rng& rng, std::size_t n) {
  std::normal_distribution<double> nd;
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

std::vector<Mat> random_ensembles(Rng& rng, std::size_t samples, Eigen::Index n, Eigen::Index genes) {
  std::vector<Mat> out;
  for (std::size_t s = 0; s < samples; ++s) out.push_back(standard_normal(rng, n, genes));
  return out;
}

}  // namespace

TEST(LogTransform, Examples) {
  Mat raw(1, 3);
  raw << 0, 1, 7;
  Mat l = log_transform(raw);
  EXPECT_EQ(l(0, 0), 0.0);
  EXPECT_EQ(l(0, 1), 1.0);
  EXPECT_EQ(l(0, 2), 3.0);
  raw(0, 1) = -0.5;
  EXPECT_THROW(log_transform(raw), ParseError);
  ExpressionMatrix m{{"a"}, {"g1", "g2", "g3"}, Mat::Zero(1, 3), ExpressionSpace::Raw};
  auto lm = log_transform(m);
  EXPECT_EQ(lm.space, ExpressionSpace::Log);
  EXPECT_THROW(log_transform(lm), ConfigError);
}

TEST(Standardizer, Examples) {
  Mat train(2, 2);
  train << 0, 5, 2, 5;
  auto st = Standardizer::fit(train, "fp");
  EXPECT_DOUBLE_EQ(st.mean()(0), 1.0);
  EXPECT_DOUBLE_EQ(st.stddev()(0), 1.0);
  EXPECT_EQ(st.stddev()(1), Standardizer::kDefaultFloor);
  Mat z = st.apply(train, "fp");
  EXPECT_DOUBLE_EQ(z(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(z(1, 0), 1.0);
  EXPECT_EQ(z(0, 1), 0.0);
  EXPECT_EQ(z(1, 1), 0.0);
  EXPECT_THROW(st.apply(train, "other"), FingerprintError);
  EXPECT_THROW(Standardizer::fit(Mat::Zero(1, 2), "fp"), ConfigError);
}

TEST(Standardizer, RoundTripAndMoments) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Mat train = standard_normal(rng, 30, 7) * 4.0;
    train.array() += 10.0;
    auto st = Standardizer::fit(train, "fp");
    Mat z = st.apply(train, "fp");
    for (Eigen::Index g = 0; g < 7; ++g) {
      EXPECT_NEAR(z.col(g).mean(), 0.0, 1e-12);
      EXPECT_NEAR(std::sqrt(z.col(g).array().square().mean()), 1.0, 1e-12);
    }
    Mat other = standard_normal(rng, 5, 7);
    Mat back = st.invert(st.apply(other, "fp"), "fp");
    for (Eigen::Index i = 0; i < other.size(); ++i) EXPECT_LT(rel_err(back.data()[i], other.data()[i]), 1e-10);
  }
}

TEST(Folds, PartitionBalanced) {
  auto f = assign_folds(23, 5, 7);
  std::vector<int> count(5, 0);
  for (int x : f) {
    ASSERT_GE(x, 0);
    ASSERT_LT(x, 5);
    ++count[static_cast<std::size_t>(x)];
  }
  EXPECT_LE(*std::max_element(count.begin(), count.end()) - *std::min_element(count.begin(), count.end()), 1);
  EXPECT_EQ(assign_folds(23, 5, 7), f);
  EXPECT_NE(assign_folds(23, 5, 8), f);
  EXPECT_THROW(assign_folds(3, 0, 1), ConfigError);
}

TEST(Pcc, Examples) {
  std::vector<double> t{1, 2, 4};
  EXPECT_NEAR(*pcc(t, t), 1.0, 1e-15);
  std::vector<double> neg{-1, -2, -4};
  EXPECT_NEAR(*pcc(neg, t), -1.0, 1e-15);
  std::vector<double> p{1, 2, 3};
  // means 2 and 7/3; sxy = 3, sxx = 2, syy = 42/9
  EXPECT_NEAR(*pcc(p, t), 3.0 / std::sqrt(2.0 * 42.0 / 9.0), 1e-15);
  std::vector<double> flat{2, 2, 2};
  EXPECT_FALSE(pcc(flat, t).has_value());
  EXPECT_THROW(pcc(p, std::vector<double>{1, 2}), ShapeError);
}

TEST(Pcc, AffineInvariance) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = randvec(rng, 20), y = randvec(rng, 20);
    const double base = *pcc(x, y);
    std::vector<double> ax(x), nx(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
      ax[i] = 3.5 * x[i] + 2.0;
      nx[i] = -0.7 * x[i] + 1.0;
    }
    EXPECT_NEAR(*pcc(ax, y), base, 1e-12);
    EXPECT_NEAR(*pcc(nx, y), -base, 1e-12);
    EXPECT_LE(std::abs(base), 1.0);
  }
}

TEST(Rmse, ExamplesAndProperties) {
  std::vector<double> z{0, 0}, t{3, 4};
  EXPECT_NEAR(rmse(z, t), std::sqrt(12.5), 1e-15);
  EXPECT_EQ(rmse(t, t), 0.0);
  std::vector<double> shifted{3 - 1.5, 4 - 1.5};
  EXPECT_NEAR(rmse(shifted, t), 1.5, 1e-15);
  EXPECT_THROW(rmse(z, std::vector<double>{1}), ShapeError);
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = randvec(rng, 10), y = randvec(rng, 10), w = randvec(rng, 10);
    EXPECT_EQ(rmse(x, y), rmse(y, x));
    EXPECT_LE(rmse(x, w), rmse(x, y) + rmse(y, w) + 1e-15);
  }
}

TEST(TopK, Examples) {
  std::vector<std::vector<std::optional<double>>> one{{0.1, 0.9, 0.3}};
  EXPECT_EQ(select_top_k(one, 1), std::vector<std::size_t>{1});
  std::vector<std::vector<std::optional<double>>> tie{{0.5, 0.2, 0.5}};
  EXPECT_EQ(select_top_k(tie, 2), (std::vector<std::size_t>{0, 2}));
  std::vector<std::vector<std::optional<double>>> undefined{{std::nullopt, 0.2}, {std::nullopt, 0.4}};
  EXPECT_EQ(select_top_k(undefined, 1), std::vector<std::size_t>{1});
  EXPECT_THROW(select_top_k(undefined, 2), ConfigError);
  // partial undefined entries are skipped, not zeroed
  std::vector<std::vector<std::optional<double>>> partial{{0.9, 0.5}, {std::nullopt, 0.6}};
  EXPECT_EQ(select_top_k(partial, 1), std::vector<std::size_t>{0});
}

TEST(TopK, MatchesOracleAndIsStable) {
  Rng rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<std::optional<double>>> folds(5, std::vector<std::optional<double>>(50));
    for (auto& f : folds)
      for (auto& v : f) v = u(rng) < -0.9 ? std::nullopt : std::optional<double>(std::round(u(rng) * 20) / 20);
    auto sel = select_top_k(folds, 10);
    EXPECT_EQ(sel, oracle::top_k(folds, 10));
    EXPECT_EQ(select_top_k(folds, 10), sel);
    // appending a worse gene does not disturb the selection
    for (auto& f : folds) f.push_back(-1.0);
    EXPECT_EQ(select_top_k(folds, 10), sel);
  }
}

TEST(PointPrediction, Examples) {
  Mat one(1, 3);
  one << 1, 2, 3;
  EXPECT_TRUE(point_prediction(one) == one.row(0).transpose());
  Mat two(2, 2);
  two << 1, 4, 3, 8;
  Vec m = point_prediction(two);
  EXPECT_EQ(m(0), 2.0);
  EXPECT_EQ(m(1), 6.0);
  EXPECT_EQ(point_prediction(two, PointEstimate::Single)(1), 4.0);
  EXPECT_EQ(point_prediction(two, PointEstimate::Median)(0), 2.0);
}

TEST(Quantile, LinearInterpolation) {
  std::vector<double> s{0, 10, 20, 30, 40};
  EXPECT_EQ(quantile_sorted(s, 0.0), 0.0);
  EXPECT_EQ(quantile_sorted(s, 1.0), 40.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(s, 0.1), 4.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(s, 0.5), 20.0);
}

TEST(Coverage, CalibratedGaussianOracle) {
  Rng rng(5);
  // 10 conditions x 1000 genes = 10,000 pairs, 1,000 members each
  std::vector<Mat> ens = random_ensembles(rng, 10, 1000, 1000);
  Mat truth = standard_normal(rng, 10, 1000);
  auto cov = interval_coverage(ens, truth, default_coverage_levels());
  for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(cov[l], default_coverage_levels()[l], 0.03);
}

TEST(Coverage, FarTruthAndMonotone) {
  Rng rng(6);
  std::vector<Mat> ens = random_ensembles(rng, 4, 20, 5);
  Mat far = Mat::Constant(4, 5, 100.0);
  for (double c : interval_coverage(ens, far, default_coverage_levels())) EXPECT_EQ(c, 0.0);
  for (int trial = 0; trial < 30; ++trial) {
    auto e = random_ensembles(rng, 3, 12, 4);
    Mat t = standard_normal(rng, 3, 4) * 2.0;
    auto c = interval_coverage(e, t, default_coverage_levels());
    EXPECT_LE(c[0], c[1]);
    EXPECT_LE(c[1], c[2]);
  }
  std::vector<Mat> small{Mat::Zero(5, 2)};
  EXPECT_THROW(interval_coverage(small, Mat::Zero(1, 2), default_coverage_levels()), ConfigError);
}

TEST(Nll, Examples) {
  // two members at mean +- s give population variance s^2
  const double s = std::sqrt(1.0 / (2.0 * std::numbers::pi));
  Mat e(2, 1);
  e << 3 - s, 3 + s;
  std::vector<Mat> ens{e};
  Mat truth = Mat::Constant(1, 1, 3.0);
  EXPECT_NEAR(gaussian_nll(ens, truth), 0.0, 1e-14);
  ens[0] << 2, 4;
  EXPECT_NEAR(gaussian_nll(ens, truth), 0.5 * std::log(2 * std::numbers::pi), 1e-14);
  ens[0] << 3, 3;
  EXPECT_NEAR(gaussian_nll(ens, truth), 0.5 * std::log(2 * std::numbers::pi * 1e-6), 1e-12);
}

TEST(Spearman, Examples) {
  std::vector<double> a{1, 2, 3, 4}, b{10, 20, 25, 100}, c{5, 4, 2, 1};
  EXPECT_NEAR(*spearman(a, b), 1.0, 1e-15);
  EXPECT_NEAR(*spearman(a, c), -1.0, 1e-15);
  std::vector<double> flat{1, 1, 1, 1};
  EXPECT_FALSE(spearman(a, flat).has_value());
  auto r = average_ranks(std::vector<double>{3, 1, 3, 2});
  EXPECT_EQ(r, (std::vector<double>{3.5, 1, 3.5, 2}));
  // variance monotone in error: member spread grows with the offset of the mean
  std::vector<Mat> ens;
  Mat truth(4, 1);
  for (int i = 0; i < 4; ++i) {
    Mat e(2, 1);
    e << i - 0.1 * (i + 1), i + 0.1 * (i + 1);
    ens.push_back(e);
    truth(i, 0) = -0.5 * i;
  }
  EXPECT_NEAR(*variance_error_spearman(ens, truth), 1.0, 1e-15);
}

TEST(Metrics, AgreeWithOracles) {
  Rng rng(7);
  std::uniform_int_distribution<int> rows(3, 15), genes(2, 8), members(10, 40);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rows(rng), g = genes(rng), m = members(rng);
    Mat pred = standard_normal(rng, n, g), truth = standard_normal(rng, n, g);
    // quantize some instances to exercise ties
    if (trial % 3 == 0) truth = (truth * 2).array().round().matrix();
    auto pg = per_gene_pcc(pred, truth);
    auto rg = per_gene_rmse(pred, truth);
    for (Eigen::Index j = 0; j < g; ++j) {
      auto o = oracle::pcc(column(pred, j), column(truth, j));
      ASSERT_EQ(o.has_value(), pg[static_cast<std::size_t>(j)].has_value());
      if (o) {
        EXPECT_LT(rel_err(*o, *pg[static_cast<std::size_t>(j)]), 1e-10);
      }
      EXPECT_LT(rel_err(oracle::rmse(column(pred, j), column(truth, j)), rg[static_cast<std::size_t>(j)]), 1e-10);
    }
    auto ens = random_ensembles(rng, static_cast<std::size_t>(n), m, g);
    if (trial % 4 == 0)
      for (auto& e : ens) e = (e * 3).array().round().matrix();
    const std::vector<double> levels{0.5, 0.8, 0.9};
    EXPECT_EQ(interval_coverage(ens, truth, levels), oracle::coverage(ens, truth, levels));
    EXPECT_LT(rel_err(gaussian_nll(ens, truth), oracle::nll(ens, truth)), 1e-10);
    auto sp = variance_error_spearman(ens, truth);
    auto so = oracle::variance_error_spearman(ens, truth);
    ASSERT_EQ(sp.has_value(), so.has_value());
    if (sp) {
      EXPECT_LT(rel_err(*sp, *so), 1e-10);
    }
  }
}

TEST(Reports, ComputeMetricsSummaries) {
  Rng rng(8);
  Mat truth = standard_normal(rng, 20, 6);
  Mat pred = truth + 0.5 * standard_normal(rng, 20, 6);
  pred.col(5).setConstant(1.0);
  std::vector<std::size_t> ks{3, 10};
  auto rep = compute_metrics(pred, truth, ks);
  EXPECT_EQ(rep.undefined_pcc, 1u);
  ASSERT_EQ(rep.top_k.size(), 1u);  // K=10 exceeds the defined genes and is skipped
  EXPECT_EQ(rep.top_k[0].genes, select_top_k({rep.pcc}, 3));
  double s = 0;
  for (int g = 0; g < 5; ++g) s += *rep.pcc[static_cast<std::size_t>(g)];
  EXPECT_NEAR(rep.mean_pcc, s / 5, 1e-15);

  auto same = compute_metrics(truth, truth, ks);
  EXPECT_NEAR(same.mean_pcc, 1.0, 1e-12);
  EXPECT_EQ(same.mean_rmse, 0.0);
}
