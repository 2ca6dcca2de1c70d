#include "model_fixtures.hpp"
#include "rnafm/conditioning.hpp"
#include "rnafm/flow_engine.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace rnafm;

namespace {

struct ConstantField {
  RowVec w;
  Mat velocity(const Mat& x, std::span<const double>, std::span<const Mat* const>) const {
    Mat out(x.rows(), x.cols());
    out.rowwise() = w;
    return out;
  }
};

struct DecayField {
  Mat velocity(const Mat& x, std::span<const double>, std::span<const Mat* const>) const { return -x; }
};

struct ZeroField {
  Mat velocity(const Mat& x, std::span<const double>, std::span<const Mat* const>) const {
    return Mat::Zero(x.rows(), x.cols());
  }
};

// Returns a fixed matrix; used to rig a perfect predictor.
struct FixedField {
  Mat out;
  Mat velocity(const Mat&, std::span<const double>, std::span<const Mat* const>) const { return out; }
};

// Records whether any evaluation saw a NULL condition.
struct CountingField {
  mutable int null_calls = 0;
  mutable int cond_calls = 0;
  Mat velocity(const Mat& x, std::span<const double>, std::span<const Mat* const> y) const {
    (y[0] ? cond_calls : null_calls)++;
    return Mat::Ones(x.rows(), x.cols());
  }
};

const Interpolant kLinear{InterpolantKind::Linear};
const Interpolant kLogistic{InterpolantKind::Logistic, 10.0};

struct SmallRun {
  VelocityModel model;
  Dataset data;
};

SmallRun small_synthetic_run(std::uint64_t seed, Eigen::Index n = 64) {
  Rng rng(seed);
  tsupport::SmallModelSpec spec;
  spec.genes = 12;
  spec.pathways = 3;
  spec.depth = 1;
  auto model = tsupport::small_model(rng, spec, seed);
  SyntheticTaskConfig tc;
  tc.seed = seed;
  tc.genes = spec.genes;
  tc.condition_dim = spec.condition_dim;
  tc.clusters = spec.clusters;
  SyntheticTask task(tc);
  Dataset data;
  data.x1.resize(n, spec.genes);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto [x, y] = task.sample_pair(rng);
    data.x1.row(i) = x.transpose();
    data.conditions.push_back(std::move(y));
  }
  data.x1 = Standardizer::fit(data.x1, "test").apply_unchecked(data.x1);
  return {std::move(model), std::move(data)};
}

}  // namespace

TEST(Interpolant, BoundariesExact) {
  for (const auto& ip : {kLinear, kLogistic}) {
    EXPECT_EQ(ip.alpha(0.0), 0.0);
    EXPECT_EQ(ip.sigma(0.0), 1.0);
    EXPECT_EQ(ip.alpha(1.0), 1.0);
    EXPECT_EQ(ip.sigma(1.0), 0.0);
  }
  for (int i = 0; i <= 10; ++i) EXPECT_EQ(kLinear.alpha(i / 10.0) + kLinear.sigma(i / 10.0), 1.0);
}

TEST(Interpolant, LogisticIsMonotoneAndSymmetric) {
  for (int i = 0; i < 100; ++i) {
    const double t = i / 100.0;
    EXPECT_LT(kLogistic.alpha(t), kLogistic.alpha(t + 0.01));
    EXPECT_NEAR(kLogistic.alpha(t) + kLogistic.alpha(1.0 - t), 1.0, 1e-14);
    EXPECT_TRUE(std::isfinite(kLogistic.alpha_dot(t)));
  }
  EXPECT_THROW(Interpolant(InterpolantKind::Logistic, 0.0), ConfigError);
  EXPECT_EQ(parse_interpolant("logistic"), InterpolantKind::Logistic);
  EXPECT_THROW(parse_interpolant("cosine"), ConfigError);
}

TEST(Interpolate, Examples) {
  Mat x0(1, 2), x1(1, 2);
  x0 << 1, 0;
  x1 << 0, 1;
  Mat m = interpolate(x0, x1, 0.25, kLinear);
  EXPECT_DOUBLE_EQ(m(0, 0), 0.75);
  EXPECT_DOUBLE_EQ(m(0, 1), 0.25);
  Rng rng(1);
  Mat a = standard_normal(rng, 3, 5), b = standard_normal(rng, 3, 5);
  for (const auto& ip : {kLinear, kLogistic}) {
    EXPECT_TRUE(interpolate(a, b, 0.0, ip) == a);
    EXPECT_TRUE(interpolate(a, b, 1.0, ip) == b);
  }
}

TEST(TargetVelocity, LinearIsDifference) {
  Rng rng(2);
  Mat a = standard_normal(rng, 3, 5), b = standard_normal(rng, 3, 5);
  for (double t : {0.0, 0.3, 1.0}) EXPECT_TRUE(target_velocity(a, b, t, kLinear) == b - a);
  EXPECT_TRUE(target_velocity(a, a, 0.7, kLinear).isZero());
  Mat w = target_velocity(a, a, 0.7, kLogistic);
  EXPECT_LT((w - (kLogistic.alpha_dot(0.7) + kLogistic.sigma_dot(0.7)) * a).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(TargetVelocity, MatchesCentralDifferences) {
  Rng rng(3);
  Mat a = standard_normal(rng, 2, 6), b = standard_normal(rng, 2, 6);
  const double dt = 1e-4;
  for (const auto& ip : {kLinear, kLogistic}) {
    for (int i = 0; i <= 10; ++i) {
      // keep the stencil inside [0,1]
      const double t = std::clamp(i / 10.0, dt, 1.0 - dt);
      Mat fd = (interpolate(a, b, t + dt, ip) - interpolate(a, b, t - dt, ip)) / (2 * dt);
      Mat v = target_velocity(a, b, t, ip);
      EXPECT_LT((fd - v).norm() / v.norm(), 1e-6) << "t=" << t;
    }
  }
}

TEST(CfgVelocity, Algebra) {
  Rng rng(4);
  Mat c = standard_normal(rng, 3, 4), u = standard_normal(rng, 3, 4);
  EXPECT_TRUE(cfg_velocity(c, u, 1.0) == c);
  EXPECT_TRUE(cfg_velocity(c, u, 0.0) == u);
  EXPECT_TRUE(cfg_velocity(c, Mat::Zero(3, 4), 2.0) == 2.0 * c);
  for (double s : {0.5, 2.0, 3.7}) {
    Mat lhs = cfg_velocity(c, u, s) - cfg_velocity(c, u, 0.0);
    Mat rhs = s * (cfg_velocity(c, u, 1.0) - cfg_velocity(c, u, 0.0));
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-14);
  }
  EXPECT_THROW(cfg_velocity(c, Mat::Zero(2, 4), 2.0), ShapeError);
}

TEST(FlowConfig, Validation) {
  FlowConfig c;
  EXPECT_EQ(c.steps, 20);
  EXPECT_EQ(c.cfg_scale, 2.0);
  EXPECT_EQ(c.condition_dropout, 0.1);
  EXPECT_EQ(c.ema_decay, 0.999);
  EXPECT_EQ(c.learning_rate, 1e-4);
  EXPECT_EQ(c.batch_size, 32);
  c.steps = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.condition_dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.cfg_scale = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  nlohmann::json j = FlowConfig{};
  EXPECT_EQ(j.get<FlowConfig>().max_epochs, FlowConfig{}.max_epochs);
}

TEST(FmLoss, PerfectPredictorIsZero) {
  Rng rng(5);
  Mat x1 = standard_normal(rng, 4, 6);
  std::vector<const Mat*> ys(4, nullptr);
  auto draws = draw_flow(rng, 4, 6, 0.0);
  FixedField f{make_flow_batch(x1, ys, draws, kLogistic).target};
  EXPECT_EQ(fm_loss(f, x1, ys, draws, kLogistic), 0.0);
}

TEST(FmLoss, ZeroPredictorOracle) {
  Rng rng(6);
  Mat x1 = standard_normal(rng, 8, 5);
  std::vector<const Mat*> ys(8, nullptr);
  auto draws = draw_flow(rng, 8, 5, 0.1);
  double want = 0.0;
  for (int b = 0; b < 8; ++b)
    for (int g = 0; g < 5; ++g) want += std::pow(x1(b, g) - draws.x0(b, g), 2);
  want /= 40.0;
  EXPECT_LT(std::abs(fm_loss(ZeroField{}, x1, ys, draws, kLinear) - want), 1e-13);
}

TEST(FmLoss, InvariantToBatchOrder) {
  Rng rng(7);
  auto m = tsupport::small_model(rng, {});
  tsupport::randomize(m, rng);
  const Eigen::Index b = 6;
  Mat x1 = standard_normal(rng, b, m.gene_count());
  std::vector<Mat> conds;
  for (int i = 0; i < b; ++i) conds.push_back(standard_normal(rng, m.config().cluster_count, m.config().condition_dim));
  std::vector<const Mat*> ys;
  for (auto& c : conds) ys.push_back(&c);
  auto draws = draw_flow(rng, b, m.gene_count(), 0.5);
  const double base = fm_loss(m, x1, ys, draws, kLinear);

  std::vector<Eigen::Index> perm{3, 0, 5, 1, 4, 2};
  Mat px1(b, x1.cols());
  std::vector<const Mat*> pys(b);
  FlowDraws pd = draws;
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto s = static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]);
    px1.row(i) = x1.row(perm[static_cast<std::size_t>(i)]);
    pys[static_cast<std::size_t>(i)] = ys[s];
    pd.t[static_cast<std::size_t>(i)] = draws.t[s];
    pd.drop_condition[static_cast<std::size_t>(i)] = draws.drop_condition[s];
    pd.x0.row(i) = draws.x0.row(perm[static_cast<std::size_t>(i)]);
  }
  EXPECT_LT(tsupport::rel_err(fm_loss(m, px1, pys, pd, kLinear), base), 1e-12);
}

TEST(FmLoss, DropoutRateAndNullSubstitution) {
  Rng rng(8);
  auto d = draw_flow(rng, 20000, 1, 0.1);
  const double rate = static_cast<double>(std::count(d.drop_condition.begin(), d.drop_condition.end(), 1)) / 20000.0;
  EXPECT_NEAR(rate, 0.1, 5 * std::sqrt(0.09 / 20000));
  Mat y = Mat::Zero(1, 1);
  std::vector<const Mat*> ys(20000, &y);
  auto fb = make_flow_batch(Mat::Zero(20000, 1), ys, d, kLinear);
  for (std::size_t i = 0; i < ys.size(); ++i) EXPECT_EQ(fb.conditions[i] == nullptr, d.drop_condition[i] != 0);
  for (double t : d.t) {
    EXPECT_GE(t, 0.0);
    EXPECT_LT(t, 1.0);
  }
}

TEST(FmLoss, NonFiniteReportsItem) {
  Mat x1 = Mat::Zero(3, 2);
  x1(2, 1) = std::numeric_limits<double>::quiet_NaN();
  Rng rng(9);
  std::vector<const Mat*> ys(3, nullptr);
  auto draws = draw_flow(rng, 3, 2, 0.0);
  try {
    fm_loss(ZeroField{}, x1, ys, draws, kLinear);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("item 2"), std::string::npos);
  }
}

TEST(Train, EmaDecayZeroTracksParameters) {
  auto run = small_synthetic_run(10, 16);
  FlowConfig cfg;
  cfg.max_epochs = 1;
  cfg.batch_size = 16;
  cfg.ema_decay = 0.0;
  auto state = make_train_state(run.model);
  const auto before = run.model.parameters().values();
  ASSERT_FALSE(train(run.model, run.data, cfg, kLinear, state, 1).diverged);
  const auto& after = run.model.parameters().values();
  bool moved = false;
  for (std::size_t i = 0; i < after.size(); ++i) {
    EXPECT_TRUE(state.ema[i] == after[i]);
    moved = moved || !(after[i] == before[i]);
  }
  EXPECT_TRUE(moved);
}

TEST(Train, EmaAlgebraOneStep) {
  auto run = small_synthetic_run(11, 16);
  FlowConfig cfg;
  cfg.max_epochs = 1;
  cfg.batch_size = 16;
  cfg.ema_decay = 0.9;
  auto state = make_train_state(run.model);
  const auto before = run.model.parameters().values();
  train(run.model, run.data, cfg, kLinear, state, 1);
  for (std::size_t i = 0; i < before.size(); ++i) {
    Mat want = 0.9 * before[i] + 0.1 * run.model.parameters().value(i);
    EXPECT_LT((state.ema[i] - want).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Train, DeterministicAndResumable) {
  FlowConfig cfg;
  cfg.max_epochs = 4;
  auto a = small_synthetic_run(12);
  auto sa = make_train_state(a.model);
  train(a.model, a.data, cfg, kLinear, sa, 77);

  auto b = small_synthetic_run(12);
  auto sb = make_train_state(b.model);
  cfg.max_epochs = 2;
  train(b.model, b.data, cfg, kLinear, sb, 77);
  EXPECT_EQ(sb.epochs_done, 2);
  cfg.max_epochs = 4;
  train(b.model, b.data, cfg, kLinear, sb, 77);

  ASSERT_EQ(sa.loss_history.size(), 4u);
  EXPECT_EQ(sa.loss_history, sb.loss_history);
  for (std::size_t i = 0; i < sa.ema.size(); ++i) {
    EXPECT_TRUE(sa.ema[i] == sb.ema[i]);
    EXPECT_TRUE(a.model.parameters().value(i) == b.model.parameters().value(i));
  }
}

TEST(Train, LossDecreasesOnSyntheticTask) {
  // larger step than the production default so the check stays quick
  auto run = small_synthetic_run(13, 128);
  FlowConfig cfg;
  cfg.max_epochs = 60;
  cfg.learning_rate = 1e-3;
  auto state = make_train_state(run.model);
  ASSERT_FALSE(train(run.model, run.data, cfg, kLinear, state, 5).diverged);
  ASSERT_EQ(state.loss_history.size(), 60u);
  EXPECT_LE(state.loss_history.back(), 0.5 * state.loss_history.front())
      << state.loss_history.front() << " -> " << state.loss_history.back();
}

TEST(Train, DivergenceRollsBack) {
  auto run = small_synthetic_run(14, 16);
  run.data.x1(3, 2) = std::numeric_limits<double>::infinity();
  FlowConfig cfg;
  cfg.max_epochs = 2;
  cfg.batch_size = 16;
  auto state = make_train_state(run.model);
  const auto before = run.model.parameters().values();
  auto r = train(run.model, run.data, cfg, kLinear, state, 1);
  EXPECT_TRUE(r.diverged);
  EXPECT_EQ(state.epochs_done, 0);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(run.model.parameters().value(i) == before[i]);
}

TEST(Euler, ConstantFieldExact) {
  Rng rng(15);
  RowVec w = standard_normal(rng, 1, 4).row(0);
  for (int steps : {1, 3, 20, 64}) {
    FlowConfig cfg;
    cfg.steps = steps;
    cfg.cfg_scale = 1.0;
    Mat x0 = standard_normal(rng, 5, 4);
    Mat x = euler_integrate(ConstantField{w}, x0, nullptr, cfg);
    Mat want = x0.rowwise() + w;
    EXPECT_LT((x - want).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TEST(Euler, FirstOrderConvergence) {
  Rng rng(16);
  Mat x0 = standard_normal(rng, 1, 3);
  const Mat exact = std::exp(-1.0) * x0;
  std::vector<double> err;
  for (int steps : {20, 40, 80}) {
    FlowConfig cfg;
    cfg.steps = steps;
    cfg.cfg_scale = 1.0;
    err.push_back((euler_integrate(DecayField{}, x0, nullptr, cfg) - exact).norm());
  }
  EXPECT_NEAR(err[0] / err[1], 2.0, 0.2);
  EXPECT_NEAR(err[1] / err[2], 2.0, 0.2);
}

TEST(Euler, GuidanceSkipsUnconditionalAtScaleOne) {
  CountingField f;
  Mat y = Mat::Zero(1, 1);
  FlowConfig cfg;
  cfg.cfg_scale = 1.0;
  euler_integrate(f, Mat::Zero(2, 3), &y, cfg);
  EXPECT_EQ(f.null_calls, 0);
  EXPECT_EQ(f.cond_calls, 20);
  cfg.cfg_scale = 2.0;
  CountingField g;
  euler_integrate(g, Mat::Zero(2, 3), &y, cfg);
  EXPECT_EQ(g.null_calls, 20);
}

TEST(Euler, SeededSamplesRepeat) {
  Rng rng(17);
  auto m = tsupport::small_model(rng, {});
  tsupport::randomize(m, rng);
  Mat y = standard_normal(rng, m.config().cluster_count, m.config().condition_dim);
  FlowConfig cfg;
  Rng r1(5), r2(5);
  EXPECT_TRUE(euler_sample(m, &y, m.gene_count(), cfg, r1) == euler_sample(m, &y, m.gene_count(), cfg, r2));
}

TEST(Euler, DestandardizesOutput) {
  Mat train(2, 2);
  train << 0, 10, 2, 30;
  auto st = Standardizer::fit(train, "fp");
  FlowConfig cfg;
  cfg.cfg_scale = 1.0;
  RowVec w = RowVec::Zero(2);
  Rng r1(3), r2(3);
  Vec raw = euler_sample(ConstantField{w}, nullptr, 2, cfg, r1);
  Vec out = euler_sample(ConstantField{w}, nullptr, 2, cfg, r2, &st);
  EXPECT_NEAR(out(0), raw(0) * 1.0 + 1.0, 1e-12);
  EXPECT_NEAR(out(1), raw(1) * 10.0 + 20.0, 1e-12);
}

TEST(Euler, NonFiniteStateReportsStep) {
  struct Exploding {
    Mat velocity(const Mat& x, std::span<const double> t, std::span<const Mat* const>) const {
      return Mat::Constant(x.rows(), x.cols(), t[0] > 0.5 ? std::numeric_limits<double>::infinity() : 0.0);
    }
  };
  FlowConfig cfg;
  cfg.steps = 10;
  cfg.cfg_scale = 1.0;
  try {
    euler_integrate(Exploding{}, Mat::Zero(1, 2), nullptr, cfg);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 6"), std::string::npos) << e.what();
  }
}

TEST(Ensemble, SingleMemberHasZeroVariance) {
  Rng rng(18);
  FlowConfig cfg;
  cfg.cfg_scale = 1.0;
  auto s = generate_ensemble(ConstantField{RowVec::Ones(3)}, nullptr, 3, 1, cfg, rng);
  EXPECT_EQ(s.size(), 1);
  EXPECT_TRUE(s.mean == s.samples.row(0).transpose());
  EXPECT_TRUE(s.variance.isZero());
  EXPECT_THROW(generate_ensemble(ConstantField{RowVec::Ones(3)}, nullptr, 3, 0, cfg, rng), ConfigError);
}

TEST(Ensemble, ConstantFieldKeepsPriorVariance) {
  FlowConfig cfg;
  cfg.cfg_scale = 1.0;
  RowVec w(2);
  w << 3.0, -1.0;
  Rng rng(19), replay(19);
  auto s = generate_ensemble(ConstantField{w}, nullptr, 2, 20000, cfg, rng);
  const Mat x0 = standard_normal(replay, 20000, 2);
  EXPECT_LT((s.variance - ensemble_variance(x0)).cwiseAbs().maxCoeff(), 1e-10);
  for (int g = 0; g < 2; ++g) EXPECT_NEAR(s.variance(g), 1.0, 5 * std::sqrt(2.0 / 20000));
}

TEST(Ensemble, GaussianStubSeedsAgreeWithinClt) {
  Vec mean(3);
  mean << 1.0, -2.0, 0.5;
  const double var = 0.09;
  GaussianTargetVelocity field(mean, var);
  FlowConfig cfg;
  cfg.cfg_scale = 1.0;
  const int n = 4000;
  Rng a(100), b(200);
  auto sa = generate_ensemble(field, nullptr, 3, n, cfg, a);
  auto sb = generate_ensemble(field, nullptr, 3, n, cfg, b);
  EXPECT_FALSE(sa.samples == sb.samples);
  const double tol = 5.0 * std::sqrt(var) / std::sqrt(static_cast<double>(n));
  for (int g = 0; g < 3; ++g) {
    EXPECT_NEAR(sa.mean(g), mean(g), tol);
    EXPECT_NEAR(sb.mean(g), mean(g), tol);
  }
}

TEST(GaussianStub, MatchesConditionalExpectation) {
  // v(x,t) = E[a' x1 + s' x0 | x_t = x], checked by Monte-Carlo regression at one t
  Vec mean(1);
  mean << 0.7;
  const double var = 0.25;
  for (const auto& ip : {kLinear, kLogistic}) {
    GaussianTargetVelocity field(mean, var, ip);
    Rng rng(20);
    const int n = 200000;
    const double t = 0.6;
    Mat x1 = (standard_normal(rng, n, 1).array() * std::sqrt(var) + 0.7).matrix();
    Mat x0 = standard_normal(rng, n, 1);
    Mat xt = interpolate(x0, x1, t, ip), v = target_velocity(x0, x1, t, ip);
    // least squares of v on [1, xt]
    Mat design(n, 2);
    design.col(0).setOnes();
    design.col(1) = xt.col(0);
    Vec coef = design.colPivHouseholderQr().solve(v.col(0));
    Mat probe(2, 1);
    probe << -0.5, 1.2;
    std::vector<double> ts{t, t};
    std::vector<const Mat*> ys{nullptr, nullptr};
    Mat got = field.velocity(probe, ts, ys);
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(got(i, 0), coef(0) + coef(1) * probe(i, 0), 0.02);
  }
}
