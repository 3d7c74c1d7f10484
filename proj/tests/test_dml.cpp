#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mcf/dml.hpp"
#include "mcf/ols.hpp"
#include "test_util.hpp"

using namespace mcf;
using namespace mcf::dml;
using inference::EffectEstimate;

namespace {

double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

DmlParams quick(int trees = 100) {
  DmlParams p;
  p.outcome.num_trees = trees;
  p.propensity.num_trees = trees;
  return p;
}

Sample random_sample(Index n, int p, int M, SeededRng& rng) {
  Sample s;
  s.num_treatments = M;
  s.x.resize(n, p);
  s.d.resize(n);
  s.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) s.x(i, j) = rng.normal();
    s.d[i] = static_cast<int>(rng.index(M));
    s.y[i] = s.x(i, 0) + s.d[i] + rng.normal();
  }
  return s;
}

}  // namespace

TEST(DrScore, DocumentedValues) {
  EXPECT_DOUBLE_EQ(dr_score(0.0, 0, 1, 0, 2.0, 1.0, 0.5, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(dr_score(2.0, 1, 1, 0, 2.0, 1.0, 0.3, 0.7), 1.0);
  EXPECT_DOUBLE_EQ(dr_score(9.0, 2, 1, 0, 2.0, 1.0, 0.3, 0.7), 1.0);
}

TEST(DrScore, AffineInOutcome) {
  SeededRng rng(1);
  for (int r = 0; r < 100; ++r) {
    const int d = static_cast<int>(rng.index(3));
    const double mm = rng.normal(), ml = rng.normal(), pm = rng.uniform(0.1, 0.5), pl = rng.uniform(0.1, 0.5);
    const double g0 = dr_score(0.0, d, 1, 0, mm, ml, pm, pl);
    const double g1 = dr_score(1.0, d, 1, 0, mm, ml, pm, pl);
    const double y = 5.0 * rng.normal();
    EXPECT_NEAR(dr_score(y, d, 1, 0, mm, ml, pm, pl), g0 + y * (g1 - g0), 1e-12);
  }
}

TEST(DrScore, OracleNuisancesIdentifyTheAte) {
  // True nuisances: p(x) = logistic(x), mu_0 = x, mu_1 = x + x^2, so the ATE is E[x^2] = 1.
  SeededRng rng(2);
  const Index n = 1'000'000;
  double sum = 0.0, sq = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double x = rng.normal();
    const double p1 = logistic(x);
    const int d = rng.uniform() < p1 ? 1 : 0;
    const double mu0 = x, mu1 = x + x * x;
    const double y = (d == 1 ? mu1 : mu0) + rng.normal();
    const double g = dr_score(y, d, 1, 0, mu1, mu0, p1, 1.0 - p1);
    sum += g;
    sq += g * g;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  EXPECT_LT(std::abs(mean - 1.0), 3.0 * se);
}

TEST(Nuisances, ConstantPropensityIsEstimatedNearHalf) {
  SeededRng rng(3);
  Sample s = random_sample(2000, 5, 2, rng);
  const Nuisances nu = cross_fit_nuisances(s, quick(200), SeededRng(4));
  int inside = 0;
  for (Index i = 0; i < s.size(); ++i) inside += nu.propensity(i, 1) >= 0.4 && nu.propensity(i, 1) <= 0.6;
  EXPECT_GT(inside, 0.95 * s.size());
  for (Index i = 0; i < s.size(); ++i) EXPECT_NEAR(nu.propensity.row(i).sum(), 1.0, 1e-12);
}

TEST(Nuisances, FourArmsGiveFourColumnsSummingToOne) {
  SeededRng rng(5);
  const Sample s = random_sample(800, 3, 4, rng);
  const Nuisances nu = cross_fit_nuisances(s, quick(30), SeededRng(6));
  ASSERT_EQ(nu.propensity.cols(), 4);
  ASSERT_EQ(nu.mu.cols(), 4);
  for (Index i = 0; i < s.size(); ++i) {
    EXPECT_NEAR(nu.propensity.row(i).sum(), 1.0, 1e-12);
    EXPECT_GE(nu.propensity.row(i).minCoeff(), 0.01 / (1.0 + 4 * 0.01) - 1e-12);
  }
}

TEST(Nuisances, DeterministicAndFoldHonest) {
  SeededRng rng(7);
  Sample s = random_sample(300, 3, 2, rng);
  const Nuisances a = cross_fit_nuisances(s, quick(20), SeededRng(8), Exec::Serial);
  const Nuisances b = cross_fit_nuisances(s, quick(20), SeededRng(8), Exec::Parallel);
  EXPECT_EQ(a.mu, b.mu);
  EXPECT_EQ(a.propensity, b.propensity);
  s.y[10] += 100.0;
  const Nuisances c = cross_fit_nuisances(s, quick(20), SeededRng(8));
  EXPECT_EQ(a.mu.row(10), c.mu.row(10));
}

TEST(Normalized, MatchesPlainScoresWithoutTruncation) {
  // Four units per arm with p = 0.5: weights 2 sum to n = 8 and none exceeds
  // the cap (share 0.5 of 8).
  Sample s;
  s.x = Matrix::Zero(8, 1);
  s.d = {0, 1, 0, 1, 0, 1, 0, 1};
  s.y.resize(8);
  s.y << 1, 2, 0.5, 3, -1, 4, 2, 2.5;
  Nuisances nu;
  nu.mu.resize(8, 2);
  for (Index i = 0; i < 8; ++i) nu.mu.row(i) << 0.3 * i, 1.0 - 0.1 * i;
  nu.propensity = Matrix::Constant(8, 2, 0.5);
  nu.propensity_raw = nu.propensity;
  DmlParams p;
  p.truncation_share = 0.5;
  const Vector plain = dr_scores(s, nu, 1, 0);
  const Vector norm = normalized_scores(s, nu, 1, 0, p);
  EXPECT_LT((plain - norm).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalized, ColumnsSumToSampleSize) {
  SeededRng rng(9);
  const Sample s = random_sample(500, 3, 2, rng);
  Nuisances nu;
  nu.mu = Matrix::Zero(500, 2);
  nu.propensity_raw.resize(500, 2);
  for (Index i = 0; i < 500; ++i) {
    const double p = rng.uniform(0.02, 0.98);
    nu.propensity_raw.row(i) << 1.0 - p, p;
  }
  nu.propensity = nu.propensity_raw;
  const auto [wm, wl] = normalized_weights(s, nu, 1, 0);
  EXPECT_NEAR(wm.sum(), 500.0, 1e-9);
  EXPECT_NEAR(wl.sum(), 500.0, 1e-9);
  for (Index i = 0; i < 500; ++i) {
    EXPECT_EQ(wm[i] > 0, s.d[i] == 1);
    EXPECT_EQ(wl[i] > 0, s.d[i] == 0);
  }
}

TEST(Normalized, TruncationTamesAnExtremePropensity) {
  int wins = 0;
  for (int seed = 0; seed < 10; ++seed) {
    SeededRng rng(100 + seed);
    const Index n = 100;
    Sample s;
    s.x = Matrix::Zero(n, 1);
    s.d.resize(n);
    s.y.resize(n);
    Nuisances nu;
    nu.mu = Matrix::Zero(n, 2);
    nu.propensity_raw = Matrix::Constant(n, 2, 0.5);
    for (Index i = 0; i < n; ++i) {
      s.d[i] = i < n / 2 ? 1 : 0;
      s.y[i] = s.d[i] + rng.normal();
    }
    nu.propensity_raw.row(0) << 0.999, 0.001;
    nu.propensity = nu.propensity_raw;
    DmlParams untruncated;
    untruncated.truncation_share = 1.0;
    const double capped = normalized_scores(s, nu, 1, 0).mean();
    const double raw = normalized_scores(s, nu, 1, 0, untruncated).mean();
    ASSERT_TRUE(std::isfinite(capped));
    const auto [wm, wl] = normalized_weights(s, nu, 1, 0);
    // Raw treated weights: 1000 once and 2 for the other 49; the cap is 5% of 1098.
    const double cap = 0.05 * 1098.0;
    EXPECT_NEAR(wm[0], 100.0 * cap / (cap + 98.0), 1e-9);
    if (std::abs(capped - 1.0) < std::abs(raw - 1.0)) ++wins;
  }
  EXPECT_GE(wins, 8);
}

TEST(Ate, ConstantScoresAndSampleMean) {
  const EffectEstimate c = ate_from_scores(Vector::Constant(50, 0.7), 1, 0, "dml");
  EXPECT_DOUBLE_EQ(c.point, 0.7);
  EXPECT_NEAR(c.se, 0.0, 1e-15);
  Vector g(4);
  g << 1, 2, 3, 6;
  const EffectEstimate e = ate_from_scores(g, 1, 0, "dml");
  EXPECT_DOUBLE_EQ(e.point, 3.0);
  EXPECT_NEAR(e.se, std::sqrt(14.0 / 3.0 / 4.0), 1e-14);
}

TEST(Gate, OneGroupEqualsAteAndHandGroupMeans) {
  SeededRng rng(10);
  Vector g(60);
  for (Index i = 0; i < 60; ++i) g[i] = rng.normal();
  const auto one = gate_ols(g, Labels(60, 0), 1, 1, 0, "dml");
  EXPECT_EQ(one[0].point, ate_from_scores(g, 1, 0, "dml").point);

  Vector h(6);
  h << 1, 3, 10, 20, 30, 5;
  const Labels groups{0, 0, 1, 1, 1, 2};
  EXPECT_THROW(gate_ols(h, groups, 4, 1, 0, "x"), InvalidArgument);
  const auto three = gate_ols(h, groups, 3, 1, 0, "x");
  EXPECT_DOUBLE_EQ(three[0].point, 2.0);
  EXPECT_DOUBLE_EQ(three[1].point, 20.0);
  EXPECT_DOUBLE_EQ(three[2].point, 5.0);
}

TEST(Gate, StandardErrorsMatchDummyRegressionHc1) {
  SeededRng rng(11);
  const Index n = 200;
  const int J = 4;
  Vector g(n);
  Labels groups(n);
  Matrix design = Matrix::Zero(n, J);
  for (Index i = 0; i < n; ++i) {
    groups[i] = static_cast<int>(rng.index(J));
    g[i] = groups[i] + (1.0 + groups[i]) * rng.normal();
    design(i, groups[i]) = 1.0;
  }
  const auto gates = gate_ols(g, groups, J, 1, 0, "x");
  const ols::OlsFit fit = ols::fit(design, g);
  for (int j = 0; j < J; ++j) {
    EXPECT_NEAR(gates[j].point, fit.coef[j], 1e-12);
    EXPECT_NEAR(gates[j].se, std::sqrt(fit.cov(j, j)), 1e-12);
  }
}

TEST(Smoother, OlsReproducesLinearScores) {
  SeededRng rng(12);
  Matrix x(100, 3);
  for (Index i = 0; i < 100; ++i)
    for (int j = 0; j < 3; ++j) x(i, j) = rng.normal();
  const Vector g = (1.0 + 2.0 * x.col(0).array() - x.col(2).array()).matrix();
  const auto iates = iate_smoother(g, x, x, Smoother::Ols, 1, 0, "dml-ols");
  for (Index i = 0; i < 100; ++i) EXPECT_NEAR(iates[i].point, g[i], 1e-10);
  EXPECT_NEAR(ols::fit(ols::with_intercept(x), g).r2, 1.0, 1e-12);
}

TEST(Smoother, ForestOnNoiseIsNearConstant) {
  SeededRng rng(13);
  Matrix x(1000, 3);
  Vector g(1000);
  for (Index i = 0; i < 1000; ++i) {
    for (int j = 0; j < 3; ++j) x(i, j) = rng.normal();
    g[i] = 3.0 * rng.normal();
  }
  regforest::RegForestParams rf;
  rf.num_trees = 200;
  rf.min_leaf = 50;
  const auto iates = iate_smoother(g, x, x.topRows(200), Smoother::RandomForest, 1, 0, "dml-rf", rf, SeededRng(14));
  Vector pred(200);
  for (Index i = 0; i < 200; ++i) {
    pred[i] = iates[i].point;
    EXPECT_TRUE(std::isnan(iates[i].se));
  }
  EXPECT_LT(std::sqrt(mcf::testing::variance(pred)), 0.1 * std::sqrt(mcf::testing::variance(g)));
}

TEST(OlsBenchmark, IdenticalArmsGiveZeroEffects) {
  SeededRng rng(15);
  const Index n = 400;
  Sample s;
  s.x.resize(n, 2);
  s.d.resize(n);
  s.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    s.x(i, 0) = rng.normal();
    s.x(i, 1) = rng.normal();
    s.d[i] = static_cast<int>(i % 2);
    s.y[i] = 1.0 + s.x(i, 0) - 2.0 * s.x(i, 1);
  }
  Labels groups(50);
  for (int q = 0; q < 50; ++q) groups[q] = q % 2;
  const OlsBenchmark b = ols_benchmark(s, s.x.topRows(50), groups, 2);
  for (const auto& e : b.iate) EXPECT_NEAR(e.point, 0.0, 1e-10);
  EXPECT_NEAR(b.ate.point, 0.0, 1e-10);
  ASSERT_EQ(b.gate.size(), 2u);

  Sample three = s;
  three.num_treatments = 3;
  EXPECT_THROW(ols_benchmark(three, s.x, Labels(n, 0), 1), InvalidArgument);
}

TEST(ScoreCsv, PairsAndLayout) {
  SeededRng rng(16);
  const Sample s = random_sample(60, 2, 3, rng);
  DmlParams p = quick(10);
  p.folds = 2;
  const Nuisances nu = cross_fit_nuisances(s, p, SeededRng(17));
  const ScoreTable t = score_table(s, nu, false);
  ASSERT_EQ(t.pairs.size(), 3u);
  EXPECT_EQ(t.pairs[0], std::make_pair(1, 0));
  EXPECT_EQ(t.pairs[2], std::make_pair(2, 1));
  EXPECT_EQ(t.scores.col(0), dr_scores(s, nu, 1, 0));
  std::ostringstream out;
  write_score_csv(out, t);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "row,1-0,2-0,2-1");
}

TEST(DmlParamsValidation, RejectsInvalid) {
  DmlParams p;
  p.folds = 1;
  EXPECT_THROW(p.validate(), InvalidArgument);
  p = DmlParams{};
  p.propensity_floor = 0.0;
  EXPECT_THROW(p.validate(), InvalidArgument);
  p = DmlParams{};
  p.truncation_share = 0.0;
  EXPECT_THROW(p.validate(), InvalidArgument);
}
