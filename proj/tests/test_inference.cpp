#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mcf/forest.hpp"
#include "mcf/inference.hpp"
#include "mcf/reference.hpp"
#include "test_util.hpp"

using namespace mcf;
using namespace mcf::inference;

namespace {

forest::WeightVector sparse(std::vector<Index> units, std::vector<double> weights) {
  forest::WeightVector w;
  w.units = std::move(units);
  w.weights = std::move(weights);
  w.contributing_trees = 1;
  return w;
}

Vector normal_vector(Index n, SeededRng& rng) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

}  // namespace

TEST(ConfidenceInterval, ZTable) {
  const Interval ci = confidence_interval(1.0, 0.5, 0.95);
  EXPECT_NEAR(ci.lo, 0.020, 5e-4);
  EXPECT_NEAR(ci.hi, 1.980, 5e-4);
  EXPECT_DOUBLE_EQ(ci.lo, 1.0 - 0.5 * 1.959964);
  const Interval narrow = confidence_interval(1.0, 0.5, 0.80);
  EXPECT_DOUBLE_EQ(narrow.hi, 1.0 + 0.5 * 1.281552);
  EXPECT_GT(narrow.lo, ci.lo);
  EXPECT_LT(narrow.hi, ci.hi);

  const Interval point = confidence_interval(2.5, 0.0, 0.95);
  EXPECT_EQ(point.lo, 2.5);
  EXPECT_EQ(point.hi, 2.5);
  EXPECT_THROW(confidence_interval(0.0, 1.0, 0.9), InvalidArgument);
  EXPECT_THROW(confidence_interval(0.0, -1.0, 0.95), InvalidArgument);
}

TEST(ConfidenceInterval, EightyInsideNinetyFive) {
  SeededRng rng(1);
  for (int r = 0; r < 1000; ++r) {
    const double point = 10.0 * rng.normal();
    const double se = std::exp(rng.normal());
    const EffectEstimate e = make_estimate(Estimand::ATE, 0, 1, 0, point, se, "x");
    ASSERT_GT(e.ci80.lo, e.ci95.lo);
    ASSERT_LT(e.ci80.hi, e.ci95.hi);
  }
  const EffectEstimate none = make_estimate(Estimand::IATE, 3, 1, 0, 1.0, std::nan(""), "x");
  EXPECT_TRUE(std::isnan(none.ci95.lo));
}

TEST(AggregateWeights, HandComputedTwoRows) {
  const std::vector<forest::WeightVector> rows{sparse({0, 2, 3}, {1.0, -0.5, -0.5}), sparse({1, 3}, {1.0, -1.0})};
  const forest::WeightVector all = aggregate_weights(rows);
  EXPECT_EQ(all.units, (std::vector<Index>{0, 1, 2, 3}));
  EXPECT_EQ(all.weights, (std::vector<double>{0.5, 0.5, -0.25, -0.75}));

  const std::vector<Index> members{0, 1};
  const forest::WeightVector group = aggregate_weights(rows, members);
  EXPECT_EQ(group.units, all.units);
  EXPECT_EQ(group.weights, all.weights);
  const std::vector<Index> just_second{1};
  EXPECT_EQ(aggregate_weights(rows, just_second).weights, (std::vector<double>{1.0, -1.0}));
  EXPECT_THROW(aggregate_weights(rows, std::vector<Index>{}), InvalidArgument);
}

TEST(KnnMoments, MatchesAllPairsOracleOnThirtyUnits) {
  SeededRng rng(2);
  for (int rep = 0; rep < 50; ++rep) {
    Vector w(30);
    for (Index i = 0; i < 30; ++i) w[i] = std::round(rng.uniform(0.0, 8.0)) / 4.0;  // many exact ties
    const Vector y = normal_vector(30, rng);
    const int k = 2 + static_cast<int>(rng.index(29));
    const ConditionalMoments got = knn_conditional_moments(w, y, k);
    const ConditionalMoments want = reference::knn_conditional_moments(w, y, k);
    for (Index i = 0; i < 30; ++i) {
      // Brute force: all pairs ranked by (|w_j - w_i|, j).
      std::vector<Index> order(30);
      std::iota(order.begin(), order.end(), Index{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](Index a, Index b) { return std::abs(w[a] - w[i]) < std::abs(w[b] - w[i]); });
      std::vector<Index> nb(order.begin(), order.begin() + k);
      std::vector<Index> sorted_nb = nb;
      std::sort(sorted_nb.begin(), sorted_nb.end());
      ASSERT_EQ(weight_neighbours(w, i, k), sorted_nb) << "rep " << rep << " unit " << i;
      double s = 0.0;
      for (Index j : nb) s += y[j];
      const double mu = s / k;
      double v = 0.0;
      for (Index j : nb) v += (y[j] - mu) * (y[j] - mu);
      ASSERT_NEAR(got.mean[i], mu, 1e-14);
      ASSERT_NEAR(got.variance[i], v / (k - 1), 1e-13);
      ASSERT_NEAR(want.mean[i], mu, 1e-14);
    }
  }
}

TEST(KnnMoments, EqualWeightsConstantOutcomeAndClamping) {
  SeededRng rng(3);
  const Vector y = normal_vector(40, rng);
  const Vector w = Vector::Ones(40);
  const ConditionalMoments all = knn_conditional_moments(w, y, 40);
  const double var = mcf::testing::variance(y);
  for (Index i = 0; i < 40; ++i) {
    EXPECT_NEAR(all.mean[i], y.mean(), 1e-14);
    EXPECT_NEAR(all.variance[i], var, 1e-13);
  }
  const ConditionalMoments clamped = knn_conditional_moments(w, y, 1000);
  EXPECT_EQ(clamped.variance, all.variance);

  const ConditionalMoments flat = knn_conditional_moments(normal_vector(40, rng), Vector::Constant(40, 3.0), 7);
  EXPECT_EQ(flat.variance.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(knn_conditional_moments(w, y, 1), InvalidArgument);
  EXPECT_EQ(default_neighbours(1250), 71);
  EXPECT_EQ(default_neighbours(1), 2);
}

TEST(WeightsVariance, ConstantOutcomeGivesZero) {
  SeededRng rng(4);
  Vector w(200);
  for (Index i = 0; i < 200; ++i) w[i] = rng.uniform(0.0, 2.0);
  // Every neighbourhood variance vanishes, leaving the spread of w * 5.
  const Vector v = w * (200.0 / w.sum());
  const double spread = 25.0 * (v.array() - v.mean()).square().sum() / (200.0 * 199.0);
  EXPECT_NEAR(weighted_mean_variance(w, Vector::Constant(200, 5.0)), spread, 1e-12 * spread);
  EXPECT_NEAR(weighted_mean_variance(Vector::Ones(200), Vector::Constant(200, 5.0)), 0.0, 1e-20);
  EXPECT_THROW(weighted_mean_variance(Vector::Ones(1), Vector::Ones(1)), InvalidArgument);
}

TEST(WeightsVariance, SimpleMeanMatchesClosedForm) {
  for (int seed = 0; seed < 10; ++seed) {
    SeededRng rng(10 + seed);
    const Vector y = normal_vector(1000, rng);
    const double got = weighted_mean_variance(Vector::Ones(1000), y);
    const double want = mcf::testing::variance(y) / 1000.0;
    EXPECT_NEAR(got / want, 1.0, 0.2) << "seed " << seed;
  }
}

TEST(WeightsVariance, InvariantToUnitOrder) {
  SeededRng rng(5);
  const Index n = 300;
  Vector w(n), y(n);
  Labels arms(n);
  for (Index i = 0; i < n; ++i) {
    arms[i] = static_cast<int>(i % 2);
    w[i] = (arms[i] == 1 ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);  // distinct, so index tie-breaks never apply
    y[i] = arms[i] + w[i] + rng.normal();
  }
  const double base = weights_variance(w, arms, y, 1, 0);
  const auto perm = SeededRng(6).permutation(n);
  Vector pw(n), py(n);
  Labels pa(n);
  for (Index i = 0; i < n; ++i) {
    pw[i] = w[perm[i]];
    py[i] = y[perm[i]];
    pa[i] = arms[perm[i]];
  }
  EXPECT_NEAR(weights_variance(pw, pa, py, 1, 0), base, 1e-12 * base);
}

TEST(Estimates, AteEqualsMeanOfIatesAndGroupsAreConsistent) {
  SeededRng rng(7);
  const Index n = 600;
  Sample smp;
  smp.x.resize(n, 3);
  smp.d.resize(n);
  smp.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) smp.x(i, j) = rng.normal();
    smp.d[i] = static_cast<int>(rng.index(2));
    smp.y[i] = smp.d[i] * (1.0 + smp.x(i, 0)) + rng.normal();
  }
  forest::McfParams p;
  p.num_trees = 40;
  p.nuisance.num_trees = 20;
  const forest::McfForest f = forest::fit_forest(smp, p, SeededRng(8));
  Matrix q(80, 3);
  for (Index i = 0; i < 80; ++i)
    for (int j = 0; j < 3; ++j) q(i, j) = rng.normal();
  const forest::IatePrediction iate = forest::predict_iate(f, q, 1, 0);
  std::vector<forest::WeightVector> per;
  for (Index r = 0; r < q.rows(); ++r) per.push_back(forest::forest_weights(f, q, r, 1, 0));
  const forest::WeightVector ate_w = aggregate_weights(per);
  const EffectEstimate ate =
      estimate_from_weights(f, ate_w.dense(f.est_size()), 1, 0, Estimand::ATE, 0, "mcf");
  EXPECT_NEAR(ate.point, iate.estimate.mean(), 1e-12);
  EXPECT_GT(ate.se, 0.0);

  std::vector<Index> odd;
  for (Index r = 1; r < q.rows(); r += 2) odd.push_back(r);
  const double gate = aggregate_weights(per, odd).dot(f.est_outcomes());
  double mean = 0.0;
  for (Index r : odd) mean += iate.estimate[r];
  EXPECT_NEAR(gate, mean / static_cast<double>(odd.size()), 1e-12);

  std::vector<Index> everyone(q.rows());
  std::iota(everyone.begin(), everyone.end(), Index{0});
  EXPECT_EQ(aggregate_weights(per, everyone).weights, ate_w.weights);
}

TEST(Estimates, CsvLayout) {
  const std::vector<EffectEstimate> rows{make_estimate(Estimand::ATE, 0, 1, 0, 1.0, 0.5, "mcf"),
                                         make_estimate(Estimand::GATE, 2, 1, 0, 0.25, 0.0, "mcf"),
                                         make_estimate(Estimand::IATE, 7, 2, 1, -1.0, std::nan(""), "mcf")};
  std::ostringstream out;
  write_estimates_csv(out, rows);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "estimand,pair,point,se,ci95_lo,ci95_hi,ci80_lo,ci80_hi");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 12), "ATE,1-0,1,0.");
  std::getline(in, line);
  EXPECT_EQ(line, "GATE2,1-0,0.25,0,0.25,0.25,0.25,0.25");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 12), "IATE7,2-1,-1");
  EXPECT_EQ(to_string(Estimand::GATE), "GATE");
}
