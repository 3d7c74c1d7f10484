#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcf/forest.hpp"
#include "mcf/types.hpp"

namespace mcf::inference {

enum class Estimand { ATE, GATE, IATE };
std::string to_string(Estimand e);

inline constexpr double kZ95 = 1.959964;
inline constexpr double kZ80 = 1.281552;

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// point +/- z * se for level 0.95 or 0.80. A NaN se gives a NaN interval.
Interval confidence_interval(double point, double se, double level);

struct EffectEstimate {
  Estimand estimand = Estimand::ATE;
  int index = 0;  // group id for GATE, row id for IATE
  int m = 1;
  int l = 0;
  double point = 0.0;
  double se = std::numeric_limits<double>::quiet_NaN();  // NaN: no inference
  Interval ci95;
  Interval ci80;
  std::string method;
};

EffectEstimate make_estimate(Estimand estimand, int index, int m, int l, double point, double se,
                             std::string method);

/// Mean of the per-query weight vectors (group-mean weights; all rows give the
/// ATE weights). Throws InvalidArgument on an empty selection.
forest::WeightVector aggregate_weights(std::span<const forest::WeightVector> per_query);
forest::WeightVector aggregate_weights(std::span<const forest::WeightVector> per_query,
                                       std::span<const Index> members);

struct ConditionalMoments {
  Vector mean;
  Vector variance;
};

/// Indices of the k units whose weights are closest to unit i's weight,
/// ordered ascending. Distance ties go to the lower index. k is clamped to n.
std::vector<Index> weight_neighbours(const Vector& weights, Index i, int k);

/// For every unit, mean and sample variance of y over its k nearest units in
/// weight space. Requires k >= 2; k > n clamps to n.
ConditionalMoments knn_conditional_moments(const Vector& weights, const Vector& y, int k);

/// round(2 sqrt(n)), at least 2.
int default_neighbours(Index n);

/// Variance of the weighted mean sum_i w_i y_i over one set of units. The
/// weights are rescaled to sum to n before the estimator is applied, so the
/// result is the variance of the mean with the original normalization.
double weighted_mean_variance(const Vector& weights, const Vector& y, std::optional<int> k = std::nullopt);

/// Variance of an (m, l) weighted contrast over the estimation half: the
/// arm-m and arm-l parts are treated as independent weighted means and their
/// variances summed.
double weights_variance(const Vector& weights, const Labels& arms, const Vector& y, int m, int l,
                        std::optional<int> k = std::nullopt);

/// Point estimate w'y and its standard error for a weight vector over the
/// forest's estimation half.
EffectEstimate estimate_from_weights(const forest::McfForest& forest, const Vector& weights, int m, int l,
                                     Estimand estimand, int index, std::string method, bool with_se = true);

/// Header: estimand,pair,point,se,ci95_lo,ci95_hi,ci80_lo,ci80_hi. The
/// estimand column reads ATE, GATE<j> or IATE<row>; pair reads "m-l".
void write_estimates_csv(std::ostream& out, std::span<const EffectEstimate> rows);

}  // namespace mcf::inference
