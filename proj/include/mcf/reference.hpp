#pragma once

#include <span>
#include <vector>

#include "mcf/forest.hpp"
#include "mcf/inference.hpp"
#include "mcf/types.hpp"

// Serial, brute-force versions of the optimized kernels. They follow the
// defining formulas literally and trade speed for obviousness; tests compare
// the production code against them and the benchmarks time both.
namespace mcf::reference {

/// Objective via explicit per-arm loops, one pass per formula term.
std::optional<double> leaf_objective(std::span<const Index> units, const Labels& d, const Vector& y,
                                     const Matrix& matched, int num_treatments);

/// Exhaustive nearest neighbours with d(i, j) = (s_i - s_j)' S^+ (s_i - s_j)
/// and S^+ the pseudo-inverse covariance of the scores.
forest::MatchedOutcomes match_outcomes(const Labels& d, const Vector& y, const Matrix& prognostic,
                                       int num_treatments);

/// Dense weights of one query row, tree by tree.
Vector forest_weights(const forest::McfForest& forest, const Matrix& x, Index row, int m, int l);

/// w(x)'y for every row of x; NaN where no tree contributes.
Vector predict_iate(const forest::McfForest& forest, const Matrix& x, int m, int l);

/// Mean dense weight vector per group over queries that did not fail.
Matrix group_weights(const forest::McfForest& forest, const Matrix& x, const Labels& groups, int num_groups, int m,
                     int l);

/// Neighbourhoods from a full sort of every unit by (|w_j - w_i|, j).
inference::ConditionalMoments knn_conditional_moments(const Vector& weights, const Vector& y, int k);

}  // namespace mcf::reference
