#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "mcf/parallel.hpp"
#include "mcf/regforest.hpp"
#include "mcf/rng.hpp"
#include "mcf/tree.hpp"
#include "mcf/types.hpp"

// Modified Causal Forest: honest trees grown on one half of the data with the
// MSE/MCE splitting objective plus a propensity penalty, populated with the
// other half, and read out through forest weights.
namespace mcf::forest {

struct McfParams {
  int num_trees = 1000;
  int min_leaf_per_arm = 5;
  double subsample_fraction = 0.5;      // of the training half, drawn without replacement
  std::optional<double> penalty_lambda;  // default: variance of the (centered) outcome
  bool local_centering = false;
  int centering_folds = 5;
  int prognostic_folds = 5;
  /// Forests used for local centering and for the prognostic score.
  regforest::RegForestParams nuisance{};

  void validate() const;
  bool operator==(const McfParams&) const = default;
};

/// Disjoint halves of the row indices. `train` builds splits, `est` populates
/// leaves.
struct HonestSplit {
  std::vector<Index> train;
  std::vector<Index> est;
};

/// Uniform random halves; with odd n the estimation half gets the extra row.
/// Requires n >= 4 * nu * M.
HonestSplit make_honest_split(Index n, int num_treatments, int min_leaf_per_arm, SeededRng& rng);

/// n x M table: column d holds y_i when d_i == d, otherwise the outcome of the
/// nearest arm-d unit in Mahalanobis distance on the prognostic scores (lowest
/// index on ties). The covariance is estimated on all n units.
struct MatchedOutcomes {
  Matrix values;
  std::vector<std::vector<Index>> neighbour;  // [unit][arm], the matched row (own row for own arm)
};

MatchedOutcomes match_outcomes(const Labels& d, const Vector& y, const Matrix& prognostic, int num_treatments);

/// Sum over treatment pairs m > l of MSE^m + MSE^l - 2 MCE^{m,l} for the units
/// of one leaf; nullopt when some arm is absent.
std::optional<double> leaf_objective(std::span<const Index> units, const Labels& d, const Vector& y,
                                     const Matrix& matched, int num_treatments);

/// lambda * (1 - (1/M) sum_d (p_d(left) - p_d(right))^2) with p_d the arm
/// shares of each daughter.
double split_penalty(std::span<const Index> counts_left, std::span<const Index> counts_right, double lambda);

/// One honest tree. Leaf membership is stored CSR-style: the estimation units
/// of leaf k and arm a are members[offsets[k*M + a] .. offsets[k*M + a + 1]).
struct McfTree {
  tree::SplitTree splits;
  std::vector<int> offsets;
  std::vector<int> members;       // indices into the forest's estimation half
  std::vector<int> train_counts;  // num_leaves x M training-subsample arm counts

  int num_leaves() const { return splits.num_leaves; }
  int arm_count(int leaf, int arm, int M) const { return offsets[leaf * M + arm + 1] - offsets[leaf * M + arm]; }
  std::span<const int> arm_members(int leaf, int arm, int M) const {
    return {members.data() + offsets[leaf * M + arm],
            static_cast<std::size_t>(offsets[leaf * M + arm + 1] - offsets[leaf * M + arm])};
  }
  bool operator==(const McfTree&) const = default;
};

/// Grows one tree on `rows` (indices into the training-half arrays) and routes
/// the estimation half into its leaves.
McfTree fit_tree(const Matrix& x_train, const Labels& d_train, const Vector& y_train, const Matrix& matched,
                 std::span<const Index> rows, const Matrix& x_est, const Labels& d_est, int num_treatments,
                 int min_leaf_per_arm, double lambda, SeededRng& rng);

class McfForest {
 public:
  int num_treatments() const { return num_treatments_; }
  int num_trees() const { return static_cast<int>(trees_.size()); }
  const std::vector<McfTree>& trees() const { return trees_; }
  const McfParams& params() const { return params_; }
  double lambda() const { return lambda_; }

  /// Estimation half: original row ids, arms, and the outcomes the weights
  /// multiply (centered when local centering is on).
  const std::vector<Index>& est_rows() const { return est_rows_; }
  const Labels& est_arms() const { return est_arms_; }
  const Vector& est_outcomes() const { return est_outcomes_; }
  Index est_size() const { return static_cast<Index>(est_rows_.size()); }
  const std::vector<Index>& train_rows() const { return train_rows_; }

  /// Equal model state: every serialized field (auxiliary-forest settings
  /// are not part of a fitted model).
  bool operator==(const McfForest& other) const;

  /// Text format, version 1, with doubles as hexfloats so a round trip is
  /// bit-exact:
  ///   mcf-forest 1
  ///   treatments <M>
  ///   params <B> <nu> <subsample> <lambda> <centering 0|1>
  ///   train <n1> <row...>
  ///   est <n2> then n2 lines "<row> <arm> <outcome>"
  ///   trees <B>, then per tree:
  ///     nodes <count> then lines "<var> <threshold> <left> <right> <leaf>"
  ///     leaves <count> offsets <...> members <...> train_counts <...>
  void write(std::ostream& out) const;
  static McfForest read(std::istream& in);

  friend McfForest fit_forest_on_split(const Sample& sample, const HonestSplit& split, const McfParams& params,
                                       const SeededRng& rng, Exec exec);
  /// Rebuilds a forest around existing trees; used by tests to handcraft forests.
  static McfForest from_parts(int num_treatments, std::vector<McfTree> trees, std::vector<Index> est_rows,
                              Labels est_arms, Vector est_outcomes, McfParams params = {}, double lambda = 0.0);

 private:
  int num_treatments_ = 2;
  McfParams params_;
  double lambda_ = 0.0;
  std::vector<Index> train_rows_;
  std::vector<Index> est_rows_;
  Labels est_arms_;
  Vector est_outcomes_;
  std::vector<McfTree> trees_;
};

/// Centered outcomes for both halves: the training half gets K-fold
/// cross-fitted predictions of E[Y|X] subtracted, the estimation half the
/// average of the K training-half fold models.
struct Centering {
  Vector train;  // centered outcomes of split.train, in order
  Vector est;    // centered outcomes of split.est, in order
  Vector train_prediction;
  Vector est_prediction;
};
Centering local_center(const Sample& sample, const HonestSplit& split, int K, const regforest::RegForestParams& params,
                       const SeededRng& rng, Exec exec = Exec::Parallel);

/// Full pipeline on a given split: optional centering, prognostic scores and
/// matching on the training half, B trees on fresh subsamples, estimation half
/// routed into every tree.
McfForest fit_forest_on_split(const Sample& sample, const HonestSplit& split, const McfParams& params,
                              const SeededRng& rng, Exec exec = Exec::Parallel);
McfForest fit_forest(const Sample& sample, const McfParams& params, const SeededRng& rng,
                     Exec exec = Exec::Parallel);

/// Forest weights over the estimation half for one query and pair (m, l).
/// Positive weights sit on arm-m units and sum to 1, negative ones on arm-l
/// units and sum to -1. Trees whose leaf lacks estimation units of m or l are
/// skipped; the average runs over contributing trees.
struct WeightVector {
  int m = 1;
  int l = 0;
  std::vector<Index> units;  // ascending estimation-half indices
  std::vector<double> weights;
  int contributing_trees = 0;

  double positive_sum() const;
  double negative_sum() const;
  Vector dense(Index est_size) const;
  double dot(const Vector& y) const;
};

/// Throws EstimationFailure when no tree contributes.
WeightVector forest_weights(const McfForest& forest, const Matrix& x, Index row, int m, int l);

/// Leaf of every query row in every tree, with the number of trees that
/// contribute for pair (m, l).
class QueryRouting {
 public:
  QueryRouting(const McfForest& forest, const Matrix& x, int m, int l, Exec exec = Exec::Parallel);

  Index size() const { return rows_; }
  int leaf(Index q, int b) const { return leaves_[static_cast<std::size_t>(q) * trees_ + b]; }
  bool contributes(int b, int leaf) const { return contributes_[b][leaf] != 0; }
  int contributing(Index q) const { return counts_[q]; }
  bool failed(Index q) const { return counts_[q] == 0; }
  int m() const { return m_; }
  int l() const { return l_; }

 private:
  Index rows_;
  int trees_;
  int m_, l_;
  std::vector<int> leaves_;
  std::vector<std::vector<char>> contributes_;
  std::vector<int> counts_;
};

/// Dense weight vector of query q (zero vector when q failed).
Vector query_weights(const McfForest& forest, const QueryRouting& routing, Index q);

/// Group-mean weight vector for each group 0..J-1 over the non-failed queries
/// with that label; column j is group j. Accumulates per tree and leaf, so the
/// cost is independent of how many queries fall in a leaf.
Matrix group_weights(const McfForest& forest, const QueryRouting& routing, const Labels& groups, int num_groups,
                     Exec exec = Exec::Parallel);

struct IatePrediction {
  Vector estimate;            // NaN where failed
  std::vector<char> failed;  // 1 where no tree contributed
};

/// sum_i w_i * y_i per query, computed from per-leaf arm means.
IatePrediction predict_iate(const McfForest& forest, const Matrix& x, int m, int l, Exec exec = Exec::Parallel);

/// Refits with the two halves exchanged and averages the IATE predictions of
/// both forests (no inference). Rows where either forest fails are failed.
IatePrediction efficient_iate(const Sample& sample, const McfParams& params, const SeededRng& rng, const Matrix& x_new,
                              int m, int l, Exec exec = Exec::Parallel);

}  // namespace mcf::forest
