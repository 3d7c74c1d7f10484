#pragma once

#include <limits>
#include <vector>

#include "mcf/parallel.hpp"
#include "mcf/rng.hpp"
#include "mcf/tree.hpp"
#include "mcf/types.hpp"

namespace mcf::regforest {

enum class TaskKind { Regression, ClassProbability };

/// `max_features` value that tries every covariate at every node.
inline constexpr int kAllFeatures = std::numeric_limits<int>::max();

struct RegForestParams {
  int num_trees = 1000;
  int min_leaf = 5;
  double subsample_fraction = 0.5;
  int max_features = 0;  // candidate variables per node; 0 draws them with the Poisson rule
  TaskKind task = TaskKind::Regression;

  void validate() const;
  bool operator==(const RegForestParams&) const = default;
};

/// CART-style forest with variance-reduction splits. Leaves store the mean of
/// the (possibly multi-column) target. For class probabilities the target is
/// the one-hot label matrix, so leaves hold class frequencies.
class RegForestModel {
 public:
  RegForestModel() = default;

  int num_trees() const { return static_cast<int>(trees_.size()); }
  int num_outputs() const { return outputs_; }
  const std::vector<tree::SplitTree>& trees() const { return trees_; }
  /// Leaf values of tree b, num_leaves x num_outputs row-major.
  const std::vector<double>& leaf_values(int b) const { return leaf_values_[b]; }
  int min_leaf_size() const;  // smallest training leaf over all trees

  /// First output column (the regression prediction, or P(class 0)).
  Vector predict(const Matrix& x, Exec exec = Exec::Parallel) const;
  /// n x num_outputs.
  Matrix predict_all(const Matrix& x, Exec exec = Exec::Parallel) const;

  friend RegForestModel fit(const Matrix& x, const Matrix& target, const RegForestParams& params, const SeededRng& rng,
                            Exec exec);

 private:
  int outputs_ = 1;
  std::vector<tree::SplitTree> trees_;
  std::vector<std::vector<double>> leaf_values_;
  std::vector<std::vector<int>> leaf_sizes_;
};

/// Fits on all rows of x; `target` is n x q. Tree b uses stream rng.split(b),
/// so serial and parallel fits are identical.
RegForestModel fit(const Matrix& x, const Matrix& target, const RegForestParams& params, const SeededRng& rng,
                   Exec exec = Exec::Parallel);
RegForestModel fit(const Matrix& x, const Vector& target, const RegForestParams& params, const SeededRng& rng,
                   Exec exec = Exec::Parallel);
/// One-hot class target with `num_classes` columns.
RegForestModel fit_classes(const Matrix& x, const Labels& labels, int num_classes, const RegForestParams& params,
                           const SeededRng& rng, Exec exec = Exec::Parallel);

/// Fold label for each of n rows, K folds of (near) equal size. With `strata`
/// every stratum is dealt round-robin so each fold contains every stratum
/// that has at least K members.
std::vector<int> make_folds(Index n, int K, SeededRng& rng, const Labels* strata = nullptr);

/// Cross-fitted predictions plus the K fold models (model k excludes fold k).
struct CrossFit {
  Matrix out_of_fold;  // n x q
  std::vector<int> folds;
  std::vector<RegForestModel> models;

  /// Average of the K fold models at new rows.
  Matrix predict_average(const Matrix& x, Exec exec = Exec::Parallel) const;
};

CrossFit cross_fit(const Matrix& x, const Matrix& target, int K, const RegForestParams& params, const SeededRng& rng,
                   Exec exec = Exec::Parallel, const std::vector<int>* folds = nullptr);

/// Prediction for row i from the model trained without i's fold.
Vector cross_fit_predict(const Matrix& x, const Vector& target, int K, const RegForestParams& params,
                         const SeededRng& rng, Exec exec = Exec::Parallel);

/// n x M matrix whose column m predicts y from x using arm-m rows only:
/// out-of-fold for arm-m rows, the fold-model average for other rows.
Matrix prognostic_score(const Matrix& x, const Labels& d, const Vector& y, int num_treatments,
                        const RegForestParams& params, const SeededRng& rng, int K = 5, Exec exec = Exec::Parallel);

}  // namespace mcf::regforest
