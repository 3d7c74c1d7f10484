#pragma once

#include <iosfwd>
#include <utility>
#include <vector>

#include "mcf/inference.hpp"
#include "mcf/ols.hpp"
#include "mcf/parallel.hpp"
#include "mcf/regforest.hpp"
#include "mcf/rng.hpp"
#include "mcf/types.hpp"

namespace mcf::dml {

struct DmlParams {
  int folds = 5;
  regforest::RegForestParams outcome{.max_features = regforest::kAllFeatures};
  regforest::RegForestParams propensity{.max_features = regforest::kAllFeatures,
                                        .task = regforest::TaskKind::ClassProbability};
  double propensity_floor = 0.01;   // plain dml
  double truncation_share = 0.05;   // dml-norm: cap on a single weight, share of its column sum
  double numerical_floor = 1e-6;    // dml-norm: guards 1/p before truncation

  void validate() const;
};

/// Out-of-fold nuisance predictions.
struct Nuisances {
  Matrix mu;               // n x M, E[Y | X, D = d]
  Matrix propensity;       // n x M, floored and renormalized to sum to 1
  Matrix propensity_raw;   // n x M, classifier output renormalized to sum to 1
  std::vector<int> folds;  // stratified by arm
};

/// K-fold cross-fitting: for fold k, the arm-d outcome forest and the
/// propensity classifier are trained on the other folds.
Nuisances cross_fit_nuisances(const Sample& sample, const DmlParams& params, const SeededRng& rng,
                              Exec exec = Exec::Parallel);

double dr_score(double y, int d, int m, int l, double mu_m, double mu_l, double p_m, double p_l);

/// Per-unit scores for pair (m, l) with the floored propensities.
Vector dr_scores(const Sample& sample, const Nuisances& nuisances, int m, int l);

/// dml-norm scores: the implicit weights 1(d=m)/p_m and 1(d=l)/p_l are each
/// capped at `truncation_share` of their column sum and then rescaled so each
/// column sums to n.
Vector normalized_scores(const Sample& sample, const Nuisances& nuisances, int m, int l,
                         const DmlParams& params = {});

/// The two adjusted weight columns used by `normalized_scores`.
std::pair<Vector, Vector> normalized_weights(const Sample& sample, const Nuisances& nuisances, int m, int l,
                                             const DmlParams& params = {});

/// Mean score with se = sd / sqrt(n).
inference::EffectEstimate ate_from_scores(const Vector& scores, int m, int l, std::string method);

/// Saturated dummy regression of the scores on group labels 0..J-1, i.e.
/// group means, with HC1 standard errors. Every group must be non-empty.
std::vector<inference::EffectEstimate> gate_ols(const Vector& scores, const Labels& groups, int num_groups, int m,
                                                int l, std::string method);

enum class Smoother { Ols, RandomForest };

/// Regresses scores on covariates and predicts at x_new. Ols reports HC1
/// prediction standard errors; RandomForest has none.
std::vector<inference::EffectEstimate> iate_smoother(const Vector& scores, const Matrix& x, const Matrix& x_new,
                                                     Smoother method, int m, int l, std::string tag,
                                                     const regforest::RegForestParams& rf_params = {},
                                                     const SeededRng& rng = SeededRng(0), Exec exec = Exec::Parallel);

/// Separate OLS of y on [1, x] in each of the two arms.
struct OlsBenchmark {
  inference::EffectEstimate ate;
  std::vector<inference::EffectEstimate> gate;
  std::vector<inference::EffectEstimate> iate;
};
OlsBenchmark ols_benchmark(const Sample& sample, const Matrix& x_new, const Labels& groups_new, int num_groups);

/// Scores for every pair (m, l), m > l, one column per pair.
struct ScoreTable {
  std::vector<std::pair<int, int>> pairs;
  Matrix scores;
};
ScoreTable score_table(const Sample& sample, const Nuisances& nuisances, bool normalized,
                       const DmlParams& params = {});
/// Header: row,<m>-<l>,...
void write_score_csv(std::ostream& out, const ScoreTable& table);

}  // namespace mcf::dml
