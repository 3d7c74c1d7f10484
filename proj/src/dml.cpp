#include "mcf/dml.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

namespace mcf::dml {

using inference::EffectEstimate;
using inference::Estimand;

void DmlParams::validate() const {
  if (folds < 2) throw InvalidArgument("cross-fitting needs K >= 2");
  if (!(propensity_floor > 0.0 && propensity_floor < 0.5)) throw InvalidArgument("propensity floor must lie in (0, 0.5)");
  if (!(truncation_share > 0.0 && truncation_share <= 1.0)) throw InvalidArgument("truncation share must lie in (0, 1]");
  if (!(numerical_floor > 0.0)) throw InvalidArgument("numerical floor must be positive");
  outcome.validate();
  propensity.validate();
}

namespace {

void floor_and_normalize(Matrix& p, double floor) {
  for (Index i = 0; i < p.rows(); ++i) {
    for (Index a = 0; a < p.cols(); ++a) p(i, a) = std::max(p(i, a), floor);
    p.row(i) /= p.row(i).sum();
  }
}

Matrix rows_of(const Matrix& x, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = x.row(rows[r]);
  return out;
}

}  // namespace

Nuisances cross_fit_nuisances(const Sample& sample, const DmlParams& params, const SeededRng& rng, Exec exec) {
  params.validate();
  sample.validate();
  const Index n = sample.size();
  const int M = sample.num_treatments;
  const int K = params.folds;
  for (Index c : arm_counts(sample.d, M))
    if (c < K) throw InvalidArgument("every treatment arm needs at least K units for cross-fitting");

  SeededRng fold_rng = rng.split(0xF01D);
  Nuisances out;
  out.folds = regforest::make_folds(n, K, fold_rng, &sample.d);
  out.mu.resize(n, M);
  out.propensity_raw.resize(n, M);

  for (int k = 0; k < K; ++k) {
    std::vector<Index> train, test;
    for (Index i = 0; i < n; ++i) (out.folds[i] == k ? test : train).push_back(i);
    const Matrix x_test = rows_of(sample.x, test);
    const SeededRng fold_streams = rng.split(static_cast<std::uint64_t>(k) + 1);

    for (int d = 0; d < M; ++d) {
      std::vector<Index> arm_rows;
      for (Index i : train)
        if (sample.d[i] == d) arm_rows.push_back(i);
      Vector target(static_cast<Index>(arm_rows.size()));
      for (std::size_t r = 0; r < arm_rows.size(); ++r) target[static_cast<Index>(r)] = sample.y[arm_rows[r]];
      const auto model =
          regforest::fit(rows_of(sample.x, arm_rows), target, params.outcome, fold_streams.split(d), exec);
      const Vector pred = model.predict(x_test, exec);
      for (std::size_t r = 0; r < test.size(); ++r) out.mu(test[r], d) = pred[static_cast<Index>(r)];
    }

    Labels train_d(train.size());
    for (std::size_t r = 0; r < train.size(); ++r) train_d[r] = sample.d[train[r]];
    const auto classifier = regforest::fit_classes(rows_of(sample.x, train), train_d, M, params.propensity,
                                                   fold_streams.split(0xC1A55), exec);
    const Matrix prob = classifier.predict_all(x_test, exec);
    for (std::size_t r = 0; r < test.size(); ++r) out.propensity_raw.row(test[r]) = prob.row(static_cast<Index>(r));
  }
  floor_and_normalize(out.propensity_raw, 0.0);
  out.propensity = out.propensity_raw;
  floor_and_normalize(out.propensity, params.propensity_floor);
  return out;
}

double dr_score(double y, int d, int m, int l, double mu_m, double mu_l, double p_m, double p_l) {
  double g = mu_m - mu_l;
  if (d == m) g += (y - mu_m) / p_m;
  if (d == l) g -= (y - mu_l) / p_l;
  return g;
}

Vector dr_scores(const Sample& sample, const Nuisances& nu, int m, int l) {
  const Index n = sample.size();
  Vector g(n);
  for (Index i = 0; i < n; ++i)
    g[i] = dr_score(sample.y[i], sample.d[i], m, l, nu.mu(i, m), nu.mu(i, l), nu.propensity(i, m),
                    nu.propensity(i, l));
  return g;
}

std::pair<Vector, Vector> normalized_weights(const Sample& sample, const Nuisances& nu, int m, int l,
                                             const DmlParams& params) {
  const Index n = sample.size();
  auto column = [&](int arm) {
    Vector w = Vector::Zero(n);
    for (Index i = 0; i < n; ++i)
      if (sample.d[i] == arm) w[i] = 1.0 / std::max(nu.propensity_raw(i, arm), params.numerical_floor);
    const double cap = params.truncation_share * w.sum();
    w = w.cwiseMin(cap);
    const double total = w.sum();
    if (total > 0.0) w *= static_cast<double>(n) / total;
    return w;
  };
  return {column(m), column(l)};
}

Vector normalized_scores(const Sample& sample, const Nuisances& nu, int m, int l, const DmlParams& params) {
  const auto [wm, wl] = normalized_weights(sample, nu, m, l, params);
  const Index n = sample.size();
  Vector g(n);
  for (Index i = 0; i < n; ++i) {
    const double mm = nu.mu(i, m);
    const double ml = nu.mu(i, l);
    g[i] = mm - ml + wm[i] * (sample.y[i] - mm) - wl[i] * (sample.y[i] - ml);
  }
  return g;
}

EffectEstimate ate_from_scores(const Vector& scores, int m, int l, std::string method) {
  const Index n = scores.size();
  if (n < 2) throw InvalidArgument("ATE from scores needs n >= 2");
  double sum = 0.0;
  for (Index i = 0; i < n; ++i) sum += scores[i];
  const double mean = sum / static_cast<double>(n);
  const double var = (scores.array() - mean).square().sum() / static_cast<double>(n - 1);
  return inference::make_estimate(Estimand::ATE, 0, m, l, mean, std::sqrt(var / static_cast<double>(n)),
                                  std::move(method));
}

std::vector<EffectEstimate> gate_ols(const Vector& scores, const Labels& groups, int num_groups, int m, int l,
                                     std::string method) {
  const Index n = scores.size();
  if (static_cast<Index>(groups.size()) != n) throw InvalidArgument("one group label per score required");
  if (num_groups < 1) throw InvalidArgument("need at least one group");
  std::vector<double> count(num_groups, 0.0), sum(num_groups, 0.0);
  for (Index i = 0; i < n; ++i) {
    if (groups[i] < 0 || groups[i] >= num_groups) throw InvalidArgument("group label out of range");
    count[groups[i]] += 1.0;
    sum[groups[i]] += scores[i];
  }
  for (int j = 0; j < num_groups; ++j)
    if (count[j] == 0.0) throw InvalidArgument("group " + std::to_string(j) + " is empty");
  if (n <= num_groups) throw InvalidArgument("GATE regression needs more units than groups");
  std::vector<double> mean(num_groups), rss(num_groups, 0.0);
  for (int j = 0; j < num_groups; ++j) mean[j] = sum[j] / count[j];
  for (Index i = 0; i < n; ++i) {
    const double e = scores[i] - mean[groups[i]];
    rss[groups[i]] += e * e;
  }
  // HC1 for orthogonal dummies: sum of squared residuals / n_j^2, times n/(n-J).
  const double hc1 = static_cast<double>(n) / static_cast<double>(n - num_groups);
  std::vector<EffectEstimate> out;
  for (int j = 0; j < num_groups; ++j)
    out.push_back(inference::make_estimate(Estimand::GATE, j, m, l, mean[j],
                                           std::sqrt(hc1 * rss[j] / (count[j] * count[j])), method));
  return out;
}

std::vector<EffectEstimate> iate_smoother(const Vector& scores, const Matrix& x, const Matrix& x_new,
                                          Smoother method, int m, int l, std::string tag,
                                          const regforest::RegForestParams& rf_params, const SeededRng& rng,
                                          Exec exec) {
  if (scores.size() != x.rows()) throw InvalidArgument("scores and covariates differ in length");
  if (x.cols() != x_new.cols()) throw InvalidArgument("prediction covariates have the wrong width");
  std::vector<EffectEstimate> out;
  out.reserve(x_new.rows());
  if (method == Smoother::Ols) {
    const ols::OlsFit fit = ols::fit(ols::with_intercept(x), scores);
    const Matrix design = ols::with_intercept(x_new);
    for (Index q = 0; q < x_new.rows(); ++q) {
      const Vector row = design.row(q).transpose();
      out.push_back(inference::make_estimate(Estimand::IATE, static_cast<int>(q), m, l, fit.predict(row),
                                             fit.prediction_se(row), tag));
    }
  } else {
    const auto model = regforest::fit(x, scores, rf_params, rng, exec);
    const Vector pred = model.predict(x_new, exec);
    for (Index q = 0; q < x_new.rows(); ++q)
      out.push_back(inference::make_estimate(Estimand::IATE, static_cast<int>(q), m, l, pred[q],
                                             std::numeric_limits<double>::quiet_NaN(), tag));
  }
  return out;
}

OlsBenchmark ols_benchmark(const Sample& sample, const Matrix& x_new, const Labels& groups_new, int num_groups) {
  if (sample.num_treatments != 2) throw InvalidArgument("the OLS benchmark handles binary treatments only");
  sample.validate();
  if (static_cast<Index>(groups_new.size()) != x_new.rows()) throw InvalidArgument("one group label per row required");
  ols::OlsFit fits[2];
  for (int d = 0; d < 2; ++d) {
    std::vector<Index> rows;
    for (Index i = 0; i < sample.size(); ++i)
      if (sample.d[i] == d) rows.push_back(i);
    const Sample arm = sample.subset(rows);
    fits[d] = ols::fit(ols::with_intercept(arm.x), arm.y);
  }
  const Vector beta = fits[1].coef - fits[0].coef;
  const Matrix cov = fits[1].cov + fits[0].cov;
  auto contrast = [&](const Vector& row, Estimand e, int index) {
    const double se = std::sqrt(std::max(0.0, row.dot(cov * row)));
    return inference::make_estimate(e, index, 1, 0, row.dot(beta), se, "ols");
  };

  const Matrix design = ols::with_intercept(x_new);
  OlsBenchmark out;
  for (Index q = 0; q < design.rows(); ++q)
    out.iate.push_back(contrast(design.row(q).transpose(), Estimand::IATE, static_cast<int>(q)));
  out.ate = contrast(design.colwise().mean().transpose(), Estimand::ATE, 0);
  for (int j = 0; j < num_groups; ++j) {
    Vector mean = Vector::Zero(design.cols());
    double c = 0.0;
    for (Index q = 0; q < design.rows(); ++q)
      if (groups_new[q] == j) {
        mean += design.row(q).transpose();
        c += 1.0;
      }
    if (c == 0.0) throw InvalidArgument("group " + std::to_string(j) + " is empty");
    out.gate.push_back(contrast(mean / c, Estimand::GATE, j));
  }
  return out;
}

ScoreTable score_table(const Sample& sample, const Nuisances& nu, bool normalized, const DmlParams& params) {
  const int M = sample.num_treatments;
  ScoreTable t;
  for (int m = 1; m < M; ++m)
    for (int l = 0; l < m; ++l) t.pairs.emplace_back(m, l);
  t.scores.resize(sample.size(), static_cast<Index>(t.pairs.size()));
  for (std::size_t p = 0; p < t.pairs.size(); ++p) {
    const auto [m, l] = t.pairs[p];
    t.scores.col(static_cast<Index>(p)) =
        normalized ? normalized_scores(sample, nu, m, l, params) : dr_scores(sample, nu, m, l);
  }
  return t;
}

void write_score_csv(std::ostream& out, const ScoreTable& table) {
  out << "row";
  for (const auto& [m, l] : table.pairs) out << ',' << m << '-' << l;
  out << '\n' << std::setprecision(17);
  for (Index i = 0; i < table.scores.rows(); ++i) {
    out << i;
    for (Index p = 0; p < table.scores.cols(); ++p) out << ',' << table.scores(i, p);
    out << '\n';
  }
}

}  // namespace mcf::dml
