#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mcf/dgp.hpp"
#include "mcf/dml.hpp"
#include "mcf/forest.hpp"
#include "mcf/inference.hpp"

namespace mcf::harness {

enum class Estimator { Mcf, McfCent, McfCentEff, Dml, DmlNorm, DmlOls, DmlRf, Ols };
std::string to_string(Estimator e);
Estimator parse_estimator(const std::string& s);
const std::vector<Estimator>& all_estimators();

struct ScenarioConfig {
  std::string id = "custom";
  dgp::DgpSpec dgp;
  std::vector<Estimator> estimators = all_estimators();
  int replications = 0;  // 0: 1000 * 2500 / n_train, at least 1
  std::uint64_t master_seed = 1;
  std::vector<int> gate_group_counts{5};
  Index oracle_n = 1'000'000;
  int mcf_trees = 1000;
  int nuisance_trees = 100;  // every auxiliary forest: centering, prognostic score, dml nuisances
  int min_leaf_per_arm = 5;
  int dml_max_features = regforest::kAllFeatures;  // dml nuisance forests; 0: Poisson rule
  int dml_min_leaf = 5;
  int mcf_nuisance_max_features = 0;  // centering and prognostic-score forests
  bool iate_se = false;  // mcf IATE standard errors (expensive)
  double failure_threshold = 0.02;

  int resolved_replications() const;
  void validate() const;
  forest::McfParams mcf_params(bool centering) const;
  dml::DmlParams dml_params() const;
};

/// Shipped scenario ids: base-{none,medium,strong}, {zero,linear,nonlin,
/// quadratic}-{none,medium,strong}, gates-{none,medium,strong} and smoke.
std::vector<std::string> scenario_ids();
/// Throws InvalidArgument for an unknown id.
ScenarioConfig scenario(const std::string& id);

/// `key = value` lines, '#' comments. Keys: id, base (a registry id to start
/// from), n, n_train, n_predict, p_normal, p_uniform, p_dummy, k, selectivity,
/// shape, r2, treatments, shares, estimators, reps, seed, gate_groups,
/// oracle_n, mcf_trees, nuisance_trees, min_leaf, dml_max_features, dml_min_leaf,
/// mcf_nuisance_max_features,
/// iate_se, failure_threshold.
ScenarioConfig parse_config(std::istream& in);
ScenarioConfig load_config(const std::string& path);
/// Applies one `key = value` setting; throws InvalidArgument on unknown keys.
void apply_setting(ScenarioConfig& config, const std::string& key, const std::string& value);

/// A configured DGP together with its population truth.
struct Scenario {
  ScenarioConfig config;
  dgp::Dgp dgp;
  dgp::GroundTruth truth;
};

/// Calibrated constants come from `table` when it has them, otherwise they
/// are computed on `config.oracle_n` draws.
Scenario prepare(const ScenarioConfig& config, const dgp::CalibrationTable* table = nullptr);

/// One (estimator, estimand) result of a replication. `groups` is J for GATE
/// rows and 0 otherwise; `index` is the group or prediction row.
struct Record {
  int rep = 0;
  Estimator estimator = Estimator::Mcf;
  inference::Estimand estimand = inference::Estimand::ATE;
  int groups = 0;
  int index = 0;
  double point = 0.0;
  double se = 0.0;  // NaN where the estimator provides no inference
  double truth = 0.0;
  bool failed = false;
};

struct ReplicationResult {
  int rep = 0;
  std::vector<Record> records;
};

/// Draws the training and prediction samples of replication `rep` from the
/// master seed, runs every configured estimator and pairs estimates with the
/// truth. Deterministic in (config, rep).
ReplicationResult run_replication(const Scenario& scenario, int rep, Exec exec = Exec::Parallel);

struct MetricsRow {
  Estimator estimator = Estimator::Mcf;
  inference::Estimand estimand = inference::Estimand::ATE;
  int groups = 0;
  int replications = 0;
  int failures = 0;
  double bias = 0.0;
  double mae = 0.0;
  double sd = 0.0;  // population SD over replications, so rmse^2 = bias^2 + sd^2
  double rmse = 0.0;
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
  double bias_se = 0.0;
  double covp95 = 0.0;  // share in [0, 1]
  double covp80 = 0.0;
};

/// Per-parameter metrics averaged over parameters (GATE), or pooled over rows
/// and replications (IATE, where SD, BiasSE, skewness and kurtosis are NaN).
/// Failed records are excluded and counted.
std::vector<MetricsRow> compute_metrics(const std::vector<Record>& records);

struct ScenarioResult {
  std::string id;
  int replications = 0;
  std::vector<Record> records;
  std::vector<MetricsRow> metrics;
  std::size_t failed_records = 0;
  double failure_rate() const;
};

/// Replications run in parallel; each owns its RNG stream and results are
/// reduced in replication order.
ScenarioResult run_scenario(const Scenario& scenario, Exec exec = Exec::Parallel);

/// scenario,estimator,estimand,groups,reps,failures,bias,mae,sd,rmse,skew,
/// exkurt,bias_se,covp95,covp80
void write_metrics_csv(std::ostream& out, const std::string& scenario_id, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(std::istream& in);
/// rep,estimator,estimand,groups,index,point,se,truth,failed
void write_records_csv(std::ostream& out, const std::vector<Record>& records);
std::vector<Record> read_records_csv(std::istream& in);
/// Aligned markdown with columns Bias, MAE, SD, RMSE, Skew, ExKurt, BiasSE,
/// CovP95, CovP80 (coverage in percent).
void write_metrics_table(std::ostream& out, const std::vector<MetricsRow>& rows);

/// Finds the row for (estimator, estimand, groups); nullopt if absent.
std::optional<MetricsRow> find_row(const std::vector<MetricsRow>& rows, Estimator e, inference::Estimand estimand,
                                   int groups = 0);

}  // namespace mcf::harness
