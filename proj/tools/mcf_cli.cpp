#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "mcf/dgp.hpp"
#include "mcf/dml.hpp"
#include "mcf/forest.hpp"
#include "mcf/harness.hpp"
#include "mcf/inference.hpp"
#include "mcf/parallel.hpp"

#ifndef MCF_DATA_DIR
#define MCF_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using namespace mcf;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitFailures = 3;

std::string default_constants() { return std::string(MCF_DATA_DIR) + "/dgp_constants.txt"; }

std::optional<dgp::CalibrationTable> load_constants(const std::string& path) {
  if (path.empty() || !fs::exists(path)) return std::nullopt;
  return dgp::CalibrationTable::load(path);
}

struct SimulateOptions {
  std::string scenario;
  std::string config;
  int n = 0;
  int reps = -1;
  long long seed = -1;
  int threads = 0;
  std::string out_dir = "results";
  std::string constants = default_constants();
  std::string estimators;
  std::string gate_groups;
  int mcf_trees = 0;
  int nuisance_trees = 0;
  long long oracle_n = 0;
  bool iate_se = false;
};

int simulate(const SimulateOptions& o) {
  harness::ScenarioConfig cfg;
  try {
    if (!o.config.empty())
      cfg = harness::load_config(o.config);
    else if (!o.scenario.empty())
      cfg = harness::scenario(o.scenario);
    else
      throw InvalidArgument("simulate needs --scenario or --config");
    if (o.n > 0) harness::apply_setting(cfg, "n", std::to_string(o.n));
    if (o.reps >= 0) cfg.replications = o.reps;
    if (o.seed >= 0) cfg.master_seed = static_cast<std::uint64_t>(o.seed);
    if (!o.estimators.empty()) harness::apply_setting(cfg, "estimators", o.estimators);
    if (!o.gate_groups.empty()) harness::apply_setting(cfg, "gate_groups", o.gate_groups);
    if (o.mcf_trees > 0) cfg.mcf_trees = o.mcf_trees;
    if (o.nuisance_trees > 0) cfg.nuisance_trees = o.nuisance_trees;
    if (o.oracle_n > 0) cfg.oracle_n = o.oracle_n;
    if (o.iate_se) cfg.iate_se = true;
    cfg.validate();
  } catch (const InvalidArgument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  if (o.threads > 0) set_num_threads(o.threads);

  const auto table = load_constants(o.constants);
  const auto start = std::chrono::steady_clock::now();
  const harness::Scenario sc = harness::prepare(cfg, table ? &*table : nullptr);
  const harness::ScenarioResult result = harness::run_scenario(sc);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  fs::create_directories(o.out_dir);
  const fs::path base = fs::path(o.out_dir) / cfg.id;
  {
    std::ofstream out(base.string() + "_metrics.csv");
    harness::write_metrics_csv(out, cfg.id, result.metrics);
  }
  {
    std::ofstream out(base.string() + "_records.csv");
    harness::write_records_csv(out, result.records);
  }
  {
    std::ofstream out(base.string() + "_metrics.md");
    harness::write_metrics_table(out, result.metrics);
  }
  harness::write_metrics_table(std::cout, result.metrics);
  std::cout << cfg.id << ": " << result.replications << " replications in " << secs << " s, true ATE "
            << sc.truth.ate << ", failure rate " << result.failure_rate() << '\n';
  if (result.failure_rate() > cfg.failure_threshold) {
    std::cerr << "estimation failures above threshold (" << result.failure_rate() << " > " << cfg.failure_threshold
              << ")\n";
    return kExitFailures;
  }
  return 0;
}

int calibrate_cmd(const std::string& out_path, long long oracle_n) {
  dgp::CalibrationTable table;
  std::set<std::string> done;
  for (const std::string& id : harness::scenario_ids()) {
    harness::ScenarioConfig cfg = harness::scenario(id);
    if (!done.insert(dgp::CalibrationTable::key(cfg.dgp)).second) continue;
    const dgp::DgpConstants c = dgp::calibrate(cfg.dgp, static_cast<int>(oracle_n));
    table.set(cfg.dgp, c);
    std::cout << dgp::CalibrationTable::key(cfg.dgp) << " = " << c.zeta << ' ' << c.delta << '\n';
  }
  if (const auto dir = fs::path(out_path).parent_path(); !dir.empty()) fs::create_directories(dir);
  table.save(out_path);
  return 0;
}

int table_cmd(const std::string& path, const std::string& format) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "cannot open '" << path << "'\n";
    return kExitConfig;
  }
  const auto rows = harness::read_metrics_csv(in);
  if (format == "csv")
    harness::write_metrics_csv(std::cout, fs::path(path).stem().string(), rows);
  else
    harness::write_metrics_table(std::cout, rows);
  return 0;
}

struct EstimateOptions {
  std::string data;
  std::string predict;
  std::string estimator = "mcf-cent";
  std::string out;
  int groups = 5;
  int trees = 1000;
  int nuisance_trees = 100;
  long long seed = 1;
};

// Equal-count groups of the first covariate, ties to the lower group.
Labels quantile_groups(const Vector& v, int J) {
  std::vector<double> sorted(v.data(), v.data() + v.size());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> cuts;
  for (int j = 1; j < J; ++j) cuts.push_back(sorted[static_cast<std::size_t>(j * sorted.size() / J) - 1]);
  Labels g(v.size());
  for (Index i = 0; i < v.size(); ++i)
    g[i] = static_cast<int>(std::lower_bound(cuts.begin(), cuts.end(), v[i]) - cuts.begin());
  return g;
}

int estimate_cmd(const EstimateOptions& o) {
  Sample train, pred;
  try {
    std::ifstream in(o.data);
    if (!in) throw InvalidArgument("cannot open data file '" + o.data + "'");
    train = dgp::read_sample_csv(in);
    pred = train;
    if (!o.predict.empty()) {
      std::ifstream pin(o.predict);
      if (!pin) throw InvalidArgument("cannot open prediction file '" + o.predict + "'");
      pred = dgp::read_sample_csv(pin);
    }
    if (pred.x.cols() != train.x.cols()) throw InvalidArgument("prediction data has a different number of covariates");
    if (o.groups < 1) throw InvalidArgument("--groups must be >= 1");
  } catch (const InvalidArgument& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitConfig;
  }

  std::vector<inference::EffectEstimate> rows;
  const SeededRng rng(static_cast<std::uint64_t>(o.seed));
  const Labels pred_groups = quantile_groups(pred.x.col(0), o.groups);
  try {
    if (o.estimator == "mcf" || o.estimator == "mcf-cent") {
      forest::McfParams params;
      params.num_trees = o.trees;
      params.local_centering = o.estimator == "mcf-cent";
      params.nuisance.num_trees = o.nuisance_trees;
      const forest::McfForest f = forest::fit_forest(train, params, rng);
      const int M = train.num_treatments;
      for (int m = 1; m < M; ++m)
        for (int l = 0; l < m; ++l) {
          const forest::QueryRouting routing(f, pred.x, m, l);
          const Matrix ate = forest::group_weights(f, routing, Labels(pred.size(), 0), 1);
          rows.push_back(inference::estimate_from_weights(f, ate.col(0), m, l, inference::Estimand::ATE, 0, o.estimator));
          const Matrix gate = forest::group_weights(f, routing, pred_groups, o.groups);
          for (int j = 0; j < o.groups; ++j)
            rows.push_back(
                inference::estimate_from_weights(f, gate.col(j), m, l, inference::Estimand::GATE, j, o.estimator));
          for (Index q = 0; q < pred.size(); ++q) {
            if (routing.failed(q)) continue;
            rows.push_back(inference::estimate_from_weights(f, forest::query_weights(f, routing, q), m, l,
                                                            inference::Estimand::IATE, static_cast<int>(q),
                                                            o.estimator));
          }
        }
    } else if (o.estimator == "dml" || o.estimator == "dml-norm") {
      dml::DmlParams params;
      params.outcome.num_trees = params.propensity.num_trees = o.nuisance_trees;
      const dml::Nuisances nu = dml::cross_fit_nuisances(train, params, rng);
      const Labels train_groups = quantile_groups(train.x.col(0), o.groups);
      const int M = train.num_treatments;
      for (int m = 1; m < M; ++m)
        for (int l = 0; l < m; ++l) {
          const Vector g = o.estimator == "dml" ? dml::dr_scores(train, nu, m, l)
                                                : dml::normalized_scores(train, nu, m, l, params);
          rows.push_back(dml::ate_from_scores(g, m, l, o.estimator));
          for (auto& e : dml::gate_ols(g, train_groups, o.groups, m, l, o.estimator)) rows.push_back(e);
          for (auto& e : dml::iate_smoother(g, train.x, pred.x, dml::Smoother::Ols, m, l, o.estimator))
            rows.push_back(e);
        }
    } else {
      std::cerr << "unknown estimator '" << o.estimator << "' (mcf, mcf-cent, dml, dml-norm)\n";
      return kExitConfig;
    }
  } catch (const InvalidArgument& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const EstimationFailure& e) {
    std::cerr << "estimation failed: " << e.what() << '\n';
    return kExitFailures;
  }
  if (o.out.empty()) {
    inference::write_estimates_csv(std::cout, rows);
  } else {
    std::ofstream out(o.out);
    inference::write_estimates_csv(out, rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  init_threads_from_env();
  CLI::App app{"Modified Causal Forest and DML estimators with a Monte Carlo harness"};
  app.require_subcommand(1);

  SimulateOptions sim;
  auto* s = app.add_subcommand("simulate", "Run a Monte Carlo scenario");
  s->add_option("--scenario", sim.scenario, "Registered scenario id");
  s->add_option("--config", sim.config, "Scenario config file (key = value)");
  s->add_option("--n", sim.n, "Training and prediction sample size");
  s->add_option("--reps", sim.reps, "Replications (0: scaling rule)");
  s->add_option("--seed", sim.seed, "Master seed");
  s->add_option("--threads", sim.threads, "Thread count");
  s->add_option("--out-dir", sim.out_dir, "Output directory");
  s->add_option("--constants", sim.constants, "Calibrated DGP constants file");
  s->add_option("--estimators", sim.estimators, "Comma-separated estimator list or 'all'");
  s->add_option("--gate-groups", sim.gate_groups, "Comma-separated GATE group counts");
  s->add_option("--mcf-trees", sim.mcf_trees, "Trees per mcf forest");
  s->add_option("--nuisance-trees", sim.nuisance_trees, "Trees per auxiliary forest");
  s->add_option("--oracle-n", sim.oracle_n, "Rows of the population oracle draw");
  s->add_flag("--iate-se", sim.iate_se, "Compute mcf IATE standard errors");

  std::string cal_out = default_constants();
  long long cal_n = 1'000'000;
  auto* c = app.add_subcommand("calibrate", "Recompute the DGP constants of every registered scenario");
  c->add_option("--out", cal_out, "Output file");
  c->add_option("--oracle-n", cal_n, "Rows of the calibration draw");

  std::string table_path, table_format = "markdown";
  auto* t = app.add_subcommand("table", "Render a stored metrics CSV");
  t->add_option("metrics", table_path, "Metrics CSV")->required();
  t->add_option("--format", table_format, "markdown or csv")->check(CLI::IsMember({"markdown", "csv"}));

  EstimateOptions est;
  auto* e = app.add_subcommand("estimate", "Estimate effects on a user CSV (x1..xp,d,y)");
  e->add_option("--data", est.data, "Training CSV")->required();
  e->add_option("--predict", est.predict, "Prediction CSV (default: the training data)");
  e->add_option("--estimator", est.estimator, "mcf, mcf-cent, dml or dml-norm");
  e->add_option("--out", est.out, "Output CSV (default: stdout)");
  e->add_option("--groups", est.groups, "GATE groups on quantiles of x1");
  e->add_option("--trees", est.trees, "Trees per mcf forest");
  e->add_option("--nuisance-trees", est.nuisance_trees, "Trees per auxiliary forest");
  e->add_option("--seed", est.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*s) return simulate(sim);
    if (*c) return calibrate_cmd(cal_out, cal_n);
    if (*t) return table_cmd(table_path, table_format);
    if (*e) return estimate_cmd(est);
  } catch (const InvalidArgument& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
