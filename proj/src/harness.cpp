#include "mcf/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <tuple>

namespace mcf::harness {

using inference::Estimand;

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}
}  // namespace

// ---------------------------------------------------------------------------
// Estimators and configuration

std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::Mcf: return "mcf";
    case Estimator::McfCent: return "mcf-cent";
    case Estimator::McfCentEff: return "mcf-cent-eff";
    case Estimator::Dml: return "dml";
    case Estimator::DmlNorm: return "dml-norm";
    case Estimator::DmlOls: return "dml-ols";
    case Estimator::DmlRf: return "dml-rf";
    case Estimator::Ols: return "ols";
  }
  return "?";
}

const std::vector<Estimator>& all_estimators() {
  static const std::vector<Estimator> all{Estimator::Mcf,     Estimator::McfCent, Estimator::McfCentEff,
                                          Estimator::Dml,     Estimator::DmlNorm, Estimator::DmlOls,
                                          Estimator::DmlRf,   Estimator::Ols};
  return all;
}

Estimator parse_estimator(const std::string& s) {
  for (Estimator e : all_estimators())
    if (to_string(e) == s) return e;
  throw InvalidArgument("unknown estimator '" + s + "'");
}

int ScenarioConfig::resolved_replications() const {
  if (replications > 0) return replications;
  return std::max(1, static_cast<int>(std::lround(1000.0 * 2500.0 / dgp.n_train)));
}

void ScenarioConfig::validate() const {
  dgp.validate();
  if (replications < 0) throw InvalidArgument("replications must be >= 1 (or 0 for the scaling rule)");
  if (estimators.empty()) throw InvalidArgument("no estimators configured");
  if (gate_group_counts.empty()) throw InvalidArgument("need at least one GATE group count");
  for (int J : gate_group_counts)
    if (J < 2) throw InvalidArgument("GATE group counts must be >= 2");
  if (oracle_n < 1000) throw InvalidArgument("oracle sample too small");
  if (mcf_trees < 1 || nuisance_trees < 1) throw InvalidArgument("tree counts must be >= 1");
  if (!(failure_threshold >= 0.0 && failure_threshold <= 1.0)) throw InvalidArgument("failure threshold must lie in [0, 1]");
  const bool has_ols = std::find(estimators.begin(), estimators.end(), Estimator::Ols) != estimators.end();
  if (has_ols && dgp.num_treatments != 2) throw InvalidArgument("the ols estimator needs binary treatments");
  mcf_params(true).validate();
  dml_params().validate();
}

forest::McfParams ScenarioConfig::mcf_params(bool centering) const {
  forest::McfParams p;
  p.num_trees = mcf_trees;
  p.min_leaf_per_arm = min_leaf_per_arm;
  p.local_centering = centering;
  p.nuisance.num_trees = nuisance_trees;
  p.nuisance.max_features = mcf_nuisance_max_features;
  return p;
}

dml::DmlParams ScenarioConfig::dml_params() const {
  dml::DmlParams p;
  p.outcome.num_trees = nuisance_trees;
  p.propensity.num_trees = nuisance_trees;
  p.outcome.max_features = p.propensity.max_features = dml_max_features;
  p.outcome.min_leaf = p.propensity.min_leaf = dml_min_leaf;
  return p;
}

namespace {

ScenarioConfig base_config(const std::string& id, dgp::IateShape shape, dgp::Selectivity sel) {
  ScenarioConfig c;
  c.id = id;
  c.dgp.shape = shape;
  c.dgp.selectivity = sel;
  return c;
}

const std::vector<std::pair<std::string, dgp::Selectivity>>& selectivities() {
  static const std::vector<std::pair<std::string, dgp::Selectivity>> s{
      {"none", dgp::Selectivity::None}, {"medium", dgp::Selectivity::Medium}, {"strong", dgp::Selectivity::Strong}};
  return s;
}

}  // namespace

std::vector<std::string> scenario_ids() {
  std::vector<std::string> ids;
  for (const auto& [name, sel] : selectivities()) ids.push_back("base-" + name);
  for (const char* shape : {"zero", "linear", "nonlin", "quadratic"})
    for (const auto& [name, sel] : selectivities()) ids.push_back(std::string(shape) + "-" + name);
  for (const auto& [name, sel] : selectivities()) ids.push_back("gates-" + name);
  ids.push_back("smoke");
  return ids;
}

ScenarioConfig scenario(const std::string& id) {
  if (id == "smoke") {
    ScenarioConfig c = base_config(id, dgp::IateShape::Step, dgp::Selectivity::Medium);
    c.dgp.n_train = c.dgp.n_predict = 400;
    c.replications = 2;
    c.mcf_trees = 100;
    c.nuisance_trees = 20;
    c.oracle_n = 100'000;
    c.gate_group_counts = {5};
    return c;
  }
  const auto dash = id.find('-');
  if (dash == std::string::npos) throw InvalidArgument("unknown scenario '" + id + "'");
  const std::string family = id.substr(0, dash);
  const std::string sel_name = id.substr(dash + 1);
  const auto sel = std::find_if(selectivities().begin(), selectivities().end(),
                                [&](const auto& s) { return s.first == sel_name; });
  if (sel == selectivities().end()) throw InvalidArgument("unknown scenario '" + id + "'");
  if (family == "base") return base_config(id, dgp::IateShape::Step, sel->second);
  if (family == "gates") {
    ScenarioConfig c = base_config(id, dgp::IateShape::Step, sel->second);
    c.gate_group_counts = {5, 10, 20, 40};
    return c;
  }
  for (const char* shape : {"zero", "linear", "nonlin", "quadratic"})
    if (family == shape) return base_config(id, dgp::parse_shape(shape), sel->second);
  throw InvalidArgument("unknown scenario '" + id + "'");
}

void apply_setting(ScenarioConfig& c, const std::string& key, const std::string& value) {
  auto as_int = [&] {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(value, &used);
      if (used != value.size()) throw InvalidArgument("");
      return v;
    } catch (...) {
      throw InvalidArgument("setting '" + key + "' expects an integer, got '" + value + "'");
    }
  };
  auto as_double = [&] {
    try {
      std::size_t used = 0;
      const double v = std::stod(value, &used);
      if (used != value.size()) throw InvalidArgument("");
      return v;
    } catch (...) {
      throw InvalidArgument("setting '" + key + "' expects a number, got '" + value + "'");
    }
  };
  if (key == "id") {
    c.id = value;
  } else if (key == "base") {
    const std::string id = c.id;
    c = scenario(value);
    if (id != "custom") c.id = id;
  } else if (key == "n") {
    c.dgp.n_train = c.dgp.n_predict = static_cast<int>(as_int());
  } else if (key == "n_train") {
    c.dgp.n_train = static_cast<int>(as_int());
  } else if (key == "n_predict") {
    c.dgp.n_predict = static_cast<int>(as_int());
  } else if (key == "p_normal") {
    c.dgp.p_normal = static_cast<int>(as_int());
  } else if (key == "p_uniform") {
    c.dgp.p_uniform = static_cast<int>(as_int());
  } else if (key == "p_dummy") {
    c.dgp.p_dummy = static_cast<int>(as_int());
  } else if (key == "k") {
    c.dgp.k = static_cast<int>(as_int());
  } else if (key == "selectivity") {
    c.dgp.selectivity = dgp::parse_selectivity(value);
  } else if (key == "shape") {
    c.dgp.shape = dgp::parse_shape(value);
  } else if (key == "r2") {
    c.dgp.outcome_r2 = as_double();
  } else if (key == "treatments") {
    c.dgp.num_treatments = static_cast<int>(as_int());
    c.dgp.treatment_shares.assign(c.dgp.num_treatments, 1.0 / c.dgp.num_treatments);
  } else if (key == "shares") {
    c.dgp.treatment_shares.clear();
    for (const auto& s : split_list(value)) c.dgp.treatment_shares.push_back(std::stod(s));
  } else if (key == "estimators") {
    c.estimators.clear();
    if (value == "all")
      c.estimators = all_estimators();
    else
      for (const auto& s : split_list(value)) c.estimators.push_back(parse_estimator(s));
  } else if (key == "reps") {
    c.replications = static_cast<int>(as_int());
  } else if (key == "seed") {
    c.master_seed = static_cast<std::uint64_t>(as_int());
  } else if (key == "gate_groups") {
    c.gate_group_counts.clear();
    for (const auto& s : split_list(value)) c.gate_group_counts.push_back(std::stoi(s));
  } else if (key == "oracle_n") {
    c.oracle_n = static_cast<Index>(as_int());
  } else if (key == "mcf_trees") {
    c.mcf_trees = static_cast<int>(as_int());
  } else if (key == "nuisance_trees") {
    c.nuisance_trees = static_cast<int>(as_int());
  } else if (key == "dml_max_features") {
    c.dml_max_features = value == "all" ? regforest::kAllFeatures : static_cast<int>(as_int());
  } else if (key == "mcf_nuisance_max_features") {
    c.mcf_nuisance_max_features = value == "all" ? regforest::kAllFeatures : static_cast<int>(as_int());
  } else if (key == "dml_min_leaf") {
    c.dml_min_leaf = static_cast<int>(as_int());
  } else if (key == "min_leaf") {
    c.min_leaf_per_arm = static_cast<int>(as_int());
  } else if (key == "iate_se") {
    c.iate_se = value == "1" || value == "true" || value == "yes";
  } else if (key == "failure_threshold") {
    c.failure_threshold = as_double();
  } else {
    throw InvalidArgument("unknown config key '" + key + "'");
  }
}

ScenarioConfig parse_config(std::istream& in) {
  ScenarioConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidArgument("config line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  c.validate();
  return c;
}

ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config file '" + path + "'");
  return parse_config(in);
}

Scenario prepare(const ScenarioConfig& config, const dgp::CalibrationTable* table) {
  config.validate();
  const dgp::DgpConstants constants = table != nullptr && table->contains(config.dgp)
                                          ? table->get(config.dgp)
                                          : dgp::calibrate(config.dgp, static_cast<int>(config.oracle_n));
  dgp::Dgp process(config.dgp, constants);
  SeededRng truth_rng = SeededRng(config.master_seed).split(0x7275746855ULL);
  dgp::GroundTruth truth = process.ground_truth(config.oracle_n, truth_rng, config.gate_group_counts);
  return Scenario{config, std::move(process), std::move(truth)};
}

// ---------------------------------------------------------------------------
// One replication

namespace {

bool wants(const ScenarioConfig& c, Estimator e) {
  return std::find(c.estimators.begin(), c.estimators.end(), e) != c.estimators.end();
}

class Collector {
 public:
  Collector(const Scenario& sc, int rep, const Vector& iate_truth) : sc_(sc), rep_(rep), iate_truth_(iate_truth) {}

  void add(Estimator e, Estimand estimand, int groups, int index, double point, double se) {
    Record r;
    r.rep = rep_;
    r.estimator = e;
    r.estimand = estimand;
    r.groups = groups;
    r.index = index;
    r.point = point;
    r.se = se;
    r.truth = truth(estimand, groups, index);
    records.push_back(r);
  }
  void fail(Estimator e, Estimand estimand, int groups, int index) {
    add(e, estimand, groups, index, kNaN, kNaN);
    records.back().failed = true;
  }
  void add(Estimator e, const inference::EffectEstimate& est, int groups = 0) {
    add(e, est.estimand, groups, est.index, est.point, est.se);
  }
  // Every estimand the estimator would report, all failed.
  void fail_all(Estimator e, bool scalar, bool iate) {
    if (scalar) {
      fail(e, Estimand::ATE, 0, 0);
      for (int J : sc_.config.gate_group_counts)
        for (int j = 0; j < J; ++j) fail(e, Estimand::GATE, J, j);
    }
    if (iate)
      for (Index q = 0; q < iate_truth_.size(); ++q) fail(e, Estimand::IATE, 0, static_cast<int>(q));
  }

  std::vector<Record> records;

 private:
  double truth(Estimand e, int groups, int index) const {
    switch (e) {
      case Estimand::ATE: return sc_.truth.ate;
      case Estimand::GATE: return sc_.truth.gate.at(groups)[index];
      case Estimand::IATE: return iate_truth_[index];
    }
    return kNaN;
  }
  const Scenario& sc_;
  int rep_;
  const Vector& iate_truth_;
};

void report_forest(const Scenario& sc, const forest::McfForest& f, const Sample& pred,
                   const std::map<int, Labels>& groups, Estimator tag, bool report_iate, Collector& out, Exec exec) {
  const forest::QueryRouting routing(f, pred.x, 1, 0, exec);
  const Index n = pred.size();
  const std::string name = to_string(tag);

  auto report_groups = [&](const Labels& labels, int J, bool ate) {
    std::vector<int> used(J, 0);
    for (Index q = 0; q < n; ++q)
      if (!routing.failed(q)) ++used[labels[q]];
    const Matrix w = forest::group_weights(f, routing, labels, J, exec);
    for (int j = 0; j < J; ++j) {
      const Estimand e = ate ? Estimand::ATE : Estimand::GATE;
      if (used[j] == 0) {
        out.fail(tag, e, ate ? 0 : J, j);
        continue;
      }
      out.add(tag, inference::estimate_from_weights(f, w.col(j), 1, 0, e, j, name), ate ? 0 : J);
    }
  };
  report_groups(Labels(n, 0), 1, true);
  for (int J : sc.config.gate_group_counts) report_groups(groups.at(J), J, false);

  if (!report_iate) return;
  const forest::IatePrediction iate = forest::predict_iate(f, pred.x, 1, 0, exec);
  for (Index q = 0; q < n; ++q) {
    if (iate.failed[q]) {
      out.fail(tag, Estimand::IATE, 0, static_cast<int>(q));
      continue;
    }
    double se = kNaN;
    if (sc.config.iate_se) {
      const Vector w = forest::query_weights(f, routing, q);
      se = std::sqrt(inference::weights_variance(w, f.est_arms(), f.est_outcomes(), 1, 0));
    }
    out.add(tag, Estimand::IATE, 0, static_cast<int>(q), iate.estimate[q], se);
  }
}

void run_mcf(const Scenario& sc, const Sample& train, const Sample& pred, const std::map<int, Labels>& groups,
             bool centering, const SeededRng& rng, Collector& out, Exec exec) {
  const ScenarioConfig& cfg = sc.config;
  const Estimator tag = centering ? Estimator::McfCent : Estimator::Mcf;
  const bool main = wants(cfg, tag);
  const bool eff = centering && wants(cfg, Estimator::McfCentEff);
  if (!main && !eff) return;
  const forest::McfParams params = cfg.mcf_params(centering);
  try {
    SeededRng split_rng = rng.split(0);
    const forest::HonestSplit split =
        forest::make_honest_split(train.size(), train.num_treatments, params.min_leaf_per_arm, split_rng);
    const forest::McfForest first = forest::fit_forest_on_split(train, split, params, rng.split(1), exec);
    if (main) report_forest(sc, first, pred, groups, tag, true, out, exec);
    if (eff) {
      const forest::HonestSplit swapped{split.est, split.train};
      const forest::McfForest second = forest::fit_forest_on_split(train, swapped, params, rng.split(2), exec);
      const forest::IatePrediction a = forest::predict_iate(first, pred.x, 1, 0, exec);
      const forest::IatePrediction b = forest::predict_iate(second, pred.x, 1, 0, exec);
      for (Index q = 0; q < pred.size(); ++q) {
        if (a.failed[q] || b.failed[q])
          out.fail(Estimator::McfCentEff, Estimand::IATE, 0, static_cast<int>(q));
        else
          out.add(Estimator::McfCentEff, Estimand::IATE, 0, static_cast<int>(q), 0.5 * (a.estimate[q] + b.estimate[q]),
                  kNaN);
      }
    }
  } catch (const std::exception&) {
    // Estimation failures and degenerate draws (e.g. an arm too small to split).
    if (main) {
      out.records.erase(std::remove_if(out.records.begin(), out.records.end(),
                                       [&](const Record& r) { return r.estimator == tag; }),
                        out.records.end());
      out.fail_all(tag, true, true);
    }
    if (eff) {
      out.records.erase(std::remove_if(out.records.begin(), out.records.end(),
                                       [&](const Record& r) { return r.estimator == Estimator::McfCentEff; }),
                        out.records.end());
      out.fail_all(Estimator::McfCentEff, false, true);
    }
  }
}

void run_dml(const Scenario& sc, const Sample& train, const Sample& pred, const std::map<int, Labels>& train_groups,
             const SeededRng& rng, Collector& out, Exec exec) {
  const ScenarioConfig& cfg = sc.config;
  const bool any = wants(cfg, Estimator::Dml) || wants(cfg, Estimator::DmlNorm) || wants(cfg, Estimator::DmlOls) ||
                   wants(cfg, Estimator::DmlRf);
  if (!any) return;
  const dml::DmlParams params = cfg.dml_params();
  dml::Nuisances nu;
  try {
    nu = dml::cross_fit_nuisances(train, params, rng.split(0), exec);
  } catch (const std::exception&) {
    for (Estimator e : {Estimator::Dml, Estimator::DmlNorm})
      if (wants(cfg, e)) out.fail_all(e, true, false);
    for (Estimator e : {Estimator::DmlOls, Estimator::DmlRf})
      if (wants(cfg, e)) out.fail_all(e, false, true);
    return;
  }
  auto scalar = [&](Estimator tag, const Vector& g) {
    out.add(tag, dml::ate_from_scores(g, 1, 0, to_string(tag)));
    for (int J : cfg.gate_group_counts)
      for (const auto& e : dml::gate_ols(g, train_groups.at(J), J, 1, 0, to_string(tag))) out.add(tag, e, J);
  };
  if (wants(cfg, Estimator::Dml)) scalar(Estimator::Dml, dml::dr_scores(train, nu, 1, 0));
  const Vector gn = dml::normalized_scores(train, nu, 1, 0, params);
  if (wants(cfg, Estimator::DmlNorm)) scalar(Estimator::DmlNorm, gn);
  if (wants(cfg, Estimator::DmlOls))
    for (const auto& e : dml::iate_smoother(gn, train.x, pred.x, dml::Smoother::Ols, 1, 0, "dml-ols"))
      out.add(Estimator::DmlOls, e);
  if (wants(cfg, Estimator::DmlRf)) {
    regforest::RegForestParams rf = params.outcome;
    for (const auto& e :
         dml::iate_smoother(gn, train.x, pred.x, dml::Smoother::RandomForest, 1, 0, "dml-rf", rf, rng.split(1), exec))
      out.add(Estimator::DmlRf, e);
  }
}

void run_ols(const Scenario& sc, const Sample& train, const Sample& pred, const std::map<int, Labels>& groups,
             Collector& out) {
  const ScenarioConfig& cfg = sc.config;
  if (!wants(cfg, Estimator::Ols)) return;
  bool first = true;
  try {
    for (int J : cfg.gate_group_counts) {
      const dml::OlsBenchmark b = dml::ols_benchmark(train, pred.x, groups.at(J), J);
      if (first) {
        out.add(Estimator::Ols, b.ate);
        for (const auto& e : b.iate) out.add(Estimator::Ols, e);
        first = false;
      }
      for (const auto& e : b.gate) out.add(Estimator::Ols, e, J);
    }
  } catch (const std::exception&) {
    out.records.erase(std::remove_if(out.records.begin(), out.records.end(),
                                     [](const Record& r) { return r.estimator == Estimator::Ols; }),
                      out.records.end());
    out.fail_all(Estimator::Ols, true, true);
  }
}

}  // namespace

ReplicationResult run_replication(const Scenario& sc, int rep, Exec exec) {
  const ScenarioConfig& cfg = sc.config;
  const SeededRng rep_rng = SeededRng(cfg.master_seed).split(static_cast<std::uint64_t>(rep));
  SeededRng train_rng = rep_rng.split(1);
  SeededRng pred_rng = rep_rng.split(2);
  const Sample train = sc.dgp.draw_sample(cfg.dgp.n_train, train_rng);
  const Sample pred = sc.dgp.draw_sample(cfg.dgp.n_predict, pred_rng);

  std::map<int, Labels> pred_groups, train_groups;
  for (int J : cfg.gate_group_counts) {
    pred_groups[J] = sc.dgp.gate_groups(pred.x.col(0), J);
    train_groups[J] = sc.dgp.gate_groups(train.x.col(0), J);
  }

  Collector out(sc, rep, *pred.true_iate);
  run_mcf(sc, train, pred, pred_groups, false, rep_rng.split(10), out, exec);
  run_mcf(sc, train, pred, pred_groups, true, rep_rng.split(11), out, exec);
  run_dml(sc, train, pred, train_groups, rep_rng.split(20), out, exec);
  run_ols(sc, train, pred, pred_groups, out);

  ReplicationResult result;
  result.rep = rep;
  result.records = std::move(out.records);
  return result;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

struct Moments {
  double bias, mae, sd, rmse, skew, kurt, mean_se, cov95, cov80;
};

Moments moments(const std::vector<const Record*>& rs) {
  const double n = static_cast<double>(rs.size());
  double err = 0.0, abs_err = 0.0, sq_err = 0.0, mean = 0.0, se = 0.0, c95 = 0.0, c80 = 0.0;
  bool has_se = true;
  for (const Record* r : rs) {
    const double e = r->point - r->truth;
    err += e;
    abs_err += std::abs(e);
    sq_err += e * e;
    mean += r->point;
    if (std::isnan(r->se)) {
      has_se = false;
    } else {
      se += r->se;
      c95 += std::abs(e) <= inference::kZ95 * r->se ? 1.0 : 0.0;
      c80 += std::abs(e) <= inference::kZ80 * r->se ? 1.0 : 0.0;
    }
  }
  mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (const Record* r : rs) {
    const double c = r->point - mean;
    m2 += c * c;
    m3 += c * c * c;
    m4 += c * c * c * c;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  Moments m{};
  m.bias = err / n;
  m.mae = abs_err / n;
  m.rmse = std::sqrt(sq_err / n);
  m.sd = std::sqrt(m2);
  m.skew = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : kNaN;
  m.kurt = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : kNaN;
  m.mean_se = has_se ? se / n : kNaN;
  m.cov95 = has_se ? c95 / n : kNaN;
  m.cov80 = has_se ? c80 / n : kNaN;
  return m;
}

}  // namespace

std::vector<MetricsRow> compute_metrics(const std::vector<Record>& records) {
  using Key = std::tuple<int, int, int>;  // estimator, estimand, groups
  std::map<Key, std::vector<const Record*>> by_key;
  std::map<Key, int> failures;
  std::map<Key, std::vector<int>> reps;
  for (const Record& r : records) {
    const Key key{static_cast<int>(r.estimator), static_cast<int>(r.estimand), r.groups};
    by_key[key];
    reps[key].push_back(r.rep);
    if (r.failed)
      ++failures[key];
    else
      by_key[key].push_back(&r);
  }
  std::vector<MetricsRow> rows;
  for (auto& [key, rs] : by_key) {
    MetricsRow row;
    row.estimator = static_cast<Estimator>(std::get<0>(key));
    row.estimand = static_cast<Estimand>(std::get<1>(key));
    row.groups = std::get<2>(key);
    auto& rep_ids = reps[key];
    std::sort(rep_ids.begin(), rep_ids.end());
    row.replications = static_cast<int>(std::unique(rep_ids.begin(), rep_ids.end()) - rep_ids.begin());
    row.failures = failures[key];
    if (rs.empty()) {
      row.bias = row.mae = row.sd = row.rmse = row.skewness = row.excess_kurtosis = row.bias_se = row.covp95 =
          row.covp80 = kNaN;
      rows.push_back(row);
      continue;
    }
    if (row.estimand == Estimand::IATE) {
      const Moments m = moments(rs);
      row.bias = m.bias;
      row.mae = m.mae;
      row.rmse = m.rmse;
      row.sd = row.skewness = row.excess_kurtosis = row.bias_se = kNaN;
      row.covp95 = m.cov95;
      row.covp80 = m.cov80;
    } else {
      // One parameter per index; metrics are averaged over parameters.
      std::map<int, std::vector<const Record*>> params;
      for (const Record* r : rs) params[r->index].push_back(r);
      double bias = 0, mae = 0, sd = 0, rmse = 0, skew = 0, kurt = 0, bse = 0, c95 = 0, c80 = 0;
      for (const auto& [index, prs] : params) {
        const Moments m = moments(prs);
        bias += m.bias;
        mae += m.mae;
        sd += m.sd;
        rmse += m.rmse;
        skew += m.skew;
        kurt += m.kurt;
        bse += m.mean_se - m.sd;
        c95 += m.cov95;
        c80 += m.cov80;
      }
      const double P = static_cast<double>(params.size());
      row.bias = bias / P;
      row.mae = mae / P;
      row.sd = sd / P;
      row.rmse = rmse / P;
      row.skewness = skew / P;
      row.excess_kurtosis = kurt / P;
      row.bias_se = bse / P;
      row.covp95 = c95 / P;
      row.covp80 = c80 / P;
    }
    rows.push_back(row);
  }
  return rows;
}

double ScenarioResult::failure_rate() const {
  return records.empty() ? 0.0 : static_cast<double>(failed_records) / static_cast<double>(records.size());
}

ScenarioResult run_scenario(const Scenario& sc, Exec exec) {
  const int R = sc.config.resolved_replications();
  std::vector<ReplicationResult> reps(R);
  const int threads = threads_for(exec);
  if (threads > 1 && R > 1) {
    std::exception_ptr error;
#pragma omp parallel for schedule(dynamic) num_threads(threads)
    for (int r = 0; r < R; ++r) {
      try {
        reps[r] = run_replication(sc, r, Exec::Serial);
      } catch (...) {
#pragma omp critical
        if (!error) error = std::current_exception();
      }
    }
    if (error) std::rethrow_exception(error);
  } else {
    for (int r = 0; r < R; ++r) reps[r] = run_replication(sc, r, exec);
  }
  ScenarioResult out;
  out.id = sc.config.id;
  out.replications = R;
  for (auto& rep : reps)
    for (auto& rec : rep.records) {
      out.failed_records += rec.failed ? 1 : 0;
      out.records.push_back(rec);
    }
  out.metrics = compute_metrics(out.records);
  return out;
}

// ---------------------------------------------------------------------------
// I/O

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "nan") return kNaN;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str()) throw InvalidArgument("bad number '" + s + "'");
  return v;
}

Estimand parse_estimand(const std::string& s) {
  if (s == "ATE") return Estimand::ATE;
  if (s == "GATE") return Estimand::GATE;
  if (s == "IATE") return Estimand::IATE;
  throw InvalidArgument("unknown estimand '" + s + "'");
}

std::vector<std::vector<std::string>> read_csv_rows(std::istream& in, const std::string& expected_header) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != expected_header)
    throw InvalidArgument("unexpected CSV header; want '" + expected_header + "'");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(trim(line));
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

const char* kMetricsHeader =
    "scenario,estimator,estimand,groups,reps,failures,bias,mae,sd,rmse,skew,exkurt,bias_se,covp95,covp80";
const char* kRecordsHeader = "rep,estimator,estimand,groups,index,point,se,truth,failed";

}  // namespace

void write_metrics_csv(std::ostream& out, const std::string& id, const std::vector<MetricsRow>& rows) {
  out << kMetricsHeader << '\n';
  for (const MetricsRow& r : rows)
    out << id << ',' << to_string(r.estimator) << ',' << inference::to_string(r.estimand) << ',' << r.groups << ','
        << r.replications << ',' << r.failures << ',' << fmt(r.bias) << ',' << fmt(r.mae) << ',' << fmt(r.sd) << ','
        << fmt(r.rmse) << ',' << fmt(r.skewness) << ',' << fmt(r.excess_kurtosis) << ',' << fmt(r.bias_se) << ','
        << fmt(r.covp95) << ',' << fmt(r.covp80) << '\n';
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
  std::vector<MetricsRow> rows;
  for (const auto& c : read_csv_rows(in, kMetricsHeader)) {
    if (c.size() != 15) throw InvalidArgument("metrics CSV row with wrong column count");
    MetricsRow r;
    r.estimator = parse_estimator(c[1]);
    r.estimand = parse_estimand(c[2]);
    r.groups = std::stoi(c[3]);
    r.replications = std::stoi(c[4]);
    r.failures = std::stoi(c[5]);
    r.bias = parse_double(c[6]);
    r.mae = parse_double(c[7]);
    r.sd = parse_double(c[8]);
    r.rmse = parse_double(c[9]);
    r.skewness = parse_double(c[10]);
    r.excess_kurtosis = parse_double(c[11]);
    r.bias_se = parse_double(c[12]);
    r.covp95 = parse_double(c[13]);
    r.covp80 = parse_double(c[14]);
    rows.push_back(r);
  }
  return rows;
}

void write_records_csv(std::ostream& out, const std::vector<Record>& records) {
  out << kRecordsHeader << '\n';
  for (const Record& r : records)
    out << r.rep << ',' << to_string(r.estimator) << ',' << inference::to_string(r.estimand) << ',' << r.groups << ','
        << r.index << ',' << fmt(r.point) << ',' << fmt(r.se) << ',' << fmt(r.truth) << ',' << (r.failed ? 1 : 0)
        << '\n';
}

std::vector<Record> read_records_csv(std::istream& in) {
  std::vector<Record> records;
  for (const auto& c : read_csv_rows(in, kRecordsHeader)) {
    if (c.size() != 9) throw InvalidArgument("records CSV row with wrong column count");
    Record r;
    r.rep = std::stoi(c[0]);
    r.estimator = parse_estimator(c[1]);
    r.estimand = parse_estimand(c[2]);
    r.groups = std::stoi(c[3]);
    r.index = std::stoi(c[4]);
    r.point = parse_double(c[5]);
    r.se = parse_double(c[6]);
    r.truth = parse_double(c[7]);
    r.failed = c[8] == "1";
    records.push_back(r);
  }
  return records;
}

void write_metrics_table(std::ostream& out, const std::vector<MetricsRow>& rows) {
  const std::vector<std::string> head{"Estimator", "Estimand", "Bias",   "MAE",    "SD",    "RMSE",
                                      "Skew",      "ExKurt",   "BiasSE", "CovP95", "CovP80"};
  std::vector<std::vector<std::string>> cells;
  auto num = [](double v, int digits) {
    if (std::isnan(v)) return std::string("-");
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
  };
  for (const MetricsRow& r : rows) {
    std::string estimand = inference::to_string(r.estimand);
    if (r.estimand == Estimand::GATE) estimand += " (" + std::to_string(r.groups) + ")";
    cells.push_back({to_string(r.estimator), estimand, num(r.bias, 3), num(r.mae, 3), num(r.sd, 3), num(r.rmse, 3),
                     num(r.skewness, 2), num(r.excess_kurtosis, 2), num(r.bias_se, 3), num(100.0 * r.covp95, 0),
                     num(100.0 * r.covp80, 0)});
  }
  std::vector<std::size_t> width(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) {
    width[c] = head[c].size();
    for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
  }
  auto line = [&](const std::vector<std::string>& row) {
    out << '|';
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c < 2)
        out << ' ' << std::left << std::setw(static_cast<int>(width[c])) << row[c] << " |";
      else
        out << ' ' << std::right << std::setw(static_cast<int>(width[c])) << row[c] << " |";
    }
    out << '\n';
  };
  line(head);
  out << '|';
  for (std::size_t c = 0; c < head.size(); ++c)
    out << (c < 2 ? ":" : "-") << std::string(width[c], '-') << (c < 2 ? "-|" : ":|");
  out << '\n';
  for (const auto& row : cells) line(row);
  out << std::left;
}

std::optional<MetricsRow> find_row(const std::vector<MetricsRow>& rows, Estimator e, Estimand estimand, int groups) {
  for (const MetricsRow& r : rows)
    if (r.estimator == e && r.estimand == estimand && r.groups == groups) return r;
  return std::nullopt;
}

}  // namespace mcf::harness
