#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mcf/rng.hpp"
#include "mcf/types.hpp"

namespace mcf::dgp {

enum class Selectivity { None, Medium, Strong };
enum class IateShape { Zero, Linear, Logistic, Quadratic, Step };
enum class CovariateKind { Uniform, Normal, DummyUniform, DummyNormal };

std::string to_string(Selectivity s);
std::string to_string(IateShape s);
Selectivity parse_selectivity(const std::string& s);
IateShape parse_shape(const std::string& s);

/// Full parameterization of one synthetic data-generating process.
struct DgpSpec {
  int p_normal = 10;
  int p_uniform = 10;
  int p_dummy = 0;  // taken half from each family's leading columns
  int k = 10;       // relevant covariates
  Selectivity selectivity = Selectivity::None;
  IateShape shape = IateShape::Step;
  double outcome_r2 = 0.10;  // target R^2 of the non-treatment outcome: 0, 0.10 or 0.45
  int num_treatments = 2;
  std::vector<double> treatment_shares{0.5, 0.5};
  int n_train = 2500;
  int n_predict = 2500;
  int gate_groups = 5;

  int p() const { return p_normal + p_uniform + p_dummy; }
  void validate() const;
  /// Key identifying the covariate design, e.g. "pn10-pu10-pd0-k10".
  std::string family_key() const;
};

/// Column kinds in order. With both continuous families present the 1st, 3rd,
/// ... columns are uniform; dummies replace the leading columns of each family.
std::vector<CovariateKind> covariate_layout(const DgpSpec& spec);

/// beta = (1, 1-1/k, ..., 1/k, 0, ..., 0) of length p.
Vector relevance_weights(int p, int k);

/// Selection strength for the index; 0.45 / 1.5 replace 0.42 / 1.25 when every
/// covariate is normal.
double selection_strength(const DgpSpec& spec);

/// Calibrated outcome and heterogeneity constants of a design.
struct DgpConstants {
  double zeta = 1.0;   // scale of the linear heterogeneity index
  double delta = 0.0;  // amplitude of the non-treatment outcome signal
};

/// Plain-text key-value store of calibrated constants.
///
///   # comment
///   version = 1
///   <shape>/<family_key>/<r2> = <zeta> <delta>
///
/// `r2` is printed with two decimals. Unknown keys trigger calibration.
class CalibrationTable {
 public:
  static constexpr int kVersion = 1;

  static CalibrationTable load(const std::string& path);
  static CalibrationTable parse(std::istream& in);
  void save(const std::string& path) const;
  void write(std::ostream& out) const;

  static std::string key(const DgpSpec& spec);
  bool contains(const DgpSpec& spec) const { return entries_.count(key(spec)) > 0; }
  DgpConstants get(const DgpSpec& spec) const;
  void set(const DgpSpec& spec, DgpConstants c) { entries_[key(spec)] = c; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, DgpConstants> entries_;
};

/// Numerical calibration on an `oracle_n` draw: delta by bisection on the
/// population R^2 of the non-treatment outcome, zeta by bisection on a unit
/// ATE (only the quadratic shape depends on it; other shapes keep zeta = 1).
DgpConstants calibrate(const DgpSpec& spec, int oracle_n = 1'000'000, std::uint64_t seed = 20240611);

/// True effects on the oracle draw: ATE and one GATE vector per group count.
struct GroundTruth {
  double ate = 0.0;
  std::map<int, Vector> gate;  // J -> length-J vector
  std::map<int, Vector> group_shares;
  double ate_se = 0.0;  // Monte Carlo SE of the oracle mean
};

/// A data-generating process with its derived constants cached: relevance
/// weights, index scale, treatment quantile thresholds (from a fixed 10^6-draw
/// reference sample) and calibrated (zeta, delta).
class Dgp {
 public:
  Dgp(DgpSpec spec, DgpConstants constants, int reference_n = 1'000'000);

  const DgpSpec& spec() const { return spec_; }
  const DgpConstants& constants() const { return constants_; }
  const std::vector<CovariateKind>& layout() const { return layout_; }
  const Vector& beta() const { return beta_; }
  /// Thresholds t_1 < ... < t_{M-1} on the selection index.
  const std::vector<double>& treatment_thresholds() const { return thresholds_; }

  Matrix draw_covariates(Index n, SeededRng& rng) const;
  /// Linear index x'beta / sqrt(sum beta^2 / 1.25).
  Vector linear_index(const Matrix& x) const;
  Labels assign_treatments(const Matrix& x, SeededRng& rng) const;
  Vector true_iate(const Matrix& x) const;
  struct Outcomes {
    Vector y;
    Matrix potential;  // n x M
  };
  /// Arm m receives m * IATE on top of the common non-treatment process; noise
  /// is independent across arms; y picks the arm of d.
  Outcomes draw_outcomes(const Matrix& x, const Labels& d, const Vector& iate, SeededRng& rng) const;
  Sample draw_sample(Index n, SeededRng& rng) const;

  /// Equal-probability bins of the first covariate's population distribution.
  Labels gate_groups(const Vector& x1, int num_groups) const;

  GroundTruth ground_truth(Index oracle_n, SeededRng& rng, const std::vector<int>& group_counts) const;

 private:
  double cdf_transform(double x, CovariateKind kind) const;

  DgpSpec spec_;
  DgpConstants constants_;
  std::vector<CovariateKind> layout_;
  Vector beta_;
  double index_scale_ = 1.0;
  std::array<double, 2> step_shift_{};  // added to the CDF value of x1, x2 in the step kernel
  std::vector<double> thresholds_;
};

/// Step kernel f(a) f(b) - 2.8 with f(u) = 1 + 1 / (1 + exp(-20 (u - 1/3))).
double step_kernel(double a, double b);

/// Writes x1..xp,d,y[,y0..y{M-1},iate] with a header row.
void write_sample_csv(std::ostream& out, const Sample& s);
/// Reads the layout written by `write_sample_csv`; extra columns are ignored.
Sample read_sample_csv(std::istream& in);

}  // namespace mcf::dgp
