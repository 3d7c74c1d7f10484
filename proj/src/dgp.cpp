#include "mcf/dgp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mcf::dgp {

namespace {

constexpr double kSqrt3 = 1.7320508075688772;
constexpr double kUniformHalfWidth = 1.7320508075688772;  // sqrt(12) / 2
constexpr std::uint64_t kReferenceSeed = 0x7265666572656e63ULL;

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }
double softplus(double z) { return z > 30.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double wa_step(double u) { return 1.0 + logistic(20.0 * (u - 1.0 / 3.0)); }

// E f(U + s) for U uniform on [0, 1], and for U in {0, 1} with equal probability.
double wa_mean_continuous(double s) {
  return 1.0 + (softplus(20.0 * (s + 2.0 / 3.0)) - softplus(20.0 * (s - 1.0 / 3.0))) / 20.0;
}
double wa_mean_dummy(double s) { return 1.0 + 0.5 * (logistic(20.0 * (s - 1.0 / 3.0)) + logistic(20.0 * (s + 2.0 / 3.0))); }

bool is_dummy(CovariateKind k) { return k == CovariateKind::DummyNormal || k == CovariateKind::DummyUniform; }

double mean_of(const Vector& v) { return v.size() ? v.mean() : 0.0; }
double variance_of(const Vector& v) {
  const double m = mean_of(v);
  return (v.array() - m).square().mean();
}

}  // namespace

std::string to_string(Selectivity s) {
  switch (s) {
    case Selectivity::None: return "none";
    case Selectivity::Medium: return "medium";
    case Selectivity::Strong: return "strong";
  }
  return "?";
}

std::string to_string(IateShape s) {
  switch (s) {
    case IateShape::Zero: return "zero";
    case IateShape::Linear: return "linear";
    case IateShape::Logistic: return "nonlin";
    case IateShape::Quadratic: return "quadratic";
    case IateShape::Step: return "step";
  }
  return "?";
}

Selectivity parse_selectivity(const std::string& s) {
  if (s == "none") return Selectivity::None;
  if (s == "medium" || s == "middle") return Selectivity::Medium;
  if (s == "strong") return Selectivity::Strong;
  throw InvalidArgument("unknown selectivity '" + s + "'");
}

IateShape parse_shape(const std::string& s) {
  if (s == "zero" || s == "none") return IateShape::Zero;
  if (s == "linear") return IateShape::Linear;
  if (s == "nonlin" || s == "logistic") return IateShape::Logistic;
  if (s == "quadratic") return IateShape::Quadratic;
  if (s == "step") return IateShape::Step;
  throw InvalidArgument("unknown IATE shape '" + s + "'");
}

void DgpSpec::validate() const {
  if (p_normal < 0 || p_uniform < 0 || p_dummy < 0) throw InvalidArgument("covariate counts must be >= 0");
  if (k < 1 || k > p()) throw InvalidArgument("need 1 <= k <= p");
  if (num_treatments < 2) throw InvalidArgument("need at least two treatments");
  if (static_cast<int>(treatment_shares.size()) != num_treatments)
    throw InvalidArgument("one treatment share per treatment required");
  double total = 0.0;
  for (double s : treatment_shares) {
    if (!(s > 0.0)) throw InvalidArgument("treatment shares must be positive");
    total += s;
  }
  if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("treatment shares must sum to one");
  if (shape == IateShape::Step && p() < 2) throw InvalidArgument("step IATE needs at least two covariates");
  if (outcome_r2 < 0.0 || outcome_r2 >= 1.0) throw InvalidArgument("outcome R^2 target must lie in [0, 1)");
  if (gate_groups < 2) throw InvalidArgument("need at least two GATE groups");
  if (p_dummy > 0 && p_normal + p_uniform == 0) throw InvalidArgument("dummies are derived from continuous families");
}

std::string DgpSpec::family_key() const {
  return "pn" + std::to_string(p_normal) + "-pu" + std::to_string(p_uniform) + "-pd" + std::to_string(p_dummy) +
         "-k" + std::to_string(k);
}

std::vector<CovariateKind> covariate_layout(const DgpSpec& spec) {
  int dummy_uniform = 0;
  int dummy_normal = 0;
  if (spec.p_uniform > 0 && spec.p_normal > 0) {
    dummy_uniform = (spec.p_dummy + 1) / 2;
    dummy_normal = spec.p_dummy - dummy_uniform;
  } else if (spec.p_uniform > 0) {
    dummy_uniform = spec.p_dummy;
  } else {
    dummy_normal = spec.p_dummy;
  }
  const int n_uniform = spec.p_uniform + dummy_uniform;
  const int n_normal = spec.p_normal + dummy_normal;

  std::vector<CovariateKind> layout;
  layout.reserve(n_uniform + n_normal);
  int u = 0;
  int g = 0;
  while (u < n_uniform || g < n_normal) {
    if (u < n_uniform) {
      layout.push_back(u < dummy_uniform ? CovariateKind::DummyUniform : CovariateKind::Uniform);
      ++u;
    }
    if (g < n_normal) {
      layout.push_back(g < dummy_normal ? CovariateKind::DummyNormal : CovariateKind::Normal);
      ++g;
    }
  }
  return layout;
}

Vector relevance_weights(int p, int k) {
  if (k < 1 || k > p) throw InvalidArgument("relevance weights need 1 <= k <= p");
  Vector beta = Vector::Zero(p);
  for (int j = 0; j < k; ++j) beta[j] = 1.0 - static_cast<double>(j) / k;
  return beta;
}

double selection_strength(const DgpSpec& spec) {
  const bool all_normal = spec.p_uniform == 0 && spec.p_dummy == 0;
  switch (spec.selectivity) {
    case Selectivity::None: return 0.0;
    case Selectivity::Medium: return all_normal ? 0.45 : 0.42;
    case Selectivity::Strong: return all_normal ? 1.5 : 1.25;
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Calibration table

std::string CalibrationTable::key(const DgpSpec& spec) {
  std::ostringstream os;
  os << to_string(spec.shape) << '/' << spec.family_key() << '/' << std::fixed << std::setprecision(2)
     << spec.outcome_r2;
  return os.str();
}

DgpConstants CalibrationTable::get(const DgpSpec& spec) const {
  auto it = entries_.find(key(spec));
  if (it == entries_.end()) throw InvalidArgument("no calibrated constants for " + key(spec));
  return it->second;
}

CalibrationTable CalibrationTable::parse(std::istream& in) {
  CalibrationTable table;
  std::string line;
  int line_no = 0;
  bool seen_version = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") != std::string::npos)
        throw InvalidArgument("constants file line " + std::to_string(line_no) + ": expected key = value");
      continue;
    }
    std::istringstream key_stream(line.substr(0, eq));
    std::string key;
    key_stream >> key;
    std::istringstream value_stream(line.substr(eq + 1));
    if (key == "version") {
      int version = 0;
      value_stream >> version;
      if (version != kVersion)
        throw InvalidArgument("constants file version " + std::to_string(version) + " unsupported");
      seen_version = true;
      continue;
    }
    DgpConstants c;
    if (!(value_stream >> c.zeta >> c.delta))
      throw InvalidArgument("constants file line " + std::to_string(line_no) + ": expected '<zeta> <delta>'");
    table.entries_[key] = c;
  }
  if (!seen_version) throw InvalidArgument("constants file lacks a version line");
  return table;
}

CalibrationTable CalibrationTable::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open constants file " + path);
  return parse(in);
}

void CalibrationTable::write(std::ostream& out) const {
  out << "# Calibrated DGP constants: <shape>/<covariate family>/<target R2> = <zeta> <delta>\n";
  out << "version = " << kVersion << "\n";
  out << std::setprecision(17);
  for (const auto& [key, c] : entries_) out << key << " = " << c.zeta << ' ' << c.delta << "\n";
}

void CalibrationTable::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write constants file " + path);
  write(out);
}

DgpConstants calibrate(const DgpSpec& spec, int oracle_n, std::uint64_t seed) {
  spec.validate();
  DgpConstants c;
  Dgp probe(spec, c, 1000);
  SeededRng rng(seed);
  SeededRng x_rng = rng.split(1);
  SeededRng e_rng = rng.split(2);
  const Matrix x = probe.draw_covariates(oracle_n, x_rng);
  const Vector index = probe.linear_index(x);
  const Vector signal = index.array().sin().matrix();
  Vector noise(oracle_n);
  for (Index i = 0; i < oracle_n; ++i) noise[i] = e_rng.normal();

  if (spec.outcome_r2 > 0.0) {
    auto r2 = [&](double delta) {
      const Vector y = delta * signal + noise;
      return variance_of(delta * signal) / variance_of(y);
    };
    double lo = 0.0;
    double hi = 10.0;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      (r2(mid) < spec.outcome_r2 ? lo : hi) = mid;
    }
    c.delta = 0.5 * (lo + hi);
  }

  if (spec.shape == IateShape::Quadratic) {
    auto ate = [&](double zeta) {
      return ((zeta * zeta * index.array().square() - 1.25) / kSqrt3 + 1.0).mean();
    };
    double lo = 0.0;
    double hi = 5.0;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      (ate(mid) < 1.0 ? lo : hi) = mid;
    }
    c.zeta = 0.5 * (lo + hi);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Dgp

double step_kernel(double a, double b) { return wa_step(a) * wa_step(b) - 2.8; }

Dgp::Dgp(DgpSpec spec, DgpConstants constants, int reference_n)
    : spec_(std::move(spec)), constants_(constants) {
  spec_.validate();
  layout_ = covariate_layout(spec_);
  beta_ = relevance_weights(spec_.p(), spec_.k);
  index_scale_ = std::sqrt(beta_.squaredNorm() / 1.25);

  if (spec_.shape == IateShape::Step) {
    // Shift each transformed covariate so E f = sqrt(3.8); the kernel then has mean one.
    for (int j = 0; j < 2; ++j) {
      auto mean_f = [&](double s) { return is_dummy(layout_[j]) ? wa_mean_dummy(s) : wa_mean_continuous(s); };
      double lo = -1.0, hi = 2.0;
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (mean_f(mid) < std::sqrt(3.8) ? lo : hi) = mid;
      }
      step_shift_[j] = 0.5 * (lo + hi);
    }
  }

  // Treatment thresholds: quantiles of the selection index on a reference draw.
  const double lambda = selection_strength(spec_);
  SeededRng ref_rng(kReferenceSeed);
  SeededRng ref_x = ref_rng.split(1);
  SeededRng ref_u = ref_rng.split(2);
  std::vector<double> index(reference_n);
  if (lambda == 0.0) {
    for (int i = 0; i < reference_n; ++i) index[i] = ref_u.normal();
  } else {
    const Matrix x = draw_covariates(reference_n, ref_x);
    const Vector lin = linear_index(x);
    for (int i = 0; i < reference_n; ++i) index[i] = lambda * lin[i] + ref_u.normal();
  }
  std::sort(index.begin(), index.end());
  double cum = 0.0;
  for (int m = 0; m + 1 < spec_.num_treatments; ++m) {
    cum += spec_.treatment_shares[m];
    auto pos = static_cast<std::size_t>(std::floor(cum * reference_n));
    pos = std::min<std::size_t>(std::max<std::size_t>(pos, 1), index.size() - 1);
    thresholds_.push_back(0.5 * (index[pos - 1] + index[pos]));
  }
}

Matrix Dgp::draw_covariates(Index n, SeededRng& rng) const {
  if (n < 1) throw InvalidArgument("draw_covariates needs n >= 1");
  const auto p = static_cast<Index>(layout_.size());
  Matrix x(n, p);
  for (Index j = 0; j < p; ++j) {
    const CovariateKind kind = layout_[j];
    for (Index i = 0; i < n; ++i) {
      switch (kind) {
        case CovariateKind::Uniform: x(i, j) = rng.uniform(-kUniformHalfWidth, kUniformHalfWidth); break;
        case CovariateKind::Normal: x(i, j) = rng.normal(); break;
        case CovariateKind::DummyUniform:
          x(i, j) = rng.uniform(-kUniformHalfWidth, kUniformHalfWidth) > 0.0 ? 1.0 : -1.0;
          break;
        case CovariateKind::DummyNormal: x(i, j) = rng.normal() > 0.0 ? 1.0 : -1.0; break;
      }
    }
  }
  return x;
}

Vector Dgp::linear_index(const Matrix& x) const {
  if (x.cols() != beta_.size()) throw InvalidArgument("covariate matrix does not match the DGP");
  return (x * beta_) / index_scale_;
}

Labels Dgp::assign_treatments(const Matrix& x, SeededRng& rng) const {
  const double lambda = selection_strength(spec_);
  const Vector lin = linear_index(x);
  Labels d(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const double v = lambda * lin[i] + rng.normal();
    int label = 0;
    for (double t : thresholds_)
      if (v > t) ++label;
    d[i] = label;
  }
  return d;
}

double Dgp::cdf_transform(double x, CovariateKind kind) const {
  switch (kind) {
    case CovariateKind::Uniform: return (x + kUniformHalfWidth) / (2.0 * kUniformHalfWidth);
    case CovariateKind::Normal: return normal_cdf(x);
    case CovariateKind::DummyUniform:
    case CovariateKind::DummyNormal: return x > 0.0 ? 1.0 : 0.0;
  }
  return x;
}

Vector Dgp::true_iate(const Matrix& x) const {
  const Index n = x.rows();
  Vector iate(n);
  if (spec_.shape == IateShape::Step) {
    for (Index i = 0; i < n; ++i)
      iate[i] = step_kernel(cdf_transform(x(i, 0), layout_[0]) + step_shift_[0],
                            cdf_transform(x(i, 1), layout_[1]) + step_shift_[1]);
    return iate;
  }
  const Vector delta = constants_.zeta * linear_index(x);
  for (Index i = 0; i < n; ++i) {
    const double v = delta[i];
    switch (spec_.shape) {
      case IateShape::Zero: iate[i] = 0.0; break;
      case IateShape::Linear: iate[i] = v + 1.0; break;
      case IateShape::Logistic: iate[i] = logistic(v) + 0.5; break;
      case IateShape::Quadratic: iate[i] = (v * v - 1.25) / kSqrt3 + 1.0; break;
      case IateShape::Step: break;
    }
  }
  return iate;
}

Dgp::Outcomes Dgp::draw_outcomes(const Matrix& x, const Labels& d, const Vector& iate, SeededRng& rng) const {
  const Index n = x.rows();
  if (static_cast<Index>(d.size()) != n || iate.size() != n) throw InvalidArgument("outcome inputs misaligned");
  const int M = spec_.num_treatments;
  const Vector lin = linear_index(x);
  Outcomes out{Vector(n), Matrix(n, M)};
  for (Index i = 0; i < n; ++i) {
    const double base = constants_.delta * std::sin(lin[i]);
    for (int m = 0; m < M; ++m) out.potential(i, m) = base + m * iate[i] + rng.normal();
    out.y[i] = out.potential(i, d[i]);
  }
  return out;
}

Sample Dgp::draw_sample(Index n, SeededRng& rng) const {
  SeededRng x_rng = rng.split(1);
  SeededRng d_rng = rng.split(2);
  SeededRng y_rng = rng.split(3);
  Sample s;
  s.num_treatments = spec_.num_treatments;
  s.x = draw_covariates(n, x_rng);
  s.d = assign_treatments(s.x, d_rng);
  Vector iate = true_iate(s.x);
  auto outcomes = draw_outcomes(s.x, s.d, iate, y_rng);
  s.y = std::move(outcomes.y);
  s.potential_outcomes = std::move(outcomes.potential);
  s.true_iate = std::move(iate);
  return s;
}

Labels Dgp::gate_groups(const Vector& x1, int num_groups) const {
  if (num_groups < 2) throw InvalidArgument("gate_groups needs J >= 2");
  Labels g(x1.size());
  for (Index i = 0; i < x1.size(); ++i) {
    const double u = cdf_transform(x1[i], layout_[0]);
    const int bin = static_cast<int>(std::ceil(u * num_groups)) - 1;
    g[i] = std::clamp(bin, 0, num_groups - 1);
  }
  return g;
}

GroundTruth Dgp::ground_truth(Index oracle_n, SeededRng& rng, const std::vector<int>& group_counts) const {
  SeededRng x_rng = rng.split(1);
  const Matrix x = draw_covariates(oracle_n, x_rng);
  const Vector iate = true_iate(x);
  GroundTruth truth;
  truth.ate = iate.mean();
  truth.ate_se = std::sqrt(variance_of(iate) / static_cast<double>(oracle_n));
  const Vector x1 = x.col(0);
  for (int J : group_counts) {
    const Labels g = gate_groups(x1, J);
    Vector sums = Vector::Zero(J);
    Vector counts = Vector::Zero(J);
    for (Index i = 0; i < oracle_n; ++i) {
      sums[g[i]] += iate[i];
      counts[g[i]] += 1.0;
    }
    Vector gate(J);
    for (int j = 0; j < J; ++j) gate[j] = counts[j] > 0 ? sums[j] / counts[j] : 0.0;
    truth.gate[J] = gate;
    truth.group_shares[J] = counts / static_cast<double>(oracle_n);
  }
  return truth;
}

// ---------------------------------------------------------------------------
// CSV

void write_sample_csv(std::ostream& out, const Sample& s) {
  const Index p = s.x.cols();
  for (Index j = 0; j < p; ++j) out << 'x' << (j + 1) << ',';
  out << "d,y";
  const bool full = s.potential_outcomes && s.true_iate;
  if (full) {
    for (int m = 0; m < s.num_treatments; ++m) out << ",y" << m;
    out << ",iate";
  }
  out << '\n' << std::setprecision(17);
  for (Index i = 0; i < s.size(); ++i) {
    for (Index j = 0; j < p; ++j) out << s.x(i, j) << ',';
    out << s.d[i] << ',' << s.y[i];
    if (full) {
      for (int m = 0; m < s.num_treatments; ++m) out << ',' << (*s.potential_outcomes)(i, m);
      out << ',' << (*s.true_iate)[i];
    }
    out << '\n';
  }
}

Sample read_sample_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument("empty CSV input");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
      header.push_back(cell);
    }
  }
  std::vector<int> x_cols;
  int d_col = -1;
  int y_col = -1;
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    const auto& h = header[c];
    if (h == "d") d_col = c;
    else if (h == "y") y_col = c;
    else if (h.size() > 1 && h[0] == 'x' && std::all_of(h.begin() + 1, h.end(), ::isdigit)) x_cols.push_back(c);
  }
  if (d_col < 0 || y_col < 0 || x_cols.empty()) throw InvalidArgument("CSV needs columns x1..xp, d and y");

  std::vector<std::vector<double>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<double> values;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (...) {
        throw InvalidArgument("CSV line " + std::to_string(line_no) + ": non-numeric cell '" + cell + "'");
      }
    }
    if (values.size() != header.size())
      throw InvalidArgument("CSV line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                            " cells");
    rows.push_back(std::move(values));
  }
  const auto n = static_cast<Index>(rows.size());
  Sample s;
  s.x.resize(n, static_cast<Index>(x_cols.size()));
  s.y.resize(n);
  s.d.resize(rows.size());
  int max_label = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < static_cast<Index>(x_cols.size()); ++j) s.x(i, j) = rows[i][x_cols[j]];
    s.y[i] = rows[i][y_col];
    const double dv = rows[i][d_col];
    if (dv < 0 || dv != std::floor(dv)) throw InvalidArgument("treatment labels must be non-negative integers");
    s.d[i] = static_cast<int>(dv);
    max_label = std::max(max_label, s.d[i]);
  }
  s.num_treatments = std::max(2, max_label + 1);
  s.validate();
  return s;
}

}  // namespace mcf::dgp
