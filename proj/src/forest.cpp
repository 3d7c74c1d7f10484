#include "mcf/forest.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace mcf::forest {

void McfParams::validate() const {
  if (num_trees < 1) throw InvalidArgument("mcf needs at least one tree");
  if (min_leaf_per_arm < 1) throw InvalidArgument("minimum leaf size per arm must be >= 1");
  if (!(subsample_fraction > 0.0 && subsample_fraction <= 1.0))
    throw InvalidArgument("subsample fraction must lie in (0, 1]");
  if (penalty_lambda && *penalty_lambda < 0.0) throw InvalidArgument("penalty lambda must be >= 0");
  if (centering_folds < 2 || prognostic_folds < 2) throw InvalidArgument("cross-fitting needs K >= 2");
  nuisance.validate();
}

HonestSplit make_honest_split(Index n, int num_treatments, int min_leaf_per_arm, SeededRng& rng) {
  if (n < 4 * static_cast<Index>(min_leaf_per_arm) * num_treatments)
    throw InvalidArgument("honest split needs n >= 4 * nu * M (n = " + std::to_string(n) + ")");
  const auto perm = rng.permutation(static_cast<std::size_t>(n));
  HonestSplit split;
  const Index half = n / 2;
  split.train.assign(perm.begin(), perm.begin() + half);
  split.est.assign(perm.begin() + half, perm.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.est.begin(), split.est.end());
  return split;
}

// ---------------------------------------------------------------------------
// Matching

MatchedOutcomes match_outcomes(const Labels& d, const Vector& y, const Matrix& prognostic, int num_treatments) {
  const Index n = static_cast<Index>(d.size());
  if (y.size() != n || prognostic.rows() != n) throw InvalidArgument("matching inputs misaligned");
  const int M = num_treatments;
  std::vector<std::vector<Index>> arm_rows(M);
  for (Index i = 0; i < n; ++i) arm_rows[d[i]].push_back(i);
  for (int a = 0; a < M; ++a)
    if (arm_rows[a].empty()) throw InvalidArgument("matching: treatment arm " + std::to_string(a) + " has no units");

  // Whiten the scores so Mahalanobis distance becomes Euclidean. Directions
  // with (near) zero variance are dropped, i.e. a pseudo-inverse covariance.
  const Vector mean = prognostic.colwise().mean();
  const Matrix centered = prognostic.rowwise() - mean.transpose();
  const Matrix cov = (centered.transpose() * centered) / std::max<double>(1.0, static_cast<double>(n - 1));
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  const double top = std::max(eig.eigenvalues().maxCoeff(), 0.0);
  Matrix whiten = Matrix::Zero(prognostic.cols(), prognostic.cols());
  for (Index k = 0; k < prognostic.cols(); ++k) {
    const double ev = eig.eigenvalues()[k];
    if (ev > 1e-12 * std::max(top, 1e-300)) whiten.col(k) = eig.eigenvectors().col(k) / std::sqrt(ev);
  }
  const Matrix z = prognostic * whiten;

  MatchedOutcomes out;
  out.values.resize(n, M);
  out.neighbour.assign(n, std::vector<Index>(M, -1));
  for (Index i = 0; i < n; ++i) {
    for (int a = 0; a < M; ++a) {
      if (a == d[i]) {
        out.values(i, a) = y[i];
        out.neighbour[i][a] = i;
        continue;
      }
      double best = std::numeric_limits<double>::infinity();
      Index best_j = -1;
      for (Index j : arm_rows[a]) {
        const double dist = (z.row(i) - z.row(j)).squaredNorm();
        if (dist < best) {
          best = dist;
          best_j = j;
        }
      }
      out.values(i, a) = y[best_j];
      out.neighbour[i][a] = best_j;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Objective and penalty

std::optional<double> leaf_objective(std::span<const Index> units, const Labels& d, const Vector& y,
                                     const Matrix& matched, int num_treatments) {
  const int M = num_treatments;
  std::vector<double> count(M, 0.0);
  std::vector<double> mean(M, 0.0);
  for (Index i : units) {
    count[d[i]] += 1.0;
    mean[d[i]] += y[i];
  }
  for (int a = 0; a < M; ++a) {
    if (count[a] == 0.0) return std::nullopt;
    mean[a] /= count[a];
  }
  std::vector<double> mse(M, 0.0);
  for (Index i : units) {
    const double e = mean[d[i]] - y[i];
    mse[d[i]] += e * e;
  }
  for (int a = 0; a < M; ++a) mse[a] /= count[a];

  double total = 0.0;
  for (int m = 1; m < M; ++m) {
    for (int l = 0; l < m; ++l) {
      double mce = 0.0;
      for (Index i : units)
        if (d[i] == m || d[i] == l) mce += (mean[m] - matched(i, m)) * (mean[l] - matched(i, l));
      mce /= count[m] + count[l];
      total += mse[m] + mse[l] - 2.0 * mce;
    }
  }
  return total;
}

double split_penalty(std::span<const Index> counts_left, std::span<const Index> counts_right, double lambda) {
  const std::size_t M = counts_left.size();
  if (counts_right.size() != M || M == 0) throw InvalidArgument("penalty needs per-arm counts of both daughters");
  const double nl = std::accumulate(counts_left.begin(), counts_left.end(), 0.0);
  const double nr = std::accumulate(counts_right.begin(), counts_right.end(), 0.0);
  if (nl <= 0.0 || nr <= 0.0) throw InvalidArgument("penalty needs non-empty daughters");
  double sq = 0.0;
  for (std::size_t a = 0; a < M; ++a) {
    const double diff = counts_left[a] / nl - counts_right[a] / nr;
    sq += diff * diff;
  }
  return lambda * (1.0 - sq / static_cast<double>(M));
}

// ---------------------------------------------------------------------------
// Tree growing

namespace {

struct PairTable {
  std::vector<std::pair<int, int>> pairs;  // (m, l), m > l
  std::vector<std::vector<int>> of_arm;    // pair ids involving each arm

  explicit PairTable(int M) : of_arm(M) {
    for (int m = 1; m < M; ++m)
      for (int l = 0; l < m; ++l) {
        of_arm[m].push_back(static_cast<int>(pairs.size()));
        of_arm[l].push_back(static_cast<int>(pairs.size()));
        pairs.emplace_back(m, l);
      }
  }
};

// Sufficient statistics of a set of training units for the objective.
struct NodeStats {
  std::vector<double> count, sum_y, sum_yy;  // per arm
  std::vector<double> sum_a, sum_b, sum_ab;  // per pair: a = matched(., m), b = matched(., l)

  NodeStats(int M, int P) : count(M), sum_y(M), sum_yy(M), sum_a(P), sum_b(P), sum_ab(P) {}

  void clear() {
    for (auto* v : {&count, &sum_y, &sum_yy, &sum_a, &sum_b, &sum_ab}) std::fill(v->begin(), v->end(), 0.0);
  }
  void add(Index i, const Labels& d, const Vector& y, const Matrix& matched, const PairTable& pt) {
    const int a = d[i];
    const double v = y[i];
    count[a] += 1.0;
    sum_y[a] += v;
    sum_yy[a] += v * v;
    for (int p : pt.of_arm[a]) {
      const double ma = matched(i, pt.pairs[p].first);
      const double mb = matched(i, pt.pairs[p].second);
      sum_a[p] += ma;
      sum_b[p] += mb;
      sum_ab[p] += ma * mb;
    }
  }
  void set_difference(const NodeStats& total, const NodeStats& part) {
    for (std::size_t a = 0; a < count.size(); ++a) {
      count[a] = total.count[a] - part.count[a];
      sum_y[a] = total.sum_y[a] - part.sum_y[a];
      sum_yy[a] = total.sum_yy[a] - part.sum_yy[a];
    }
    for (std::size_t p = 0; p < sum_a.size(); ++p) {
      sum_a[p] = total.sum_a[p] - part.sum_a[p];
      sum_b[p] = total.sum_b[p] - part.sum_b[p];
      sum_ab[p] = total.sum_ab[p] - part.sum_ab[p];
    }
  }
  double size() const { return std::accumulate(count.begin(), count.end(), 0.0); }

  // Same quantity as leaf_objective, from sums; all arms must be present.
  double objective(const PairTable& pt) const {
    double total = 0.0;
    for (std::size_t p = 0; p < pt.pairs.size(); ++p) {
      const auto [m, l] = pt.pairs[p];
      const double nm = count[m];
      const double nl = count[l];
      const double ym = sum_y[m] / nm;
      const double yl = sum_y[l] / nl;
      const double mse_m = sum_yy[m] / nm - ym * ym;
      const double mse_l = sum_yy[l] / nl - yl * yl;
      const double ns = nm + nl;
      const double mce = (ns * ym * yl - ym * sum_b[p] - yl * sum_a[p] + sum_ab[p]) / ns;
      total += mse_m + mse_l - 2.0 * mce;
    }
    return total;
  }
};

double penalty_from_counts(const std::vector<double>& left, const std::vector<double>& right, double nl, double nr,
                           double lambda) {
  double sq = 0.0;
  for (std::size_t a = 0; a < left.size(); ++a) {
    const double diff = left[a] / nl - right[a] / nr;
    sq += diff * diff;
  }
  return lambda * (1.0 - sq / static_cast<double>(left.size()));
}

class McfTreeBuilder {
 public:
  McfTreeBuilder(const Matrix& x, const Labels& d, const Vector& y, const Matrix& matched, int M, int nu,
                 double lambda)
      : x_(x),
        d_(d),
        y_(y),
        matched_(matched),
        M_(M),
        nu_(nu),
        lambda_(lambda),
        pt_(M),
        total_(M, static_cast<int>(pt_.pairs.size())),
        left_(M, static_cast<int>(pt_.pairs.size())),
        right_(M, static_cast<int>(pt_.pairs.size())) {}

  McfTree build(std::vector<Index> rows, SeededRng& rng) {
    McfTree out;
    rows_ = std::move(rows);
    struct Pending {
      int node;
      Index begin, end;
    };
    std::vector<Pending> stack{{0, 0, static_cast<Index>(rows_.size())}};
    out.splits.nodes.emplace_back();
    while (!stack.empty()) {
      const Pending job = stack.back();
      stack.pop_back();
      int var = -1;
      double threshold = 0.0;
      find_split(job.begin, job.end, rng, var, threshold);
      if (var < 0) {
        tree::Node& leaf = out.splits.nodes[job.node];
        leaf.leaf = out.splits.num_leaves++;
        std::vector<int> counts(M_, 0);
        for (Index i = job.begin; i < job.end; ++i) ++counts[d_[rows_[i]]];
        out.train_counts.insert(out.train_counts.end(), counts.begin(), counts.end());
        continue;
      }
      auto first = rows_.begin() + job.begin;
      auto mid = std::stable_partition(first, rows_.begin() + job.end,
                                       [&](Index r) { return x_(r, var) <= threshold; });
      const Index split = job.begin + (mid - first);
      const int left = static_cast<int>(out.splits.nodes.size());
      out.splits.nodes.emplace_back();
      out.splits.nodes.emplace_back();
      tree::Node& node = out.splits.nodes[job.node];
      node.var = var;
      node.threshold = threshold;
      node.left = left;
      node.right = left + 1;
      stack.push_back({left + 1, split, job.end});
      stack.push_back({left, job.begin, split});
    }
    return out;
  }

 private:
  void find_split(Index begin, Index end, SeededRng& rng, int& best_var, double& best_threshold) {
    best_var = -1;
    const Index n = end - begin;
    total_.clear();
    for (Index i = begin; i < end; ++i) total_.add(rows_[i], d_, y_, matched_, pt_);
    for (int a = 0; a < M_; ++a)
      if (total_.count[a] < 2.0 * nu_) return;  // no split can leave nu per arm on both sides

    // The parent carries the maximal penalty, so the penalty alone never
    // blocks splitting.
    const double parent = total_.objective(pt_) + lambda_;
    double best = parent;
    const double nd = static_cast<double>(n);

    const std::vector<int> vars = tree::draw_split_variables(static_cast<int>(x_.cols()), rng);
    std::span<const Index> node_rows(rows_.data() + begin, static_cast<std::size_t>(n));
    for (int var : vars) {
      tree::fill_sorted(x_, var, node_rows, buf_, values_);
      tree::split_candidates(values_, candidates_);
      left_.clear();
      Index consumed = 0;
      for (const tree::Candidate& cand : candidates_) {
        for (; consumed < cand.position; ++consumed) left_.add(buf_[consumed].second, d_, y_, matched_, pt_);
        right_.set_difference(total_, left_);
        bool admissible = true;
        for (int a = 0; a < M_ && admissible; ++a)
          admissible = left_.count[a] >= nu_ && right_.count[a] >= nu_;
        if (!admissible) continue;
        const double nl = static_cast<double>(cand.position);
        const double nr = nd - nl;
        const double value = (nl * left_.objective(pt_) + nr * right_.objective(pt_)) / nd +
                             penalty_from_counts(left_.count, right_.count, nl, nr, lambda_);
        if (value < best) {
          best = value;
          best_var = var;
          best_threshold = cand.threshold;
        }
      }
    }
  }

  const Matrix& x_;
  const Labels& d_;
  const Vector& y_;
  const Matrix& matched_;
  int M_;
  int nu_;
  double lambda_;
  PairTable pt_;
  NodeStats total_, left_, right_;
  std::vector<Index> rows_;
  tree::SortBuffer buf_;
  std::vector<double> values_;
  std::vector<tree::Candidate> candidates_;
};

void populate_leaves(McfTree& tree, const Matrix& x_est, const Labels& d_est, int M) {
  const int L = tree.splits.num_leaves;
  const auto n = static_cast<Index>(d_est.size());
  std::vector<int> slot(n);
  tree.offsets.assign(static_cast<std::size_t>(L) * M + 1, 0);
  for (Index i = 0; i < n; ++i) {
    slot[i] = tree.splits.leaf_of(x_est, i) * M + d_est[i];
    ++tree.offsets[slot[i] + 1];
  }
  for (std::size_t k = 1; k < tree.offsets.size(); ++k) tree.offsets[k] += tree.offsets[k - 1];
  tree.members.assign(n, 0);
  std::vector<int> cursor(tree.offsets.begin(), tree.offsets.end() - 1);
  for (Index i = 0; i < n; ++i) tree.members[cursor[slot[i]]++] = static_cast<int>(i);
}

double variance(const Vector& v) {
  if (v.size() < 2) return 0.0;
  const double m = v.mean();
  return (v.array() - m).square().sum() / static_cast<double>(v.size() - 1);
}

}  // namespace

McfTree fit_tree(const Matrix& x_train, const Labels& d_train, const Vector& y_train, const Matrix& matched,
                 std::span<const Index> rows, const Matrix& x_est, const Labels& d_est, int num_treatments,
                 int min_leaf_per_arm, double lambda, SeededRng& rng) {
  McfTreeBuilder builder(x_train, d_train, y_train, matched, num_treatments, min_leaf_per_arm, lambda);
  McfTree tree = builder.build(std::vector<Index>(rows.begin(), rows.end()), rng);
  populate_leaves(tree, x_est, d_est, num_treatments);
  return tree;
}

// ---------------------------------------------------------------------------
// Forest

Centering local_center(const Sample& sample, const HonestSplit& split, int K, const regforest::RegForestParams& params,
                       const SeededRng& rng, Exec exec) {
  const Sample train = sample.subset(split.train);
  const Sample est = sample.subset(split.est);
  Matrix target = train.y;
  const regforest::CrossFit cf = regforest::cross_fit(train.x, target, K, params, rng, exec);
  Centering c;
  c.train_prediction = cf.out_of_fold.col(0);
  c.est_prediction = cf.predict_average(est.x, exec).col(0);
  c.train = train.y - c.train_prediction;
  c.est = est.y - c.est_prediction;
  return c;
}

McfForest McfForest::from_parts(int num_treatments, std::vector<McfTree> trees, std::vector<Index> est_rows,
                                Labels est_arms, Vector est_outcomes, McfParams params, double lambda) {
  McfForest f;
  f.num_treatments_ = num_treatments;
  f.trees_ = std::move(trees);
  f.est_rows_ = std::move(est_rows);
  f.est_arms_ = std::move(est_arms);
  f.est_outcomes_ = std::move(est_outcomes);
  f.params_ = std::move(params);
  f.params_.num_trees = static_cast<int>(f.trees_.size());
  f.lambda_ = lambda;
  return f;
}

McfForest fit_forest_on_split(const Sample& sample, const HonestSplit& split, const McfParams& params,
                              const SeededRng& rng, Exec exec) {
  params.validate();
  sample.validate();
  const int M = sample.num_treatments;
  const Sample train = sample.subset(split.train);
  const Sample est = sample.subset(split.est);

  Vector y_train = train.y;
  Vector y_est = est.y;
  if (params.local_centering) {
    const Centering c = local_center(sample, split, params.centering_folds, params.nuisance, rng.split(1), exec);
    y_train = c.train;
    y_est = c.est;
  }

  McfForest forest;
  forest.num_treatments_ = M;
  forest.params_ = params;
  forest.lambda_ = params.penalty_lambda.value_or(variance(y_train));
  forest.train_rows_ = split.train;
  forest.est_rows_ = split.est;
  forest.est_arms_ = est.d;
  forest.est_outcomes_ = y_est;

  const Matrix prognostic = regforest::prognostic_score(train.x, train.d, y_train, M, params.nuisance, rng.split(2),
                                                        params.prognostic_folds, exec);
  const Matrix matched = match_outcomes(train.d, y_train, prognostic, M).values;

  const Index n_train = train.size();
  const auto sub_n = std::max<Index>(
      1, static_cast<Index>(std::floor(params.subsample_fraction * static_cast<double>(n_train))));
  const SeededRng tree_streams = rng.split(3);
  const int B = params.num_trees;
  forest.trees_.resize(B);
#pragma omp parallel for schedule(dynamic) num_threads(threads_for(exec))
  for (int b = 0; b < B; ++b) {
    SeededRng tree_rng = tree_streams.split(static_cast<std::uint64_t>(b));
    std::vector<Index> rows;
    rows.reserve(sub_n);
    for (std::size_t r : tree_rng.sample_without_replacement(static_cast<std::size_t>(n_train), sub_n))
      rows.push_back(static_cast<Index>(r));
    std::sort(rows.begin(), rows.end());
    forest.trees_[b] = fit_tree(train.x, train.d, y_train, matched, rows, est.x, est.d, M, params.min_leaf_per_arm,
                                forest.lambda_, tree_rng);
  }
  return forest;
}

McfForest fit_forest(const Sample& sample, const McfParams& params, const SeededRng& rng, Exec exec) {
  SeededRng split_rng = rng.split(0);
  const HonestSplit split =
      make_honest_split(sample.size(), sample.num_treatments, params.min_leaf_per_arm, split_rng);
  return fit_forest_on_split(sample, split, params, rng, exec);
}

// ---------------------------------------------------------------------------
// Weights

double WeightVector::positive_sum() const {
  double s = 0.0;
  for (double w : weights)
    if (w > 0.0) s += w;
  return s;
}

double WeightVector::negative_sum() const {
  double s = 0.0;
  for (double w : weights)
    if (w < 0.0) s += w;
  return s;
}

Vector WeightVector::dense(Index est_size) const {
  Vector v = Vector::Zero(est_size);
  for (std::size_t k = 0; k < units.size(); ++k) v[units[k]] = weights[k];
  return v;
}

double WeightVector::dot(const Vector& y) const {
  double s = 0.0;
  for (std::size_t k = 0; k < units.size(); ++k) s += weights[k] * y[units[k]];
  return s;
}

namespace {
void check_pair(const McfForest& forest, int m, int l) {
  const int M = forest.num_treatments();
  if (m < 0 || l < 0 || m >= M || l >= M || m == l) throw InvalidArgument("invalid treatment pair");
}
}  // namespace

WeightVector forest_weights(const McfForest& forest, const Matrix& x, Index row, int m, int l) {
  check_pair(forest, m, l);
  const int M = forest.num_treatments();
  Vector acc = Vector::Zero(forest.est_size());
  std::vector<char> touched(forest.est_size(), 0);
  int contributing = 0;
  for (const McfTree& tree : forest.trees()) {
    const int leaf = tree.splits.leaf_of(x, row);
    const int nm = tree.arm_count(leaf, m, M);
    const int nl = tree.arm_count(leaf, l, M);
    if (nm == 0 || nl == 0) continue;
    ++contributing;
    for (int u : tree.arm_members(leaf, m, M)) {
      acc[u] += 1.0 / nm;
      touched[u] = 1;
    }
    for (int u : tree.arm_members(leaf, l, M)) {
      acc[u] -= 1.0 / nl;
      touched[u] = 1;
    }
  }
  if (contributing == 0) throw EstimationFailure("no tree has estimation units of both arms for this query");
  WeightVector w;
  w.m = m;
  w.l = l;
  w.contributing_trees = contributing;
  for (Index u = 0; u < forest.est_size(); ++u)
    if (touched[u]) {
      w.units.push_back(u);
      w.weights.push_back(acc[u] / contributing);
    }
  return w;
}

QueryRouting::QueryRouting(const McfForest& forest, const Matrix& x, int m, int l, Exec exec)
    : rows_(x.rows()), trees_(forest.num_trees()), m_(m), l_(l) {
  check_pair(forest, m, l);
  const int M = forest.num_treatments();
  contributes_.resize(trees_);
  for (int b = 0; b < trees_; ++b) {
    const McfTree& tree = forest.trees()[b];
    contributes_[b].resize(tree.num_leaves());
    for (int k = 0; k < tree.num_leaves(); ++k)
      contributes_[b][k] = tree.arm_count(k, m, M) > 0 && tree.arm_count(k, l, M) > 0;
  }
  leaves_.resize(static_cast<std::size_t>(rows_) * trees_);
  counts_.assign(rows_, 0);
#pragma omp parallel for schedule(static) num_threads(threads_for(exec))
  for (Index q = 0; q < rows_; ++q) {
    int c = 0;
    for (int b = 0; b < trees_; ++b) {
      const int leaf = forest.trees()[b].splits.leaf_of(x, q);
      leaves_[static_cast<std::size_t>(q) * trees_ + b] = leaf;
      c += contributes_[b][leaf];
    }
    counts_[q] = c;
  }
}

Vector query_weights(const McfForest& forest, const QueryRouting& routing, Index q) {
  const int M = forest.num_treatments();
  const int m = routing.m();
  const int l = routing.l();
  Vector w = Vector::Zero(forest.est_size());
  if (routing.failed(q)) return w;
  for (int b = 0; b < forest.num_trees(); ++b) {
    const int leaf = routing.leaf(q, b);
    if (!routing.contributes(b, leaf)) continue;
    const McfTree& tree = forest.trees()[b];
    const double wm = 1.0 / tree.arm_count(leaf, m, M);
    const double wl = 1.0 / tree.arm_count(leaf, l, M);
    for (int u : tree.arm_members(leaf, m, M)) w[u] += wm;
    for (int u : tree.arm_members(leaf, l, M)) w[u] -= wl;
  }
  w /= static_cast<double>(routing.contributing(q));
  return w;
}

Matrix group_weights(const McfForest& forest, const QueryRouting& routing, const Labels& groups, int num_groups,
                     Exec exec) {
  if (static_cast<Index>(groups.size()) != routing.size()) throw InvalidArgument("one group label per query required");
  const int M = forest.num_treatments();
  const int m = routing.m();
  const int l = routing.l();
  std::vector<double> used(num_groups, 0.0);
  for (Index q = 0; q < routing.size(); ++q) {
    if (groups[q] < 0 || groups[q] >= num_groups) throw InvalidArgument("group label out of range");
    if (!routing.failed(q)) used[groups[q]] += 1.0;
  }
  Matrix w = Matrix::Zero(forest.est_size(), num_groups);
  // Columns are independent; each accumulates over trees in a fixed order so
  // the result does not depend on the thread count.
#pragma omp parallel for schedule(dynamic) num_threads(threads_for(exec))
  for (int j = 0; j < num_groups; ++j) {
    if (used[j] == 0.0) continue;
    std::vector<double> coef;
    for (int b = 0; b < forest.num_trees(); ++b) {
      const McfTree& tree = forest.trees()[b];
      coef.assign(tree.num_leaves(), 0.0);
      for (Index q = 0; q < routing.size(); ++q) {
        if (groups[q] != j || routing.failed(q)) continue;
        const int leaf = routing.leaf(q, b);
        if (routing.contributes(b, leaf)) coef[leaf] += 1.0 / routing.contributing(q);
      }
      for (int k = 0; k < tree.num_leaves(); ++k) {
        if (coef[k] == 0.0) continue;
        const double wm = coef[k] / tree.arm_count(k, m, M);
        const double wl = coef[k] / tree.arm_count(k, l, M);
        for (int u : tree.arm_members(k, m, M)) w(u, j) += wm;
        for (int u : tree.arm_members(k, l, M)) w(u, j) -= wl;
      }
    }
    w.col(j) /= used[j];
  }
  return w;
}

IatePrediction predict_iate(const McfForest& forest, const Matrix& x, int m, int l, Exec exec) {
  check_pair(forest, m, l);
  const int M = forest.num_treatments();
  const int B = forest.num_trees();
  const Vector& y = forest.est_outcomes();
  // Per-leaf differences of arm means, NaN where an arm is missing.
  std::vector<std::vector<double>> diff(B);
  for (int b = 0; b < B; ++b) {
    const McfTree& tree = forest.trees()[b];
    diff[b].resize(tree.num_leaves());
    for (int k = 0; k < tree.num_leaves(); ++k) {
      const auto um = tree.arm_members(k, m, M);
      const auto ul = tree.arm_members(k, l, M);
      if (um.empty() || ul.empty()) {
        diff[b][k] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      double sm = 0.0;
      double sl = 0.0;
      for (int u : um) sm += y[u];
      for (int u : ul) sl += y[u];
      diff[b][k] = sm / um.size() - sl / ul.size();
    }
  }
  IatePrediction out;
  out.estimate.resize(x.rows());
  out.failed.assign(x.rows(), 0);
#pragma omp parallel for schedule(static) num_threads(threads_for(exec))
  for (Index q = 0; q < x.rows(); ++q) {
    double s = 0.0;
    int c = 0;
    for (int b = 0; b < B; ++b) {
      const double v = diff[b][forest.trees()[b].splits.leaf_of(x, q)];
      if (std::isnan(v)) continue;
      s += v;
      ++c;
    }
    if (c == 0) {
      out.estimate[q] = std::numeric_limits<double>::quiet_NaN();
      out.failed[q] = 1;
    } else {
      out.estimate[q] = s / c;
    }
  }
  return out;
}

IatePrediction efficient_iate(const Sample& sample, const McfParams& params, const SeededRng& rng, const Matrix& x_new,
                              int m, int l, Exec exec) {
  SeededRng split_rng = rng.split(0);
  const HonestSplit split =
      make_honest_split(sample.size(), sample.num_treatments, params.min_leaf_per_arm, split_rng);
  const HonestSplit swapped{split.est, split.train};
  const McfForest first = fit_forest_on_split(sample, split, params, rng.split(1), exec);
  const McfForest second = fit_forest_on_split(sample, swapped, params, rng.split(2), exec);
  IatePrediction a = predict_iate(first, x_new, m, l, exec);
  const IatePrediction b = predict_iate(second, x_new, m, l, exec);
  for (Index q = 0; q < x_new.rows(); ++q) {
    if (a.failed[q] || b.failed[q]) {
      a.failed[q] = 1;
      a.estimate[q] = std::numeric_limits<double>::quiet_NaN();
    } else {
      a.estimate[q] = 0.5 * (a.estimate[q] + b.estimate[q]);
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

void expect(std::istream& in, const std::string& word) {
  std::string got;
  if (!(in >> got) || got != word) throw InvalidArgument("forest file: expected '" + word + "', got '" + got + "'");
}

double read_double(std::istream& in) {
  std::string token;
  if (!(in >> token)) throw InvalidArgument("forest file: truncated");
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str()) throw InvalidArgument("forest file: bad number '" + token + "'");
  return v;
}

template <class T>
T read_int(std::istream& in) {
  long long v = 0;
  if (!(in >> v)) throw InvalidArgument("forest file: truncated");
  return static_cast<T>(v);
}

template <class T>
void write_list(std::ostream& out, const std::vector<T>& v) {
  out << v.size();
  for (const T& x : v) out << ' ' << x;
  out << '\n';
}

template <class T>
std::vector<T> read_list(std::istream& in) {
  const auto n = read_int<std::size_t>(in);
  std::vector<T> v(n);
  for (auto& x : v) x = read_int<T>(in);
  return v;
}

}  // namespace

bool McfForest::operator==(const McfForest& o) const {
  return num_treatments_ == o.num_treatments_ && params_.num_trees == o.params_.num_trees &&
         params_.min_leaf_per_arm == o.params_.min_leaf_per_arm &&
         params_.subsample_fraction == o.params_.subsample_fraction &&
         params_.local_centering == o.params_.local_centering && lambda_ == o.lambda_ &&
         train_rows_ == o.train_rows_ && est_rows_ == o.est_rows_ && est_arms_ == o.est_arms_ &&
         est_outcomes_ == o.est_outcomes_ && trees_ == o.trees_;
}

void McfForest::write(std::ostream& out) const {
  out << "mcf-forest 1\n";
  out << "treatments " << num_treatments_ << '\n';
  out << std::hexfloat;
  out << "params " << params_.num_trees << ' ' << params_.min_leaf_per_arm << ' ' << params_.subsample_fraction << ' '
      << lambda_ << ' ' << (params_.local_centering ? 1 : 0) << '\n';
  out << "train ";
  write_list(out, train_rows_);
  out << "est " << est_rows_.size() << '\n';
  for (std::size_t i = 0; i < est_rows_.size(); ++i)
    out << est_rows_[i] << ' ' << est_arms_[i] << ' ' << est_outcomes_[static_cast<Index>(i)] << '\n';
  out << "trees " << trees_.size() << '\n';
  for (const McfTree& t : trees_) {
    out << "nodes " << t.splits.nodes.size() << '\n';
    for (const tree::Node& nd : t.splits.nodes)
      out << nd.var << ' ' << nd.threshold << ' ' << nd.left << ' ' << nd.right << ' ' << nd.leaf << '\n';
    out << "leaves " << t.splits.num_leaves << '\n';
    out << "offsets ";
    write_list(out, t.offsets);
    out << "members ";
    write_list(out, t.members);
    out << "train_counts ";
    write_list(out, t.train_counts);
  }
  out << std::defaultfloat;
}

McfForest McfForest::read(std::istream& in) {
  expect(in, "mcf-forest");
  if (read_int<int>(in) != 1) throw InvalidArgument("forest file: unsupported version");
  McfForest f;
  expect(in, "treatments");
  f.num_treatments_ = read_int<int>(in);
  expect(in, "params");
  f.params_.num_trees = read_int<int>(in);
  f.params_.min_leaf_per_arm = read_int<int>(in);
  f.params_.subsample_fraction = read_double(in);
  f.lambda_ = read_double(in);
  f.params_.local_centering = read_int<int>(in) != 0;
  expect(in, "train");
  f.train_rows_ = read_list<Index>(in);
  expect(in, "est");
  const auto n2 = read_int<std::size_t>(in);
  f.est_rows_.resize(n2);
  f.est_arms_.resize(n2);
  f.est_outcomes_.resize(static_cast<Index>(n2));
  for (std::size_t i = 0; i < n2; ++i) {
    f.est_rows_[i] = read_int<Index>(in);
    f.est_arms_[i] = read_int<int>(in);
    f.est_outcomes_[static_cast<Index>(i)] = read_double(in);
  }
  expect(in, "trees");
  const auto B = read_int<std::size_t>(in);
  f.trees_.resize(B);
  for (McfTree& t : f.trees_) {
    expect(in, "nodes");
    t.splits.nodes.resize(read_int<std::size_t>(in));
    for (tree::Node& nd : t.splits.nodes) {
      nd.var = read_int<int>(in);
      nd.threshold = read_double(in);
      nd.left = read_int<int>(in);
      nd.right = read_int<int>(in);
      nd.leaf = read_int<int>(in);
    }
    expect(in, "leaves");
    t.splits.num_leaves = read_int<int>(in);
    expect(in, "offsets");
    t.offsets = read_list<int>(in);
    expect(in, "members");
    t.members = read_list<int>(in);
    expect(in, "train_counts");
    t.train_counts = read_list<int>(in);
  }
  return f;
}

}  // namespace mcf::forest
