#include "mcf/regforest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mcf::regforest {

void RegForestParams::validate() const {
  if (num_trees < 1) throw InvalidArgument("regression forest needs at least one tree");
  if (min_leaf < 1) throw InvalidArgument("minimum leaf size must be >= 1");
  if (max_features < 0) throw InvalidArgument("max_features must be >= 0");
  if (!(subsample_fraction > 0.0 && subsample_fraction <= 1.0))
    throw InvalidArgument("subsample fraction must lie in (0, 1]");
}

namespace {

struct BuiltTree {
  tree::SplitTree tree;
  std::vector<double> leaf_values;
  std::vector<int> leaf_sizes;
};

class TreeBuilder {
 public:
  TreeBuilder(const Matrix& x, const Matrix& target, int min_leaf, int max_features)
      : x_(x), y_(target), min_leaf_(min_leaf), max_features_(max_features) {
    q_ = static_cast<int>(target.cols());
    left_sum_.resize(q_);
    total_sum_.resize(q_);
  }

  BuiltTree build(std::vector<Index> rows, SeededRng& rng) {
    BuiltTree out;
    rows_ = std::move(rows);
    struct Pending {
      int node;
      Index begin, end;
    };
    std::vector<Pending> stack;
    out.tree.nodes.emplace_back();
    stack.push_back({0, 0, static_cast<Index>(rows_.size())});
    while (!stack.empty()) {
      Pending job = stack.back();
      stack.pop_back();
      int var = -1;
      double threshold = 0.0;
      Index split = find_split(job.begin, job.end, rng, var, threshold);
      if (var < 0) {
        make_leaf(out, job.node, job.begin, job.end);
        continue;
      }
      auto first = rows_.begin() + job.begin;
      auto last = rows_.begin() + job.end;
      auto mid = std::stable_partition(first, last, [&](Index r) { return x_(r, var) <= threshold; });
      split = job.begin + (mid - first);
      const int left = static_cast<int>(out.tree.nodes.size());
      out.tree.nodes.emplace_back();
      out.tree.nodes.emplace_back();
      tree::Node& node = out.tree.nodes[job.node];
      node.var = var;
      node.threshold = threshold;
      node.left = left;
      node.right = left + 1;
      // Right first so the left subtree is expanded first (depth-first, left-to-right).
      stack.push_back({left + 1, split, job.end});
      stack.push_back({left, job.begin, split});
    }
    return out;
  }

 private:
  void make_leaf(BuiltTree& out, int node, Index begin, Index end) {
    tree::Node& leaf = out.tree.nodes[node];
    leaf.var = -1;
    leaf.leaf = out.tree.num_leaves++;
    const double count = static_cast<double>(end - begin);
    for (int c = 0; c < q_; ++c) {
      double s = 0.0;
      for (Index i = begin; i < end; ++i) s += y_(rows_[i], c);
      out.leaf_values.push_back(s / count);
    }
    out.leaf_sizes.push_back(static_cast<int>(end - begin));
  }

  // Returns the split position (unused by the caller) and sets var/threshold,
  // or leaves var = -1 when no admissible split reduces the squared error.
  Index find_split(Index begin, Index end, SeededRng& rng, int& best_var, double& best_threshold) {
    const Index n = end - begin;
    best_var = -1;
    if (n < 2 * static_cast<Index>(min_leaf_)) return -1;

    double sse = 0.0;
    for (int c = 0; c < q_; ++c) {
      double s = 0.0;
      double ss = 0.0;
      for (Index i = begin; i < end; ++i) {
        const double v = y_(rows_[i], c);
        s += v;
        ss += v * v;
      }
      total_sum_[c] = s;
      sse += ss - s * s / n;
    }
    if (sse <= 1e-12 * std::max(1.0, std::abs(sse))) return -1;

    double parent_term = 0.0;
    for (int c = 0; c < q_; ++c) parent_term += total_sum_[c] * total_sum_[c] / n;
    double best_gain = parent_term + 1e-12 * std::max(1.0, sse);
    Index best_pos = -1;

    const std::vector<int> vars = tree::draw_split_variables(static_cast<int>(x_.cols()), rng, max_features_);
    std::span<const Index> node_rows(rows_.data() + begin, static_cast<std::size_t>(n));
    for (int var : vars) {
      tree::fill_sorted(x_, var, node_rows, buf_, values_);
      tree::split_candidates(values_, candidates_);
      std::fill(left_sum_.begin(), left_sum_.end(), 0.0);
      Index consumed = 0;
      for (const tree::Candidate& cand : candidates_) {
        for (; consumed < cand.position; ++consumed) {
          const Index r = buf_[consumed].second;
          for (int c = 0; c < q_; ++c) left_sum_[c] += y_(r, c);
        }
        const Index nl = cand.position;
        const Index nr = n - nl;
        if (nl < min_leaf_ || nr < min_leaf_) continue;
        double gain = 0.0;
        for (int c = 0; c < q_; ++c) {
          const double sl = left_sum_[c];
          const double sr = total_sum_[c] - sl;
          gain += sl * sl / nl + sr * sr / nr;
        }
        if (gain > best_gain) {
          best_gain = gain;
          best_var = var;
          best_threshold = cand.threshold;
          best_pos = nl;
        }
      }
    }
    return best_pos;
  }

  const Matrix& x_;
  const Matrix& y_;
  int min_leaf_;
  int max_features_;
  int q_ = 1;
  std::vector<Index> rows_;
  tree::SortBuffer buf_;
  std::vector<double> values_;
  std::vector<tree::Candidate> candidates_;
  std::vector<double> left_sum_;
  std::vector<double> total_sum_;
};

}  // namespace

int RegForestModel::min_leaf_size() const {
  int smallest = std::numeric_limits<int>::max();
  for (const auto& sizes : leaf_sizes_)
    for (int s : sizes) smallest = std::min(smallest, s);
  return smallest;
}

RegForestModel fit(const Matrix& x, const Matrix& target, const RegForestParams& params, const SeededRng& rng,
                   Exec exec) {
  params.validate();
  const Index n = x.rows();
  if (target.rows() != n) throw InvalidArgument("target rows must match covariate rows");
  if (n < 1) throw InvalidArgument("regression forest needs at least one row");

  RegForestModel model;
  model.outputs_ = static_cast<int>(target.cols());
  const int B = params.num_trees;
  model.trees_.resize(B);
  model.leaf_values_.resize(B);
  model.leaf_sizes_.resize(B);
  const auto sub_n =
      std::max<Index>(1, static_cast<Index>(std::floor(params.subsample_fraction * static_cast<double>(n))));

#pragma omp parallel for schedule(dynamic) num_threads(threads_for(exec))
  for (int b = 0; b < B; ++b) {
    SeededRng tree_rng = rng.split(static_cast<std::uint64_t>(b));
    std::vector<Index> rows;
    rows.reserve(sub_n);
    if (sub_n == n) {
      rows.resize(n);
      std::iota(rows.begin(), rows.end(), Index{0});
    } else {
      for (std::size_t r : tree_rng.sample_without_replacement(static_cast<std::size_t>(n), sub_n))
        rows.push_back(static_cast<Index>(r));
    }
    TreeBuilder builder(x, target, params.min_leaf, params.max_features);
    BuiltTree built = builder.build(std::move(rows), tree_rng);
    model.trees_[b] = std::move(built.tree);
    model.leaf_values_[b] = std::move(built.leaf_values);
    model.leaf_sizes_[b] = std::move(built.leaf_sizes);
  }
  return model;
}

RegForestModel fit(const Matrix& x, const Vector& target, const RegForestParams& params, const SeededRng& rng,
                   Exec exec) {
  Matrix t = target;
  return fit(x, t, params, rng, exec);
}

RegForestModel fit_classes(const Matrix& x, const Labels& labels, int num_classes, const RegForestParams& params,
                           const SeededRng& rng, Exec exec) {
  Matrix onehot = Matrix::Zero(x.rows(), num_classes);
  for (Index i = 0; i < x.rows(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw InvalidArgument("class label out of range");
    onehot(i, labels[i]) = 1.0;
  }
  RegForestParams p = params;
  p.task = TaskKind::ClassProbability;
  return fit(x, onehot, p, rng, exec);
}

Matrix RegForestModel::predict_all(const Matrix& x, Exec exec) const {
  const Index n = x.rows();
  const int q = outputs_;
  Matrix out = Matrix::Zero(n, q);
  const int B = num_trees();
#pragma omp parallel for schedule(static) num_threads(threads_for(exec))
  for (Index i = 0; i < n; ++i) {
    for (int b = 0; b < B; ++b) {
      const int leaf = trees_[b].leaf_of(x, i);
      const double* v = leaf_values_[b].data() + static_cast<std::size_t>(leaf) * q;
      for (int c = 0; c < q; ++c) out(i, c) += v[c];
    }
  }
  out /= static_cast<double>(B);
  return out;
}

Vector RegForestModel::predict(const Matrix& x, Exec exec) const { return predict_all(x, exec).col(0); }

std::vector<int> make_folds(Index n, int K, SeededRng& rng, const Labels* strata) {
  if (K < 2) throw InvalidArgument("cross-fitting needs K >= 2");
  if (n < K) throw InvalidArgument("cross-fitting needs at least K rows");
  std::vector<int> folds(n, 0);
  if (strata == nullptr) {
    const auto perm = rng.permutation(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) folds[perm[i]] = static_cast<int>(i % K);
    return folds;
  }
  if (static_cast<Index>(strata->size()) != n) throw InvalidArgument("strata must have n labels");
  const int levels = *std::max_element(strata->begin(), strata->end()) + 1;
  const auto perm = rng.permutation(static_cast<std::size_t>(n));
  // Deal each stratum round-robin, continuing the fold counter across strata
  // so fold sizes stay balanced.
  int next = 0;
  for (int s = 0; s < levels; ++s)
    for (std::size_t i = 0; i < perm.size(); ++i)
      if ((*strata)[perm[i]] == s) {
        folds[perm[i]] = next;
        next = (next + 1) % K;
      }
  return folds;
}

Matrix CrossFit::predict_average(const Matrix& x, Exec exec) const {
  Matrix out = Matrix::Zero(x.rows(), out_of_fold.cols());
  for (const auto& m : models) out += m.predict_all(x, exec);
  out /= static_cast<double>(models.size());
  return out;
}

CrossFit cross_fit(const Matrix& x, const Matrix& target, int K, const RegForestParams& params, const SeededRng& rng,
                   Exec exec, const std::vector<int>* folds) {
  const Index n = x.rows();
  if (K < 2) throw InvalidArgument("cross-fitting needs K >= 2");
  if (n < K) throw InvalidArgument("cross-fitting needs at least K rows");
  CrossFit cf;
  if (folds != nullptr) {
    if (static_cast<Index>(folds->size()) != n) throw InvalidArgument("fold vector must have n entries");
    cf.folds = *folds;
  } else {
    SeededRng fold_rng = rng.split(0xF01D);
    cf.folds = make_folds(n, K, fold_rng);
  }
  cf.out_of_fold = Matrix::Zero(n, target.cols());
  for (int k = 0; k < K; ++k) {
    std::vector<Index> train;
    std::vector<Index> held;
    for (Index i = 0; i < n; ++i) (cf.folds[i] == k ? held : train).push_back(i);
    if (train.empty()) throw InvalidArgument("cross-fitting fold leaves no training rows");
    Matrix xt(static_cast<Index>(train.size()), x.cols());
    Matrix yt(static_cast<Index>(train.size()), target.cols());
    for (Index r = 0; r < static_cast<Index>(train.size()); ++r) {
      xt.row(r) = x.row(train[r]);
      yt.row(r) = target.row(train[r]);
    }
    RegForestModel model = fit(xt, yt, params, rng.split(static_cast<std::uint64_t>(k)), exec);
    if (!held.empty()) {
      Matrix xh(static_cast<Index>(held.size()), x.cols());
      for (Index r = 0; r < static_cast<Index>(held.size()); ++r) xh.row(r) = x.row(held[r]);
      const Matrix pred = model.predict_all(xh, exec);
      for (Index r = 0; r < static_cast<Index>(held.size()); ++r) cf.out_of_fold.row(held[r]) = pred.row(r);
    }
    cf.models.push_back(std::move(model));
  }
  return cf;
}

Vector cross_fit_predict(const Matrix& x, const Vector& target, int K, const RegForestParams& params,
                         const SeededRng& rng, Exec exec) {
  Matrix t = target;
  return cross_fit(x, t, K, params, rng, exec).out_of_fold.col(0);
}

Matrix prognostic_score(const Matrix& x, const Labels& d, const Vector& y, int num_treatments,
                        const RegForestParams& params, const SeededRng& rng, int K, Exec exec) {
  const Index n = x.rows();
  if (static_cast<Index>(d.size()) != n || y.size() != n) throw InvalidArgument("prognostic score inputs misaligned");
  Matrix score(n, num_treatments);
  for (int m = 0; m < num_treatments; ++m) {
    std::vector<Index> arm;
    std::vector<Index> other;
    for (Index i = 0; i < n; ++i) (d[i] == m ? arm : other).push_back(i);
    if (arm.empty()) throw InvalidArgument("prognostic score: treatment arm " + std::to_string(m) + " is empty");
    const auto na = static_cast<Index>(arm.size());
    const int folds = static_cast<int>(std::min<Index>(K, na));
    Matrix xa(na, x.cols());
    Matrix ya(na, 1);
    for (Index r = 0; r < na; ++r) {
      xa.row(r) = x.row(arm[r]);
      ya(r, 0) = y[arm[r]];
    }
    const SeededRng arm_rng = rng.split(static_cast<std::uint64_t>(m));
    if (folds < 2) {
      // A single-unit arm has nothing to cross-fit against; its score is its outcome.
      for (Index i = 0; i < n; ++i) score(i, m) = ya(0, 0);
      continue;
    }
    CrossFit cf = cross_fit(xa, ya, folds, params, arm_rng, exec);
    for (Index r = 0; r < na; ++r) score(arm[r], m) = cf.out_of_fold(r, 0);
    if (!other.empty()) {
      Matrix xo(static_cast<Index>(other.size()), x.cols());
      for (Index r = 0; r < static_cast<Index>(other.size()); ++r) xo.row(r) = x.row(other[r]);
      const Matrix pred = cf.predict_average(xo, exec);
      for (Index r = 0; r < static_cast<Index>(other.size()); ++r) score(other[r], m) = pred(r, 0);
    }
  }
  return score;
}

}  // namespace mcf::regforest
