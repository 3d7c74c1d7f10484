#include "mcf/inference.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

namespace mcf::inference {

std::string to_string(Estimand e) {
  switch (e) {
    case Estimand::ATE: return "ATE";
    case Estimand::GATE: return "GATE";
    case Estimand::IATE: return "IATE";
  }
  return "?";
}

Interval confidence_interval(double point, double se, double level) {
  double z = 0.0;
  if (level == 0.95)
    z = kZ95;
  else if (level == 0.80)
    z = kZ80;
  else
    throw InvalidArgument("confidence level must be 0.95 or 0.80");
  if (se < 0.0) throw InvalidArgument("standard error must be >= 0");
  return {point - z * se, point + z * se};
}

EffectEstimate make_estimate(Estimand estimand, int index, int m, int l, double point, double se,
                             std::string method) {
  EffectEstimate e;
  e.estimand = estimand;
  e.index = index;
  e.m = m;
  e.l = l;
  e.point = point;
  e.se = se;
  e.method = std::move(method);
  if (std::isnan(se)) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    e.ci95 = e.ci80 = {nan, nan};
  } else {
    e.ci95 = confidence_interval(point, se, 0.95);
    e.ci80 = confidence_interval(point, se, 0.80);
  }
  return e;
}

namespace {

forest::WeightVector mean_of(std::span<const forest::WeightVector> all, std::span<const Index> members) {
  if (members.empty()) throw InvalidArgument("cannot aggregate weights of an empty group");
  Index top = -1;
  for (Index q : members) {
    if (q < 0 || q >= static_cast<Index>(all.size())) throw InvalidArgument("group member out of range");
    for (Index u : all[q].units) top = std::max(top, u);
  }
  const forest::WeightVector& first = all[members.front()];
  Vector acc = Vector::Zero(top + 1);
  std::vector<char> touched(top + 1, 0);
  for (Index q : members) {
    const forest::WeightVector& w = all[q];
    if (w.m != first.m || w.l != first.l) throw InvalidArgument("cannot aggregate weights of different pairs");
    for (std::size_t k = 0; k < w.units.size(); ++k) {
      acc[w.units[k]] += w.weights[k];
      touched[w.units[k]] = 1;
    }
  }
  forest::WeightVector out;
  out.m = first.m;
  out.l = first.l;
  out.contributing_trees = 0;
  const double n = static_cast<double>(members.size());
  for (Index u = 0; u <= top; ++u)
    if (touched[u]) {
      out.units.push_back(u);
      out.weights.push_back(acc[u] / n);
    }
  return out;
}

}  // namespace

forest::WeightVector aggregate_weights(std::span<const forest::WeightVector> per_query) {
  std::vector<Index> all(per_query.size());
  for (std::size_t q = 0; q < all.size(); ++q) all[q] = static_cast<Index>(q);
  return mean_of(per_query, all);
}

forest::WeightVector aggregate_weights(std::span<const forest::WeightVector> per_query,
                                       std::span<const Index> members) {
  return mean_of(per_query, members);
}

int default_neighbours(Index n) {
  return std::max(2, static_cast<int>(std::lround(2.0 * std::sqrt(static_cast<double>(n)))));
}

namespace {

// Units ordered by (weight, index). For unit i the k nearest units by
// (|w_j - w_i|, j) are everything strictly inside the k-th distance plus the
// lowest-index units at exactly that distance; both sets are runs in this
// order, so a query costs O(log n + k).
class WeightOrder {
 public:
  explicit WeightOrder(const Vector& w) : w_(w), order_(w.size()), pos_(w.size()), sorted_(w.size()) {
    for (Index i = 0; i < w.size(); ++i) order_[i] = i;
    std::sort(order_.begin(), order_.end(), [&](Index a, Index b) { return w[a] < w[b] || (w[a] == w[b] && a < b); });
    for (Index s = 0; s < w.size(); ++s) {
      pos_[order_[s]] = s;
      sorted_[s] = w[order_[s]];
    }
  }

  void neighbours(Index i, int k, std::vector<Index>& out) const {
    const Index n = w_.size();
    const double wi = w_[i];
    const Index p = pos_[i];
    auto dist = [&](Index s) { return std::abs(sorted_[s] - wi); };

    Index lo = p - 1;
    Index hi = p + 1;
    double radius = 0.0;
    for (int taken = 1; taken < k; ++taken) {
      const double dl = lo >= 0 ? dist(lo) : std::numeric_limits<double>::infinity();
      const double dh = hi < n ? dist(hi) : std::numeric_limits<double>::infinity();
      if (dl <= dh) {
        radius = dl;
        --lo;
      } else {
        radius = dh;
        ++hi;
      }
    }

    // First position in [from, to) where pred turns false (pred is monotone).
    auto boundary = [](Index from, Index to, auto pred) {
      while (from < to) {
        const Index mid = from + (to - from) / 2;
        if (pred(mid))
          from = mid + 1;
        else
          to = mid;
      }
      return from;
    };
    // Left side positions [0, p]: dist decreases toward p.
    const Index inner_lo = boundary(0, p + 1, [&](Index s) { return !(dist(s) < radius); });
    const Index tie_lo = boundary(0, p + 1, [&](Index s) { return !(dist(s) <= radius); });
    // Right side positions [p, n): dist increases away from p.
    const Index inner_hi = radius > 0.0 ? boundary(p, n, [&](Index s) { return dist(s) < radius; }) : p;
    const Index tie_hi = boundary(p, n, [&](Index s) { return dist(s) <= radius; });

    out.clear();
    for (Index s = inner_lo; s < inner_hi; ++s) out.push_back(order_[s]);
    std::vector<Index> left(order_.begin() + tie_lo, order_.begin() + inner_lo);
    std::vector<Index> right(order_.begin() + std::max(inner_hi, inner_lo), order_.begin() + tie_hi);
    if (radius == 0.0) {
      // One run of units tied with i.
      left.assign(order_.begin() + tie_lo, order_.begin() + tie_hi);
      right.clear();
    }
    if (!left.empty() && sorted_[pos_[left.front()]] != sorted_[pos_[left.back()]]) std::sort(left.begin(), left.end());
    if (!right.empty() && sorted_[pos_[right.front()]] != sorted_[pos_[right.back()]])
      std::sort(right.begin(), right.end());
    std::size_t x = 0;
    std::size_t y = 0;
    while (static_cast<int>(out.size()) < k) {
      if (y >= right.size() || (x < left.size() && left[x] < right[y]))
        out.push_back(left[x++]);
      else
        out.push_back(right[y++]);
    }
    std::sort(out.begin(), out.end());
  }

 private:
  const Vector& w_;
  std::vector<Index> order_;
  std::vector<Index> pos_;
  std::vector<double> sorted_;
};

}  // namespace

std::vector<Index> weight_neighbours(const Vector& weights, Index i, int k) {
  if (i < 0 || i >= weights.size()) throw InvalidArgument("unit index out of range");
  if (k < 1) throw InvalidArgument("k must be >= 1");
  k = static_cast<int>(std::min<Index>(k, weights.size()));
  std::vector<Index> out;
  WeightOrder(weights).neighbours(i, k, out);
  return out;
}

ConditionalMoments knn_conditional_moments(const Vector& weights, const Vector& y, int k) {
  const Index n = weights.size();
  if (y.size() != n) throw InvalidArgument("weights and outcomes differ in length");
  if (k < 2) throw InvalidArgument("k-NN moments need k >= 2");
  if (n < 2) throw InvalidArgument("k-NN moments need at least two units");
  k = static_cast<int>(std::min<Index>(k, n));
  const WeightOrder order(weights);
  ConditionalMoments out;
  out.mean.resize(n);
  out.variance.resize(n);
  std::vector<Index> nb;
  for (Index i = 0; i < n; ++i) {
    order.neighbours(i, k, nb);
    double s = 0.0;
    for (Index j : nb) s += y[j];
    const double mean = s / k;
    double ss = 0.0;
    for (Index j : nb) ss += (y[j] - mean) * (y[j] - mean);
    out.mean[i] = mean;
    out.variance[i] = ss / (k - 1);
  }
  return out;
}

double weighted_mean_variance(const Vector& weights, const Vector& y, std::optional<int> k) {
  const Index n = weights.size();
  if (n < 2) throw InvalidArgument("weights variance needs at least two units");
  if (y.size() != n) throw InvalidArgument("weights and outcomes differ in length");
  const double total = weights.sum();
  if (total == 0.0) return 0.0;
  const double N = static_cast<double>(n);
  const Vector w = weights * (N / total);
  const ConditionalMoments mom = knn_conditional_moments(w, y, k.value_or(default_neighbours(n)));
  const double first = (w.array().square() * mom.variance.array()).sum() / (N * N);
  const Vector wm = w.cwiseProduct(mom.mean);
  const double second = (wm.array() - wm.mean()).square().sum() / (N * (N - 1.0));
  return std::max(0.0, first + second);
}

double weights_variance(const Vector& weights, const Labels& arms, const Vector& y, int m, int l,
                        std::optional<int> k) {
  const Index n = weights.size();
  if (static_cast<Index>(arms.size()) != n || y.size() != n) throw InvalidArgument("weights variance inputs misaligned");
  double var = 0.0;
  for (int arm : {m, l}) {
    std::vector<Index> rows;
    for (Index i = 0; i < n; ++i)
      if (arms[i] == arm) rows.push_back(i);
    const auto r = static_cast<Index>(rows.size());
    Vector w(r), v(r);
    for (Index j = 0; j < r; ++j) {
      w[j] = std::abs(weights[rows[j]]);
      v[j] = y[rows[j]];
    }
    var += weighted_mean_variance(w, v, k);
  }
  return var;
}

EffectEstimate estimate_from_weights(const forest::McfForest& forest, const Vector& weights, int m, int l,
                                     Estimand estimand, int index, std::string method, bool with_se) {
  if (weights.size() != forest.est_size()) throw InvalidArgument("weight vector does not match the estimation half");
  const double point = weights.dot(forest.est_outcomes());
  double se = std::numeric_limits<double>::quiet_NaN();
  if (with_se) se = std::sqrt(weights_variance(weights, forest.est_arms(), forest.est_outcomes(), m, l));
  return make_estimate(estimand, index, m, l, point, se, std::move(method));
}

void write_estimates_csv(std::ostream& out, std::span<const EffectEstimate> rows) {
  out << "estimand,pair,point,se,ci95_lo,ci95_hi,ci80_lo,ci80_hi\n";
  out << std::setprecision(17);
  for (const EffectEstimate& e : rows) {
    out << to_string(e.estimand);
    if (e.estimand != Estimand::ATE) out << e.index;
    out << ',' << e.m << '-' << e.l << ',' << e.point << ',' << e.se << ',' << e.ci95.lo << ',' << e.ci95.hi << ','
        << e.ci80.lo << ',' << e.ci80.hi << '\n';
  }
}

}  // namespace mcf::inference
