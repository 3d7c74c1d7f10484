#include "mcf/tree.hpp"

#include <algorithm>
#include <cmath>

namespace mcf::tree {

int SplitTree::depth() const {
  if (nodes.empty()) return 0;
  std::vector<int> level(nodes.size(), 0);
  int deepest = 0;
  for (std::size_t n = 0; n < nodes.size(); ++n) {
    deepest = std::max(deepest, level[n]);
    if (!nodes[n].is_leaf()) {
      level[nodes[n].left] = level[n] + 1;
      level[nodes[n].right] = level[n] + 1;
    }
  }
  return deepest;
}

std::vector<int> draw_split_variables(int p, SeededRng& rng, int fixed) {
  const int count = fixed > 0 ? std::min(p, fixed) : std::min(p, 1 + rng.poisson(0.35 * p - 1.0));
  std::vector<int> vars;
  vars.reserve(count);
  if (count == p) {
    for (int j = 0; j < p; ++j) vars.push_back(j);
    return vars;
  }
  for (std::size_t v : rng.sample_without_replacement(static_cast<std::size_t>(p), count))
    vars.push_back(static_cast<int>(v));
  std::sort(vars.begin(), vars.end());
  return vars;
}

namespace {
double threshold_between(double lo, double hi) {
  double t = lo + 0.5 * (hi - lo);
  if (!(t < hi)) t = lo;
  return t;
}
}  // namespace

void split_candidates(std::span<const double> sorted, std::vector<Candidate>& out) {
  out.clear();
  const auto n = static_cast<Index>(sorted.size());
  if (n < 2) return;
  Index distinct = 1;
  for (Index i = 1; i < n && distinct <= kMaxCandidates; ++i)
    if (sorted[i] != sorted[i - 1]) ++distinct;

  if (distinct <= kMaxCandidates) {
    for (Index i = 1; i < n; ++i)
      if (sorted[i] != sorted[i - 1]) out.push_back({i, threshold_between(sorted[i - 1], sorted[i])});
    return;
  }
  Index last = 0;
  for (int k = 1; k <= kMaxCandidates; ++k) {
    Index pos = static_cast<Index>(std::llround(static_cast<double>(k) * n / (kMaxCandidates + 1)));
    pos = std::clamp<Index>(pos, 1, n - 1);
    // Slide to the next boundary between distinct values.
    while (pos < n && sorted[pos] == sorted[pos - 1]) ++pos;
    if (pos >= n || pos <= last) continue;
    out.push_back({pos, threshold_between(sorted[pos - 1], sorted[pos])});
    last = pos;
  }
}

void fill_sorted(const Matrix& x, int var, std::span<const Index> rows, SortBuffer& buf, std::vector<double>& values) {
  buf.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) buf[i] = {x(rows[i], var), rows[i]};
  std::sort(buf.begin(), buf.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  values.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) values[i] = buf[i].first;
}

}  // namespace mcf::tree
