#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mcf/rng.hpp"
#include "mcf/types.hpp"

namespace mcf::tree {

/// Axis-aligned binary split tree. Internal nodes send x[var] <= threshold to
/// `left`; leaves carry a dense leaf id in [0, num_leaves).
struct Node {
  int var = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  int leaf = -1;

  bool is_leaf() const { return var < 0; }
  bool operator==(const Node&) const = default;
};

struct SplitTree {
  std::vector<Node> nodes;
  int num_leaves = 0;

  int leaf_of(const Matrix& x, Index row) const {
    int n = 0;
    while (!nodes[n].is_leaf()) n = x(row, nodes[n].var) <= nodes[n].threshold ? nodes[n].left : nodes[n].right;
    return nodes[n].leaf;
  }
  int depth() const;
  bool operator==(const SplitTree&) const = default;
};

/// Number of candidate variables at a node: min(p, 1 + Poisson(0.35 p - 1)),
/// or `fixed` when positive (capped at p), drawn uniformly without
/// replacement and returned in ascending order.
std::vector<int> draw_split_variables(int p, SeededRng& rng, int fixed = 0);

/// A candidate split of a sorted node: the first `position` units go left and
/// the threshold lies strictly between sorted[position-1] and sorted[position].
struct Candidate {
  Index position;
  double threshold;
};

inline constexpr int kMaxCandidates = 64;

/// Split candidates for sorted values: every boundary between distinct values
/// when there are at most 64 distinct values, otherwise up to 64 boundaries at
/// the k/65 sample quantiles (k = 1..64), ascending.
void split_candidates(std::span<const double> sorted, std::vector<Candidate>& out);

/// (value, row) buffer sorted by value then row.
using SortBuffer = std::vector<std::pair<double, Index>>;
void fill_sorted(const Matrix& x, int var, std::span<const Index> rows, SortBuffer& buf, std::vector<double>& values);

}  // namespace mcf::tree
