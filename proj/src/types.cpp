#include "mcf/types.hpp"

#include <string>

namespace mcf {

void Sample::validate() const {
  const Index n = x.rows();
  if (static_cast<Index>(d.size()) != n || y.size() != n)
    throw InvalidArgument("sample arrays disagree on n: x has " + std::to_string(n) + " rows, d " +
                          std::to_string(d.size()) + ", y " + std::to_string(y.size()));
  if (num_treatments < 2) throw InvalidArgument("sample needs at least two treatments");
  for (int label : d)
    if (label < 0 || label >= num_treatments)
      throw InvalidArgument("treatment label " + std::to_string(label) + " outside 0.." +
                            std::to_string(num_treatments - 1));
  if (potential_outcomes && (potential_outcomes->rows() != n || potential_outcomes->cols() != num_treatments))
    throw InvalidArgument("potential outcome table must be n x M");
  if (true_iate && true_iate->size() != n) throw InvalidArgument("true IATE vector must have n entries");
}

Sample Sample::subset(const std::vector<Index>& rows) const {
  Sample out;
  const auto m = static_cast<Index>(rows.size());
  out.num_treatments = num_treatments;
  out.x.resize(m, x.cols());
  out.y.resize(m);
  out.d.resize(rows.size());
  for (Index r = 0; r < m; ++r) {
    out.x.row(r) = x.row(rows[r]);
    out.y[r] = y[rows[r]];
    out.d[r] = d[rows[r]];
  }
  if (potential_outcomes) {
    Matrix po(m, potential_outcomes->cols());
    for (Index r = 0; r < m; ++r) po.row(r) = potential_outcomes->row(rows[r]);
    out.potential_outcomes = std::move(po);
  }
  if (true_iate) {
    Vector t(m);
    for (Index r = 0; r < m; ++r) t[r] = (*true_iate)[rows[r]];
    out.true_iate = std::move(t);
  }
  return out;
}

std::vector<Index> arm_counts(const Labels& d, int num_treatments) {
  std::vector<Index> counts(num_treatments, 0);
  for (int label : d) ++counts[label];
  return counts;
}

}  // namespace mcf
