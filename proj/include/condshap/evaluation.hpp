// MSEv evaluation criterion and approach comparison.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "condshap/common.hpp"

namespace condshap {

struct MsevResult {
  double score = 0.0;
  double sd = 0.0;  // standard error across explicands
  Vector per_coalition;
  Vector per_explicand;
  std::vector<std::uint64_t> coalitions;  // masks the rows of V_hat refer to
};

/// v_hat holds interior coalitions only (rows) by explicands (columns).
inline MsevResult msev(const Matrix& v_hat, const Vector& predictions, std::vector<std::uint64_t> coalitions = {}) {
  if (v_hat.cols() != predictions.size()) throw InvalidArgument("MSEv: prediction count differs from explicand count");
  if (v_hat.rows() == 0 || v_hat.cols() == 0) throw InvalidArgument("MSEv needs at least one coalition and explicand");
  if (!coalitions.empty() && coalitions.size() != static_cast<std::size_t>(v_hat.rows()))
    throw InvalidArgument("MSEv: coalition list does not match V rows");
  const Matrix sq = (v_hat.rowwise() - predictions.transpose()).array().square().matrix();
  MsevResult r;
  r.per_coalition = sq.rowwise().mean();
  r.per_explicand = sq.colwise().mean().transpose();
  r.score = r.per_coalition.mean();
  const Eigen::Index n = r.per_explicand.size();
  if (n > 1) {
    const double mean = r.per_explicand.mean();
    const double var = (r.per_explicand.array() - mean).square().sum() / static_cast<double>(n - 1);
    r.sd = std::sqrt(var / static_cast<double>(n));
  }
  r.coalitions = std::move(coalitions);
  return r;
}

struct NamedMsev {
  std::string name;
  MsevResult result;
};

struct Comparison {
  std::vector<NamedMsev> ranked;  // ascending score, ties in input order
  std::vector<std::string> warnings;
};

/// Ranks approaches by MSEv. Intervals score +- sd that overlap between
/// neighbours in the ranking produce a warning.
inline Comparison compare_approaches(const std::vector<NamedMsev>& results) {
  if (results.size() < 2) throw InvalidArgument("comparison needs at least two approaches");
  for (std::size_t i = 1; i < results.size(); ++i) {
    const auto& a = results[0].result;
    const auto& b = results[i].result;
    auto sa = a.coalitions, sb = b.coalitions;
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    if (sa != sb || a.per_explicand.size() != b.per_explicand.size())
      throw ValidationError("approaches '" + results[0].name + "' and '" + results[i].name +
                            "' were evaluated on different coalitions or explicands and are not comparable");
  }
  Comparison c;
  c.ranked = results;
  std::stable_sort(c.ranked.begin(), c.ranked.end(),
                   [](const NamedMsev& a, const NamedMsev& b) { return a.result.score < b.result.score; });
  for (std::size_t i = 0; i + 1 < c.ranked.size(); ++i) {
    const auto& a = c.ranked[i];
    const auto& b = c.ranked[i + 1];
    if (a.result.score + a.result.sd >= b.result.score - b.result.sd)
      c.warnings.push_back("MSEv intervals of '" + a.name + "' and '" + b.name +
                           "' overlap; the ranking between them is uncertain");
  }
  return c;
}

}  // namespace condshap
