// Conditional inference trees used as a conditional sampler.
//
// Simplified reimplementation: at each node every input is tested for
// association with the (standardized, multivariate) response by a
// permutation test, the smallest Bonferroni-adjusted p-value picks the split
// variable, and the split point maximizes the between-group sum of squares of
// the standardized response.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "condshap/common.hpp"
#include "condshap/data.hpp"
#include "condshap/mc_estimators.hpp"

namespace condshap {

struct CtreeConfig {
  double alpha = 0.05;
  int minbucket = 7;
  int minsplit = 20;
  int n_permutations = 999;
  int max_depth = 30;
  /// When false leaves always contribute all their unique rows, which makes
  /// the estimator deterministic.
  bool sample = true;
  std::uint64_t seed = 0;
};

class CtreeModel {
 public:
  struct Node {
    int feature = -1;  // input column, -1 for a leaf
    double threshold = 0.0;
    std::vector<bool> left_levels;
    int left = -1;
    int right = -1;
    std::vector<Eigen::Index> rows;  // training rows (leaves only)
  };

  CtreeModel(const Dataset& train, std::uint64_t target, std::uint64_t cond, const CtreeConfig& config)
      : train_(&train), inputs_(mask_members(cond)), config_(config), rng_(derive_seed(config.seed, target, cond)) {
    build_response(mask_members(target));
    std::vector<Eigen::Index> all(static_cast<std::size_t>(train.n_rows()));
    std::iota(all.begin(), all.end(), 0);
    nodes_.reserve(16);
    grow(std::move(all), 0);
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t n_leaves() const {
    return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.feature < 0; }));
  }

  const Node& leaf_for(const RowVector& x) const {
    int k = 0;
    while (nodes_[static_cast<std::size_t>(k)].feature >= 0) {
      const Node& n = nodes_[static_cast<std::size_t>(k)];
      const double v = x[n.feature];
      bool left;
      if (train_->schema.columns[static_cast<std::size_t>(n.feature)].kind == ColumnKind::categorical) {
        const auto code = static_cast<std::size_t>(v);
        left = code < n.left_levels.size() && n.left_levels[code];
      } else {
        left = v < n.threshold;
      }
      k = left ? n.left : n.right;
    }
    return nodes_[static_cast<std::size_t>(k)];
  }

 private:
  void build_response(const std::vector<int>& target) {
    std::vector<Vector> cols;
    for (int t : target) {
      const auto& spec = train_->schema.columns[static_cast<std::size_t>(t)];
      if (spec.kind == ColumnKind::numeric) {
        cols.push_back(train_->values.col(t));
      } else {
        for (std::size_t l = 0; l < spec.levels.size(); ++l)
          cols.push_back((train_->values.col(t).array() == static_cast<double>(l)).cast<double>().matrix());
      }
    }
    y_.resize(train_->n_rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) y_.col(static_cast<Eigen::Index>(k)) = cols[k];
  }

  /// Response rows of the node, centered and scaled per column; constant
  /// columns are dropped.
  Matrix node_response(const std::vector<Eigen::Index>& rows) const {
    const auto n = static_cast<Eigen::Index>(rows.size());
    Matrix y(n, y_.cols());
    for (Eigen::Index i = 0; i < n; ++i) y.row(i) = y_.row(rows[static_cast<std::size_t>(i)]);
    y.rowwise() -= y.colwise().mean();
    std::vector<Eigen::Index> keep;
    for (Eigen::Index k = 0; k < y.cols(); ++k) {
      const double sd = std::sqrt(y.col(k).squaredNorm() / static_cast<double>(n));
      if (sd > 1e-12 * (1.0 + y_.col(k).cwiseAbs().maxCoeff())) {
        y.col(k) /= sd;
        keep.push_back(k);
      }
    }
    Matrix out(n, static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = y.col(keep[k]);
    return out;
  }

  bool categorical(int j) const {
    return train_->schema.columns[static_cast<std::size_t>(j)].kind == ColumnKind::categorical;
  }

  /// Association statistic between input values x (aligned with y rows) and y.
  double statistic(int j, const std::vector<double>& x, const Matrix& y) const {
    const auto n = static_cast<Eigen::Index>(x.size());
    if (categorical(j)) {
      std::map<int, std::pair<RowVector, double>> groups;
      for (Eigen::Index i = 0; i < n; ++i) {
        auto& g = groups.try_emplace(static_cast<int>(x[static_cast<std::size_t>(i)]), RowVector::Zero(y.cols()), 0.0)
                      .first->second;
        g.first += y.row(i);
        g.second += 1.0;
      }
      double s = 0.0;
      for (const auto& [level, g] : groups) s += g.first.squaredNorm() / g.second;
      return s;
    }
    RowVector t = RowVector::Zero(y.cols());
    for (Eigen::Index i = 0; i < n; ++i) t += x[static_cast<std::size_t>(i)] * y.row(i);
    return t.squaredNorm() / static_cast<double>(n);
  }

  struct TestResult {
    double p = 1.0;
    double z = 0.0;
  };

  /// Permutation p-value with early stopping once the input cannot reach
  /// the adjusted level.
  TestResult permutation_test(int j, const std::vector<Eigen::Index>& rows, const Matrix& y) {
    std::vector<double> x(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) x[i] = train_->values(rows[i], j);
    if (!categorical(j)) {
      const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
      double ss = 0.0;
      for (double& v : x) ss += (v - mean) * (v - mean);
      if (ss <= 0.0) return {};
      const double sd = std::sqrt(ss / static_cast<double>(x.size()));
      for (double& v : x) v = (v - mean) / sd;
    } else {
      std::vector<double> sorted = x;
      std::sort(sorted.begin(), sorted.end());
      if (sorted.front() == sorted.back()) return {};
    }
    const double observed = statistic(j, x, y);
    const double level = config_.alpha / static_cast<double>(inputs_.size());
    const auto stop_after = static_cast<int>(std::ceil(level * (config_.n_permutations + 1)));
    int exceed = 0, done = 0;
    double mean = 0.0, m2 = 0.0;
    for (int b = 0; b < config_.n_permutations; ++b) {
      for (std::size_t i = x.size() - 1; i > 0; --i)
        std::swap(x[i], x[static_cast<std::size_t>(uniform_index(rng_, i + 1))]);
      const double s = statistic(j, x, y);
      ++done;
      const double d = s - mean;
      mean += d / done;
      m2 += d * (s - mean);
      if (s >= observed * (1.0 - 1e-12)) ++exceed;
      if (exceed >= stop_after && exceed > 0) break;
    }
    TestResult r;
    r.p = std::min(1.0, (exceed + 1.0) / (done + 1.0) * static_cast<double>(inputs_.size()));
    const double sd = done > 1 ? std::sqrt(m2 / (done - 1)) : 0.0;
    r.z = sd > 0.0 ? (observed - mean) / sd : 0.0;
    return r;
  }

  struct Split {
    bool ok = false;
    double threshold = 0.0;
    std::vector<bool> left_levels;
    std::vector<Eigen::Index> left, right;
  };

  Split best_split(int j, const std::vector<Eigen::Index>& rows, const Matrix& y) const {
    const auto n = rows.size();
    const auto minb = static_cast<std::size_t>(std::max(1, config_.minbucket));
    Split best;
    // ordering of the node rows along which prefix splits are scanned
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> key(n);
    std::vector<int> level_rank;
    if (categorical(j)) {
      const auto n_levels = train_->schema.columns[static_cast<std::size_t>(j)].levels.size();
      std::vector<double> sum(n_levels, 0.0), cnt(n_levels, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto l = static_cast<std::size_t>(train_->values(rows[i], j));
        sum[l] += y.row(static_cast<Eigen::Index>(i)).sum();
        cnt[l] += 1.0;
      }
      for (std::size_t i = 0; i < n; ++i) {
        const auto l = static_cast<std::size_t>(train_->values(rows[i], j));
        key[i] = sum[l] / cnt[l] + 1e-9 * static_cast<double>(l);  // level means; code breaks ties
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) key[i] = train_->values(rows[i], j);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
    const RowVector total = y.colwise().sum();
    RowVector left = RowVector::Zero(y.cols());
    double best_gain = -1.0;
    std::size_t best_cut = 0;
    for (std::size_t c = 0; c + 1 < n; ++c) {
      left += y.row(static_cast<Eigen::Index>(order[c]));
      const std::size_t nl = c + 1, nr = n - nl;
      if (key[order[c]] == key[order[c + 1]]) continue;
      if (nl < minb || nr < minb) continue;
      const RowVector right = total - left;
      const double gain = left.squaredNorm() / nl + right.squaredNorm() / nr;
      if (gain > best_gain + 1e-12) {
        best_gain = gain;
        best_cut = c;
      }
    }
    if (best_gain < 0.0) return best;
    best.ok = true;
    if (categorical(j)) {
      best.left_levels.assign(train_->schema.columns[static_cast<std::size_t>(j)].levels.size(), false);
      for (std::size_t c = 0; c <= best_cut; ++c)
        best.left_levels[static_cast<std::size_t>(train_->values(rows[order[c]], j))] = true;
    } else {
      best.threshold = 0.5 * (key[order[best_cut]] + key[order[best_cut + 1]]);
    }
    for (std::size_t c = 0; c < n; ++c) (c <= best_cut ? best.left : best.right).push_back(rows[order[c]]);
    std::sort(best.left.begin(), best.left.end());
    std::sort(best.right.begin(), best.right.end());
    return best;
  }

  int grow(std::vector<Eigen::Index> rows, int depth) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    const auto n = static_cast<int>(rows.size());
    if (inputs_.empty() || depth >= config_.max_depth || n < config_.minsplit || n < 2 * config_.minbucket ||
        config_.alpha <= 0.0) {
      nodes_[static_cast<std::size_t>(id)].rows = std::move(rows);
      return id;
    }
    const Matrix y = node_response(rows);
    int best_input = -1;
    TestResult best;
    if (y.cols() > 0) {
      for (int j : inputs_) {
        const TestResult r = permutation_test(j, rows, y);
        if (best_input < 0 || r.p < best.p || (r.p == best.p && r.z > best.z)) {
          best = r;
          best_input = j;
        }
      }
    }
    Split split;
    if (best_input >= 0 && best.p < config_.alpha) split = best_split(best_input, rows, y);
    if (!split.ok) {
      nodes_[static_cast<std::size_t>(id)].rows = std::move(rows);
      return id;
    }
    nodes_[static_cast<std::size_t>(id)].feature = best_input;
    nodes_[static_cast<std::size_t>(id)].threshold = split.threshold;
    nodes_[static_cast<std::size_t>(id)].left_levels = split.left_levels;
    const int l = grow(std::move(split.left), depth + 1);
    const int r = grow(std::move(split.right), depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  const Dataset* train_;
  std::vector<int> inputs_;
  CtreeConfig config_;
  Rng rng_;
  Matrix y_;
  std::vector<Node> nodes_;
};

/// Samples complements from the training rows in the leaf reached by the
/// conditioning values. K draws with replacement when the leaf holds at
/// least K rows; otherwise (or with sampling off) every distinct leaf row
/// weighted by its multiplicity.
class CtreeSampler : public ConditionalSampler {
 public:
  explicit CtreeSampler(Dataset train, CtreeConfig config = {}) : train_(std::move(train)), config_(config) {
    detail::require_rows(train_);
  }

  std::string name() const override { return "ctree"; }

  std::shared_ptr<const CtreeModel> model(std::uint64_t target, std::uint64_t cond) const {
    return memo_.get(target, cond, [&] { return CtreeModel(train_, target, cond, config_); });
  }

  SampleBatch sample(std::uint64_t target, std::uint64_t cond, const RowVector& x, int k, Rng& rng) const override {
    const auto t = mask_members(target);
    const auto tree = model(target, cond);
    const auto& leaf = tree->leaf_for(x).rows;
    SampleBatch b;
    if (config_.sample && k >= 1 && static_cast<std::size_t>(k) <= leaf.size()) {
      b.rows.resize(k, static_cast<Eigen::Index>(t.size()));
      for (int r = 0; r < k; ++r) {
        const auto i = leaf[static_cast<std::size_t>(uniform_index(rng, leaf.size()))];
        for (std::size_t a = 0; a < t.size(); ++a) b.rows(r, static_cast<Eigen::Index>(a)) = train_.values(i, t[a]);
      }
      return b;
    }
    std::vector<std::vector<double>> unique;
    std::map<std::vector<double>, std::size_t> index;
    std::vector<double> count;
    for (auto i : leaf) {
      std::vector<double> z(t.size());
      for (std::size_t a = 0; a < t.size(); ++a) z[a] = train_.values(i, t[a]);
      auto [it, fresh] = index.emplace(z, unique.size());
      if (fresh) {
        unique.push_back(z);
        count.push_back(0.0);
      }
      count[it->second] += 1.0;
    }
    b.rows.resize(static_cast<Eigen::Index>(unique.size()), static_cast<Eigen::Index>(t.size()));
    for (std::size_t u = 0; u < unique.size(); ++u) {
      for (std::size_t a = 0; a < t.size(); ++a) b.rows(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(a)) = unique[u][a];
      b.weights.push_back(count[u] / static_cast<double>(leaf.size()));
    }
    return b;
  }

 private:
  Dataset train_;
  CtreeConfig config_;
  detail::PairMemo<CtreeModel> memo_;
};

}  // namespace condshap
