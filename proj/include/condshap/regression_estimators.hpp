// Regression estimators of v(S): one regression per coalition, or a single
// surrogate regression over mask-augmented rows.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <vector>

#include "condshap/coalition.hpp"
#include "condshap/common.hpp"
#include "condshap/data.hpp"
#include "condshap/mc_estimators.hpp"
#include "condshap/model.hpp"

namespace condshap {

/// Learner on a numeric design matrix.
class Regressor {
 public:
  virtual ~Regressor() = default;
  virtual void fit(const Matrix& x, const Vector& z) = 0;
  virtual Vector predict(const Matrix& x) const = 0;
};

/// Least squares with intercept. Rank-deficient designs get the basic
/// solution of the column-pivoted QR.
class OlsRegressor : public Regressor {
 public:
  void fit(const Matrix& x, const Vector& z) override {
    if (x.rows() != z.size()) throw InvalidArgument("OLS: row counts differ");
    Matrix a(x.rows(), x.cols() + 1);
    a.col(0).setOnes();
    a.rightCols(x.cols()) = x;
    beta_ = Eigen::ColPivHouseholderQR<Matrix>(a).solve(z);
  }

  Vector predict(const Matrix& x) const override {
    return (x * beta_.tail(beta_.size() - 1)).array() + beta_[0];
  }

  const Vector& coefficients() const { return beta_; }

 private:
  Vector beta_;
};

struct CartConfig {
  int max_depth = 8;
  int min_leaf = 5;
};

/// Regression tree grown by greedy variance reduction; x < threshold goes left.
class CartRegressor : public Regressor {
 public:
  explicit CartRegressor(CartConfig config = {}) : config_(config) {
    if (config_.min_leaf < 1 || config_.max_depth < 0) throw InvalidArgument("CART: invalid configuration");
  }

  void fit(const Matrix& x, const Vector& z) override {
    if (x.rows() != z.size() || x.rows() == 0) throw InvalidArgument("CART: bad training data");
    nodes_.clear();
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(x.rows()));
    std::iota(rows.begin(), rows.end(), 0);
    grow(x, z, rows, 0);
  }

  Vector predict(const Matrix& x) const override {
    if (nodes_.empty()) throw InvalidArgument("CART: predict before fit");
    Vector out(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      int k = 0;
      while (nodes_[static_cast<std::size_t>(k)].feature >= 0) {
        const auto& n = nodes_[static_cast<std::size_t>(k)];
        k = x(r, n.feature) < n.threshold ? n.left : n.right;
      }
      out[r] = nodes_[static_cast<std::size_t>(k)].value;
    }
    return out;
  }

  std::size_t n_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    int feature = -1;
    double threshold = 0.0;
    int left = -1, right = -1;
    double value = 0.0;
  };

  int grow(const Matrix& x, const Vector& z, std::vector<Eigen::Index>& rows, int depth) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    const auto n = rows.size();
    double sum = 0.0;
    for (auto r : rows) sum += z[r];
    nodes_[static_cast<std::size_t>(id)].value = sum / static_cast<double>(n);
    const auto min_leaf = static_cast<std::size_t>(config_.min_leaf);
    if (depth >= config_.max_depth || n < 2 * min_leaf) return id;

    double best_gain = 1e-12 * (1.0 + std::abs(sum));
    int best_feature = -1;
    double best_threshold = 0.0;
    std::vector<Eigen::Index> sorted = rows;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      std::stable_sort(sorted.begin(), sorted.end(), [&](Eigen::Index a, Eigen::Index b) { return x(a, j) < x(b, j); });
      double left = 0.0;
      for (std::size_t c = 0; c + 1 < n; ++c) {
        left += z[sorted[c]];
        const std::size_t nl = c + 1, nr = n - nl;
        if (nl < min_leaf || nr < min_leaf) continue;
        if (x(sorted[c], j) == x(sorted[c + 1], j)) continue;
        const double right = sum - left;
        // reduction in squared error relative to the parent
        const double gain = left * left / nl + right * right / nr - sum * sum / n;
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = static_cast<int>(j);
          best_threshold = 0.5 * (x(sorted[c], j) + x(sorted[c + 1], j));
        }
      }
    }
    if (best_feature < 0) return id;
    std::vector<Eigen::Index> l, r;
    for (auto i : rows) (x(i, best_feature) < best_threshold ? l : r).push_back(i);
    nodes_[static_cast<std::size_t>(id)].feature = best_feature;
    nodes_[static_cast<std::size_t>(id)].threshold = best_threshold;
    const int li = grow(x, z, l, depth + 1);
    const int ri = grow(x, z, r, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = li;
    nodes_[static_cast<std::size_t>(id)].right = ri;
    return id;
  }

  CartConfig config_;
  std::vector<Node> nodes_;
};

using RegressorFactory = std::function<std::unique_ptr<Regressor>()>;

/// "lm" or "tree".
inline RegressorFactory regressor_factory(const std::string& name, CartConfig cart = {}) {
  if (name == "lm" || name == "ols") return [] { return std::make_unique<OlsRegressor>(); };
  if (name == "tree" || name == "cart") return [cart] { return std::make_unique<CartRegressor>(cart); };
  throw InvalidArgument("unknown regression learner '" + name + "' (expected lm or tree)");
}

// ---------------------------------------------------------------------------
// Design encodings

/// Columns of S, numeric as-is, categorical one-hot without the first level.
inline Matrix encode_subset(const Dataset& data, std::uint64_t s_mask) {
  const auto cols = mask_members(s_mask);
  Eigen::Index width = 0;
  for (int c : cols) {
    const auto& spec = data.schema.columns[static_cast<std::size_t>(c)];
    width += spec.kind == ColumnKind::numeric ? 1 : std::max<Eigen::Index>(0, static_cast<Eigen::Index>(spec.levels.size()) - 1);
  }
  Matrix out = Matrix::Zero(data.n_rows(), width);
  Eigen::Index k = 0;
  for (int c : cols) {
    const auto& spec = data.schema.columns[static_cast<std::size_t>(c)];
    if (spec.kind == ColumnKind::numeric) {
      out.col(k++) = data.values.col(c);
      continue;
    }
    for (std::size_t l = 1; l < spec.levels.size(); ++l, ++k)
      out.col(k) = (data.values.col(c).array() == static_cast<double>(l)).cast<double>().matrix();
  }
  return out;
}

/// Fixed-length encoding of (S, x_S): a value half and a mask half.
/// Numeric values are standardized with training moments so that the fill
/// value 0 of masked features sits at the training mean. A categorical
/// feature contributes one indicator per level plus a "masked" indicator.
class MaskedEncoder {
 public:
  MaskedEncoder(const Dataset& train, bool standardize = true) : schema_(train.schema) {
    const Eigen::Index m = train.n_cols();
    mean_ = Vector::Zero(m);
    scale_ = Vector::Ones(m);
    if (standardize && train.n_rows() > 1) {
      for (Eigen::Index j = 0; j < m; ++j) {
        if (schema_.columns[static_cast<std::size_t>(j)].kind != ColumnKind::numeric) continue;
        mean_[j] = train.values.col(j).mean();
        const double sd = std::sqrt((train.values.col(j).array() - mean_[j]).square().sum() / (train.n_rows() - 1.0));
        scale_[j] = sd > 0.0 ? sd : 1.0;
      }
    }
    for (const auto& c : schema_.columns)
      value_width_ += c.kind == ColumnKind::numeric ? 1 : static_cast<Eigen::Index>(c.levels.size()) + 1;
  }

  Eigen::Index width() const { return value_width_ + static_cast<Eigen::Index>(schema_.size()); }
  Eigen::Index value_width() const { return value_width_; }

  void encode(const Eigen::Ref<const RowVector>& x, std::uint64_t s_mask, Eigen::Ref<RowVector, 0, Eigen::InnerStride<>> out) const {
    out.setZero();
    Eigen::Index k = 0;
    const auto m = static_cast<Eigen::Index>(schema_.size());
    for (Eigen::Index j = 0; j < m; ++j) {
      const bool in = (s_mask >> j) & 1U;
      const auto& spec = schema_.columns[static_cast<std::size_t>(j)];
      if (spec.kind == ColumnKind::numeric) {
        if (in) out[k] = (x[j] - mean_[j]) / scale_[j];
        ++k;
      } else {
        const auto levels = static_cast<Eigen::Index>(spec.levels.size());
        out[k + (in ? static_cast<Eigen::Index>(x[j]) : levels)] = 1.0;
        k += levels + 1;
      }
      if (in) out[value_width_ + j] = 1.0;
    }
  }

  RowVector encode(const Eigen::Ref<const RowVector>& x, std::uint64_t s_mask) const {
    RowVector out(width());
    encode(x, s_mask, out);
    return out;
  }

 private:
  FeatureSpec schema_;
  Vector mean_, scale_;
  Eigen::Index value_width_ = 0;
};

// ---------------------------------------------------------------------------
// Estimators

/// Caches f on the training rows.
inline Vector training_response(const Predictor& predictor, const Dataset& train) {
  return predict_batch(predictor, Dataset{predictor.feature_spec(), train.values});
}

/// Fits g_S on (x_S, f(x)) and evaluates it at every explicand.
inline Vector separate_regression_vS(const Dataset& train, const Vector& z, const RegressorFactory& learner,
                                     std::uint64_t s_mask, const Dataset& x_explain) {
  const int m = static_cast<int>(train.n_cols());
  if (s_mask == 0 || s_mask == full_mask(m))
    throw InvalidArgument("separate regression is for interior coalitions");
  try {
    auto g = learner();
    g->fit(encode_subset(train, s_mask), z);
    return g->predict(encode_subset(x_explain, s_mask));
  } catch (const Error& e) {
    throw EstimationError("regression for coalition {" + [&] {
      std::string s;
      for (int j : mask_members(s_mask)) s += (s.empty() ? "" : ",") + train.schema.columns[static_cast<std::size_t>(j)].name;
      return s;
    }() + "} failed: " + e.what());
  }
}

/// Single regression over mask-augmented training rows.
class SurrogateRegression {
 public:
  /// `per_row` lists, for each training row, the feature masks it is
  /// expanded with.
  SurrogateRegression(const Dataset& train, const Vector& z, const RegressorFactory& learner,
                      const std::vector<std::vector<std::uint64_t>>& per_row, bool standardize = true)
      : encoder_(train, standardize), model_(learner()) {
    if (per_row.size() != static_cast<std::size_t>(train.n_rows()))
      throw InvalidArgument("surrogate: one coalition list per training row needed");
    Eigen::Index total = 0;
    for (const auto& l : per_row) total += static_cast<Eigen::Index>(l.size());
    if (total == 0) throw InvalidArgument("surrogate: no augmented rows");
    Matrix x(total, encoder_.width());
    Vector y(total);
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < per_row.size(); ++i)
      for (auto s : per_row[i]) {
        encoder_.encode(train.values.row(static_cast<Eigen::Index>(i)), s, x.row(r));
        y[r++] = z[static_cast<Eigen::Index>(i)];
      }
    model_->fit(x, y);
  }

  const MaskedEncoder& encoder() const { return encoder_; }

  Vector vS(std::uint64_t s_mask, const Matrix& x_explain) const {
    Matrix x(x_explain.rows(), encoder_.width());
    for (Eigen::Index i = 0; i < x_explain.rows(); ++i) encoder_.encode(x_explain.row(i), s_mask, x.row(i));
    return model_->predict(x);
  }

 private:
  MaskedEncoder encoder_;
  std::unique_ptr<Regressor> model_;
};

/// Augmentation plan: every listed coalition for every row when there are
/// at most `budget` of them, else `budget` kernel-distributed draws per row.
inline std::vector<std::vector<std::uint64_t>> surrogate_plan(const std::vector<std::uint64_t>& all_masks,
                                                              const std::function<std::uint64_t(Rng&)>& draw,
                                                              Eigen::Index n_rows, int budget, std::uint64_t seed) {
  if (budget < 1) throw InvalidArgument("surrogate n_comb_per_row must be at least 1");
  std::vector<std::vector<std::uint64_t>> plan(static_cast<std::size_t>(n_rows));
  if (all_masks.size() <= static_cast<std::size_t>(budget)) {
    for (auto& p : plan) p = all_masks;
    return plan;
  }
  Rng rng(seed);
  for (auto& p : plan) {
    p.reserve(static_cast<std::size_t>(budget));
    for (int k = 0; k < budget; ++k) p.push_back(draw(rng));
  }
  return plan;
}

}  // namespace condshap
