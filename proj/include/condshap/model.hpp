// Prediction interface and the built-in predictors.

#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "condshap/common.hpp"
#include "condshap/data.hpp"

namespace condshap {

/// A model f(x). Rows arrive in feature_spec() column order with categorical
/// cells as level codes. Implementations must be deterministic and safe to
/// call from several threads.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual const FeatureSpec& feature_spec() const = 0;
  virtual Vector predict(const Matrix& rows) const = 0;
};

/// Checks the schema, predicts, and enforces one finite value per row.
inline Vector predict_batch(const Predictor& p, const Dataset& rows) {
  const auto& spec = p.feature_spec();
  if (rows.schema.size() != spec.size())
    throw ValidationError("prediction rows have " + std::to_string(rows.schema.size()) + " columns, model expects " +
                          std::to_string(spec.size()));
  for (std::size_t c = 0; c < spec.size(); ++c) {
    const auto& a = rows.schema.columns[c];
    const auto& b = spec.columns[c];
    if (a.name != b.name || a.kind != b.kind)
      throw ValidationError("prediction column " + std::to_string(c + 1) + " ('" + a.name +
                            "') does not match model feature '" + b.name + "'");
  }
  Vector out = p.predict(rows.values);
  if (out.size() != rows.n_rows())
    throw ModelError("model returned " + std::to_string(out.size()) + " predictions for " +
                     std::to_string(rows.n_rows()) + " rows");
  for (Eigen::Index i = 0; i < out.size(); ++i)
    if (!std::isfinite(out[i])) throw ModelError("model returned a non-finite prediction for row " + std::to_string(i + 1));
  return out;
}

inline double phi0_from_response(std::span<const double> y) {
  if (y.empty()) throw InvalidArgument("phi0 needs a nonempty response vector");
  return std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
}

// ---------------------------------------------------------------------------

/// Affine model over the one-hot encoded row: numeric features carry one
/// coefficient, categorical features one coefficient per level.
class LinearPredictor : public Predictor {
 public:
  LinearPredictor(FeatureSpec spec, double intercept, std::vector<std::vector<double>> coefficients)
      : spec_(std::move(spec)), intercept_(intercept), coef_(std::move(coefficients)) {
    if (coef_.size() != spec_.size()) throw InvalidArgument("linear model: one coefficient entry per feature needed");
    for (std::size_t j = 0; j < spec_.size(); ++j) {
      const std::size_t want = spec_.columns[j].kind == ColumnKind::numeric ? 1 : spec_.columns[j].levels.size();
      if (coef_[j].size() != want)
        throw InvalidArgument("linear model: feature '" + spec_.columns[j].name + "' needs " + std::to_string(want) +
                              " coefficients");
    }
  }

  /// Numeric-only convenience constructor.
  LinearPredictor(FeatureSpec spec, double intercept, const Vector& beta)
      : LinearPredictor(std::move(spec), intercept, wrap(beta)) {}

  const FeatureSpec& feature_spec() const override { return spec_; }

  Vector predict(const Matrix& rows) const override {
    Vector out = Vector::Constant(rows.rows(), intercept_);
    for (std::size_t j = 0; j < spec_.size(); ++j) {
      const auto c = static_cast<Eigen::Index>(j);
      if (spec_.columns[j].kind == ColumnKind::numeric) {
        out += coef_[j][0] * rows.col(c);
      } else {
        for (Eigen::Index r = 0; r < rows.rows(); ++r) out[r] += coef_[j].at(static_cast<std::size_t>(rows(r, c)));
      }
    }
    return out;
  }

  double intercept() const { return intercept_; }
  const std::vector<std::vector<double>>& coefficients() const { return coef_; }

 private:
  static std::vector<std::vector<double>> wrap(const Vector& beta) {
    std::vector<std::vector<double>> out;
    for (Eigen::Index j = 0; j < beta.size(); ++j) out.push_back({beta[j]});
    return out;
  }

  FeatureSpec spec_;
  double intercept_;
  std::vector<std::vector<double>> coef_;
};

/// Sum of binary regression trees plus a base score. Numeric splits send
/// x < threshold left; categorical splits send the listed levels left.
class TreeEnsemblePredictor : public Predictor {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    std::vector<bool> left_levels;
    int left = -1;
    int right = -1;
    double value = 0.0;
  };
  using Tree = std::vector<Node>;  // node 0 is the root

  TreeEnsemblePredictor(FeatureSpec spec, std::vector<Tree> trees, double base_score = 0.0)
      : spec_(std::move(spec)), trees_(std::move(trees)), base_(base_score) {
    for (std::size_t t = 0; t < trees_.size(); ++t) validate(trees_[t], t);
  }

  const FeatureSpec& feature_spec() const override { return spec_; }

  Vector predict(const Matrix& rows) const override {
    Vector out = Vector::Constant(rows.rows(), base_);
    for (const auto& tree : trees_)
      for (Eigen::Index r = 0; r < rows.rows(); ++r) out[r] += leaf_value(tree, rows.row(r));
    return out;
  }

  const std::vector<Tree>& trees() const { return trees_; }
  double base_score() const { return base_; }

 private:
  double leaf_value(const Tree& tree, const Eigen::Ref<const RowVector>& x) const {
    int k = 0;
    while (tree[static_cast<std::size_t>(k)].feature >= 0) {
      const Node& n = tree[static_cast<std::size_t>(k)];
      const double v = x[n.feature];
      bool go_left;
      if (spec_.columns[static_cast<std::size_t>(n.feature)].kind == ColumnKind::categorical) {
        const auto code = static_cast<std::size_t>(v);
        go_left = code < n.left_levels.size() && n.left_levels[code];
      } else {
        go_left = v < n.threshold;
      }
      k = go_left ? n.left : n.right;
    }
    return tree[static_cast<std::size_t>(k)].value;
  }

  void validate(const Tree& tree, std::size_t t) const {
    const std::string where = "tree " + std::to_string(t);
    if (tree.empty()) throw ModelError(where + " has no nodes");
    std::vector<int> seen(tree.size(), 0);
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const int k = stack.back();
      stack.pop_back();
      if (k < 0 || static_cast<std::size_t>(k) >= tree.size())
        throw ModelError(where + " refers to missing node " + std::to_string(k));
      if (seen[static_cast<std::size_t>(k)]++) throw ModelError(where + " is not a tree (node " + std::to_string(k) + " has two parents)");
      const Node& n = tree[static_cast<std::size_t>(k)];
      if (n.feature < 0) {
        if (!std::isfinite(n.value)) throw ModelError(where + ": non-finite leaf value");
        continue;
      }
      if (static_cast<std::size_t>(n.feature) >= spec_.size()) throw ModelError(where + ": split on unknown feature");
      if (spec_.columns[static_cast<std::size_t>(n.feature)].kind == ColumnKind::numeric && !std::isfinite(n.threshold))
        throw ModelError(where + ": non-finite threshold");
      stack.push_back(n.left);
      stack.push_back(n.right);
    }
    for (std::size_t k = 0; k < tree.size(); ++k)
      if (!seen[k]) throw ModelError(where + ": node " + std::to_string(k) + " is unreachable");
  }

  FeatureSpec spec_;
  std::vector<Tree> trees_;
  double base_;
};

/// Wraps a caller-supplied batch function; used by language bindings.
/// Invocations are serialized.
class CallbackPredictor : public Predictor {
 public:
  using Callback = std::function<Vector(const Dataset&)>;

  CallbackPredictor(FeatureSpec spec, Callback fn) : spec_(std::move(spec)), fn_(std::move(fn)) {}

  const FeatureSpec& feature_spec() const override { return spec_; }

  Vector predict(const Matrix& rows) const override {
    std::lock_guard<std::mutex> lock(mutex_);
    try {
      return fn_(Dataset{spec_, rows});
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw ModelError(std::string("prediction callback failed: ") + e.what());
    }
  }

 private:
  FeatureSpec spec_;
  Callback fn_;
  mutable std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Model files (JSON).
//
// linear:        {"type":"linear","features":[...],"intercept":b0,
//                 "coefficients":{"x":b, "cat":{"level":b, ...}}}
// tree_ensemble: {"type":"tree_ensemble","features":[...],"base_score":b,
//                 "trees":[{"nodes":[{"id":0,"split":"x","threshold":t,
//                   "left":1,"right":2}, {"id":1,"leaf":v},
//                   {"id":2,"split":"cat","left_levels":["a"],...}]}]}
//
// "features" uses the schema sidecar column layout.

inline std::unique_ptr<Predictor> linear_from_json(const nlohmann::json& j) {
  FeatureSpec spec = feature_spec_from_json(j.at("features"));
  std::vector<std::vector<double>> coef;
  const auto& cj = j.at("coefficients");
  for (const auto& col : spec.columns) {
    if (!cj.contains(col.name)) throw ModelError("linear model: no coefficient for '" + col.name + "'");
    if (col.kind == ColumnKind::numeric) {
      coef.push_back({cj.at(col.name).get<double>()});
    } else {
      std::vector<double> lv;
      for (const auto& l : col.levels) lv.push_back(cj.at(col.name).value(l, 0.0));
      coef.push_back(std::move(lv));
    }
  }
  return std::make_unique<LinearPredictor>(std::move(spec), j.value("intercept", 0.0), std::move(coef));
}

inline std::unique_ptr<Predictor> tree_ensemble_from_json(const nlohmann::json& j) {
  FeatureSpec spec = feature_spec_from_json(j.at("features"));
  std::vector<TreeEnsemblePredictor::Tree> trees;
  for (const auto& tj : j.at("trees")) {
    const auto& nodes = tj.at("nodes");
    TreeEnsemblePredictor::Tree tree(nodes.size());
    for (const auto& nj : nodes) {
      const int id = nj.at("id").get<int>();
      if (id < 0 || static_cast<std::size_t>(id) >= tree.size())
        throw ModelError("tree node id " + std::to_string(id) + " out of range");
      auto& n = tree[static_cast<std::size_t>(id)];
      if (nj.contains("leaf")) {
        n.value = nj.at("leaf").get<double>();
        continue;
      }
      const std::string feat = nj.at("split").get<std::string>();
      auto idx = spec.index_of(feat);
      if (!idx) throw ModelError("tree split on unknown feature '" + feat + "'");
      n.feature = static_cast<int>(*idx);
      n.left = nj.at("left").get<int>();
      n.right = nj.at("right").get<int>();
      const auto& col = spec.columns[*idx];
      if (col.kind == ColumnKind::categorical) {
        n.left_levels.assign(col.levels.size(), false);
        for (const auto& l : nj.at("left_levels")) {
          const int code = col.level_code(l.get<std::string>());
          if (code < 0) throw ModelError("tree split uses unknown level of '" + feat + "'");
          n.left_levels[static_cast<std::size_t>(code)] = true;
        }
      } else {
        n.threshold = nj.at("threshold").get<double>();
      }
    }
    trees.push_back(std::move(tree));
  }
  return std::make_unique<TreeEnsemblePredictor>(std::move(spec), std::move(trees), j.value("base_score", 0.0));
}

}  // namespace condshap
