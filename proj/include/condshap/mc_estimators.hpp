// Monte Carlo contribution-function estimators.
//
// A ConditionalSampler draws values for a target column set T given the
// values of a conditioning set C taken from a full-width row. Samplers either
// return K equally weighted rows, or a weighted set whose weights sum to one.
// An empty conditioning set means the marginal of T.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "condshap/coalition.hpp"
#include "condshap/common.hpp"
#include "condshap/data.hpp"
#include "condshap/model.hpp"

namespace condshap {

inline std::vector<int> mask_members(std::uint64_t mask) {
  std::vector<int> out;
  for (std::uint64_t b = mask; b; b &= b - 1) out.push_back(std::countr_zero(b));
  return out;
}

/// Rows over the target columns (increasing column index). `weights` empty
/// means equal weights.
struct SampleBatch {
  Matrix rows;
  std::vector<double> weights;

  bool weighted() const { return !weights.empty(); }
};

class ConditionalSampler {
 public:
  virtual ~ConditionalSampler() = default;
  virtual std::string name() const = 0;
  virtual SampleBatch sample(std::uint64_t target, std::uint64_t cond, const RowVector& x, int k, Rng& rng) const = 0;
};

namespace detail {

inline Matrix select_columns(const Matrix& data, const std::vector<int>& cols) {
  Matrix out(data.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = data.col(cols[j]);
  return out;
}

inline Matrix draw_rows(const Matrix& data, const std::vector<int>& cols, int k, Rng& rng) {
  Matrix out(k, static_cast<Eigen::Index>(cols.size()));
  const auto n = static_cast<std::uint64_t>(data.rows());
  for (int r = 0; r < k; ++r) {
    const auto i = static_cast<Eigen::Index>(uniform_index(rng, n));
    for (std::size_t j = 0; j < cols.size(); ++j) out(r, static_cast<Eigen::Index>(j)) = data(i, cols[j]);
  }
  return out;
}

inline void require_numeric(const FeatureSpec& spec, const std::string& who) {
  for (const auto& c : spec.columns)
    if (c.kind != ColumnKind::numeric)
      throw InvalidArgument("the " + who + " approach needs numeric features; '" + c.name + "' is categorical");
}

inline void require_rows(const Dataset& train) {
  if (train.n_rows() == 0) throw InvalidArgument("training data has no rows");
}

/// Cholesky of a symmetric positive (semi)definite matrix. Retries with a
/// diagonal jitter of 1e-8 * trace / dim, then falls back to an eigen square
/// root when the matrix is PSD up to rounding.
inline Matrix psd_sqrt(const Matrix& s) {
  const Eigen::Index d = s.rows();
  if (d == 0) return Matrix(0, 0);
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  const double jitter = 1e-8 * std::max(s.trace(), 0.0) / static_cast<double>(d);
  if (jitter > 0.0) {
    Eigen::LLT<Matrix> llt2(s + jitter * Matrix::Identity(d, d));
    if (llt2.info() == Eigen::Success) return llt2.matrixL();
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  const double scale = std::max(1.0, std::abs(s.trace()));
  if (es.eigenvalues().minCoeff() < -1e-9 * scale)
    throw EstimationError("conditional covariance is not positive semi-definite");
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

/// Solves S X = B for symmetric positive definite S with the jitter rule.
inline Matrix spd_solve(const Matrix& s, const Matrix& b) {
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() == Eigen::Success) return llt.solve(b);
  const Eigen::Index d = s.rows();
  const double jitter = 1e-8 * std::max(s.trace(), 0.0) / static_cast<double>(d);
  Eigen::LLT<Matrix> llt2(s + jitter * Matrix::Identity(d, d));
  if (jitter > 0.0 && llt2.info() == Eigen::Success) return llt2.solve(b);
  throw SingularSystemError("conditioning covariance block is singular");
}

struct MaskPairHash {
  std::size_t operator()(const std::pair<std::uint64_t, std::uint64_t>& p) const {
    return static_cast<std::size_t>(mix64(p.first ^ mix64(p.second)));
  }
};

/// Thread-safe memo keyed by (target, conditioning) masks.
template <class V>
class PairMemo {
 public:
  template <class F>
  std::shared_ptr<const V> get(std::uint64_t a, std::uint64_t b, F&& make) const {
    const auto key = std::make_pair(a, b);
    {
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = map_.find(key);
      if (it != map_.end()) return it->second;
    }
    auto value = std::make_shared<const V>(make());
    std::lock_guard<std::mutex> lock(mutex_);
    return map_.emplace(key, std::move(value)).first->second;
  }

 private:
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::pair<std::uint64_t, std::uint64_t>, std::shared_ptr<const V>, MaskPairHash> map_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Independence

/// Draws complement rows uniformly from the training data, ignoring the
/// conditioning values. With `all_rows` every training row is used once.
class IndependenceSampler : public ConditionalSampler {
 public:
  explicit IndependenceSampler(Dataset train, bool all_rows = false) : train_(std::move(train)), all_rows_(all_rows) {
    detail::require_rows(train_);
  }

  std::string name() const override { return "independence"; }

  SampleBatch sample(std::uint64_t target, std::uint64_t, const RowVector&, int k, Rng& rng) const override {
    const auto cols = mask_members(target);
    if (all_rows_) {
      const auto n = train_.n_rows();
      return {detail::select_columns(train_.values, cols), std::vector<double>(static_cast<std::size_t>(n), 1.0 / n)};
    }
    if (k < 1) throw InvalidArgument("K must be at least 1");
    return {detail::draw_rows(train_.values, cols, k, rng), {}};
  }

 private:
  Dataset train_;
  bool all_rows_;
};

// ---------------------------------------------------------------------------
// Gaussian

struct GaussianFit {
  Vector mu;
  Matrix sigma;
};

/// Sample mean and (n-1)-denominator covariance.
inline GaussianFit fit_gaussian(const Matrix& x) {
  if (x.rows() < 2) throw InvalidArgument("Gaussian fit needs at least two training rows");
  GaussianFit fit;
  fit.mu = x.colwise().mean().transpose();
  const Matrix c = x.rowwise() - fit.mu.transpose();
  fit.sigma = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  return fit;
}

struct ConditionalGaussian {
  Vector mu;
  Matrix sigma;
};

/// Conditional law of the target columns given the conditioning columns at
/// the values in x (full-width row).
inline ConditionalGaussian gaussian_condition(const GaussianFit& fit, std::uint64_t target, std::uint64_t cond,
                                              const RowVector& x) {
  const auto t = mask_members(target);
  const auto c = mask_members(cond);
  ConditionalGaussian out;
  out.mu.resize(static_cast<Eigen::Index>(t.size()));
  out.sigma.resize(static_cast<Eigen::Index>(t.size()), static_cast<Eigen::Index>(t.size()));
  for (std::size_t a = 0; a < t.size(); ++a) {
    out.mu[static_cast<Eigen::Index>(a)] = fit.mu[t[a]];
    for (std::size_t b = 0; b < t.size(); ++b)
      out.sigma(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = fit.sigma(t[a], t[b]);
  }
  if (c.empty()) return out;
  Matrix s_cc(static_cast<Eigen::Index>(c.size()), static_cast<Eigen::Index>(c.size()));
  Matrix s_ct(static_cast<Eigen::Index>(c.size()), static_cast<Eigen::Index>(t.size()));
  Vector dx(static_cast<Eigen::Index>(c.size()));
  for (std::size_t a = 0; a < c.size(); ++a) {
    dx[static_cast<Eigen::Index>(a)] = x[c[a]] - fit.mu[c[a]];
    for (std::size_t b = 0; b < c.size(); ++b)
      s_cc(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = fit.sigma(c[a], c[b]);
    for (std::size_t b = 0; b < t.size(); ++b)
      s_ct(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = fit.sigma(c[a], t[b]);
  }
  const Matrix gain = detail::spd_solve(s_cc, s_ct);  // Sigma_CC^{-1} Sigma_CT
  out.mu += gain.transpose() * dx;
  out.sigma -= s_ct.transpose() * gain;
  out.sigma = 0.5 * (out.sigma + out.sigma.transpose());
  return out;
}

/// Multivariate normal sampler. Draws are mu_cond + L z with z from the
/// supplied stream, so explicands sharing a stream share their base draws.
class GaussianSampler : public ConditionalSampler {
 public:
  explicit GaussianSampler(GaussianFit fit) : fit_(std::move(fit)) {
    if (fit_.sigma.rows() != fit_.mu.size() || fit_.sigma.cols() != fit_.mu.size())
      throw InvalidArgument("Gaussian fit dimensions disagree");
  }

  explicit GaussianSampler(const Dataset& train) : GaussianSampler(fit_numeric(train)) {}

  std::string name() const override { return "gaussian"; }
  const GaussianFit& fit() const { return fit_; }

  SampleBatch sample(std::uint64_t target, std::uint64_t cond, const RowVector& x, int k, Rng& rng) const override {
    if (k < 1) throw InvalidArgument("K must be at least 1");
    const auto plan = plan_for(target, cond);
    const auto c = mask_members(cond);
    Vector mu = plan->mu_t;
    if (!c.empty()) {
      Vector dx(static_cast<Eigen::Index>(c.size()));
      for (std::size_t a = 0; a < c.size(); ++a) dx[static_cast<Eigen::Index>(a)] = x[c[a]] - fit_.mu[c[a]];
      mu += plan->gain_t * dx;
    }
    const Eigen::Index d = mu.size();
    Matrix z(d, k);
    for (int r = 0; r < k; ++r)
      for (Eigen::Index j = 0; j < d; ++j) z(j, r) = standard_normal(rng);
    Matrix rows = (plan->root * z).transpose();
    rows.rowwise() += mu.transpose();
    return {std::move(rows), {}};
  }

 private:
  struct Plan {
    Vector mu_t;
    Matrix gain_t;  // Sigma_TC Sigma_CC^{-1}
    Matrix root;    // square root of the conditional covariance
  };

  static GaussianFit fit_numeric(const Dataset& train) {
    detail::require_numeric(train.schema, "gaussian");
    return fit_gaussian(train.values);
  }

  std::shared_ptr<const Plan> plan_for(std::uint64_t target, std::uint64_t cond) const {
    return memo_.get(target, cond, [&] {
      const auto t = mask_members(target);
      const auto c = mask_members(cond);
      Plan p;
      // the conditional covariance does not depend on the conditioning values
      const auto cg = gaussian_condition(fit_, target, cond, RowVector::Zero(fit_.mu.size()));
      p.mu_t.resize(static_cast<Eigen::Index>(t.size()));
      for (std::size_t a = 0; a < t.size(); ++a) p.mu_t[static_cast<Eigen::Index>(a)] = fit_.mu[t[a]];
      if (!c.empty()) {
        Matrix s_cc(static_cast<Eigen::Index>(c.size()), static_cast<Eigen::Index>(c.size()));
        Matrix s_ct(static_cast<Eigen::Index>(c.size()), static_cast<Eigen::Index>(t.size()));
        for (std::size_t a = 0; a < c.size(); ++a) {
          for (std::size_t b = 0; b < c.size(); ++b)
            s_cc(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = fit_.sigma(c[a], c[b]);
          for (std::size_t b = 0; b < t.size(); ++b)
            s_ct(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = fit_.sigma(c[a], t[b]);
        }
        p.gain_t = detail::spd_solve(s_cc, s_ct).transpose();
      }
      p.root = detail::psd_sqrt(cg.sigma);
      return p;
    });
  }

  GaussianFit fit_;
  detail::PairMemo<Plan> memo_;
};

// ---------------------------------------------------------------------------
// Gaussian copula

/// Empirical-margin Gaussian copula. Margins map to normal scores through
/// rank / (n + 1); samples map back through the left-continuous empirical
/// quantile of the training column.
class CopulaSampler : public ConditionalSampler {
 public:
  explicit CopulaSampler(const Dataset& train) : train_(train.values) {
    detail::require_numeric(train.schema, "copula");
    if (train_.rows() < 2) throw InvalidArgument("copula needs at least two training rows");
    const Eigen::Index n = train_.rows();
    sorted_.resize(static_cast<std::size_t>(train_.cols()));
    Matrix scores(n, train_.cols());
    for (Eigen::Index j = 0; j < train_.cols(); ++j) {
      auto& s = sorted_[static_cast<std::size_t>(j)];
      s.assign(train_.col(j).data(), train_.col(j).data() + n);
      std::sort(s.begin(), s.end());
      for (Eigen::Index i = 0; i < n; ++i) scores(i, j) = to_score(j, train_(i, j));
    }
    gaussian_ = std::make_unique<GaussianSampler>(fit_gaussian(scores));
  }

  std::string name() const override { return "copula"; }

  /// Phi^{-1}(F(x)) with average ranks for ties.
  double to_score(Eigen::Index j, double x) const {
    const auto& s = sorted_[static_cast<std::size_t>(j)];
    const double n = static_cast<double>(s.size());
    const double below = static_cast<double>(std::lower_bound(s.begin(), s.end(), x) - s.begin());
    const double upto = static_cast<double>(std::upper_bound(s.begin(), s.end(), x) - s.begin());
    double rank = upto > below ? 0.5 * (below + 1 + upto) : below + 0.5;
    rank = std::clamp(rank, 0.5, n + 0.5);
    return boost::math::quantile(boost::math::normal(), rank / (n + 1.0));
  }

  /// F^{-1}(Phi(v)): smallest training value whose empirical CDF reaches u.
  double from_score(Eigen::Index j, double v) const {
    const auto& s = sorted_[static_cast<std::size_t>(j)];
    const double u = boost::math::cdf(boost::math::normal(), v);
    const double n = static_cast<double>(s.size());
    const auto idx = static_cast<std::size_t>(std::clamp(std::ceil(u * n) - 1.0, 0.0, n - 1.0));
    return s[idx];
  }

  SampleBatch sample(std::uint64_t target, std::uint64_t cond, const RowVector& x, int k, Rng& rng) const override {
    const auto t = mask_members(target);
    if (cond == 0) return {detail::draw_rows(train_, t, k, rng), {}};
    RowVector xs = RowVector::Zero(x.size());
    for (int c : mask_members(cond)) xs[c] = to_score(c, x[c]);
    SampleBatch b = gaussian_->sample(target, cond, xs, k, rng);
    for (Eigen::Index r = 0; r < b.rows.rows(); ++r)
      for (std::size_t a = 0; a < t.size(); ++a)
        b.rows(r, static_cast<Eigen::Index>(a)) = from_score(t[a], b.rows(r, static_cast<Eigen::Index>(a)));
    return b;
  }

 private:
  Matrix train_;
  std::vector<std::vector<double>> sorted_;
  std::unique_ptr<GaussianSampler> gaussian_;
};

// ---------------------------------------------------------------------------
// Empirical

struct EmpiricalConfig {
  double sigma = 0.1;
  double eta = 0.95;
};

/// Kernel-weighted training rows: D^2 is the Mahalanobis distance on the
/// conditioning columns divided by their count, w = exp(-D^2 / (2 sigma^2)).
/// The heaviest rows are kept until their share of the total weight exceeds
/// eta.
class EmpiricalSampler : public ConditionalSampler {
 public:
  EmpiricalSampler(const Dataset& train, EmpiricalConfig config = {}) : train_(train.values), config_(config) {
    detail::require_numeric(train.schema, "empirical");
    detail::require_rows(train);
    if (!(config_.sigma > 0.0)) throw InvalidArgument("empirical sigma must be positive");
    if (!(config_.eta > 0.0 && config_.eta <= 1.0)) throw InvalidArgument("empirical eta must lie in (0, 1]");
    cov_ = train_.rows() >= 2 ? fit_gaussian(train_).sigma : Matrix::Identity(train_.cols(), train_.cols());
  }

  std::string name() const override { return "empirical"; }

  SampleBatch sample(std::uint64_t target, std::uint64_t cond, const RowVector& x, int k, Rng& rng) const override {
    const auto t = mask_members(target);
    if (cond == 0) return {detail::draw_rows(train_, t, k, rng), {}};
    const auto w = weights(cond, x);
    const Eigen::Index n = train_.rows();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return w[a] > w[b]; });
    const double total = w.sum();
    double acc = 0.0;
    std::size_t keep = order.size();
    for (std::size_t l = 0; l < order.size(); ++l) {
      acc += w[order[l]];
      if (acc / total > config_.eta) {
        keep = l + 1;
        break;
      }
    }
    SampleBatch b;
    b.rows.resize(static_cast<Eigen::Index>(keep), static_cast<Eigen::Index>(t.size()));
    double kept = 0.0;
    for (std::size_t l = 0; l < keep; ++l) kept += w[order[l]];
    for (std::size_t l = 0; l < keep; ++l) {
      for (std::size_t a = 0; a < t.size(); ++a)
        b.rows(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(a)) = train_(order[l], t[a]);
      b.weights.push_back(w[order[l]] / kept);
    }
    return b;
  }

  /// Unnormalized kernel weights of every training row, scaled so the
  /// largest is 1.
  Vector weights(std::uint64_t cond, const RowVector& x) const {
    const auto c = mask_members(cond);
    const auto prec = precision_for(cond);
    const Eigen::Index n = train_.rows();
    Vector d2(n);
    Vector diff(static_cast<Eigen::Index>(c.size()));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < c.size(); ++a) diff[static_cast<Eigen::Index>(a)] = x[c[a]] - train_(i, c[a]);
      d2[i] = diff.dot(*prec * diff) / static_cast<double>(c.size());
    }
    const double shift = d2.minCoeff();
    Vector w(n);
    for (Eigen::Index i = 0; i < n; ++i) w[i] = std::exp(-(d2[i] - shift) / (2.0 * config_.sigma * config_.sigma));
    return w;
  }

 private:
  std::shared_ptr<const Matrix> precision_for(std::uint64_t cond) const {
    return memo_.get(cond, 0, [&] {
      const auto c = mask_members(cond);
      Matrix s(static_cast<Eigen::Index>(c.size()), static_cast<Eigen::Index>(c.size()));
      for (std::size_t a = 0; a < c.size(); ++a)
        for (std::size_t b = 0; b < c.size(); ++b)
          s(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = cov_(c[a], c[b]);
      return detail::spd_solve(s, Matrix::Identity(s.rows(), s.cols()));
    });
  }

  Matrix train_;
  Matrix cov_;
  EmpiricalConfig config_;
  detail::PairMemo<Matrix> memo_;
};

// ---------------------------------------------------------------------------
// Categorical

/// Joint frequency table over fully categorical rows. Conditionals are exact
/// ratios of counts; tuples are visited in lexicographic code order.
class CategoricalSampler : public ConditionalSampler {
 public:
  /// `smoothing` adds one pseudo-count to every target tuple observed in the
  /// training data, so unseen conditioning values fall back to uniform.
  explicit CategoricalSampler(const Dataset& train, bool smoothing = false) : schema_(train.schema), smoothing_(smoothing) {
    detail::require_rows(train);
    for (const auto& c : train.schema.columns)
      if (c.kind != ColumnKind::categorical)
        throw InvalidArgument("the categorical approach needs categorical features; '" + c.name + "' is numeric");
    for (Eigen::Index r = 0; r < train.n_rows(); ++r) {
      std::vector<int> key(static_cast<std::size_t>(train.n_cols()));
      for (Eigen::Index c = 0; c < train.n_cols(); ++c) key[static_cast<std::size_t>(c)] = static_cast<int>(train.values(r, c));
      ++counts_[key];
    }
  }

  std::string name() const override { return "categorical"; }

  const std::map<std::vector<int>, std::uint64_t>& counts() const { return counts_; }

  SampleBatch sample(std::uint64_t target, std::uint64_t cond, const RowVector& x, int, Rng&) const override {
    const auto t = mask_members(target);
    const auto c = mask_members(cond);
    std::map<std::vector<int>, double> proj;
    double n_cond = 0.0;
    for (const auto& [key, count] : counts_) {
      std::vector<int> z(t.size());
      for (std::size_t a = 0; a < t.size(); ++a) z[a] = key[static_cast<std::size_t>(t[a])];
      if (smoothing_) {
        proj[z] += 1.0;
        n_cond += 1.0;
      }
      bool match = true;
      for (int j : c) match = match && key[static_cast<std::size_t>(j)] == static_cast<int>(x[j]);
      if (!match) continue;
      proj[z] += static_cast<double>(count);
      n_cond += static_cast<double>(count);
    }
    if (proj.empty() || n_cond == 0.0) {
      std::string what;
      for (int j : c) what += (what.empty() ? "" : ", ") + schema_.columns[static_cast<std::size_t>(j)].name + "=" +
                              schema_.columns[static_cast<std::size_t>(j)].levels.at(static_cast<std::size_t>(x[j]));
      throw EstimationError("unseen combination of conditioning values (" + what + ")");
    }
    SampleBatch b;
    b.rows.resize(static_cast<Eigen::Index>(proj.size()), static_cast<Eigen::Index>(t.size()));
    Eigen::Index r = 0;
    for (const auto& [z, count] : proj) {
      for (std::size_t a = 0; a < t.size(); ++a) b.rows(r, static_cast<Eigen::Index>(a)) = z[a];
      b.weights.push_back(count / n_cond);
      ++r;
    }
    return b;
  }

 private:
  FeatureSpec schema_;
  bool smoothing_;
  std::map<std::vector<int>, std::uint64_t> counts_;
};

// ---------------------------------------------------------------------------
// v(S) estimation

/// v(S) per explicand plus the Monte Carlo standard error of each value
/// (zero for weighted, deterministic sample sets).
struct VSEstimate {
  Vector value;
  Vector se;
};

/// Draws complement rows for one explicand.
using ComplementDraw = std::function<SampleBatch(const RowVector& x, Rng& rng)>;

/// Mean of f over complement draws, with x_S fixed to the explicand values.
/// Every explicand starts from the same generator state (common random
/// numbers across explicands).
inline VSEstimate estimate_vS_draws(const ComplementDraw& draw, const Predictor& predictor, std::uint64_t s_mask,
                                    const Matrix& x_explain, std::uint64_t seed) {
  const int m = static_cast<int>(x_explain.cols());
  if (s_mask == 0 || s_mask == full_mask(m))
    throw InvalidArgument("v(S) estimation is for interior coalitions; the empty and grand coalitions are exact");
  const auto comp = mask_members(full_mask(m) & ~s_mask);
  const Eigen::Index n = x_explain.rows();
  std::vector<SampleBatch> batches(static_cast<std::size_t>(n));
  Eigen::Index total = 0;
  const Rng base(seed);
  for (Eigen::Index i = 0; i < n; ++i) {
    Rng rng = base;
    batches[static_cast<std::size_t>(i)] = draw(x_explain.row(i), rng);
    const auto& b = batches[static_cast<std::size_t>(i)];
    if (b.rows.cols() != static_cast<Eigen::Index>(comp.size()))
      throw EstimationError("sampler returned " + std::to_string(b.rows.cols()) + " columns for a complement of size " +
                            std::to_string(comp.size()));
    if (b.rows.rows() == 0) throw EstimationError("sampler returned no rows");
    total += b.rows.rows();
  }
  Matrix rows(total, m);
  Eigen::Index r0 = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& b = batches[static_cast<std::size_t>(i)];
    for (Eigen::Index r = 0; r < b.rows.rows(); ++r) {
      rows.row(r0 + r) = x_explain.row(i);
      for (std::size_t a = 0; a < comp.size(); ++a) rows(r0 + r, comp[a]) = b.rows(r, static_cast<Eigen::Index>(a));
    }
    r0 += b.rows.rows();
  }
  const Vector f = predict_batch(predictor, Dataset{predictor.feature_spec(), rows});
  VSEstimate out{Vector(n), Vector::Zero(n)};
  r0 = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& b = batches[static_cast<std::size_t>(i)];
    const Eigen::Index k = b.rows.rows();
    if (b.weighted()) {
      double acc = 0.0;
      for (Eigen::Index r = 0; r < k; ++r) acc += b.weights[static_cast<std::size_t>(r)] * f[r0 + r];
      out.value[i] = acc;
    } else {
      const double mean = f.segment(r0, k).mean();
      out.value[i] = mean;
      if (k > 1) out.se[i] = std::sqrt((f.segment(r0, k).array() - mean).square().sum() / (k - 1) / k);
    }
    r0 += k;
  }
  return out;
}

/// Conditional v(S): complement drawn given x_S.
inline VSEstimate estimate_vS_mc(const ConditionalSampler& sampler, const Predictor& predictor, std::uint64_t s_mask,
                                 const Matrix& x_explain, int k, std::uint64_t seed) {
  const std::uint64_t comp = full_mask(static_cast<int>(x_explain.cols())) & ~s_mask;
  return estimate_vS_draws([&](const RowVector& x, Rng& rng) { return sampler.sample(comp, s_mask, x, k, rng); },
                           predictor, s_mask, x_explain, seed);
}

/// Exact categorical v(S) for a single explicand.
inline double categorical_vS(const CategoricalSampler& table, const Predictor& predictor, std::uint64_t s_mask,
                             const RowVector& x) {
  return estimate_vS_mc(table, predictor, s_mask, Matrix(x), 1, 0).value[0];
}

// ---------------------------------------------------------------------------
// Combined approaches

/// Approach for a coalition of `size` players given one name per size
/// 1..M-1.
inline const std::string& combined_approach_dispatch(const std::vector<std::string>& per_size, int size) {
  if (size < 1 || static_cast<std::size_t>(size) > per_size.size())
    throw InvalidArgument("no approach configured for coalition size " + std::to_string(size) +
                          " (boundary coalitions are not estimated)");
  return per_size[static_cast<std::size_t>(size - 1)];
}

}  // namespace condshap
