// Forecast explanations. A forecast starting at time t (1-based) covers
// t+1..t+h. Its lagged feature row holds, per endogenous series s,
// s.1..s.p = y_s[t], y_s[t-1], ..., and per exogenous series x,
// x.1..x.L = x[t], x[t-1], ... followed by x.F1..x.Fh = x[t+1]..x[t+h].

#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "condshap/common.hpp"
#include "condshap/data.hpp"
#include "condshap/explain.hpp"
#include "condshap/external_model.hpp"
#include "condshap/model.hpp"

namespace condshap {

using Series = std::pair<std::string, std::vector<double>>;

struct TimeSeriesData {
  std::vector<Series> y;     // endogenous, equal lengths T
  std::vector<Series> xreg;  // exogenous, length >= T + h

  std::size_t length() const { return y.empty() ? 0 : y.front().second.size(); }

  void validate(int horizon) const {
    if (y.empty()) throw ValidationError("at least one endogenous series is required");
    for (const auto& s : y)
      if (s.second.size() != length())
        throw ValidationError("endogenous series '" + s.first + "' has length " + std::to_string(s.second.size()) +
                              ", expected " + std::to_string(length()));
    for (const auto& s : xreg)
      if (s.second.size() < length() + static_cast<std::size_t>(horizon))
        throw ValidationError("exogenous series '" + s.first + "' has " + std::to_string(s.second.size()) +
                              " observations; it must extend " + std::to_string(horizon) +
                              " steps past the endogenous series (" + std::to_string(length() + horizon) + ")");
  }
};

struct LagSpec {
  std::vector<int> y;     // lags per endogenous series
  std::vector<int> xreg;  // lags per exogenous series
  int horizon = 1;

  int max_lag() const {
    int m = 1;
    for (int l : y) m = std::max(m, l);
    for (int l : xreg) m = std::max(m, l);
    return m;
  }
};

inline void check_lags(const TimeSeriesData& data, const LagSpec& lags) {
  if (lags.horizon < 1) throw InvalidArgument("horizon must be at least 1");
  if (lags.y.size() != data.y.size())
    throw InvalidArgument("explain_y_lags needs one entry per endogenous series (" + std::to_string(data.y.size()) + ")");
  if (lags.xreg.size() != data.xreg.size())
    throw InvalidArgument("explain_xreg_lags needs one entry per exogenous series (" + std::to_string(data.xreg.size()) +
                          ")");
  for (int l : lags.y)
    if (l < 1) throw InvalidArgument("every endogenous series needs at least one lag");
  for (int l : lags.xreg)
    if (l < 0) throw InvalidArgument("exogenous lag counts cannot be negative");
}

inline std::vector<std::string> forecast_feature_names(const std::vector<std::string>& y_names,
                                                       const std::vector<std::string>& xreg_names, const LagSpec& lags) {
  std::vector<std::string> out;
  for (std::size_t s = 0; s < y_names.size(); ++s)
    for (int l = 1; l <= lags.y[s]; ++l) out.push_back(y_names[s] + "." + std::to_string(l));
  for (std::size_t s = 0; s < xreg_names.size(); ++s) {
    for (int l = 1; l <= lags.xreg[s]; ++l) out.push_back(xreg_names[s] + "." + std::to_string(l));
    for (int q = 1; q <= lags.horizon; ++q) out.push_back(xreg_names[s] + ".F" + std::to_string(q));
  }
  return out;
}

inline std::vector<std::string> series_names(const std::vector<Series>& s) {
  std::vector<std::string> out;
  for (const auto& x : s) out.push_back(x.first);
  return out;
}

/// One group per variable holding all of its columns.
inline GroupSpec lag_groups(const TimeSeriesData& data, const LagSpec& lags) {
  GroupSpec g;
  for (std::size_t s = 0; s < data.y.size(); ++s) {
    std::vector<std::string> cols;
    for (int l = 1; l <= lags.y[s]; ++l) cols.push_back(data.y[s].first + "." + std::to_string(l));
    g.groups.emplace_back(data.y[s].first, std::move(cols));
  }
  for (std::size_t s = 0; s < data.xreg.size(); ++s) {
    std::vector<std::string> cols;
    for (int l = 1; l <= lags.xreg[s]; ++l) cols.push_back(data.xreg[s].first + "." + std::to_string(l));
    for (int q = 1; q <= lags.horizon; ++q) cols.push_back(data.xreg[s].first + ".F" + std::to_string(q));
    g.groups.emplace_back(data.xreg[s].first, std::move(cols));
  }
  return g;
}

/// Highest forecast origin with complete data through the horizon.
inline int last_valid_index(const TimeSeriesData& data, int horizon) {
  auto last = static_cast<long long>(data.length());
  for (const auto& s : data.xreg) last = std::min<long long>(last, static_cast<long long>(s.second.size()) - horizon);
  return static_cast<int>(last);
}

/// Lagged design with one row per (1-based) index.
inline Dataset build_lagged_design(const TimeSeriesData& data, const std::vector<int>& idx, const LagSpec& lags) {
  check_lags(data, lags);
  data.validate(lags.horizon);
  const auto names = forecast_feature_names(series_names(data.y), series_names(data.xreg), lags);
  Matrix v(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(names.size()));
  const int last = last_valid_index(data, lags.horizon);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const int t = idx[r];
    if (t < lags.max_lag())
      throw ValidationError("time index " + std::to_string(t) + " has too little history for " +
                            std::to_string(lags.max_lag()) + " lags");
    if (t > last) throw ValidationError("time index " + std::to_string(t) + " lies beyond the available data");
    Eigen::Index c = 0;
    const auto at = [](const std::vector<double>& s, int time) { return s[static_cast<std::size_t>(time - 1)]; };
    for (std::size_t s = 0; s < data.y.size(); ++s)
      for (int l = 1; l <= lags.y[s]; ++l) v(static_cast<Eigen::Index>(r), c++) = at(data.y[s].second, t - l + 1);
    for (std::size_t s = 0; s < data.xreg.size(); ++s) {
      for (int l = 1; l <= lags.xreg[s]; ++l) v(static_cast<Eigen::Index>(r), c++) = at(data.xreg[s].second, t - l + 1);
      for (int q = 1; q <= lags.horizon; ++q) v(static_cast<Eigen::Index>(r), c++) = at(data.xreg[s].second, t + q);
    }
  }
  return make_dataset(numeric_spec(names), std::move(v));
}

/// All indices with enough history, up to `last`, minus explain_idx.
inline std::vector<int> default_train_idx(int last, const std::vector<int>& explain_idx, int max_lag) {
  std::vector<int> out;
  for (int t = std::max(1, max_lag); t <= last; ++t)
    if (std::find(explain_idx.begin(), explain_idx.end(), t) == explain_idx.end()) out.push_back(t);
  if (out.empty()) throw ValidationError("no training indices remain after removing explain_idx");
  return out;
}

// ---------------------------------------------------------------------------
// Forecast models

/// Maps lagged rows to h forecasts each.
class ForecastPredictor {
 public:
  virtual ~ForecastPredictor() = default;
  virtual const FeatureSpec& feature_spec() const = 0;
  virtual int horizon() const = 0;
  virtual Matrix predict(const Matrix& rows) const = 0;
};

/// Output q (1-based) of a forecast model as an ordinary predictor.
class HorizonPredictor : public Predictor {
 public:
  HorizonPredictor(const ForecastPredictor& model, int q) : model_(model), q_(q) {
    if (q < 1 || q > model.horizon()) throw InvalidArgument("horizon step out of range");
  }
  const FeatureSpec& feature_spec() const override { return model_.feature_spec(); }
  Vector predict(const Matrix& rows) const override {
    const Matrix out = model_.predict(rows);
    if (out.rows() != rows.rows() || out.cols() != model_.horizon())
      throw ModelError("forecast model returned " + std::to_string(out.rows()) + "x" + std::to_string(out.cols()) +
                       " values, expected " + std::to_string(rows.rows()) + "x" + std::to_string(model_.horizon()));
    return out.col(q_ - 1);
  }

 private:
  const ForecastPredictor& model_;
  int q_;
};

/// Least-squares ARX model for one endogenous series:
///   y[s] = c + sum_l a_l y[s-l] + sum_x (g_x x[s] + sum_l b_xl x[s-l])
/// with lags 1..p for y and 1..L_x for each exogenous series. Multi-step
/// forecasts are iterated, feeding predictions back as lags.
class ArxPredictor : public ForecastPredictor {
 public:
  ArxPredictor(const TimeSeriesData& data, const LagSpec& lags, int n_fit) : lags_(lags) {
    check_lags(data, lags);
    if (data.y.size() != 1) throw InvalidArgument("the built-in ARX model supports one endogenous series");
    const int p = lags.y[0];
    const int start = lags.max_lag() + 1;
    if (n_fit > static_cast<int>(data.length())) throw InvalidArgument("n_fit exceeds the series length");
    const int n = n_fit - start + 1;
    const int n_par = 1 + p + static_cast<int>(lags.xreg.size()) + sum_xlags();
    if (n < n_par + 1) throw InvalidArgument("too few observations to fit the ARX model");
    Matrix x(n, n_par);
    Vector y(n);
    const auto& ys = data.y[0].second;
    for (int s = start, r = 0; s <= n_fit; ++s, ++r) {
      int c = 0;
      x(r, c++) = 1.0;
      for (int l = 1; l <= p; ++l) x(r, c++) = ys[static_cast<std::size_t>(s - l - 1)];
      for (std::size_t k = 0; k < lags.xreg.size(); ++k) {
        const auto& xs = data.xreg[k].second;
        x(r, c++) = xs[static_cast<std::size_t>(s - 1)];
        for (int l = 1; l <= lags.xreg[k]; ++l) x(r, c++) = xs[static_cast<std::size_t>(s - l - 1)];
      }
      y[r] = ys[static_cast<std::size_t>(s - 1)];
    }
    Eigen::ColPivHouseholderQR<Matrix> qr(x);
    if (qr.rank() < n_par) throw SingularSystemError("ARX design is rank deficient");
    coef_ = qr.solve(y);
    spec_ = numeric_spec(forecast_feature_names(series_names(data.y), series_names(data.xreg), lags));
  }

  const FeatureSpec& feature_spec() const override { return spec_; }
  int horizon() const override { return lags_.horizon; }
  const Vector& coefficients() const { return coef_; }

  Matrix predict(const Matrix& rows) const override {
    const int p = lags_.y[0], h = lags_.horizon;
    Matrix out(rows.rows(), h);
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      // y_at(j) is y[t + j]; j <= 0 from the lag columns, j >= 1 predicted
      std::vector<double> pred;
      auto y_at = [&](int j) { return j >= 1 ? pred[static_cast<std::size_t>(j - 1)] : rows(r, -j); };
      for (int q = 1; q <= h; ++q) {
        int c = 0;
        double f = coef_[c++];
        for (int l = 1; l <= p; ++l) f += coef_[c++] * y_at(q - l);
        Eigen::Index base = p;
        for (std::size_t k = 0; k < lags_.xreg.size(); ++k) {
          const int lx = lags_.xreg[k];
          // x[t + j]: j <= 0 from x.(1-j), j >= 1 from x.Fj
          auto x_at = [&](int j) { return j >= 1 ? rows(r, base + lx + j - 1) : rows(r, base - j); };
          f += coef_[c++] * x_at(q);
          for (int l = 1; l <= lx; ++l) f += coef_[c++] * x_at(q - l);
          base += lx + h;
        }
        pred.push_back(f);
      }
      for (int q = 0; q < h; ++q) out(r, q) = pred[static_cast<std::size_t>(q)];
    }
    return out;
  }

 private:
  int sum_xlags() const {
    int s = 0;
    for (int l : lags_.xreg) s += l;
    return s;
  }

  LagSpec lags_;
  FeatureSpec spec_;
  Vector coef_;
};

/// Forecast model behind the subprocess protocol (horizon field set).
class ExternalForecastPredictor : public ForecastPredictor {
 public:
  ExternalForecastPredictor(FeatureSpec spec, ExternalModelSpec cmd, int horizon)
      : spec_(std::move(spec)), cmd_(std::move(cmd)), horizon_(horizon) {}
  const FeatureSpec& feature_spec() const override { return spec_; }
  int horizon() const override { return horizon_; }
  Matrix predict(const Matrix& rows) const override {
    return external_predict(cmd_, make_dataset(spec_, rows), horizon_);
  }

 private:
  FeatureSpec spec_;
  ExternalModelSpec cmd_;
  int horizon_;
};

// ---------------------------------------------------------------------------

struct ForecastTask {
  std::optional<std::vector<int>> train_idx;  // default: every valid index not explained
  std::vector<int> explain_idx;
  LagSpec lags;
  bool group_lags = true;
  std::vector<double> phi0;  // one per horizon step
};

struct ForecastExplanation {
  std::vector<int> explain_idx;
  std::vector<int> train_idx;
  std::vector<std::string> player_names;  // "none" first
  std::vector<Explanation> per_horizon;

  /// Rows ordered by horizon, then explain index: explain_idx, horizon,
  /// none, players...
  Matrix table() const {
    const auto n = static_cast<Eigen::Index>(explain_idx.size());
    const auto width = static_cast<Eigen::Index>(player_names.size());
    Matrix out(n * static_cast<Eigen::Index>(per_horizon.size()), 2 + width);
    for (std::size_t q = 0; q < per_horizon.size(); ++q)
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index r = static_cast<Eigen::Index>(q) * n + i;
        out(r, 0) = explain_idx[static_cast<std::size_t>(i)];
        out(r, 1) = static_cast<double>(q + 1);
        out.row(r).tail(width) = per_horizon[q].phi.row(i);
      }
    return out;
  }
};

/// Explains every horizon step with the standard pipeline. Conditional
/// samplers are fitted once and shared across steps.
inline ForecastExplanation explain_forecast(const ForecastPredictor& model, const TimeSeriesData& data,
                                            const ForecastTask& task, const ExplainConfig& base) {
  check_lags(data, task.lags);
  data.validate(task.lags.horizon);
  if (model.horizon() != task.lags.horizon)
    throw ValidationError("forecast model produces " + std::to_string(model.horizon()) + " steps, task horizon is " +
                          std::to_string(task.lags.horizon));
  if (task.phi0.size() != static_cast<std::size_t>(task.lags.horizon))
    throw InvalidArgument("phi0 needs one value per horizon step (" + std::to_string(task.lags.horizon) + "), got " +
                          std::to_string(task.phi0.size()));
  if (task.explain_idx.empty()) throw InvalidArgument("explain_idx is empty");

  ForecastExplanation out;
  out.explain_idx = task.explain_idx;
  out.train_idx = task.train_idx ? *task.train_idx
                                 : default_train_idx(last_valid_index(data, task.lags.horizon), task.explain_idx,
                                                     task.lags.max_lag());
  const Dataset train = build_lagged_design(data, out.train_idx, task.lags);
  const Dataset x_explain = build_lagged_design(data, task.explain_idx, task.lags);

  ExplainConfig config = base;
  if (task.group_lags) config.groups = lag_groups(data, task.lags);
  if (!config.sampler_cache) config.sampler_cache = std::make_shared<SamplerCache>();
  for (int q = 1; q <= task.lags.horizon; ++q) {
    ExplainConfig cq = config;
    cq.phi0 = task.phi0[static_cast<std::size_t>(q - 1)];
    if (!base.saving_path.empty()) cq.saving_path = base.saving_path + ".h" + std::to_string(q);
    if (cq.reporter) cq.reporter->phase("forecast horizon " + std::to_string(q) + "/" + std::to_string(task.lags.horizon));
    HorizonPredictor hp(model, q);
    out.per_horizon.push_back(explain(hp, train, x_explain, cq));
  }
  out.player_names = out.per_horizon.front().player_names;
  return out;
}

}  // namespace condshap
