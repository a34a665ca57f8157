// End-to-end explanation: estimator setup, batched v(S) evaluation, the
// iterative sampling loop with convergence detection, and persisted state
// for continued estimation.

#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "condshap/causal.hpp"
#include "condshap/coalition.hpp"
#include "condshap/common.hpp"
#include "condshap/ctree.hpp"
#include "condshap/data.hpp"
#include "condshap/evaluation.hpp"
#include "condshap/mc_estimators.hpp"
#include "condshap/model.hpp"
#include "condshap/regression_estimators.hpp"
#include "condshap/report.hpp"
#include "condshap/solver.hpp"

namespace condshap {

inline constexpr std::size_t kDefaultMaxCoalitions = 2048;
inline constexpr int kDirectPlayerLimit = 5;

using SamplerCache = std::map<std::string, std::shared_ptr<const ConditionalSampler>>;

struct ExplainConfig {
  /// One approach, or one per coalition size 1..P-1 (P players).
  std::vector<std::string> approach{"gaussian"};
  double phi0 = std::numeric_limits<double>::quiet_NaN();

  std::optional<std::size_t> max_n_coalitions;
  /// Unset: iterative when there are more than five players.
  std::optional<bool> iterative;
  double convergence_tol = 0.01;
  std::optional<std::size_t> initial_n_coalitions;
  int max_iterations = 20;
  int n_boot = 100;

  bool paired = true;
  Reweighting reweighting = Reweighting::c_kernel;
  bool semi_deterministic = false;
  double boundary_weight = kDefaultBoundaryWeight;
  bool exact_boundary = true;

  int n_mc_samples = 1000;
  std::uint64_t seed = 1;

  std::optional<GroupSpec> groups;

  bool asymmetric = false;
  /// Components as player names (features, or groups when grouped).
  std::optional<std::vector<std::vector<std::string>>> causal_ordering;
  std::optional<std::vector<bool>> confounding;

  EmpiricalConfig empirical;
  CtreeConfig ctree;
  bool categorical_smoothing = false;
  bool independence_all_rows = false;
  std::string regression_learner = "lm";
  CartConfig cart;
  int surrogate_n_comb = 30;

  int min_n_batches = 10;
  int max_batch_size = 10;
  int workers = 1;

  /// Fitted samplers by approach name, reused across runs on identical
  /// training data (horizons of one forecast). Null disables sharing.
  std::shared_ptr<SamplerCache> sampler_cache;

  /// State file written after every iteration; empty disables it.
  std::string saving_path;
  Reporter* reporter = nullptr;
};

struct TraceEntry {
  int iteration = 0;
  std::size_t n_coalitions = 0;
  double criterion = 0.0;
  bool converged = false;
  Matrix phi;
  Matrix sd;
};

struct Explanation {
  std::vector<std::string> player_names;
  std::string framework;
  std::vector<std::string> approach;
  bool iterative = false;
  bool converged = false;

  Matrix phi;     // N_explain x (P + 1), column 0 is phi_0
  Matrix phi_sd;  // bootstrap standard deviations
  Vector predictions;
  CoalitionSet coalitions;
  Matrix v;     // rows aligned with coalitions.entries, one column per explicand
  Matrix v_se;  // Monte Carlo standard errors of v (zero where exact)
  std::optional<MsevResult> msev;
  std::vector<TraceEntry> trace;
  std::vector<std::pair<std::string, double>> timings;  // seconds
  std::string saving_path;
};

// ---------------------------------------------------------------------------
// Estimators

struct CoalitionRef {
  std::uint64_t players = 0;
  std::uint64_t features = 0;
  int size = 0;  // number of players
};

class VSEstimator {
 public:
  virtual ~VSEstimator() = default;
  virtual VSEstimate estimate(const CoalitionRef& s, std::uint64_t seed) const = 0;
};

class MonteCarloEstimator : public VSEstimator {
 public:
  MonteCarloEstimator(std::shared_ptr<const ConditionalSampler> sampler, const Predictor& predictor, Matrix x_explain,
                      int k, std::optional<std::pair<CausalOrdering, ConfoundingFlags>> causal = std::nullopt)
      : sampler_(std::move(sampler)), predictor_(predictor), x_(std::move(x_explain)), k_(k), causal_(std::move(causal)) {
    if (k_ < 1) throw InvalidArgument("n_MC_samples must be at least 1");
  }

  VSEstimate estimate(const CoalitionRef& s, std::uint64_t seed) const override {
    if (causal_) return estimate_vS_causal(*sampler_, predictor_, s.features, causal_->first, causal_->second, x_, k_, seed);
    return estimate_vS_mc(*sampler_, predictor_, s.features, x_, k_, seed);
  }

 private:
  std::shared_ptr<const ConditionalSampler> sampler_;
  const Predictor& predictor_;
  Matrix x_;
  int k_;
  std::optional<std::pair<CausalOrdering, ConfoundingFlags>> causal_;
};

class SeparateRegressionEstimator : public VSEstimator {
 public:
  SeparateRegressionEstimator(Dataset train, Vector z, RegressorFactory learner, Dataset x_explain)
      : train_(std::move(train)), z_(std::move(z)), learner_(std::move(learner)), x_(std::move(x_explain)) {}

  VSEstimate estimate(const CoalitionRef& s, std::uint64_t) const override {
    Vector v = separate_regression_vS(train_, z_, learner_, s.features, x_);
    return {v, Vector::Zero(v.size())};
  }

 private:
  Dataset train_;
  Vector z_;
  RegressorFactory learner_;
  Dataset x_;
};

class SurrogateRegressionEstimator : public VSEstimator {
 public:
  SurrogateRegressionEstimator(std::shared_ptr<const SurrogateRegression> model, Matrix x_explain)
      : model_(std::move(model)), x_(std::move(x_explain)) {}

  VSEstimate estimate(const CoalitionRef& s, std::uint64_t) const override {
    Vector v = model_->vS(s.features, x_);
    return {v, Vector::Zero(v.size())};
  }

 private:
  std::shared_ptr<const SurrogateRegression> model_;
  Matrix x_;
};

/// Routes each coalition to the estimator configured for its size.
class CombinedEstimator : public VSEstimator {
 public:
  CombinedEstimator(std::vector<std::string> per_size, std::map<std::string, std::shared_ptr<const VSEstimator>> by_name)
      : per_size_(std::move(per_size)), by_name_(std::move(by_name)) {}

  VSEstimate estimate(const CoalitionRef& s, std::uint64_t seed) const override {
    return by_name_.at(combined_approach_dispatch(per_size_, s.size))->estimate(s, seed);
  }

 private:
  std::vector<std::string> per_size_;
  std::map<std::string, std::shared_ptr<const VSEstimator>> by_name_;
};

inline bool is_regression_approach(const std::string& a) {
  return a == "regression_separate" || a == "regression_surrogate";
}

inline const std::vector<std::string>& known_approaches() {
  static const std::vector<std::string> names{"independence", "empirical", "gaussian", "copula", "ctree",
                                              "categorical", "regression_separate", "regression_surrogate"};
  return names;
}

/// Fitted conditional sampler for one MC approach.
inline std::shared_ptr<const ConditionalSampler> fit_sampler(const std::string& name, const Dataset& train,
                                                             const ExplainConfig& config) {
  if (name == "independence") return std::make_shared<IndependenceSampler>(train, config.independence_all_rows);
  if (name == "empirical") return std::make_shared<EmpiricalSampler>(train, config.empirical);
  if (name == "gaussian") return std::make_shared<GaussianSampler>(train);
  if (name == "copula") return std::make_shared<CopulaSampler>(train);
  if (name == "ctree") {
    CtreeConfig c = config.ctree;
    c.seed = derive_seed(config.seed, 0xC7EEULL);
    return std::make_shared<CtreeSampler>(train, c);
  }
  if (name == "categorical") return std::make_shared<CategoricalSampler>(train, config.categorical_smoothing);
  throw InvalidArgument("unknown approach '" + name + "'");
}

inline std::shared_ptr<const ConditionalSampler> make_sampler(const std::string& name, const Dataset& train,
                                                              const ExplainConfig& config) {
  if (!config.sampler_cache) return fit_sampler(name, train, config);
  auto& slot = (*config.sampler_cache)[name];
  if (!slot) slot = fit_sampler(name, train, config);
  return slot;
}

// ---------------------------------------------------------------------------
// Helpers

namespace detail {

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t hash_matrix(const Matrix& m, std::uint64_t h) {
  const Eigen::Index dims[2] = {m.rows(), m.cols()};
  h = fnv1a(dims, sizeof(dims), h);
  return fnv1a(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), h);
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 15U];
  return s;
}

inline nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].get<double>();
  return m;
}

inline nlohmann::json real_json(double x) {
  if (std::isfinite(x)) return x;
  return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
}

inline double real_from_json(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  const auto s = j.get<std::string>();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  return std::numeric_limits<double>::quiet_NaN();
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Prepared task

/// Everything derived from (predictor, data, config) before any coalition
/// is evaluated.
struct PreparedTask {
  const Predictor* predictor = nullptr;
  CheckedTask data;
  ExplainConfig config;
  ResolvedGroups groups;
  Framework framework;
  int n_players = 0;
  Vector predictions;
  std::shared_ptr<const VSEstimator> estimator;
  std::string signature;
  bool iterative = false;
  std::size_t max_n_coalitions = 0;
  double capacity = 0.0;
};

inline std::uint64_t resolve_player(const std::string& name, const ResolvedGroups& groups) {
  for (std::size_t g = 0; g < groups.names.size(); ++g)
    if (groups.names[g] == name) return g;
  double idx = 0.0;
  if (parse_double(name, idx) && idx >= 1 && idx <= groups.size() && std::floor(idx) == idx)
    return static_cast<std::uint64_t>(idx - 1);
  throw InvalidArgument("causal ordering refers to unknown feature or group '" + name + "'");
}

inline std::string task_signature(const CheckedTask& data, const ExplainConfig& c) {
  nlohmann::json j;
  j["schema"] = to_json(data.train.schema);
  j["approach"] = c.approach;
  j["phi0"] = detail::real_json(c.phi0);
  j["seed"] = c.seed;
  j["paired"] = c.paired;
  j["reweighting"] = c.reweighting == Reweighting::c_kernel ? "c_kernel" : "none";
  j["semi_deterministic"] = c.semi_deterministic;
  j["boundary_weight"] = c.boundary_weight;
  j["exact_boundary"] = c.exact_boundary;
  j["n_mc_samples"] = c.n_mc_samples;
  j["n_boot"] = c.n_boot;
  if (c.groups) j["groups"] = c.groups->groups;
  j["asymmetric"] = c.asymmetric;
  if (c.causal_ordering) j["causal_ordering"] = *c.causal_ordering;
  if (c.confounding) j["confounding"] = *c.confounding;
  j["empirical"] = {c.empirical.sigma, c.empirical.eta};
  j["ctree"] = {c.ctree.alpha, c.ctree.minbucket, c.ctree.minsplit, c.ctree.n_permutations, c.ctree.max_depth, c.ctree.sample};
  j["categorical_smoothing"] = c.categorical_smoothing;
  j["independence_all_rows"] = c.independence_all_rows;
  j["regression"] = {c.regression_learner, c.cart.max_depth, c.cart.min_leaf, c.surrogate_n_comb};
  const std::string text = j.dump();
  std::uint64_t h = detail::fnv1a(text.data(), text.size());
  h = detail::hash_matrix(data.train.values, h);
  h = detail::hash_matrix(data.explain.values, h);
  return detail::hex64(h);
}

inline PreparedTask prepare_task(const Predictor& predictor, const Dataset& train, const Dataset& x_explain,
                                 const ExplainConfig& config) {
  PreparedTask t;
  t.predictor = &predictor;
  t.config = config;
  t.data = validate_model_data(predictor.feature_spec(), train, x_explain);
  if (t.data.train.n_rows() == 0) throw ValidationError("training data has no rows");
  if (t.data.explain.n_rows() == 0) throw ValidationError("explain data has no rows");
  if (!std::isfinite(config.phi0)) throw InvalidArgument("phi0 must be supplied as a finite number");
  if (config.n_boot < 2) throw InvalidArgument("n_boot must be at least 2");
  if (!(config.convergence_tol > 0.0)) throw InvalidArgument("convergence threshold must be positive");
  if (config.max_iterations < 1) throw InvalidArgument("max_iterations must be at least 1");
  if (config.min_n_batches < 1 || config.max_batch_size < 1) throw InvalidArgument("batch settings must be positive");

  const auto& spec = t.data.train.schema;
  if (spec.size() > static_cast<std::size_t>(kMaxPlayers)) throw ValidationError("at most 64 features are supported");
  t.groups = config.groups ? resolve_groups(*config.groups, spec) : ResolvedGroups::identity(spec);
  t.n_players = t.groups.size();

  std::optional<CausalOrdering> ordering;
  if (config.causal_ordering) {
    CausalOrdering o;
    for (const auto& comp : *config.causal_ordering) {
      std::vector<int> players;
      for (const auto& name : comp) players.push_back(static_cast<int>(resolve_player(name, t.groups)));
      o.components.push_back(std::move(players));
    }
    ordering = std::move(o);
  }
  std::optional<ConfoundingFlags> confounding;
  if (config.confounding) confounding = ConfoundingFlags{*config.confounding};
  t.framework = resolve_framework(config.asymmetric, ordering, confounding, t.n_players);

  // approaches
  if (config.approach.empty()) throw InvalidArgument("no approach given");
  for (const auto& a : config.approach)
    if (std::find(known_approaches().begin(), known_approaches().end(), a) == known_approaches().end())
      throw InvalidArgument("unknown approach '" + a + "'");
  const bool combined = config.approach.size() > 1;
  if (combined && config.approach.size() != static_cast<std::size_t>(std::max(0, t.n_players - 1)))
    throw InvalidArgument("a combined approach needs one entry per coalition size (" + std::to_string(t.n_players - 1) +
                          "), got " + std::to_string(config.approach.size()));
  for (const auto& a : config.approach) {
    if (is_regression_approach(a) && combined)
      throw InvalidArgument("regression approaches cannot be combined with other approaches");
    if (is_regression_approach(a) && t.framework.causal)
      throw InvalidArgument("causal and marginal frameworks need a Monte Carlo approach, not '" + a + "'");
  }

  t.predictions = predict_batch(predictor, t.data.explain);

  // capacity, budget and mode
  const SamplingUniverse universe =
      t.framework.asymmetric ? SamplingUniverse::causal(t.n_players, t.framework.ordering) : SamplingUniverse::full(t.n_players);
  t.capacity = universe.interior_count() + 2.0;
  const double budget_default = std::min<double>(t.capacity, static_cast<double>(kDefaultMaxCoalitions));
  const double budget = config.max_n_coalitions ? std::min<double>(t.capacity, static_cast<double>(*config.max_n_coalitions))
                                                : budget_default;
  if (t.n_players >= 2 && budget < std::min(t.capacity, static_cast<double>(t.n_players) + 1.0))
    throw InvalidArgument("max_n_coalitions must be at least " + std::to_string(t.n_players + 1) +
                          " so that every Shapley value is identified");
  t.max_n_coalitions = static_cast<std::size_t>(budget);
  t.iterative = config.iterative ? *config.iterative : t.n_players > kDirectPlayerLimit;

  // estimator
  const Matrix& xe = t.data.explain.values;
  std::optional<std::pair<CausalOrdering, ConfoundingFlags>> causal;
  if (t.framework.causal) causal.emplace(expand_ordering(t.framework.ordering, t.groups), t.framework.confounding);
  auto single = [&](const std::string& a) -> std::shared_ptr<const VSEstimator> {
    if (a == "regression_separate") {
      return std::make_shared<SeparateRegressionEstimator>(
          t.data.train, training_response(predictor, t.data.train),
          regressor_factory(config.regression_learner, config.cart), t.data.explain);
    }
    if (a == "regression_surrogate") {
      std::vector<std::uint64_t> all;
      if (universe.interior_count() <= config.surrogate_n_comb)
        for (auto c : universe.enumerate()) all.push_back(expand_group_coalition(c, t.groups).mask);
      auto draw = [&](Rng& rng) { return expand_group_coalition(universe.draw(rng), t.groups).mask; };
      if (all.empty() && universe.interior_count() <= config.surrogate_n_comb)
        throw InvalidArgument("surrogate regression needs at least two players");
      const auto plan = surrogate_plan(all, draw, t.data.train.n_rows(), config.surrogate_n_comb,
                                       derive_seed(config.seed, 0x5A77ULL));
      auto model = std::make_shared<SurrogateRegression>(
          t.data.train, training_response(predictor, t.data.train),
          regressor_factory(config.regression_learner, config.cart), plan);
      return std::make_shared<SurrogateRegressionEstimator>(model, xe);
    }
    return std::make_shared<MonteCarloEstimator>(make_sampler(a, t.data.train, config), predictor, xe,
                                                 config.n_mc_samples, causal);
  };
  if (t.n_players >= 2) {
    if (combined) {
      std::map<std::string, std::shared_ptr<const VSEstimator>> by_name;
      for (const auto& a : config.approach)
        if (!by_name.count(a)) by_name[a] = single(a);
      t.estimator = std::make_shared<CombinedEstimator>(config.approach, std::move(by_name));
    } else {
      t.estimator = single(config.approach[0]);
    }
  }
  t.signature = task_signature(t.data, config);
  return t;
}

// ---------------------------------------------------------------------------
// Loop

struct CachedV {
  Vector value;
  Vector se;
};

struct LoopState {
  std::unique_ptr<CoalitionSampler> sampler;
  std::map<std::uint64_t, CachedV> cache;  // by player mask
  std::vector<TraceEntry> trace;
  std::size_t next_n = 0;  // target for the next iteration; 0 when finished
  std::vector<std::pair<std::string, double>> timings;
};

namespace detail {

inline nlohmann::json state_json(const PreparedTask& t, const LoopState& s, const CoalitionSampler::State& sampler) {
  nlohmann::json j;
  j["format"] = "condshap-state";
  j["version"] = 1;
  j["signature"] = t.signature;
  j["n_players"] = t.n_players;
  nlohmann::json sj;
  sj["rng"] = sampler.rng;
  sj["counts"] = sampler.counts;
  sj["deterministic"] = sampler.deterministic;
  sj["deterministic_sizes"] = sampler.deterministic_sizes;
  sj["draws"] = sampler.draws;
  sj["exhausted"] = sampler.exhausted;
  j["sampler"] = std::move(sj);
  j["next_n"] = s.next_n;
  nlohmann::json cache = nlohmann::json::array();
  for (const auto& [mask, v] : s.cache) {
    std::vector<double> val(v.value.data(), v.value.data() + v.value.size());
    std::vector<double> se(v.se.data(), v.se.data() + v.se.size());
    cache.push_back({{"mask", mask}, {"v", val}, {"se", se}});
  }
  j["v"] = std::move(cache);
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& e : s.trace)
    trace.push_back({{"iteration", e.iteration},
                     {"n_coalitions", e.n_coalitions},
                     {"criterion", real_json(e.criterion)},
                     {"converged", e.converged},
                     {"phi", matrix_json(e.phi)},
                     {"sd", matrix_json(e.sd)}});
  j["trace"] = std::move(trace);
  return j;
}

inline void write_state(const std::string& path, const nlohmann::json& j) {
  if (path.empty()) return;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw StateError("cannot write state file '" + path + "'");
    out << j.dump() << '\n';
    if (!out) throw StateError("failed writing state file '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline SamplingOptions sampling_options(const PreparedTask& t) {
  SamplingOptions o;
  // complements of valid asymmetric coalitions need not be valid
  o.paired = t.config.paired && !t.framework.asymmetric;
  o.semi_deterministic = t.config.semi_deterministic && !t.framework.asymmetric;
  o.reweighting = t.config.reweighting;
  o.boundary_weight = t.config.boundary_weight;
  return o;
}

inline std::unique_ptr<CoalitionSampler> make_coalition_sampler(const PreparedTask& t) {
  const SamplingUniverse universe =
      t.framework.asymmetric ? SamplingUniverse::causal(t.n_players, t.framework.ordering) : SamplingUniverse::full(t.n_players);
  return std::make_unique<CoalitionSampler>(universe, sampling_options(t), derive_seed(t.config.seed, 0xC0A1ULL));
}

/// Evaluates the missing interior coalitions in batches over a worker pool.
inline void evaluate_coalitions(const PreparedTask& t, const std::vector<Coalition>& todo, LoopState& s, int iteration) {
  if (todo.empty()) return;
  const auto n = static_cast<int>(todo.size());
  const int n_batches = std::min(n, std::max(t.config.min_n_batches, (n + t.config.max_batch_size - 1) / t.config.max_batch_size));
  std::vector<VSEstimate> results(todo.size());
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_batches));
  std::atomic<int> next{0}, done{0};
  auto worker = [&] {
    for (int b = next++; b < n_batches; b = next++) {
      const int lo = static_cast<int>(static_cast<long long>(b) * n / n_batches);
      const int hi = static_cast<int>(static_cast<long long>(b + 1) * n / n_batches);
      try {
        for (int i = lo; i < hi; ++i) {
          const Coalition c = todo[static_cast<std::size_t>(i)];
          CoalitionRef ref{c.mask, expand_group_coalition(c, t.groups).mask, c.size()};
          results[static_cast<std::size_t>(i)] = t.estimator->estimate(ref, derive_seed(t.config.seed, 0x5EEDULL, ref.features));
          if (t.config.reporter)
            t.config.reporter->vs_detail("  v(S) estimated for player mask " + std::to_string(c.mask),
                                         {{"mask", c.mask}, {"iteration", iteration}});
        }
      } catch (...) {
        errors[static_cast<std::size_t>(b)] = std::current_exception();
      }
      if (t.config.reporter) t.config.reporter->batch_done(iteration, ++done, n_batches);
    }
  };
  const int workers = std::clamp(t.config.workers, 1, n_batches);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  // keep every finished batch so a failure can be resumed
  for (int b = 0; b < n_batches; ++b) {
    if (errors[static_cast<std::size_t>(b)]) continue;
    const int lo = static_cast<int>(static_cast<long long>(b) * n / n_batches);
    const int hi = static_cast<int>(static_cast<long long>(b + 1) * n / n_batches);
    for (int i = lo; i < hi; ++i)
      s.cache[todo[static_cast<std::size_t>(i)].mask] = {results[static_cast<std::size_t>(i)].value,
                                                         results[static_cast<std::size_t>(i)].se};
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// V and its standard errors in coalition-set row order.
inline std::pair<Matrix, Matrix> assemble_v(const PreparedTask& t, const CoalitionSet& set, const LoopState& s) {
  const Eigen::Index n = t.predictions.size();
  Matrix v(static_cast<Eigen::Index>(set.size()), n), se = Matrix::Zero(static_cast<Eigen::Index>(set.size()), n);
  for (std::size_t i = 0; i < set.entries.size(); ++i) {
    const Coalition c = set.entries[i].coalition;
    const auto r = static_cast<Eigen::Index>(i);
    if (c.is_empty()) {
      v.row(r).setConstant(t.config.phi0);
    } else if (c.is_grand(t.n_players)) {
      v.row(r) = t.predictions.transpose();
    } else {
      const auto& cv = s.cache.at(c.mask);
      v.row(r) = cv.value.transpose();
      se.row(r) = cv.se.transpose();
    }
  }
  return {v, se};
}

struct IterationResult {
  CoalitionSet set;
  Matrix v, v_se, phi, sd;
  double criterion = 0.0;
};

inline IterationResult solve_iteration(const PreparedTask& t, const LoopState& s, CoalitionSet set, int iteration) {
  IterationResult r;
  r.set = std::move(set);
  std::tie(r.v, r.v_se) = assemble_v(t, r.set, s);
  const SolveOptions opts{t.config.exact_boundary};
  r.phi = solve_wls(r.set, r.v, opts).transpose();
  r.sd = bootstrap_sd(r.set, r.v, t.config.n_boot, derive_seed(t.config.seed, 0xB007ULL, static_cast<std::uint64_t>(iteration)),
                      opts);
  r.criterion = t.n_players >= 2 ? convergence_criterion(r.phi, r.sd) : 0.0;
  return r;
}

inline Explanation finalize(const PreparedTask& t, const LoopState& s, IterationResult r) {
  Explanation e;
  e.player_names = {"none"};
  for (const auto& n : t.groups.names) e.player_names.push_back(n);
  e.framework = to_string(t.framework.kind);
  e.approach = t.config.approach;
  e.iterative = t.iterative;
  e.converged = !s.trace.empty() && s.trace.back().converged;
  e.phi = std::move(r.phi);
  e.phi_sd = std::move(r.sd);
  e.predictions = t.predictions;
  std::vector<Eigen::Index> interior;
  std::vector<std::uint64_t> masks;
  for (std::size_t i = 0; i < r.set.entries.size(); ++i) {
    const Coalition c = r.set.entries[i].coalition;
    if (c.is_empty() || c.is_grand(t.n_players)) continue;
    interior.push_back(static_cast<Eigen::Index>(i));
    masks.push_back(c.mask);
  }
  if (!interior.empty()) {
    Matrix vi(static_cast<Eigen::Index>(interior.size()), r.v.cols());
    for (std::size_t k = 0; k < interior.size(); ++k) vi.row(static_cast<Eigen::Index>(k)) = r.v.row(interior[k]);
    e.msev = msev(vi, t.predictions, masks);
  }
  e.coalitions = std::move(r.set);
  e.v = std::move(r.v);
  e.v_se = std::move(r.v_se);
  e.trace = s.trace;
  e.timings = s.timings;
  e.saving_path = t.config.saving_path;
  return e;
}

inline std::size_t next_target(const PreparedTask& t, std::size_t current) {
  std::size_t next = std::min(2 * current, t.max_n_coalitions);
  return std::max(next, current);
}

/// Whether the loop may continue after the last trace entry.
inline bool should_stop(const PreparedTask& t, const TraceEntry& last, bool exhausted) {
  if (!t.iterative) return true;
  if (last.criterion < t.config.convergence_tol) return true;
  if (exhausted || last.n_coalitions >= t.max_n_coalitions) return true;
  return last.iteration >= t.config.max_iterations;
}

inline Explanation run_loop(const PreparedTask& t, LoopState& s) {
  detail::Stopwatch total;
  double t_vs = 0.0, t_solve = 0.0;
  IterationResult last;
  while (true) {
    const int iteration = static_cast<int>(s.trace.size()) + 1;
    const auto before = s.sampler->state();
    s.sampler->grow_to(s.next_n);
    CoalitionSet set = s.sampler->current();
    std::vector<Coalition> todo;
    for (const auto& e : set.entries)
      if (!e.coalition.is_empty() && !e.coalition.is_grand(t.n_players) && !s.cache.count(e.coalition.mask))
        todo.push_back(e.coalition);
    detail::Stopwatch sw;
    try {
      evaluate_coalitions(t, todo, s, iteration);
    } catch (...) {
      if (!t.config.saving_path.empty()) {
        try {
          detail::write_state(t.config.saving_path, detail::state_json(t, s, before));
        } catch (...) {
        }
      }
      throw;
    }
    t_vs += sw.seconds();
    detail::Stopwatch sw2;
    const bool can_grow = set.is_sampled() && set.size() < t.max_n_coalitions;
    try {
      last = solve_iteration(t, s, std::move(set), iteration);
    } catch (const SingularSystemError& err) {
      // Too few coalitions to identify every player; enlarge the set and
      // retry without recording an iteration.
      if (!can_grow)
        throw SingularSystemError(std::string(err.what()) + "; increase max_n_coalitions");
      s.next_n = next_target(t, s.sampler->current().size());
      t_solve += sw2.seconds();
      continue;
    }
    t_solve += sw2.seconds();
    TraceEntry entry;
    entry.iteration = iteration;
    entry.n_coalitions = last.set.size();
    entry.criterion = last.criterion;
    entry.converged = last.criterion < t.config.convergence_tol;
    entry.phi = last.phi;
    entry.sd = last.sd;
    s.trace.push_back(entry);
    if (t.config.reporter) {
      t.config.reporter->iteration(iteration, entry.n_coalitions, entry.criterion, entry.converged);
      std::vector<std::string> names{"none"};
      for (const auto& n : t.groups.names) names.push_back(n);
      t.config.reporter->shapley(iteration, names, last.phi);
    }
    const bool stop = should_stop(t, entry, !last.set.is_sampled());
    s.next_n = stop ? 0 : next_target(t, entry.n_coalitions);
    if (!t.config.saving_path.empty()) detail::write_state(t.config.saving_path, detail::state_json(t, s, s.sampler->state()));
    if (stop) break;
  }
  s.timings = {{"vS_estimation", t_vs}, {"shapley_solve", t_solve}, {"total_loop", total.seconds()}};
  return finalize(t, s, std::move(last));
}

inline std::size_t initial_target(const PreparedTask& t) {
  if (!t.iterative) return t.max_n_coalitions;
  const std::size_t burn_in =
      t.config.initial_n_coalitions ? *t.config.initial_n_coalitions : static_cast<std::size_t>(2 * (t.n_players + 1));
  return std::min(burn_in, t.max_n_coalitions);
}

/// Computes Shapley values for every explicand.
inline Explanation explain(const Predictor& predictor, const Dataset& train, const Dataset& x_explain,
                           const ExplainConfig& config) {
  detail::Stopwatch sw;
  if (config.reporter) config.reporter->phase("setting up the explanation task");
  PreparedTask t = prepare_task(predictor, train, x_explain, config);
  if (t.iterative && t.config.initial_n_coalitions && *t.config.initial_n_coalitions < 4 && t.capacity >= 4)
    throw InvalidArgument("initial_n_coalitions must be at least 4");
  const double setup = sw.seconds();
  if (config.reporter)
    config.reporter->phase("explaining " + std::to_string(t.predictions.size()) + " observations with " +
                           std::to_string(t.n_players) + " players, approach " + config.approach[0] +
                           (config.approach.size() > 1 ? " (combined)" : "") + ", " + to_string(t.framework.kind) +
                           (t.iterative ? ", iterative" : ""));
  LoopState s;
  s.sampler = make_coalition_sampler(t);
  s.next_n = initial_target(t);
  Explanation e = run_loop(t, s);
  e.timings.insert(e.timings.begin(), {"setup", setup});
  e.timings.push_back({"total", sw.seconds()});
  return e;
}

/// Resumes from a state file. The task (data, approach, seed and the other
/// result-determining settings) must match; the budget, threshold and
/// iteration limit may change.
inline Explanation continue_explain(const std::string& state_path, const Predictor& predictor, const Dataset& train,
                                    const Dataset& x_explain, ExplainConfig config) {
  detail::Stopwatch sw;
  nlohmann::json j;
  {
    std::ifstream in(state_path);
    if (!in) throw StateError("cannot open state file '" + state_path + "'");
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw StateError("state file '" + state_path + "' is corrupt: " + e.what());
    }
  }
  if (config.saving_path.empty()) config.saving_path = state_path;
  PreparedTask t = prepare_task(predictor, train, x_explain, config);
  LoopState s;
  s.sampler = make_coalition_sampler(t);
  try {
    if (j.at("format") != "condshap-state" || j.at("version").get<int>() != 1)
      throw StateError("unsupported state file format or version");
    if (j.at("signature").get<std::string>() != t.signature)
      throw StateError("state file belongs to a different task (data, approach, seed or settings differ)");
    CoalitionSampler::State st;
    const auto& sj = j.at("sampler");
    st.rng = sj.at("rng").get<std::string>();
    st.counts = sj.at("counts").get<std::vector<std::pair<std::uint64_t, std::uint64_t>>>();
    st.deterministic = sj.at("deterministic").get<std::vector<std::uint64_t>>();
    st.deterministic_sizes = sj.at("deterministic_sizes").get<std::vector<int>>();
    st.draws = sj.at("draws").get<std::uint64_t>();
    st.exhausted = sj.at("exhausted").get<bool>();
    s.sampler->restore(st);
    s.next_n = j.at("next_n").get<std::size_t>();
    for (const auto& c : j.at("v")) {
      const auto val = c.at("v").get<std::vector<double>>();
      const auto se = c.at("se").get<std::vector<double>>();
      s.cache[c.at("mask").get<std::uint64_t>()] = {Eigen::Map<const Vector>(val.data(), static_cast<Eigen::Index>(val.size())),
                                                    Eigen::Map<const Vector>(se.data(), static_cast<Eigen::Index>(se.size()))};
    }
    for (const auto& e : j.at("trace")) {
      TraceEntry te;
      te.iteration = e.at("iteration").get<int>();
      te.n_coalitions = e.at("n_coalitions").get<std::size_t>();
      te.criterion = detail::real_from_json(e.at("criterion"));
      te.converged = e.at("converged").get<bool>();
      te.phi = detail::matrix_from_json(e.at("phi"));
      te.sd = detail::matrix_from_json(e.at("sd"));
      s.trace.push_back(std::move(te));
    }
  } catch (const nlohmann::json::exception& e) {
    throw StateError("state file '" + state_path + "' is corrupt: " + e.what());
  }

  if (s.next_n == 0) {
    if (s.trace.empty()) throw StateError("state file has no completed iteration");
    TraceEntry& last = s.trace.back();
    const CoalitionSet current = s.sampler->current();
    last.converged = last.criterion < t.config.convergence_tol;
    if (should_stop(t, last, !current.is_sampled())) {
      IterationResult r = solve_iteration(t, s, current, last.iteration);
      Explanation e = finalize(t, s, std::move(r));
      e.timings = {{"total", sw.seconds()}};
      return e;
    }
    s.next_n = next_target(t, last.n_coalitions);
  }
  Explanation e = run_loop(t, s);
  e.timings.push_back({"total", sw.seconds()});
  return e;
}

}  // namespace condshap
