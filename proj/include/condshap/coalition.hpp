// Coalitions, Shapley kernel weights and coalition-set construction
// (exhaustive, sampled, paired, reweighted, semi-deterministic, causal).
//
// Players are 0-based bit positions in a 64-bit mask, so at most 64 features
// or feature groups can be explained in one run. Group features to go beyond.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "condshap/causal_ordering.hpp"
#include "condshap/common.hpp"

namespace condshap {

inline constexpr int kMaxPlayers = 64;
inline constexpr double kDefaultBoundaryWeight = 1e6;
inline constexpr int kDefaultExhaustiveLimit = 30;

inline std::uint64_t full_mask(int m) {
  return m >= 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << m) - 1;
}

/// A subset S of the M players.
struct Coalition {
  std::uint64_t mask = 0;

  int size() const { return std::popcount(mask); }
  bool contains(int j) const { return (mask >> j) & 1U; }
  Coalition complement(int m) const { return Coalition{~mask & full_mask(m)}; }
  bool is_empty() const { return mask == 0; }
  bool is_grand(int m) const { return mask == full_mask(m); }
  bool subset_of(Coalition other) const { return (mask & ~other.mask) == 0; }

  std::vector<int> members() const {
    std::vector<int> out;
    for (std::uint64_t m = mask; m; m &= m - 1) out.push_back(std::countr_zero(m));
    return out;
  }

  static Coalition of(std::initializer_list<int> players) {
    Coalition c;
    for (int j : players) c.mask |= std::uint64_t{1} << j;
    return c;
  }

  friend bool operator==(Coalition a, Coalition b) { return a.mask == b.mask; }
  friend auto operator<=>(Coalition a, Coalition b) { return a.mask <=> b.mask; }
};

// ---------------------------------------------------------------------------
// Kernel weights

inline double binomial(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  return std::round(std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) -
                             std::lgamma(n - k + 1.0)));
}

/// k(M, s) = (M-1) / (C(M,s) s (M-s)). Sizes 0 and M have infinite weight and
/// are rejected; callers substitute the boundary constant.
inline double shapley_kernel_weight(int m, int s) {
  if (m < 2) throw InvalidArgument("shapley kernel weight needs M >= 2");
  if (s <= 0 || s >= m)
    throw InvalidArgument("coalition size " + std::to_string(s) +
                          " is a boundary size; use the boundary constant");
  return (m - 1.0) / (binomial(m, s) * s * (m - s));
}

struct KernelWeights {
  int m = 0;
  std::vector<double> per_size;  // index s = 1..M-1; index 0 unused
  double boundary_constant = kDefaultBoundaryWeight;

  explicit KernelWeights(int m_, double c = kDefaultBoundaryWeight)
      : m(m_), per_size(static_cast<std::size_t>(std::max(m_, 1)), 0.0), boundary_constant(c) {
    for (int s = 1; s < m; ++s) per_size[s] = shapley_kernel_weight(m, s);
  }

  double operator()(int s) const { return (s == 0 || s == m) ? boundary_constant : per_size[s]; }
};

/// Probability of one specific coalition of size s under the kernel
/// proposal over sizes 1..M-1: k(M,s) / sum_q k(M,q) C(M,q).
inline double kernel_probability(int m, int s) {
  double z = 0.0;
  for (int q = 1; q < m; ++q) z += shapley_kernel_weight(m, q) * binomial(m, q);
  return shapley_kernel_weight(m, s) / z;
}

// ---------------------------------------------------------------------------
// Coalition sets

enum class Strategy { exhaustive, unique_sampled, paired, paired_c_kernel, semi_deterministic };
enum class Reweighting { none, c_kernel };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::exhaustive: return "exhaustive";
    case Strategy::unique_sampled: return "unique-sampled";
    case Strategy::paired: return "paired";
    case Strategy::paired_c_kernel: return "paired-c-kernel";
    case Strategy::semi_deterministic: return "semi-deterministic";
  }
  return "?";
}

struct CoalitionEntry {
  Coalition coalition;
  std::uint64_t sample_count = 0;
  double solver_weight = 0.0;
  double sampling_probability = 0.0;  // p_S under the proposal (interior only)
  bool deterministic = false;         // included without sampling
};

/// Rows of Z and diagonal of W. Entries are kept in canonical order: empty
/// coalition, interior coalitions by (size, mask), grand coalition.
struct CoalitionSet {
  int m = 0;
  std::vector<CoalitionEntry> entries;
  std::uint64_t total_draws = 0;  // L, random draws including duplicates
  Strategy strategy = Strategy::exhaustive;
  Reweighting reweighting = Reweighting::none;
  bool paired = false;
  double boundary_weight = kDefaultBoundaryWeight;
  double deterministic_mass = 0.0;  // kernel mass of deterministic interior rows

  std::size_t size() const { return entries.size(); }
  bool is_sampled() const { return strategy != Strategy::exhaustive; }

  std::vector<Coalition> coalitions() const {
    std::vector<Coalition> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.coalition);
    return out;
  }

  Vector weights() const {
    Vector w(static_cast<Eigen::Index>(entries.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) w[static_cast<Eigen::Index>(i)] = entries[i].solver_weight;
    return w;
  }

  std::optional<std::size_t> find(Coalition c) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].coalition == c) return i;
    return std::nullopt;
  }
};

namespace detail {

inline void canonical_sort(std::vector<CoalitionEntry>& entries, int m) {
  std::sort(entries.begin(), entries.end(), [m](const CoalitionEntry& a, const CoalitionEntry& b) {
    auto key = [m](Coalition c) {
      // empty first, grand last
      const int s = c.size();
      return std::pair<int, std::uint64_t>(c.is_grand(m) ? m + 1 : s, c.mask);
    };
    return key(a.coalition) < key(b.coalition);
  });
}

inline void normalize_interior(CoalitionSet& set, double target = 1.0) {
  double total = 0.0;
  for (const auto& e : set.entries)
    if (!e.coalition.is_empty() && !e.coalition.is_grand(set.m)) total += e.solver_weight;
  if (total <= 0.0) return;
  for (auto& e : set.entries)
    if (!e.coalition.is_empty() && !e.coalition.is_grand(set.m))
      e.solver_weight *= target / total;
}

inline CoalitionEntry boundary_entry(Coalition c, double weight) {
  CoalitionEntry e;
  e.coalition = c;
  e.solver_weight = weight;
  e.deterministic = true;
  return e;
}

}  // namespace detail

/// All 2^M coalitions with normalized kernel weights on the interior rows.
inline CoalitionSet enumerate_all(int m, double boundary_weight = kDefaultBoundaryWeight,
                                  int exhaustive_limit = kDefaultExhaustiveLimit) {
  if (m < 1) throw InvalidArgument("need at least one player");
  if (m > exhaustive_limit)
    throw InvalidArgument("M = " + std::to_string(m) + " exceeds the exhaustive limit of " +
                          std::to_string(exhaustive_limit) +
                          " players; use coalition sampling (set max_n_coalitions)");
  CoalitionSet set;
  set.m = m;
  set.boundary_weight = boundary_weight;
  set.strategy = Strategy::exhaustive;
  const std::uint64_t n = std::uint64_t{1} << m;
  set.entries.reserve(n);
  for (std::uint64_t mask = 0; mask < n; ++mask) {
    Coalition c{mask};
    if (c.is_empty() || c.is_grand(m)) {
      set.entries.push_back(detail::boundary_entry(c, boundary_weight));
      continue;
    }
    CoalitionEntry e;
    e.coalition = c;
    e.sample_count = 0;
    e.sampling_probability = kernel_probability(m, c.size());
    e.solver_weight = shapley_kernel_weight(m, c.size());
    e.deterministic = true;
    set.entries.push_back(e);
  }
  detail::canonical_sort(set.entries, m);
  detail::normalize_interior(set);
  return set;
}

/// Z matrix: leading column of ones, then the membership bits of each row.
inline Matrix build_z(const std::vector<Coalition>& coalitions, int m) {
  Matrix z = Matrix::Zero(static_cast<Eigen::Index>(coalitions.size()), m + 1);
  for (std::size_t i = 0; i < coalitions.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    z(r, 0) = 1.0;
    for (int j = 0; j < m; ++j)
      if (coalitions[i].contains(j)) z(r, j + 1) = 1.0;
  }
  return z;
}

inline Matrix build_z(const CoalitionSet& set) { return build_z(set.coalitions(), set.m); }

// ---------------------------------------------------------------------------
// Sampling universes

/// The interior coalitions a sampler may propose, with kernel-proportional
/// proposal probabilities. Either every subset of sizes 1..M-1, or only the
/// subsets respecting a causal ordering.
class SamplingUniverse {
 public:
  static SamplingUniverse full(int m) {
    SamplingUniverse u;
    u.m_ = m;
    u.z_ = 0.0;
    for (int q = 1; q < m; ++q) u.z_ += shapley_kernel_weight(m, q) * binomial(m, q);
    return u;
  }

  static SamplingUniverse causal(int m, const CausalOrdering& ordering) {
    ordering.validate(m);
    SamplingUniverse u;
    u.m_ = m;
    u.ordering_ = ordering;
    u.z_ = 0.0;
    const auto& comps = ordering.components;
    for (std::size_t k = 0; k < comps.size(); ++k) {
      const int prefix = std::popcount(ordering.ancestor_mask(k));
      const int width = static_cast<int>(comps[k].size());
      for (int a = 1; a <= width; ++a) {
        const int s = prefix + a;
        if (s >= m) continue;  // grand coalition is a boundary row
        const double mass = binomial(width, a) * shapley_kernel_weight(m, s);
        u.z_ += mass;
        u.strata_.push_back({k, a, mass});
      }
    }
    return u;
  }

  int m() const { return m_; }
  bool restricted() const { return ordering_.has_value(); }
  const std::optional<CausalOrdering>& ordering() const { return ordering_; }

  /// Number of interior coalitions (as a double; may exceed 2^53 in theory).
  double interior_count() const {
    if (!ordering_) return std::ldexp(1.0, m_) - 2.0;
    double n = 0.0;
    for (const auto& s : strata_) n += binomial(static_cast<int>(ordering_->components[s.component].size()), s.added);
    return n;
  }

  bool contains(Coalition c) const {
    if (c.is_empty() || c.is_grand(m_)) return false;
    if (!ordering_) return true;
    for (std::size_t k = 0; k < ordering_->components.size(); ++k) {
      const std::uint64_t comp = ordering_->component_mask(k);
      if ((c.mask & comp) && (c.mask & ordering_->ancestor_mask(k)) != ordering_->ancestor_mask(k))
        return false;
    }
    return true;
  }

  double probability(Coalition c) const {
    return shapley_kernel_weight(m_, c.size()) / z_;
  }

  Coalition draw(Rng& rng) const {
    if (!ordering_) {
      const int s = draw_size(rng);
      return random_subset(full_mask(m_), s, rng);
    }
    double u = uniform01(rng) * z_;
    const Stratum* pick = &strata_.back();
    for (const auto& st : strata_) {
      if (u < st.mass) {
        pick = &st;
        break;
      }
      u -= st.mass;
    }
    const std::uint64_t prefix = ordering_->ancestor_mask(pick->component);
    const Coalition added = random_subset(ordering_->component_mask(pick->component), pick->added, rng);
    return Coalition{prefix | added.mask};
  }

  /// Draws a size in 1..M-1, restricted to `allowed` when given.
  int draw_size(Rng& rng, const std::vector<bool>* allowed = nullptr) const {
    double total = 0.0;
    for (int s = 1; s < m_; ++s)
      if (!allowed || (*allowed)[s]) total += size_mass(s);
    double u = uniform01(rng) * total;
    int last = -1;
    for (int s = 1; s < m_; ++s) {
      if (allowed && !(*allowed)[s]) continue;
      last = s;
      const double w = size_mass(s);
      if (u < w) return s;
      u -= w;
    }
    return last;
  }

  /// Kernel mass of size stratum s in the full universe: C(M,s) p_S.
  double size_mass(int s) const { return binomial(m_, s) * shapley_kernel_weight(m_, s) / z_; }

  std::vector<Coalition> enumerate() const {
    std::vector<Coalition> out;
    if (!ordering_) {
      const std::uint64_t n = std::uint64_t{1} << m_;
      for (std::uint64_t mask = 1; mask + 1 < n; ++mask) out.push_back(Coalition{mask});
      return out;
    }
    for (std::size_t k = 0; k < ordering_->components.size(); ++k) {
      const std::uint64_t prefix = ordering_->ancestor_mask(k);
      const std::uint64_t comp = ordering_->component_mask(k);
      // iterate nonempty submasks of comp
      for (std::uint64_t sub = comp; sub; sub = (sub - 1) & comp) {
        Coalition c{prefix | sub};
        if (!c.is_grand(m_)) out.push_back(c);
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  static Coalition random_subset(std::uint64_t pool, int k, Rng& rng) {
    std::vector<int> idx;
    for (std::uint64_t m = pool; m; m &= m - 1) idx.push_back(std::countr_zero(m));
    std::uint64_t out = 0;
    for (int i = 0; i < k; ++i) {
      const auto j = i + static_cast<int>(uniform_index(rng, idx.size() - static_cast<std::size_t>(i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
      out |= std::uint64_t{1} << idx[static_cast<std::size_t>(i)];
    }
    return Coalition{out};
  }

 private:
  struct Stratum {
    std::size_t component;
    int added;
    double mass;
  };
  int m_ = 0;
  double z_ = 1.0;
  std::optional<CausalOrdering> ordering_;
  std::vector<Stratum> strata_;
};

/// Coalitions respecting the causal ordering: whenever S holds a player of
/// component k it holds every player of components 0..k-1.
inline CoalitionSet valid_causal_coalitions(const CausalOrdering& ordering, int m,
                                            double boundary_weight = kDefaultBoundaryWeight) {
  const auto universe = SamplingUniverse::causal(m, ordering);
  if (universe.interior_count() > 1e7)
    throw InvalidArgument("too many valid causal coalitions to enumerate; use sampling");
  CoalitionSet set;
  set.m = m;
  set.boundary_weight = boundary_weight;
  set.strategy = Strategy::exhaustive;
  set.entries.push_back(detail::boundary_entry(Coalition{0}, boundary_weight));
  if (m > 1) {
    for (Coalition c : universe.enumerate()) {
      CoalitionEntry e;
      e.coalition = c;
      e.sampling_probability = universe.probability(c);
      e.solver_weight = shapley_kernel_weight(m, c.size());
      e.deterministic = true;
      set.entries.push_back(e);
    }
  }
  set.entries.push_back(detail::boundary_entry(Coalition{full_mask(m)}, boundary_weight));
  detail::canonical_sort(set.entries, m);
  detail::normalize_interior(set);
  return set;
}

// ---------------------------------------------------------------------------
// Sampling

struct SamplingOptions {
  bool paired = true;
  Reweighting reweighting = Reweighting::c_kernel;
  bool semi_deterministic = false;
  double boundary_weight = kDefaultBoundaryWeight;
};

/// c-kernel weight p / (1 - (1 - p)^L).
inline double c_kernel_weight(double p, double draws) {
  if (p >= 1.0) return p;
  const double hit = -std::expm1(draws * std::log1p(-p));
  return hit > 0.0 ? p / hit : 1.0;
}

/// Recomputes solver weights of the randomly drawn rows from their proposal
/// probabilities and L; deterministic rows keep their kernel mass.
inline CoalitionSet reweight_c_kernel(CoalitionSet set) {
  if (!set.is_sampled()) throw InvalidArgument("c-kernel reweighting needs a sampled coalition set");
  double random_total = 0.0;
  for (auto& e : set.entries) {
    if (e.coalition.is_empty() || e.coalition.is_grand(set.m)) continue;
    if (e.deterministic) {
      e.solver_weight = e.sampling_probability;
      continue;
    }
    e.solver_weight = c_kernel_weight(e.sampling_probability, static_cast<double>(set.total_draws));
    random_total += e.solver_weight;
  }
  const double target = 1.0 - set.deterministic_mass;
  if (random_total > 0.0)
    for (auto& e : set.entries)
      if (!e.deterministic && !e.coalition.is_empty() && !e.coalition.is_grand(set.m))
        e.solver_weight *= target / random_total;
  set.reweighting = Reweighting::c_kernel;
  detail::normalize_interior(set);
  return set;
}

namespace detail {

/// Frequency (or c-kernel) weights for sampled rows, kernel mass for
/// deterministic rows, boundary constant for the ends.
inline void assign_weights(CoalitionSet& set) {
  if (set.reweighting == Reweighting::c_kernel) {
    set = reweight_c_kernel(std::move(set));
    return;
  }
  double random_total = 0.0;
  for (auto& e : set.entries) {
    if (e.coalition.is_empty() || e.coalition.is_grand(set.m)) continue;
    if (e.deterministic) {
      e.solver_weight = e.sampling_probability;
    } else {
      e.solver_weight = static_cast<double>(e.sample_count);
      random_total += e.solver_weight;
    }
  }
  const double target = 1.0 - set.deterministic_mass;
  if (random_total > 0.0)
    for (auto& e : set.entries)
      if (!e.deterministic && !e.coalition.is_empty() && !e.coalition.is_grand(set.m))
        e.solver_weight *= target / random_total;
  normalize_interior(set);
}

}  // namespace detail

/// Incremental kernel sampler. Grows a coalition set to a target number of
/// unique coalitions; later calls continue the same random stream, so a set
/// grown in several steps equals one grown in a single call.
class CoalitionSampler {
 public:
  CoalitionSampler(SamplingUniverse universe, SamplingOptions options, std::uint64_t seed)
      : universe_(std::move(universe)), options_(options), rng_(seed) {
    if (universe_.restricted() && options_.paired)
      throw InvalidArgument("paired sampling is not available for asymmetric (causal-order) coalitions");
    if (universe_.restricted() && options_.semi_deterministic)
      throw InvalidArgument("semi-deterministic sampling is not available for asymmetric coalitions");
  }

  CoalitionSampler(int m, SamplingOptions options, std::uint64_t seed)
      : CoalitionSampler(SamplingUniverse::full(m), options, seed) {}

  int m() const { return universe_.m(); }
  const SamplingUniverse& universe() const { return universe_; }
  const SamplingOptions& options() const { return options_; }

  /// Total coalitions available, boundaries included.
  double capacity() const { return universe_.interior_count() + 2.0; }

  std::size_t unique_count() const { return counts_.size() + deterministic_.size() + 2; }

  void grow_to(std::size_t n_coal) {
    const int m = universe_.m();
    if (m < 2) return;
    if (static_cast<double>(n_coal) >= capacity()) {
      exhausted_ = true;
      return;
    }
    if (n_coal < unique_count()) return;
    if (options_.paired && (n_coal - 2) % 2 != 0) --n_coal;
    if (options_.semi_deterministic) update_deterministic_strata(n_coal);
    std::vector<bool> allowed(static_cast<std::size_t>(m), true);
    for (int s : deterministic_sizes_) allowed[static_cast<std::size_t>(s)] = false;
    bool any_allowed = false;
    for (int s = 1; s < m; ++s) any_allowed = any_allowed || allowed[static_cast<std::size_t>(s)];
    while (unique_count() < n_coal && any_allowed) {
      Coalition c = universe_.restricted()
                        ? universe_.draw(rng_)
                        : SamplingUniverse::random_subset(full_mask(m), universe_.draw_size(rng_, &allowed), rng_);
      ++counts_[c.mask];
      ++draws_;
      if (options_.paired) {
        ++counts_[c.complement(m).mask];
        ++draws_;
      }
    }
  }

  CoalitionSet current() const {
    const int m = universe_.m();
    if (exhausted_ || m < 2) {
      if (universe_.restricted()) return valid_causal_coalitions(*universe_.ordering(), m, options_.boundary_weight);
      return enumerate_all(m, options_.boundary_weight);
    }
    CoalitionSet set;
    set.m = m;
    set.boundary_weight = options_.boundary_weight;
    set.paired = options_.paired;
    set.reweighting = options_.reweighting;
    set.total_draws = draws_;
    set.strategy = options_.semi_deterministic ? Strategy::semi_deterministic
                   : options_.paired ? (options_.reweighting == Reweighting::c_kernel ? Strategy::paired_c_kernel
                                                                                     : Strategy::paired)
                                     : Strategy::unique_sampled;
    set.entries.push_back(detail::boundary_entry(Coalition{0}, options_.boundary_weight));
    set.entries.push_back(detail::boundary_entry(Coalition{full_mask(m)}, options_.boundary_weight));
    double det_mass = 0.0;
    for (std::uint64_t mask : deterministic_) {
      CoalitionEntry e;
      e.coalition = Coalition{mask};
      e.deterministic = true;
      e.sampling_probability = universe_.probability(e.coalition);
      det_mass += e.sampling_probability;
      set.entries.push_back(e);
    }
    const double random_mass = random_size_mass();
    for (const auto& [mask, count] : counts_) {
      CoalitionEntry e;
      e.coalition = Coalition{mask};
      e.sample_count = count;
      // proposal restricted to the non-deterministic strata
      e.sampling_probability = universe_.probability(e.coalition) / random_mass;
      set.entries.push_back(e);
    }
    set.deterministic_mass = det_mass;
    detail::canonical_sort(set.entries, m);
    detail::assign_weights(set);
    return set;
  }

  // -- persistence -------------------------------------------------------
  struct State {
    std::string rng;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> counts;
    std::vector<std::uint64_t> deterministic;
    std::vector<int> deterministic_sizes;
    std::uint64_t draws = 0;
    bool exhausted = false;
  };

  State state() const {
    State s;
    s.rng = serialize_rng(rng_);
    s.counts.assign(counts_.begin(), counts_.end());
    s.deterministic = deterministic_;
    s.deterministic_sizes = deterministic_sizes_;
    s.draws = draws_;
    s.exhausted = exhausted_;
    return s;
  }

  void restore(const State& s) {
    rng_ = deserialize_rng(s.rng);
    counts_.clear();
    for (const auto& [k, v] : s.counts) counts_[k] = v;
    deterministic_ = s.deterministic;
    deterministic_sizes_ = s.deterministic_sizes;
    draws_ = s.draws;
    exhausted_ = s.exhausted;
  }

 private:
  double random_size_mass() const {
    if (universe_.restricted()) return 1.0;
    double mass = 1.0;
    for (int s : deterministic_sizes_) mass -= universe_.size_mass(s);
    return mass;
  }

  /// Size s (jointly with M-s) is included deterministically when the
  /// remaining budget times the stratum's share of the remaining kernel mass
  /// reaches the stratum's cardinality. Strata are considered from the
  /// outside (s = 1) inwards and the scan stops at the first failure.
  void update_deterministic_strata(std::size_t n_coal) {
    const int m = universe_.m();
    double remaining = static_cast<double>(n_coal) - 2.0;
    double mass_left = 1.0;
    std::vector<int> sizes;
    for (int s = 1; 2 * s <= m; ++s) {
      const int t = m - s;
      const double card = binomial(m, s) + (t != s ? binomial(m, t) : 0.0);
      const double mass = universe_.size_mass(s) + (t != s ? universe_.size_mass(t) : 0.0);
      if (remaining * mass / mass_left < card) break;
      sizes.push_back(s);
      if (t != s) sizes.push_back(t);
      remaining -= card;
      mass_left -= mass;
    }
    if (sizes.size() <= deterministic_sizes_.size()) return;
    for (std::size_t i = deterministic_sizes_.size(); i < sizes.size(); ++i) {
      const int s = sizes[i];
      // move sampled rows of this size into the deterministic part
      for (auto it = counts_.begin(); it != counts_.end();) {
        if (std::popcount(it->first) == s) {
          draws_ -= it->second;
          it = counts_.erase(it);
        } else {
          ++it;
        }
      }
      enumerate_size(s);
    }
    deterministic_sizes_ = sizes;
  }

  void enumerate_size(int s) {
    const int m = universe_.m();
    // Gosper's hack over masks with popcount s
    std::uint64_t mask = (std::uint64_t{1} << s) - 1;
    const std::uint64_t limit = std::uint64_t{1} << m;
    while (mask < limit) {
      deterministic_.push_back(mask);
      const std::uint64_t c = mask & (~mask + 1);
      const std::uint64_t r = mask + c;
      mask = (((r ^ mask) >> 2) / c) | r;
    }
  }

  SamplingUniverse universe_;
  SamplingOptions options_;
  Rng rng_;
  std::map<std::uint64_t, std::uint64_t> counts_;
  std::vector<std::uint64_t> deterministic_;
  std::vector<int> deterministic_sizes_;
  std::uint64_t draws_ = 0;
  bool exhausted_ = false;
};

/// Samples coalitions until n_coal unique ones (boundaries included) are
/// present. A budget covering the whole space degenerates to enumerate_all.
inline CoalitionSet sample_coalitions(int m, std::size_t n_coal, bool paired, Reweighting reweighting,
                                      bool semi_deterministic, std::uint64_t seed,
                                      double boundary_weight = kDefaultBoundaryWeight) {
  if (n_coal <= 2) throw InvalidArgument("n_coal must exceed 2");
  if (paired && n_coal < 4) throw InvalidArgument("paired sampling needs n_coal >= 4");
  if (paired && (n_coal - 2) % 2 != 0)
    throw InvalidArgument("paired sampling needs an even number of interior coalitions");
  SamplingOptions opts{paired, reweighting, semi_deterministic, boundary_weight};
  CoalitionSampler sampler(m, opts, seed);
  sampler.grow_to(n_coal);
  return sampler.current();
}

/// Bootstrap replicate of a sampled set: the L random draws (pairs when
/// paired) are resampled with replacement; deterministic rows are kept.
inline CoalitionSet resample_draws(const CoalitionSet& set, Rng& rng) {
  if (!set.is_sampled()) return set;
  std::vector<std::size_t> units;      // entry index per draw unit
  std::vector<std::uint64_t> weights;  // draws per unit
  for (std::size_t i = 0; i < set.entries.size(); ++i) {
    const auto& e = set.entries[i];
    if (e.deterministic || e.sample_count == 0) continue;
    if (set.paired && e.coalition.complement(set.m).mask < e.coalition.mask) continue;
    units.push_back(i);
    weights.push_back(e.sample_count);
  }
  std::uint64_t n_units = 0;
  for (auto w : weights) n_units += w;
  CoalitionSet out = set;
  out.entries.clear();
  if (n_units == 0) return set;
  std::vector<std::uint64_t> cumulative(weights.size());
  std::uint64_t acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) cumulative[i] = (acc += weights[i]);
  std::vector<std::uint64_t> fresh(weights.size(), 0);
  for (std::uint64_t d = 0; d < n_units; ++d) {
    const std::uint64_t r = uniform_index(rng, n_units);
    const auto k = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), r) - cumulative.begin());
    ++fresh[k];
  }
  for (const auto& e : set.entries)
    if (e.deterministic) out.entries.push_back(e);
  for (std::size_t k = 0; k < units.size(); ++k) {
    if (fresh[k] == 0) continue;
    CoalitionEntry e = set.entries[units[k]];
    e.sample_count = fresh[k];
    out.entries.push_back(e);
    if (set.paired) {
      CoalitionEntry partner = e;
      partner.coalition = e.coalition.complement(set.m);
      if (auto idx = set.find(partner.coalition)) partner.sampling_probability = set.entries[*idx].sampling_probability;
      out.entries.push_back(partner);
    }
  }
  out.total_draws = set.paired ? 2 * n_units : n_units;
  detail::canonical_sort(out.entries, set.m);
  detail::assign_weights(out);
  return out;
}

}  // namespace condshap
