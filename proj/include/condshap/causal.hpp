// Causal chain graphs: interventional sampling chains and the mapping from
// (asymmetric, ordering, confounding) to a Shapley value framework.

#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "condshap/causal_ordering.hpp"
#include "condshap/coalition.hpp"
#include "condshap/common.hpp"
#include "condshap/data.hpp"
#include "condshap/mc_estimators.hpp"

namespace condshap {

/// One flag per component, or a single flag applied to all of them.
struct ConfoundingFlags {
  std::vector<bool> flags;

  bool at(std::size_t component) const {
    if (flags.empty()) return false;
    return flags.size() == 1 ? flags[0] : flags.at(component);
  }

  void validate(std::size_t n_components) const {
    if (!flags.empty() && flags.size() != 1 && flags.size() != n_components)
      throw InvalidArgument("confounding needs one flag per causal component (" + std::to_string(n_components) +
                            "), got " + std::to_string(flags.size()));
  }
};

struct ChainStep {
  std::uint64_t target = 0;  // features drawn in this step
  std::uint64_t cond = 0;    // features conditioned on (fixed or drawn earlier)
};

struct SamplingChain {
  std::vector<ChainStep> steps;
};

/// Steps for p(x_Sbar | do(x_S)). Components are visited in order; each
/// draws its unknown features given all features of earlier components and,
/// unless the component is confounded, its own known features.
inline SamplingChain build_chain(std::uint64_t s_mask, const CausalOrdering& ordering, const ConfoundingFlags& confounding,
                                 int m) {
  ordering.validate(m);
  confounding.validate(ordering.components.size());
  SamplingChain chain;
  for (std::size_t i = 0; i < ordering.components.size(); ++i) {
    const std::uint64_t tau = ordering.component_mask(i);
    ChainStep step;
    step.target = tau & ~s_mask;
    if (step.target == 0) continue;
    step.cond = ordering.ancestor_mask(i);
    if (!confounding.at(i)) step.cond |= tau & s_mask;
    chain.steps.push_back(step);
  }
  return chain;
}

/// Every step conditions only on features that are known or already drawn,
/// and the targets partition the complement of S.
inline bool chain_is_well_formed(const SamplingChain& chain, std::uint64_t s_mask, int m) {
  std::uint64_t available = s_mask;
  for (const auto& step : chain.steps) {
    if ((step.cond & ~available) != 0) return false;
    if ((step.target & available) != 0) return false;
    available |= step.target;
  }
  return available == full_mask(m);
}

namespace detail {

inline Eigen::Index pick_weighted(const std::vector<double>& w, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u < acc) return static_cast<Eigen::Index>(i);
  }
  return static_cast<Eigen::Index>(w.size() - 1);
}

}  // namespace detail

/// Executes the chain for one explicand. The first step draws K rows; every
/// later step draws one value per partial row, conditioning on that row.
/// The result covers the complement of S in increasing column order and
/// keeps the first step's weights, if any.
inline SampleBatch causal_sample(const SamplingChain& chain, const ConditionalSampler& sampler, std::uint64_t s_mask,
                                 const RowVector& x, int k, Rng& rng) {
  const int m = static_cast<int>(x.size());
  const auto comp = mask_members(full_mask(m) & ~s_mask);
  if (chain.steps.empty()) throw InvalidArgument("empty sampling chain");
  if (chain.steps.size() == 1) return sampler.sample(chain.steps[0].target, chain.steps[0].cond, x, k, rng);

  auto fill = [](Matrix& rows, Eigen::Index r, std::uint64_t target, const Eigen::Ref<const RowVector>& values) {
    Eigen::Index a = 0;
    for (int j : mask_members(target)) rows(r, j) = values[a++];
  };
  SampleBatch first;
  try {
    first = sampler.sample(chain.steps[0].target, chain.steps[0].cond, x, k, rng);
  } catch (const Error& e) {
    throw EstimationError("causal sampling step 1 failed: " + std::string(e.what()));
  }
  Matrix rows(first.rows.rows(), m);
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    rows.row(r) = x;
    fill(rows, r, chain.steps[0].target, first.rows.row(r));
  }
  for (std::size_t s = 1; s < chain.steps.size(); ++s) {
    const auto& step = chain.steps[s];
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      SampleBatch b;
      try {
        b = sampler.sample(step.target, step.cond, rows.row(r), 1, rng);
      } catch (const Error& e) {
        throw EstimationError("causal sampling step " + std::to_string(s + 1) + " failed: " + e.what());
      }
      const Eigen::Index pick = b.weighted() ? detail::pick_weighted(b.weights, rng) : 0;
      fill(rows, r, step.target, b.rows.row(pick));
    }
  }
  SampleBatch out;
  out.rows = detail::select_columns(rows, comp);
  out.weights = std::move(first.weights);
  return out;
}

/// v(S) under the interventional distribution.
inline VSEstimate estimate_vS_causal(const ConditionalSampler& sampler, const Predictor& predictor, std::uint64_t s_mask,
                                     const CausalOrdering& ordering, const ConfoundingFlags& confounding,
                                     const Matrix& x_explain, int k, std::uint64_t seed) {
  const int m = static_cast<int>(x_explain.cols());
  const SamplingChain chain = build_chain(s_mask, ordering, confounding, m);
  return estimate_vS_draws(
      [&](const RowVector& x, Rng& rng) { return causal_sample(chain, sampler, s_mask, x, k, rng); }, predictor,
      s_mask, x_explain, seed);
}

// ---------------------------------------------------------------------------

enum class FrameworkKind { symmetric_conditional, asymmetric_conditional, symmetric_causal, asymmetric_causal, symmetric_marginal };

inline std::string to_string(FrameworkKind k) {
  switch (k) {
    case FrameworkKind::symmetric_conditional: return "symmetric conditional";
    case FrameworkKind::asymmetric_conditional: return "asymmetric conditional";
    case FrameworkKind::symmetric_causal: return "symmetric causal";
    case FrameworkKind::asymmetric_causal: return "asymmetric causal";
    case FrameworkKind::symmetric_marginal: return "symmetric marginal";
  }
  return "?";
}

struct Framework {
  FrameworkKind kind = FrameworkKind::symmetric_conditional;
  /// Coalitions restricted to those respecting the ordering.
  bool asymmetric = false;
  /// v(S) from the interventional chain instead of the plain conditional.
  bool causal = false;
  CausalOrdering ordering;  // over players; a single component when none given
  ConfoundingFlags confounding;
};

/// Maps the three arguments to a framework. An absent ordering means one
/// component holding every player; an absent confounding vector means plain
/// conditional sampling.
inline Framework resolve_framework(bool asymmetric, const std::optional<CausalOrdering>& ordering,
                                   const std::optional<ConfoundingFlags>& confounding, int n_players) {
  Framework fw;
  fw.ordering = ordering ? *ordering : CausalOrdering::single(n_players);
  fw.ordering.validate(n_players);
  if (!ordering && confounding) {
    const bool all_true = !confounding->flags.empty() &&
                          std::all_of(confounding->flags.begin(), confounding->flags.end(), [](bool b) { return b; });
    if (!all_true || asymmetric)
      throw InvalidArgument("confounding requires a causal ordering (only confounding = TRUE without an ordering, "
                            "the marginal shortcut, is allowed)");
    fw.kind = FrameworkKind::symmetric_marginal;
    fw.causal = true;
    fw.confounding = ConfoundingFlags{{true}};
    return fw;
  }
  if (asymmetric && !ordering) throw InvalidArgument("asymmetric Shapley values need a causal ordering");
  fw.asymmetric = asymmetric;
  if (confounding) {
    confounding->validate(fw.ordering.components.size());
    fw.confounding = *confounding;
    fw.causal = true;
    fw.kind = asymmetric ? FrameworkKind::asymmetric_causal : FrameworkKind::symmetric_causal;
  } else {
    fw.kind = asymmetric ? FrameworkKind::asymmetric_conditional : FrameworkKind::symmetric_conditional;
  }
  return fw;
}

/// Expands a player-level ordering to features through the group map.
inline CausalOrdering expand_ordering(const CausalOrdering& ordering, const ResolvedGroups& groups) {
  CausalOrdering out;
  for (const auto& comp : ordering.components) {
    std::vector<int> feats;
    for (int g : comp)
      for (int j : mask_members(groups.feature_masks.at(static_cast<std::size_t>(g)))) feats.push_back(j);
    std::sort(feats.begin(), feats.end());
    out.components.push_back(std::move(feats));
  }
  return out;
}

}  // namespace condshap
