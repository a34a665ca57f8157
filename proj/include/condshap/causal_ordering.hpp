// Partial causal ordering of players (features or groups) into chain
// components.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "condshap/common.hpp"

namespace condshap {

/// Ordered chain components; component i is an ancestor of component j iff
/// i < j. Players are 0-based indices.
struct CausalOrdering {
  std::vector<std::vector<int>> components;

  /// One component holding every player; equivalent to "no ordering".
  static CausalOrdering single(int n_players) {
    CausalOrdering o;
    o.components.emplace_back();
    for (int j = 0; j < n_players; ++j) o.components.back().push_back(j);
    return o;
  }

  std::uint64_t component_mask(std::size_t i) const {
    std::uint64_t m = 0;
    for (int j : components[i]) m |= std::uint64_t{1} << j;
    return m;
  }

  /// Union of all components strictly before component i.
  std::uint64_t ancestor_mask(std::size_t i) const {
    std::uint64_t m = 0;
    for (std::size_t k = 0; k < i; ++k) m |= component_mask(k);
    return m;
  }

  /// Throws unless the components partition {0..n_players-1}.
  void validate(int n_players) const {
    if (n_players > 64) throw InvalidArgument("causal ordering supports at most 64 players");
    std::uint64_t seen = 0;
    for (const auto& comp : components) {
      if (comp.empty()) throw InvalidArgument("causal ordering has an empty component");
      for (int j : comp) {
        if (j < 0 || j >= n_players)
          throw InvalidArgument("causal ordering refers to unknown player " +
                                std::to_string(j + 1));
        const std::uint64_t bit = std::uint64_t{1} << j;
        if (seen & bit)
          throw InvalidArgument("player " + std::to_string(j + 1) +
                                " appears in more than one causal component");
        seen |= bit;
      }
    }
    const std::uint64_t all =
        n_players == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << n_players) - 1;
    if (seen != all) throw InvalidArgument("causal ordering does not cover every player");
  }
};

}  // namespace condshap
