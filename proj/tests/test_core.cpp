// Coalitions, solver, data and model.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "condshap/coalition.hpp"
#include "condshap/data.hpp"
#include "condshap/external_model.hpp"
#include "condshap/model.hpp"
#include "condshap/solver.hpp"

using namespace condshap;

namespace {

// Shapley values by averaging marginal contributions over all orderings.
Vector permutation_shapley(const std::vector<double>& game, int m) {
  std::vector<int> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  Vector phi = Vector::Zero(m + 1);
  double n_perm = 0;
  do {
    std::uint64_t mask = 0;
    for (int j : order) {
      const std::uint64_t next = mask | (std::uint64_t{1} << j);
      phi[j + 1] += game[next] - game[mask];
      mask = next;
    }
    n_perm += 1;
  } while (std::next_permutation(order.begin(), order.end()));
  phi.tail(m) /= n_perm;
  phi[0] = game[0];
  return phi;
}

// Subset form written out with factorials, for M too large to permute.
Vector factorial_shapley(const std::vector<double>& game, int m) {
  std::vector<double> fact(static_cast<std::size_t>(m + 1), 1.0);
  for (int i = 1; i <= m; ++i) fact[i] = fact[i - 1] * i;
  Vector phi = Vector::Zero(m + 1);
  for (int j = 0; j < m; ++j) {
    const std::uint64_t bit = std::uint64_t{1} << j;
    for (std::uint64_t s = 0; s < (std::uint64_t{1} << m); ++s) {
      if (s & bit) continue;
      const int k = std::popcount(s);
      phi[j + 1] += fact[k] * fact[m - k - 1] / fact[m] * (game[s | bit] - game[s]);
    }
  }
  phi[0] = game[0];
  return phi;
}

std::vector<double> random_game(int m, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> g(std::size_t{1} << m);
  for (auto& v : g) v = 4.0 * uniform01(rng) - 2.0;
  return g;
}

Matrix game_column(const CoalitionSet& set, const std::vector<double>& game) {
  Matrix v(static_cast<Eigen::Index>(set.size()), 1);
  for (std::size_t i = 0; i < set.size(); ++i) v(static_cast<Eigen::Index>(i), 0) = game[set.entries[i].coalition.mask];
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// coalition

TEST(Kernel, HandEvaluatedValues) {
  EXPECT_DOUBLE_EQ(shapley_kernel_weight(4, 2), 0.125);
  EXPECT_DOUBLE_EQ(shapley_kernel_weight(3, 1), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(shapley_kernel_weight(5, 1), shapley_kernel_weight(5, 4));
  EXPECT_THROW(shapley_kernel_weight(4, 0), InvalidArgument);
  EXPECT_THROW(shapley_kernel_weight(4, 4), InvalidArgument);
}

TEST(Kernel, SymmetricAndPositive) {
  for (int m = 2; m <= 20; ++m) {
    KernelWeights k(m);
    for (int s = 1; s < m; ++s) {
      EXPECT_GT(k(s), 0.0);
      EXPECT_DOUBLE_EQ(k(s), k(m - s));
    }
    EXPECT_EQ(k(0), kDefaultBoundaryWeight);
  }
}

TEST(Kernel, ProposalMassSumsToOne) {
  for (int m = 2; m <= 12; ++m) {
    double total = 0.0;
    for (int s = 1; s < m; ++s) total += binomial(m, s) * kernel_probability(m, s);
    EXPECT_NEAR(total, 1.0, 1e-12) << "M=" << m;
  }
}

TEST(CoalitionBits, ComplementInvolution) {
  for (std::uint64_t mask = 0; mask < 64; ++mask) {
    Coalition c{mask};
    EXPECT_EQ(c.complement(6).size(), 6 - c.size());
    EXPECT_EQ(c.complement(6).complement(6), c);
  }
}

TEST(Enumerate, ThreePlayers) {
  const auto set = enumerate_all(3);
  ASSERT_EQ(set.size(), 8U);
  EXPECT_FALSE(set.is_sampled());
  EXPECT_TRUE(set.entries.front().coalition.is_empty());
  EXPECT_TRUE(set.entries.back().coalition.is_grand(3));
  EXPECT_EQ(set.entries.front().solver_weight, kDefaultBoundaryWeight);
  EXPECT_EQ(set.entries.back().solver_weight, kDefaultBoundaryWeight);
  double total = 0.0;
  for (std::size_t i = 1; i + 1 < set.size(); ++i) {
    EXPECT_DOUBLE_EQ(set.entries[i].solver_weight, set.entries[1].solver_weight);
    total += set.entries[i].solver_weight;
  }
  EXPECT_NEAR(total, 1.0, 1e-15);
}

TEST(Enumerate, OnePlayerAndLimit) {
  const auto one = enumerate_all(1);
  ASSERT_EQ(one.size(), 2U);
  EXPECT_EQ(one.entries[0].coalition.mask, 0U);
  EXPECT_EQ(one.entries[1].coalition.mask, 1U);
  EXPECT_THROW(enumerate_all(31), InvalidArgument);
}

TEST(Enumerate, FourPlayersProportionalToKernel) {
  const auto set = enumerate_all(4);
  double z = 0.0;
  for (int s = 1; s < 4; ++s) z += binomial(4, s) * shapley_kernel_weight(4, s);
  for (const auto& e : set.entries) {
    const int s = e.coalition.size();
    if (s == 0 || s == 4) continue;
    EXPECT_NEAR(e.solver_weight, shapley_kernel_weight(4, s) / z, 1e-15);
  }
  const auto two = *set.find(Coalition::of({0, 1}));
  EXPECT_NEAR(set.entries[two].solver_weight, 0.125 / z, 1e-15);
}

TEST(Sampling, FullBudgetDegeneratesToEnumeration) {
  for (bool paired : {false, true})
    for (auto rw : {Reweighting::none, Reweighting::c_kernel}) {
      const auto set = sample_coalitions(3, 8, paired, rw, false, 11);
      const auto all = enumerate_all(3);
      ASSERT_EQ(set.size(), all.size());
      for (std::size_t i = 0; i < set.size(); ++i) {
        EXPECT_EQ(set.entries[i].coalition, all.entries[i].coalition);
        EXPECT_DOUBLE_EQ(set.entries[i].solver_weight, all.entries[i].solver_weight);
      }
    }
}

TEST(Sampling, PairedSetsAreComplementClosed) {
  for (int m : {3, 6, 10}) {
    const auto set = sample_coalitions(m, m == 3 ? 6 : 40, true, Reweighting::c_kernel, false, 5);
    std::multiset<int> sizes;
    for (const auto& e : set.entries) {
      const auto j = set.find(e.coalition.complement(m));
      ASSERT_TRUE(j.has_value()) << "M=" << m;
      EXPECT_DOUBLE_EQ(set.entries[*j].solver_weight, e.solver_weight);
      sizes.insert(e.coalition.size());
    }
    for (int s = 0; s <= m; ++s) EXPECT_EQ(sizes.count(s), sizes.count(m - s));
  }
}

TEST(Sampling, CKernelWeightsDependOnSizeOnly) {
  const auto set = sample_coalitions(10, 64, true, Reweighting::c_kernel, false, 3);
  std::map<int, double> by_size;
  for (const auto& e : set.entries) {
    const int s = e.coalition.size();
    if (s == 0 || s == 10) continue;
    auto [it, fresh] = by_size.emplace(s, e.solver_weight);
    if (!fresh) EXPECT_DOUBLE_EQ(it->second, e.solver_weight) << "size " << s;
  }
  EXPECT_GE(by_size.size(), 2U);
}

TEST(Sampling, ReproducibleWithSeed) {
  const auto a = sample_coalitions(9, 60, true, Reweighting::c_kernel, true, 42);
  const auto b = sample_coalitions(9, 60, true, Reweighting::c_kernel, true, 42);
  const auto c = sample_coalitions(9, 60, true, Reweighting::c_kernel, true, 43);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.entries[i].coalition, b.entries[i].coalition);
    EXPECT_EQ(a.entries[i].sample_count, b.entries[i].sample_count);
    EXPECT_EQ(a.entries[i].solver_weight, b.entries[i].solver_weight);
  }
  EXPECT_EQ(a.total_draws, b.total_draws);
  bool differs = a.size() != c.size();
  for (std::size_t i = 0; !differs && i < a.size(); ++i) differs = a.entries[i].coalition != c.entries[i].coalition;
  EXPECT_TRUE(differs);
}

TEST(Sampling, InvalidBudgets) {
  EXPECT_THROW(sample_coalitions(5, 2, false, Reweighting::none, false, 1), InvalidArgument);
  EXPECT_THROW(sample_coalitions(5, 3, true, Reweighting::none, false, 1), InvalidArgument);
}

TEST(Sampling, UniqueCountReached) {
  for (std::size_t n : {10U, 24U, 100U}) {
    const auto set = sample_coalitions(8, n, false, Reweighting::none, false, 9);
    EXPECT_EQ(set.size(), n);
    std::set<std::uint64_t> seen;
    for (const auto& e : set.entries) EXPECT_TRUE(seen.insert(e.coalition.mask).second);
  }
}

TEST(Sampling, FrequencyWeightsWithoutReweighting) {
  const auto set = sample_coalitions(8, 30, false, Reweighting::none, false, 4);
  double draws = 0.0;
  for (const auto& e : set.entries) draws += static_cast<double>(e.sample_count);
  EXPECT_EQ(static_cast<std::uint64_t>(draws), set.total_draws);
  for (const auto& e : set.entries) {
    if (e.coalition.is_empty() || e.coalition.is_grand(8)) continue;
    EXPECT_NEAR(e.solver_weight, static_cast<double>(e.sample_count) / draws, 1e-15);
  }
}

TEST(Sampling, SemiDeterministicStrataAreComplete) {
  const int m = 10;
  for (std::size_t n : {60U, 200U, 600U}) {
    const auto set = sample_coalitions(m, n, true, Reweighting::c_kernel, true, 8);
    std::map<int, int> det_count;
    for (const auto& e : set.entries)
      if (e.deterministic && !e.coalition.is_empty() && !e.coalition.is_grand(m)) ++det_count[e.coalition.size()];
    for (const auto& [s, count] : det_count) EXPECT_EQ(count, static_cast<int>(binomial(m, s))) << "size " << s;
    if (n == 600U) EXPECT_FALSE(det_count.empty());
  }
}

TEST(Sampling, SemiDeterministicThresholdRule) {
  // M=10: strata {1,9} have 20 members. Inclusion needs (n-2) * mass >= 20.
  const int m = 10;
  const double mass19 = 2 * binomial(m, 1) * kernel_probability(m, 1);
  const auto need = static_cast<std::size_t>(std::ceil(20.0 / mass19)) + 2;
  auto det = [&](std::size_t n) {
    const auto set = sample_coalitions(m, n, true, Reweighting::c_kernel, true, 8);
    return std::any_of(set.entries.begin(), set.entries.end(), [&](const auto& e) {
      return e.deterministic && !e.coalition.is_empty() && !e.coalition.is_grand(m);
    });
  };
  EXPECT_TRUE(det(need + (need % 2)));
  EXPECT_FALSE(det(need - 2 - (need % 2)));
}

TEST(CKernel, DirectFormulaOracle) {
  const int m = 4;
  const std::uint64_t L = 10;
  CoalitionSet set;
  set.m = m;
  set.strategy = Strategy::unique_sampled;
  set.reweighting = Reweighting::c_kernel;
  set.total_draws = L;
  for (std::uint64_t mask = 0; mask < 16; ++mask) {
    CoalitionEntry e;
    e.coalition = Coalition{mask};
    if (mask == 0 || mask == 15) {
      e.solver_weight = kDefaultBoundaryWeight;
    } else {
      e.sample_count = 1;
      e.sampling_probability = kernel_probability(m, e.coalition.size());
    }
    set.entries.push_back(e);
  }
  const auto out = reweight_c_kernel(set);
  // independent evaluation
  std::vector<double> raw(16, 0.0);
  double total = 0.0;
  for (std::uint64_t mask = 1; mask < 15; ++mask) {
    const int s = std::popcount(mask);
    double z = 0.0;
    for (int q = 1; q < m; ++q) z += (m - 1.0) / (q * (m - q));  // k(M,q) * C(M,q)
    const double p = (m - 1.0) / (binomial(m, s) * s * (m - s)) / z;
    raw[mask] = p / (1.0 - std::pow(1.0 - p, static_cast<double>(L)));
    total += raw[mask];
  }
  for (const auto& e : out.entries) {
    const auto mask = e.coalition.mask;
    if (mask == 0 || mask == 15) {
      EXPECT_EQ(e.solver_weight, kDefaultBoundaryWeight);
    } else {
      EXPECT_NEAR(e.solver_weight, raw[mask] / total, 1e-14);
    }
  }
}

TEST(CKernel, Limits) {
  EXPECT_NEAR(c_kernel_weight(0.03, 1e9), 0.03, 1e-15);
  EXPECT_DOUBLE_EQ(c_kernel_weight(1.0, 5), 1.0);
  EXPECT_NEAR(c_kernel_weight(1e-12, 1.0), 1.0, 1e-6);
}

TEST(BuildZ, Rows) {
  const Matrix z = build_z({Coalition::of({0, 2}), Coalition{0}, Coalition{full_mask(4)}}, 4);
  RowVector r0(5), r1(5), r2(5);
  r0 << 1, 1, 0, 1, 0;
  r1 << 1, 0, 0, 0, 0;
  r2 << 1, 1, 1, 1, 1;
  EXPECT_EQ(RowVector(z.row(0)), r0);
  EXPECT_EQ(RowVector(z.row(1)), r1);
  EXPECT_EQ(RowVector(z.row(2)), r2);
}

TEST(CausalCoalitions, ExampleCounts) {
  const CausalOrdering fig{{{0}, {1, 2}, {3, 4, 5, 6}}};
  EXPECT_EQ(valid_causal_coalitions(fig, 7).size(), 20U);
  EXPECT_EQ(valid_causal_coalitions(CausalOrdering::single(5), 5).size(), 32U);
  const auto two = valid_causal_coalitions(CausalOrdering{{{0}, {1}}}, 2);
  ASSERT_EQ(two.size(), 3U);
  std::set<std::uint64_t> masks;
  for (const auto& e : two.entries) masks.insert(e.coalition.mask);
  EXPECT_EQ(masks, (std::set<std::uint64_t>{0, 1, 3}));
}

TEST(CausalCoalitions, BruteForceAncestorClosure) {
  Rng rng(17);
  for (int trial = 0; trial < 40; ++trial) {
    const int m = 2 + static_cast<int>(uniform_index(rng, 9));
    std::vector<int> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = m - 1; i > 0; --i) std::swap(perm[i], perm[uniform_index(rng, static_cast<std::uint64_t>(i + 1))]);
    CausalOrdering o;
    for (int j : perm) {
      if (o.components.empty() || uniform01(rng) < 0.4) o.components.emplace_back();
      o.components.back().push_back(j);
    }
    std::vector<int> comp_of(static_cast<std::size_t>(m));
    for (std::size_t k = 0; k < o.components.size(); ++k)
      for (int j : o.components[k]) comp_of[j] = static_cast<int>(k);
    std::set<std::uint64_t> expected;
    for (std::uint64_t s = 0; s < (std::uint64_t{1} << m); ++s) {
      bool ok = true;
      for (int j = 0; j < m && ok; ++j) {
        if (!(s >> j & 1U)) continue;
        for (int i = 0; i < m; ++i)
          if (comp_of[i] < comp_of[j] && !(s >> i & 1U)) ok = false;
      }
      if (ok) expected.insert(s);
    }
    const auto set = valid_causal_coalitions(o, m);
    std::set<std::uint64_t> got;
    for (const auto& e : set.entries) got.insert(e.coalition.mask);
    EXPECT_EQ(got, expected);
    const auto universe = SamplingUniverse::causal(m, o);
    EXPECT_EQ(universe.interior_count() + 2.0, static_cast<double>(expected.size()));
    for (int d = 0; d < 20; ++d) EXPECT_TRUE(expected.count(universe.draw(rng).mask));
  }
}

TEST(Sampler, RestoreContinuesIdentically) {
  SamplingOptions opts;
  opts.semi_deterministic = true;
  CoalitionSampler a(9, opts, 99);
  a.grow_to(30);
  const auto st = a.state();
  a.grow_to(120);
  const auto first = a.current();
  CoalitionSampler b(9, opts, 12345);
  b.restore(st);
  b.grow_to(120);
  const auto second = b.current();
  ASSERT_EQ(first.size(), second.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    EXPECT_EQ(first.entries[i].coalition, second.entries[i].coalition);
    EXPECT_EQ(first.entries[i].solver_weight, second.entries[i].solver_weight);
  }
}

TEST(Sampler, GrowingKeepsEarlierCoalitions) {
  CoalitionSampler s(10, SamplingOptions{}, 7);
  s.grow_to(20);
  const auto small = s.current();
  s.grow_to(80);
  const auto big = s.current();
  for (const auto& e : small.entries) EXPECT_TRUE(big.find(e.coalition).has_value());
}

// ---------------------------------------------------------------------------
// solver

TEST(Solver, SymmetricCountingGame) {
  const auto set = enumerate_all(3);
  std::vector<double> game(8);
  for (std::uint64_t s = 0; s < 8; ++s) game[s] = std::popcount(s);
  const Matrix phi = solve_wls(set, game_column(set, game));
  EXPECT_NEAR(phi(0, 0), 0.0, 1e-12);
  for (int j = 1; j <= 3; ++j) EXPECT_NEAR(phi(j, 0), 1.0, 1e-12);
}

TEST(Solver, TwoPlayerGame) {
  const auto set = enumerate_all(2);
  const std::vector<double> game{0, 1, 2, 3};
  const Matrix phi = solve_wls(set, game_column(set, game));
  EXPECT_NEAR(phi(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(phi(1, 0), 1.0, 1e-12);
  EXPECT_NEAR(phi(2, 0), 2.0, 1e-12);
}

TEST(Solver, MatchesPermutationOracle) {
  for (int m = 2; m <= 10; ++m) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto game = random_game(m, 1000 * m + seed);
      const Vector oracle = m <= 8 ? permutation_shapley(game, m) : factorial_shapley(game, m);
      const auto set = enumerate_all(m);
      const Matrix phi = solve_wls(set, game_column(set, game));
      for (int j = 0; j <= m; ++j) EXPECT_NEAR(phi(j, 0), oracle[j], 1e-8) << "M=" << m << " j=" << j;
      const Vector direct = exact_shapley(game, m);
      for (int j = 0; j <= m; ++j) EXPECT_NEAR(direct[j], oracle[j], 1e-10);
    }
  }
}

TEST(Solver, FiniteBoundaryWeightStaysClose) {
  const int m = 6;
  const auto game = random_game(m, 5);
  const auto set = enumerate_all(m);
  const Matrix exact = solve_wls(set, game_column(set, game));
  const Matrix finite = solve_wls(set, game_column(set, game), SolveOptions{false});
  EXPECT_LT((exact - finite).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Solver, EfficiencyOnSampledSets) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int m = 9;
    const auto game = random_game(m, seed);
    const auto set = sample_coalitions(m, 40, seed % 2 == 0, Reweighting::c_kernel, seed % 3 == 0, seed);
    const Matrix phi = solve_wls(set, game_column(set, game));
    EXPECT_NEAR(phi.col(0).sum(), game.back(), 1e-8);
    EXPECT_NEAR(phi(0, 0), game[0], 1e-10);
  }
}

TEST(Solver, ExchangeablePlayersEqual) {
  // players 0 and 1 enter symmetrically
  const int m = 5;
  auto value = [](std::uint64_t s) {
    const int a = (s & 1U) + (s >> 1 & 1U);
    return 3.0 * a + a * a + 2.0 * (s >> 2 & 1U) - 1.5 * (s >> 3 & 1U) * a + 0.7 * (s >> 4 & 1U);
  };
  std::vector<double> game(32);
  for (std::uint64_t s = 0; s < 32; ++s) game[s] = value(s);
  const auto set = enumerate_all(m);
  const Matrix phi = solve_wls(set, game_column(set, game));
  EXPECT_NEAR(phi(1, 0), phi(2, 0), 1e-10);
}

TEST(Solver, RankDeficiencyReported) {
  const std::vector<Coalition> cs{Coalition{0}, Coalition::of({0}), Coalition{full_mask(3)}};
  Matrix v(3, 1);
  v << 0, 1, 2;
  EXPECT_THROW(solve_wls(build_z(cs, 3), Vector::Ones(3), v), SingularSystemError);
  try {
    solve_wls(build_z(cs, 3), Vector::Ones(3), v, SolveOptions{false});
    FAIL();
  } catch (const SingularSystemError& e) {
    EXPECT_NE(std::string(e.what()).find("column"), std::string::npos);
  }
}

TEST(ExactShapley, AdditiveDummyAndMissing) {
  const int m = 4;
  const std::vector<double> c{1.5, -2.0, 0.25, 3.0};
  std::vector<double> additive(16), dummy(16);
  for (std::uint64_t s = 0; s < 16; ++s) {
    for (int j = 0; j < m; ++j)
      if (s >> j & 1U) additive[s] += c[j];
    dummy[s] = std::pow(static_cast<double>(std::popcount(s & 7U)), 1.5);  // player 3 is a dummy
  }
  const Vector a = exact_shapley(additive, m);
  for (int j = 0; j < m; ++j) EXPECT_NEAR(a[j + 1], c[j], 1e-12);
  EXPECT_NEAR(exact_shapley(dummy, m)[4], 0.0, 1e-12);
  additive[5] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(exact_shapley(additive, m), InvalidArgument);
}

TEST(Bootstrap, ExhaustiveAndConstantGivesZero) {
  const auto all = enumerate_all(4);
  const auto game = random_game(4, 1);
  EXPECT_EQ(bootstrap_sd(all, game_column(all, game), 50, 1).cwiseAbs().maxCoeff(), 0.0);
  const auto set = sample_coalitions(8, 30, true, Reweighting::c_kernel, false, 2);
  const Matrix flat = Matrix::Constant(static_cast<Eigen::Index>(set.size()), 2, 3.0);
  EXPECT_LT(bootstrap_sd(set, flat, 30, 1).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Bootstrap, SampledGivesPositiveFiniteSd) {
  const int m = 6;
  const auto game = random_game(m, 3);
  const auto set = sample_coalitions(m, 20, true, Reweighting::c_kernel, false, 6);
  const Matrix sd = bootstrap_sd(set, game_column(set, game), 100, 12);
  ASSERT_EQ(sd.rows(), 1);
  ASSERT_EQ(sd.cols(), m + 1);
  EXPECT_EQ(sd(0, 0), 0.0);
  for (int j = 1; j <= m; ++j) {
    EXPECT_TRUE(std::isfinite(sd(0, j)));
    EXPECT_GT(sd(0, j), 0.0);
  }
  EXPECT_EQ(sd, bootstrap_sd(set, game_column(set, game), 100, 12));
}

TEST(Criterion, HandValues) {
  Matrix phi(1, 3), sd(1, 3);
  phi << 9, 1, 3;
  sd << 0, 0.2, 0.1;
  EXPECT_NEAR(convergence_criterion(phi, sd), 0.1, 1e-15);
  EXPECT_EQ(convergence_criterion(phi, Matrix::Zero(1, 3)), 0.0);

  Matrix p3(3, 3), s3(3, 3);
  p3 << 0, 0, 1, 0, 0, 1, 0, 0, 1;
  s3 << 0, 0.01, 0, 0, 0.05, 0, 0, 0.2, 0;
  EXPECT_NEAR(convergence_criterion(p3, s3), 0.05, 1e-15);
}

TEST(Criterion, ZeroRange) {
  Matrix phi(1, 3), sd(1, 3);
  phi << 0, 2, 2;
  sd << 0, 0, 0;
  EXPECT_EQ(convergence_criterion(phi, sd), 0.0);
  sd << 0, 0.1, 0;
  EXPECT_TRUE(std::isinf(convergence_criterion(phi, sd)));
  EXPECT_THROW(convergence_criterion(Matrix::Zero(1, 2), Matrix::Zero(1, 2)), InvalidArgument);
}

// ---------------------------------------------------------------------------
// data

TEST(Csv, ShapeOfNumericFile) {
  std::ostringstream os;
  os << "trend,cosyear,sinyear,temp,atemp,windspeed,hum\n";
  for (int r = 0; r < 146; ++r)
    for (int c = 0; c < 7; ++c) os << (r * 7 + c) * 0.5 << (c == 6 ? "\n" : ",");
  std::istringstream in(os.str());
  const auto d = parse_csv(in);
  EXPECT_EQ(d.n_cols(), 7);
  EXPECT_EQ(d.n_rows(), 146);
  EXPECT_TRUE(d.schema.all_numeric());
  EXPECT_DOUBLE_EQ(d.values(145, 6), (145 * 7 + 6) * 0.5);
}

TEST(Csv, Errors) {
  std::istringstream empty("");
  EXPECT_THROW(parse_csv(empty), ParseError);
  std::istringstream bad("a,b\n1,2\n3,oops\n");
  try {
    parse_csv(bad);
    FAIL();
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("oops"), std::string::npos) << msg;
    EXPECT_NE(msg.find("b"), std::string::npos) << msg;
  }
  std::istringstream missing("a,b\n1,\n");
  EXPECT_THROW(parse_csv(missing), ParseError);
  std::istringstream ragged("a,b\n1,2,3\n");
  EXPECT_THROW(parse_csv(ragged), ParseError);
  SchemaHints hints;
  hints.columns.push_back({"c", ColumnKind::categorical, {}});
  std::istringstream undeclared("a,b\n1,2\n");
  EXPECT_THROW(parse_csv(undeclared, hints), ParseError);
}

TEST(Csv, RoundTripFullPrecision) {
  Rng rng(3);
  Matrix v(20, 3);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = standard_normal(rng) * std::pow(10.0, uniform01(rng) * 20 - 10);
  const auto d = make_dataset(numeric_spec({"x", "y", "z"}), v);
  std::stringstream ss;
  write_csv(ss, d);
  const auto back = parse_csv(ss);
  EXPECT_EQ(back.values, v);
}

TEST(Csv, CategoricalColumns) {
  SchemaHints hints;
  hints.columns.push_back({"season", ColumnKind::categorical, {}});
  std::istringstream in("x,season\n1,winter\n2,\"summer\"\n3,winter\n");
  const auto d = parse_csv(in, hints);
  ASSERT_EQ(d.schema.columns[1].kind, ColumnKind::categorical);
  EXPECT_EQ(d.schema.columns[1].levels.size(), 2U);
  EXPECT_EQ(d.cell_text(1, 1), "summer");
  EXPECT_EQ(d.values(0, 1), d.values(2, 1));
  std::stringstream out;
  write_csv(out, d);
  const auto back = parse_csv(out, hints);
  EXPECT_EQ(back.cell_text(2, 1), "winter");
}

TEST(Groups, BikeGroups) {
  const auto spec = numeric_spec({"trend", "cosyear", "sinyear", "temp", "atemp", "windspeed", "hum"});
  GroupSpec g;
  g.groups = {{"temp", {"temp", "atemp"}}, {"time", {"trend", "cosyear", "sinyear"}}, {"weather", {"hum", "windspeed"}}};
  const auto r = resolve_groups(g, spec);
  ASSERT_EQ(r.size(), 3);
  EXPECT_EQ(expand_group_coalition(Coalition::of({0}), r).mask, (1U << 3) | (1U << 4));
  EXPECT_EQ(expand_group_coalition(Coalition{0}, r).mask, 0U);
  EXPECT_EQ(expand_group_coalition(Coalition{full_mask(3)}, r).mask, full_mask(7));
  for (std::uint64_t a = 0; a < 8; ++a)
    for (std::uint64_t b = 0; b < 8; ++b)
      if ((a & ~b) == 0) {
        const auto ea = expand_group_coalition(Coalition{a}, r).mask, eb = expand_group_coalition(Coalition{b}, r).mask;
        EXPECT_EQ(ea & ~eb, 0U);
      }
}

TEST(Groups, Errors) {
  const auto spec = numeric_spec({"a", "b", "c"});
  GroupSpec overlap{{{"g1", {"a", "b"}}, {"g2", {"b", "c"}}}};
  EXPECT_THROW(resolve_groups(overlap, spec), ValidationError);
  GroupSpec partial{{{"g1", {"a", "b"}}}};
  EXPECT_THROW(resolve_groups(partial, spec), ValidationError);
  GroupSpec unknown{{{"g1", {"a", "b", "c", "d"}}}};
  EXPECT_THROW(resolve_groups(unknown, spec), ValidationError);
}

TEST(Validate, SchemasAndLevels) {
  const auto spec = numeric_spec({"a", "b"});
  const auto d = make_dataset(spec, Matrix::Ones(3, 2));
  EXPECT_NO_THROW(validate_model_data(spec, d, d));
  const auto extra = make_dataset(numeric_spec({"a", "b", "zz"}), Matrix::Ones(2, 3));
  try {
    validate_model_data(spec, d, extra);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("zz"), std::string::npos);
  }
  SchemaHints hints;
  hints.columns.push_back({"k", ColumnKind::categorical, {}});
  std::istringstream tr("k\nx\ny\n"), ex("k\nx\nw\n");
  const auto train = parse_csv(tr, hints), explain = parse_csv(ex, hints);
  EXPECT_THROW(validate_model_data(std::nullopt, train, explain), ValidationError);
  std::istringstream ex2("k\ny\n");
  const auto checked = validate_model_data(std::nullopt, train, parse_csv(ex2, hints));
  EXPECT_EQ(checked.explain.cell_text(0, 0), "y");
  EXPECT_EQ(checked.explain.values(0, 0), checked.train.values(1, 0));
}

// ---------------------------------------------------------------------------
// model

TEST(Model, LinearAndTree) {
  LinearPredictor lin(numeric_spec({"a", "b"}), 1.0, Vector((Vector(2) << 2, 3).finished()));
  Matrix row(1, 2);
  row << 1, 1;
  EXPECT_DOUBLE_EQ(lin.predict(row)[0], 6.0);

  TreeEnsemblePredictor leaf(numeric_spec({"a", "b"}), {{TreeEnsemblePredictor::Node{-1, 0, {}, -1, -1, 5.0}}});
  Rng rng(1);
  Matrix rows(10, 2);
  for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = standard_normal(rng);
  EXPECT_EQ(leaf.predict(rows), Vector::Constant(10, 5.0));
}

TEST(Model, JsonModels) {
  const auto lin = linear_from_json(nlohmann::json::parse(R"({
    "type":"linear",
    "features":[{"name":"x"},{"name":"c","kind":"categorical","levels":["u","v"]}],
    "intercept":0.5,
    "coefficients":{"x":2,"c":{"u":0,"v":10}}})"));
  Matrix rows(2, 2);
  rows << 1, 0, 2, 1;
  EXPECT_EQ(lin->predict(rows), Vector((Vector(2) << 2.5, 14.5).finished()));

  const auto tree = load_model(nlohmann::json::parse(R"({
    "type":"tree_ensemble","base_score":1,
    "features":[{"name":"x"},{"name":"c","kind":"categorical","levels":["u","v"]}],
    "trees":[{"nodes":[{"id":0,"split":"x","threshold":0.5,"left":1,"right":2},
                       {"id":1,"leaf":-1},
                       {"id":2,"split":"c","left_levels":["v"],"left":3,"right":4},
                       {"id":3,"leaf":7},{"id":4,"leaf":3}]}]})"));
  Matrix t(3, 2);
  t << 0, 0, 1, 1, 1, 0;
  EXPECT_EQ(tree->predict(t), Vector((Vector(3) << 0, 8, 4).finished()));
  EXPECT_THROW(load_model(nlohmann::json::parse(R"({"type":"svm"})")), ModelError);
}

TEST(Model, Phi0AndPredictBatchChecks) {
  EXPECT_DOUBLE_EQ(phi0_from_response(std::vector<double>{1, 2, 3}), 2.0);
  CallbackPredictor short_output(numeric_spec({"a"}), [](const Dataset&) { return Vector::Zero(1); });
  const auto d = make_dataset(numeric_spec({"a"}), Matrix::Ones(3, 1));
  EXPECT_THROW(predict_batch(short_output, d), ModelError);
  CallbackPredictor nan_output(numeric_spec({"a"}), [](const Dataset& x) {
    return Vector::Constant(x.n_rows(), std::numeric_limits<double>::quiet_NaN());
  });
  EXPECT_THROW(predict_batch(nan_output, d), ModelError);
  CallbackPredictor sums(numeric_spec({"a"}), [](const Dataset& x) { Vector v = x.values.rowwise().sum(); return v; });
  EXPECT_EQ(predict_batch(sums, d), Vector::Ones(3));
  EXPECT_THROW(predict_batch(sums, make_dataset(numeric_spec({"b"}), Matrix::Ones(1, 1))), ValidationError);
}
