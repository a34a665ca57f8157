// KernelSHAP weighted least squares, the classical Shapley formula, bootstrap
// standard deviations and the convergence criterion.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "condshap/coalition.hpp"
#include "condshap/common.hpp"

namespace condshap {

struct SolveOptions {
  /// Treat the empty and grand coalition rows as exact constraints (the
  /// limit of an infinite boundary weight). When false the boundary rows
  /// enter the regression with their finite weight.
  bool exact_boundary = true;
};

namespace detail {

inline std::string deficient_columns_message(const Eigen::ColPivHouseholderQR<Matrix>& qr,
                                             Eigen::Index rank, int offset) {
  std::string names;
  const auto& perm = qr.colsPermutation().indices();
  for (Eigen::Index k = rank; k < perm.size(); ++k) {
    if (!names.empty()) names += ", ";
    names += "feature " + std::to_string(perm[k] + offset);
  }
  return names;
}

}  // namespace detail

/// phi = (Z^T W Z)^{-1} Z^T W V, one column per explicand. Row 0 of the
/// result is phi_0. Solved by column-pivoted QR on the square-root weighted
/// system; with exact_boundary the empty/grand rows are eliminated as
/// equality constraints before the regression.
inline Matrix solve_wls(const Matrix& z, const Vector& weights, const Matrix& v,
                        const SolveOptions& options = {}) {
  const Eigen::Index n = z.rows();
  const Eigen::Index cols = z.cols();
  const int m = static_cast<int>(cols) - 1;
  if (m < 1) throw InvalidArgument("Z needs at least one feature column");
  if (weights.size() != n || v.rows() != n)
    throw InvalidArgument("Z, weights and V row counts differ");

  Eigen::Index empty_row = -1, grand_row = -1;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double members = z.row(i).tail(m).sum();
    if (members == 0.0) empty_row = i;
    if (members == m) grand_row = i;
  }

  if (options.exact_boundary && empty_row >= 0 && grand_row >= 0) {
    Matrix phi(cols, v.cols());
    const RowVector base = v.row(empty_row);
    const RowVector delta = v.row(grand_row) - base;
    phi.row(0) = base;
    if (m == 1) {
      phi.row(1) = delta;
      return phi;
    }
    std::vector<Eigen::Index> interior;
    for (Eigen::Index i = 0; i < n; ++i)
      if (i != empty_row && i != grand_row) interior.push_back(i);
    const auto k = static_cast<Eigen::Index>(interior.size());
    if (k < m - 1)
      throw SingularSystemError("singular system: " + std::to_string(k) +
                                " interior coalitions cannot identify " + std::to_string(m) + " Shapley values");
    Matrix a(k, m - 1);
    Matrix b(k, v.cols());
    for (Eigen::Index r = 0; r < k; ++r) {
      const Eigen::Index i = interior[static_cast<std::size_t>(r)];
      const double sw = std::sqrt(weights[i]);
      const double last = z(i, m);
      for (int j = 0; j < m - 1; ++j) a(r, j) = sw * (z(i, j + 1) - last);
      b.row(r) = sw * (v.row(i) - base - last * delta);
    }
    Eigen::ColPivHouseholderQR<Matrix> qr(a);
    if (qr.rank() < m - 1)
      throw SingularSystemError("singular system: deficient columns " +
                                detail::deficient_columns_message(qr, qr.rank(), 1));
    const Matrix head = qr.solve(b);
    phi.block(1, 0, m - 1, v.cols()) = head;
    phi.row(m) = delta - head.colwise().sum();
    return phi;
  }

  const Vector sw = weights.cwiseSqrt();
  const Matrix a = sw.asDiagonal() * z;
  const Matrix b = sw.asDiagonal() * v;
  Eigen::ColPivHouseholderQR<Matrix> qr(a);
  if (qr.rank() < cols)
    throw SingularSystemError("singular system: deficient columns " +
                              detail::deficient_columns_message(qr, qr.rank(), 0));
  return qr.solve(b);
}

/// Solves for a coalition set; V rows aligned with set.entries.
inline Matrix solve_wls(const CoalitionSet& set, const Matrix& v, const SolveOptions& options = {}) {
  return solve_wls(build_z(set), set.weights(), v, options);
}

/// Classical Shapley formula over a complete game table indexed by mask.
/// Element 0 of the result is phi_0 = v(empty). NaN entries mark missing
/// subsets.
inline Vector exact_shapley(std::span<const double> game, int m) {
  if (m < 1 || m > 20) throw InvalidArgument("exact Shapley evaluation supports 1 <= M <= 20");
  const std::size_t n = std::size_t{1} << m;
  if (game.size() != n)
    throw InvalidArgument("incomplete game: expected " + std::to_string(n) + " subset values, got " +
                          std::to_string(game.size()));
  for (std::size_t mask = 0; mask < n; ++mask)
    if (std::isnan(game[mask]))
      throw InvalidArgument("incomplete game: value of subset mask " + std::to_string(mask) + " is missing");
  // |S|!(M-|S|-1)!/M! = 1 / (M * C(M-1, |S|))
  std::vector<double> w(static_cast<std::size_t>(m));
  for (int s = 0; s < m; ++s) w[static_cast<std::size_t>(s)] = 1.0 / (m * binomial(m - 1, s));
  Vector phi = Vector::Zero(m + 1);
  phi[0] = game[0];
  for (int j = 0; j < m; ++j) {
    const std::size_t bit = std::size_t{1} << j;
    double acc = 0.0;
    for (std::size_t mask = 0; mask < n; ++mask) {
      if (mask & bit) continue;
      acc += w[static_cast<std::size_t>(std::popcount(mask))] * (game[mask | bit] - game[mask]);
    }
    phi[j + 1] = acc;
  }
  return phi;
}

/// Bootstrap standard deviations of phi (N_explain x (M+1), column 0 is
/// phi_0 and always zero). Exhaustive sets carry no sampling variability.
inline Matrix bootstrap_sd(const CoalitionSet& set, const Matrix& v, int n_boot, std::uint64_t seed,
                           const SolveOptions& options = {}) {
  const Eigen::Index n_explain = v.cols();
  Matrix sd = Matrix::Zero(n_explain, set.m + 1);
  if (!set.is_sampled()) return sd;
  if (n_boot < 2) throw InvalidArgument("bootstrap needs n_boot >= 2");

  std::unordered_map<std::uint64_t, Eigen::Index> row_of;
  for (std::size_t i = 0; i < set.entries.size(); ++i)
    row_of[set.entries[i].coalition.mask] = static_cast<Eigen::Index>(i);

  Rng rng(seed);
  Matrix mean = Matrix::Zero(n_explain, set.m + 1);
  Matrix m2 = Matrix::Zero(n_explain, set.m + 1);
  int done = 0;
  int failures = 0;
  while (done < n_boot) {
    const CoalitionSet rep = resample_draws(set, rng);
    Matrix vb(static_cast<Eigen::Index>(rep.size()), n_explain);
    for (std::size_t i = 0; i < rep.entries.size(); ++i)
      vb.row(static_cast<Eigen::Index>(i)) = v.row(row_of.at(rep.entries[i].coalition.mask));
    Matrix phi;
    try {
      phi = solve_wls(rep, vb, options).transpose();
    } catch (const SingularSystemError&) {
      // replicate too small to identify every player; redraw
      if (++failures > 10 * n_boot) throw;
      continue;
    }
    ++done;
    const Matrix d = phi - mean;
    mean += d / done;
    m2 += d.cwiseProduct(phi - mean);
  }
  sd = (m2 / (n_boot - 1)).cwiseMax(0.0).cwiseSqrt();
  sd.col(0).setZero();
  return sd;
}

/// median_i [ max_j sd_ij / (max_j phi_ij - min_j phi_ij) ] over feature
/// columns j >= 1. Zero range gives 0 when the sd is also 0, else +inf.
inline double convergence_criterion(const Matrix& phi, const Matrix& sd) {
  if (phi.rows() != sd.rows() || phi.cols() != sd.cols())
    throw InvalidArgument("phi and sd shapes differ");
  if (phi.cols() < 3) throw InvalidArgument("convergence criterion needs M >= 2");
  const Eigen::Index m = phi.cols() - 1;
  std::vector<double> ratios;
  ratios.reserve(static_cast<std::size_t>(phi.rows()));
  for (Eigen::Index i = 0; i < phi.rows(); ++i) {
    const auto p = phi.row(i).tail(m);
    const double range = p.maxCoeff() - p.minCoeff();
    const double s = sd.row(i).tail(m).maxCoeff();
    if (range > 0.0)
      ratios.push_back(s / range);
    else
      ratios.push_back(s == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  }
  std::sort(ratios.begin(), ratios.end());
  const std::size_t n = ratios.size();
  if (n == 0) return 0.0;
  return n % 2 == 1 ? ratios[n / 2] : 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]);
}

}  // namespace condshap
