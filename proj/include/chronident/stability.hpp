#ifndef CHRONIDENT_STABILITY_HPP
#define CHRONIDENT_STABILITY_HPP

#include "chronident/model.hpp"
#include "chronident/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

namespace chronident {

/// Averaging factors m_p (tau_p = m_p Ts), strictly increasing.
template <typename Scalar = double>
struct TauGrid {
  std::vector<Index> m;
  Scalar Ts{1};
  /// Set when fewer distinct factors than requested were available.
  bool truncated{false};

  Index size() const { return static_cast<Index>(m.size()); }
  Scalar tau(Index p) const { return static_cast<Scalar>(m[static_cast<std::size_t>(p)]) * Ts; }
  Vec<Scalar> taus() const {
    Vec<Scalar> t(size());
    for (Index p = 0; p < size(); ++p) t(p) = tau(p);
    return t;
  }
};

/// Channel pairs in regression order: (0,0), (1,1), ..., then (0,1), (0,2), ...
inline std::vector<std::pair<Index, Index>> acov_pairs(Index nz) {
  std::vector<std::pair<Index, Index>> out;
  for (Index i = 0; i < nz; ++i) out.emplace_back(i, i);
  for (Index i = 0; i < nz; ++i)
    for (Index j = i + 1; j < nz; ++j) out.emplace_back(i, j);
  return out;
}

enum class VarianceRule {
  /// Var = 2 |sigma2| / nu, as printed with the regression weights.
  printed,
  /// Var = 2 sigma2^2 / nu, the chi-square approximation.
  chi_square,
};

template <typename Scalar = double>
struct AcovEstimate {
  TauGrid<Scalar> grid;
  Index nz{0};
  Index N{0};
  std::vector<std::pair<Index, Index>> pairs;
  /// pairs.size() x grid.size()
  Mat<Scalar> sigma2;
  Mat<Scalar> variance;

  Index pair_index(Index i, Index j) const {
    if (i > j) std::swap(i, j);
    for (std::size_t k = 0; k < pairs.size(); ++k)
      if (pairs[k].first == i && pairs[k].second == j) return static_cast<Index>(k);
    fail(ErrorKind::invalid_argument, "unknown channel pair");
  }
};

/// Overlapping Allan covariance of channels i, j (0-based) at tau = m Ts:
///   1 / (2 tau^2 (N-2m+1)) * sum_k d_i(k) d_j(k),
///   d(k) = z(k+2m) - 2 z(k+m) + z(k).
template <typename Scalar>
Scalar empirical_acov(const MeasurementRecord<Scalar>& rec, Index i, Index j, Index m) {
  const Index N = rec.steps();
  require(i >= 0 && j >= 0 && i < rec.nz() && j < rec.nz(), "channel index out of range");
  require(m >= 1 && m <= N / 2, "averaging factor must satisfy 1 <= m <= floor(N/2)");
  const auto zi = rec.Z.row(i);
  const auto zj = rec.Z.row(j);
  const Index count = N - 2 * m + 1;
  Scalar acc = 0;
  for (Index k = 0; k < count; ++k) {
    const Scalar di = zi(k + 2 * m) - 2 * zi(k + m) + zi(k);
    const Scalar dj = zj(k + 2 * m) - 2 * zj(k + m) + zj(k);
    acc += di * dj;
  }
  const Scalar tau = static_cast<Scalar>(m) * rec.Ts;
  return acc / (2 * tau * tau * static_cast<Scalar>(count));
}

/// Model Allan (co)variance of channels i, j at averaging time tau.
template <typename Scalar>
Scalar analytic_acov(const EnsembleParams<Scalar>& p, Index i, Index j, Scalar tau) {
  require(tau > 0, "averaging time must be positive");
  require(i >= 0 && j >= 0 && i < p.nz() && j < p.nz(), "channel index out of range");
  const auto& pivot = p.clocks[0];
  const auto& ci = p.clocks[static_cast<std::size_t>(i + 1)];
  const auto& cj = p.clocks[static_cast<std::size_t>(j + 1)];
  const Scalar di = ci.d - pivot.d;
  const Scalar dj = cj.d - pivot.d;
  Scalar q1 = pivot.q1, q2 = pivot.q2;
  if (i == j) {
    q1 += ci.q1;
    q2 += ci.q2;
  }
  return q1 / tau + q2 * tau / 3 + 3 * p.R(i, j) / (tau * tau) + di * dj * tau * tau / 2;
}

/// Allan variance of a single clock from its own parameters (no measurement
/// noise term): q1/tau + q2 tau/3 + d^2 tau^2/2.
template <typename Scalar>
Scalar clock_avar(const ClockParams<Scalar>& c, Scalar tau) {
  return c.q1 / tau + c.q2 * tau / 3 + c.d * c.d * tau * tau / 2;
}

/// Approximate variance of an ACOV estimate with nu = N/m degrees of freedom.
/// The magnitude used is max(|sigma2|, 1e-3 * scale); pass the
/// Cauchy-Schwarz bound sqrt(s_ii s_jj) as scale for cross terms so that a
/// cross-covariance near zero does not receive an unbounded weight.
/// The result is always strictly positive.
template <typename Scalar>
Scalar acov_variance(Scalar sigma2, Index N, Index m, VarianceRule rule = VarianceRule::chi_square,
                     Scalar scale = Scalar(-1)) {
  require(m >= 1 && N > 2 * m - 1, "acov_variance requires N >= 2m");
  const Scalar nu = static_cast<Scalar>(N) / static_cast<Scalar>(m);
  const Scalar ref = scale < 0 ? std::abs(sigma2) : scale;
  const Scalar mag = std::max(std::abs(sigma2), Scalar(1e-3) * ref);
  Scalar var = rule == VarianceRule::printed ? 2 * mag / nu : 2 * mag * mag / nu;
  if (!(var >= std::numeric_limits<Scalar>::min())) var = std::numeric_limits<Scalar>::min();
  return var;
}

/// ell integers round(exp(linspace(0, log m_max))), deduplicated.
template <typename Scalar>
TauGrid<Scalar> log_spaced_grid(Index ell, Index m_max, Scalar Ts) {
  require(ell >= 2, "grid needs at least two points");
  require(m_max >= 1, "m_max must be >= 1");
  require(Ts > 0, "sampling period must be positive");
  TauGrid<Scalar> g;
  g.Ts = Ts;
  const double top = std::log(static_cast<double>(m_max));
  for (Index p = 0; p < ell; ++p) {
    const double e = top * static_cast<double>(p) / static_cast<double>(ell - 1);
    Index m = static_cast<Index>(std::llround(std::exp(e)));
    m = std::clamp<Index>(m, 1, m_max);
    if (g.m.empty() || m > g.m.back()) g.m.push_back(m);
  }
  g.truncated = g.size() < ell;
  return g;
}

/// All channel pairs over the grid, one pass over the record per m.
template <typename Scalar>
AcovEstimate<Scalar> acov_grid(const MeasurementRecord<Scalar>& rec, const TauGrid<Scalar>& grid,
                               VarianceRule rule = VarianceRule::chi_square) {
  const Index N = rec.steps();
  const Index nz = rec.nz();
  require(nz >= 1, "record has no channels");
  require(grid.size() >= 1, "empty grid");
  for (Index m : grid.m) require(m >= 1 && m <= N / 2, "grid factor exceeds floor(N/2) for this record");

  AcovEstimate<Scalar> est;
  est.grid = grid;
  est.nz = nz;
  est.N = N;
  est.pairs = acov_pairs(nz);
  const Index P = static_cast<Index>(est.pairs.size());
  est.sigma2.resize(P, grid.size());
  est.variance.resize(P, grid.size());

  Vec<Scalar> d(nz);
  Mat<Scalar> acc(nz, nz);
  for (Index p = 0; p < grid.size(); ++p) {
    const Index m = grid.m[static_cast<std::size_t>(p)];
    const Index count = N - 2 * m + 1;
    acc.setZero();
    for (Index k = 0; k < count; ++k) {
      d = rec.Z.col(k + 2 * m) - 2 * rec.Z.col(k + m) + rec.Z.col(k);
      for (Index j = 0; j < nz; ++j)
        for (Index i = 0; i <= j; ++i) acc(i, j) += d(i) * d(j);
    }
    const Scalar tau = grid.tau(p);
    const Scalar norm = 2 * tau * tau * static_cast<Scalar>(count);
    for (Index q = 0; q < P; ++q) {
      const auto [i, j] = est.pairs[static_cast<std::size_t>(q)];
      est.sigma2(q, p) = acc(i, j) / norm;
    }
    for (Index q = 0; q < P; ++q) {
      const auto [i, j] = est.pairs[static_cast<std::size_t>(q)];
      const Scalar s = est.sigma2(q, p);
      const Scalar scale = i == j ? std::abs(s)
                                  : std::sqrt(std::abs(acc(i, i) * acc(j, j))) / norm;
      est.variance(q, p) = acov_variance(s, N, m, rule, scale);
    }
  }
  return est;
}

}  // namespace chronident

#endif  // CHRONIDENT_STABILITY_HPP
