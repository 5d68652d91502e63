#ifndef CHRONIDENT_IDENT_ACOV_HPP
#define CHRONIDENT_IDENT_ACOV_HPP

#include "chronident/numerics.hpp"
#include "chronident/report.hpp"
#include "chronident/stability.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

namespace chronident {

/// Layout of the linear ACOV parameter vector (length n(n+1)):
///   [q1(1), q2(1)],
///   per channel c: [r_cc, f_cc, q1(c+2), q2(c+2)],
///   per channel pair c<e (lexicographic): [r_ce, f_ce].
/// Clock numbers in names are 1-based, channel numbers too.
struct ThetaALayout {
  Index n{0};

  Index nz() const { return n - 1; }
  Index size() const { return n * (n + 1); }
  static constexpr Index pivot_q1() { return 0; }
  static constexpr Index pivot_q2() { return 1; }
  Index diag(Index c) const { return 2 + 4 * c; }
  Index r(Index c, Index e) const { return c == e ? diag(c) : offdiag(c, e); }
  Index f(Index c, Index e) const { return r(c, e) + 1; }
  Index q1(Index clock) const { return clock == 0 ? pivot_q1() : diag(clock - 1) + 2; }
  Index q2(Index clock) const { return clock == 0 ? pivot_q2() : diag(clock - 1) + 3; }

  Index offdiag(Index c, Index e) const {
    if (c > e) std::swap(c, e);
    Index k = 0;
    for (Index a = 0; a < nz(); ++a)
      for (Index b = a + 1; b < nz(); ++b, ++k)
        if (a == c && b == e) return 2 + 4 * nz() + 2 * k;
    fail(ErrorKind::invalid_argument, "bad channel pair");
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out(static_cast<std::size_t>(size()));
    auto at = [&](Index i) -> std::string& { return out[static_cast<std::size_t>(i)]; };
    for (Index k = 0; k < n; ++k) {
      at(q1(k)) = "q1[" + std::to_string(k + 1) + "]";
      at(q2(k)) = "q2[" + std::to_string(k + 1) + "]";
    }
    for (Index c = 0; c < nz(); ++c)
      for (Index e = c; e < nz(); ++e) {
        const std::string ij = std::to_string(c + 1) + "," + std::to_string(e + 1);
        at(r(c, e)) = "r[" + ij + "]";
        at(f(c, e)) = "f[" + ij + "]";
      }
    return out;
  }
};

/// theta_a of known parameters, f_ce = (d(c+2)-d(1)) (d(e+2)-d(1)).
template <typename Scalar>
Vec<Scalar> theta_a_from_params(const EnsembleParams<Scalar>& p) {
  const ThetaALayout lay{p.n()};
  Vec<Scalar> t(lay.size());
  for (Index k = 0; k < p.n(); ++k) {
    t(lay.q1(k)) = p.clocks[static_cast<std::size_t>(k)].q1;
    t(lay.q2(k)) = p.clocks[static_cast<std::size_t>(k)].q2;
  }
  const Scalar d1 = p.clocks[0].d;
  for (Index c = 0; c < lay.nz(); ++c)
    for (Index e = c; e < lay.nz(); ++e) {
      t(lay.r(c, e)) = p.R(c, e);
      t(lay.f(c, e)) = (p.clocks[static_cast<std::size_t>(c + 1)].d - d1) *
                       (p.clocks[static_cast<std::size_t>(e + 1)].d - d1);
    }
  return t;
}

template <typename Scalar = double>
struct RegressionSystem {
  Index n{0};
  TauGrid<Scalar> grid;
  Vec<Scalar> z;
  Mat<Scalar> Phi;
  /// Diagonal of W, i.e. 1 / Var{sigma2_hat}.
  Vec<Scalar> w;
};

/// Stacks z_a = vertcat(all AVARs, then all cross ACOVs), each over the
/// grid, and the matching regression matrix with rows built from
/// [3/tau^2, tau^2/2, 1/tau, tau/3].
template <typename Scalar>
RegressionSystem<Scalar> build_regression(const AcovEstimate<Scalar>& acov, Index n) {
  require(n >= 2, "ensemble needs at least two clocks");
  require(acov.nz == n - 1, "ACOV estimate channel count does not match n - 1");
  require(acov.pairs == acov_pairs(n - 1), "ACOV estimate must hold every channel pair in regression order");
  require(acov.sigma2.rows() == static_cast<Index>(acov.pairs.size()) && acov.sigma2.cols() == acov.grid.size() &&
              acov.variance.rows() == acov.sigma2.rows() && acov.variance.cols() == acov.sigma2.cols(),
          "ACOV estimate has inconsistent dimensions");
  const ThetaALayout lay{n};
  const Index ell = acov.grid.size();
  const Index P = static_cast<Index>(acov.pairs.size());

  RegressionSystem<Scalar> sys;
  sys.n = n;
  sys.grid = acov.grid;
  sys.z.resize(P * ell);
  sys.w.resize(P * ell);
  sys.Phi = Mat<Scalar>::Zero(P * ell, lay.size());
  for (Index q = 0; q < P; ++q) {
    const auto [c, e] = acov.pairs[static_cast<std::size_t>(q)];
    for (Index p = 0; p < ell; ++p) {
      const Index row = q * ell + p;
      const Scalar tau = acov.grid.tau(p);
      sys.z(row) = acov.sigma2(q, p);
      sys.w(row) = Scalar(1) / acov.variance(q, p);
      sys.Phi(row, lay.pivot_q1()) = 1 / tau;
      sys.Phi(row, lay.pivot_q2()) = tau / 3;
      sys.Phi(row, lay.r(c, e)) = 3 / (tau * tau);
      sys.Phi(row, lay.f(c, e)) = tau * tau / 2;
      if (c == e) {
        sys.Phi(row, lay.q1(c + 1)) = 1 / tau;
        sys.Phi(row, lay.q2(c + 1)) = tau / 3;
      }
    }
  }
  return sys;
}

template <typename Scalar = double>
struct ThetaAFit {
  Vec<Scalar> theta;
  Vec<Scalar> standard_errors;
  std::vector<std::string> clamped;
  LsDiagnostics diagnostics;
  /// Directions left undetermined by the data (only for the two-clock case,
  /// where pivot and second clock contribute identically).
  Index structural_null{0};
};

/// Rank the data can support: with two clocks the pivot and the other
/// clock enter every row as a sum, so q1 and q2 each lose one direction.
inline Index structural_rank(Index n, Index cols) { return n == 2 ? cols - 2 : cols; }

template <typename Scalar>
std::string describe_null_directions(const Mat<Scalar>& As, Index rank, const std::vector<std::string>& names) {
  Eigen::JacobiSVD<Mat<Scalar>> svd(As, Eigen::ComputeFullV);
  std::ostringstream os;
  const Mat<Scalar>& V = svd.matrixV();
  const Index shown = std::min<Index>(V.cols(), rank + 3);
  for (Index k = rank; k < shown; ++k) {
    os << (k == rank ? "" : "; ") << "null direction " << (k - rank + 1) << ":";
    for (Index i = 0; i < V.rows(); ++i) {
      if (std::abs(V(i, k)) < Scalar(0.1)) continue;
      char buf[64];
      std::snprintf(buf, sizeof buf, " %+.2f*%s", static_cast<double>(V(i, k)),
                    names[static_cast<std::size_t>(i)].c_str());
      os << buf;
    }
  }
  if (shown < V.cols()) os << "; ... " << V.cols() - shown << " more";
  return os.str();
}

/// Weighted LS for theta_a. Negative intensities (q1, q2), measurement
/// variances r_cc and drift squares f_cc are clamped to 1e-3 of their
/// standard error and listed in `clamped`.
template <typename Scalar>
ThetaAFit<Scalar> solve_theta_a(const RegressionSystem<Scalar>& sys) {
  const ThetaALayout lay{sys.n};
  require(sys.Phi.cols() == lay.size() && sys.Phi.rows() == sys.z.size(), "regression system has wrong shape");
  auto sol = weighted_least_squares<Scalar>(sys.Phi, sys.z, sys.w);
  const Index need = structural_rank(sys.n, lay.size());
  if (sol.diagnostics.rank < need) {
    const Vec<Scalar> sw = sys.w.cwiseSqrt();
    Mat<Scalar> As = sw.asDiagonal() * sys.Phi;
    for (Index j = 0; j < As.cols(); ++j) {
      const Scalar nrm = As.col(j).norm();
      if (nrm > 0) As.col(j) /= nrm;
    }
    fail(ErrorKind::unidentifiable, "ACOV regression has rank " + std::to_string(sol.diagnostics.rank) + " < " +
                                        std::to_string(need) + " (use at least 4 distinct averaging times); " +
                                        describe_null_directions<Scalar>(As, sol.diagnostics.rank, lay.names()));
  }

  ThetaAFit<Scalar> fit;
  fit.theta = sol.x;
  fit.standard_errors = sol.covariance.diagonal().cwiseMax(Scalar(0)).cwiseSqrt();
  fit.diagnostics = sol.diagnostics;
  fit.structural_null = lay.size() - sol.diagnostics.rank;

  std::vector<Index> nonneg;
  for (Index k = 0; k < sys.n; ++k) {
    nonneg.push_back(lay.q1(k));
    nonneg.push_back(lay.q2(k));
  }
  for (Index c = 0; c < lay.nz(); ++c) {
    nonneg.push_back(lay.r(c, c));
    nonneg.push_back(lay.f(c, c));
  }
  const auto names = lay.names();
  for (Index i : nonneg) {
    if (fit.theta(i) >= 0) continue;
    Scalar floor = Scalar(1e-3) * fit.standard_errors(i);
    if (!(floor > 0)) floor = std::numeric_limits<Scalar>::min();
    fit.theta(i) = floor;
    fit.clamped.push_back(names[static_cast<std::size_t>(i)]);
  }
  return fit;
}

template <typename Scalar = double>
struct DriftFit {
  /// delta_c = d(c+2) - d(1)
  Vec<Scalar> delta;
  /// Drifts of clocks 2..n.
  Vec<Scalar> d;
  bool degenerate{false};
  LsDiagnostics diagnostics;
};

/// Sign of the mean lag-1 second difference per channel; its expectation
/// is (d(c+2) - d(1)) Ts^2.
template <typename Scalar>
Vec<Scalar> trend_signs(const MeasurementRecord<Scalar>& rec) {
  Vec<Scalar> s = Vec<Scalar>::Zero(rec.nz());
  const Index N = rec.steps();
  if (N < 2) return s;
  for (Index c = 0; c < rec.nz(); ++c) {
    const auto z = rec.Z.row(c);
    // sum of second differences telescopes
    const Scalar total = (z(N) - z(N - 1)) - (z(1) - z(0));
    s(c) = total > 0 ? Scalar(1) : (total < 0 ? Scalar(-1) : Scalar(0));
  }
  return s;
}

/// Fits f_hat ~ delta delta^T over the upper triangle by Gauss-Newton,
/// started from the leading eigenpair of the symmetric f_hat matrix. The
/// global sign, which the products cannot resolve, follows a majority vote
/// of `sign_hint`. When every |f_hat| is at or below `noise_floor`, delta = 0
/// and the fit is flagged degenerate.
template <typename Scalar>
DriftFit<Scalar> recover_drifts(const Mat<Scalar>& f_hat, Scalar d1, const Vec<Scalar>& sign_hint,
                                Scalar noise_floor = Scalar(0)) {
  const Index nz = f_hat.rows();
  require(nz >= 1 && f_hat.cols() == nz, "f_hat must be square");
  require(sign_hint.size() == nz, "sign hint must have one entry per channel");
  require(f_hat.allFinite(), "f_hat must be finite");
  const Index M = nz * (nz + 1) / 2;

  Vec<Scalar> fu(M);
  {
    Index k = 0;
    for (Index i = 0; i < nz; ++i)
      for (Index j = i; j < nz; ++j) fu(k++) = f_hat(i, j);
  }
  DriftFit<Scalar> out;
  out.delta = Vec<Scalar>::Zero(nz);
  const Scalar scale = fu.norm();
  if (!(scale > 0) || fu.cwiseAbs().maxCoeff() <= noise_floor) {
    out.degenerate = true;
    out.d = Vec<Scalar>::Constant(nz, d1);
    return out;
  }
  const Vec<Scalar> g = fu / scale;

  Mat<Scalar> G(nz, nz);
  {
    Index k = 0;
    for (Index i = 0; i < nz; ++i)
      for (Index j = i; j < nz; ++j, ++k) G(i, j) = G(j, i) = g(k);
  }
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(G);
  const Scalar lambda = es.eigenvalues()(nz - 1);
  Vec<Scalar> x0 = std::sqrt(std::max(lambda, Scalar(0))) * es.eigenvectors().col(nz - 1);

  auto residual = [&](const Vec<Scalar>& x) {
    Vec<Scalar> r(M);
    Index k = 0;
    for (Index i = 0; i < nz; ++i)
      for (Index j = i; j < nz; ++j, ++k) r(k) = g(k) - x(i) * x(j);
    return r;
  };
  auto jacobian = [&](const Vec<Scalar>& x) {
    Mat<Scalar> J = Mat<Scalar>::Zero(M, nz);
    Index k = 0;
    for (Index i = 0; i < nz; ++i)
      for (Index j = i; j < nz; ++j, ++k) {
        J(k, i) -= x(j);
        J(k, j) -= x(i);
      }
    return J;
  };
  GaussNewtonOptions<Scalar> opts;
  opts.gtol = Scalar(1e-14) * g.norm();
  auto gn = gauss_newton<Scalar>(residual, jacobian, x0, opts);

  Vec<Scalar> delta = gn.x;
  Scalar vote = 0;
  for (Index i = 0; i < nz; ++i) vote += (delta(i) > 0 ? 1 : (delta(i) < 0 ? -1 : 0)) * sign_hint(i);
  if (vote == 0) {
    Index lead = 0;
    delta.cwiseAbs().maxCoeff(&lead);
    vote = (delta(lead) >= 0 ? 1 : -1) * sign_hint(lead);
  }
  if (vote < 0) delta = -delta;

  out.delta = delta * std::sqrt(scale);
  out.d = (out.delta.array() + d1).matrix();
  out.diagnostics = gn.diagnostics;
  out.diagnostics.residual_norm *= static_cast<double>(scale);
  return out;
}

template <typename Scalar = double>
struct AcovOptions {
  Index ell{20};
  /// 0 selects floor(N/2).
  Index m_max{0};
  Scalar d1{0};
  VarianceRule rule{VarianceRule::chi_square};
};

/// Grid -> empirical ACOV -> weighted LS -> drift factorization.
template <typename Scalar>
EstimateReport<Scalar> estimate_acov_method(const MeasurementRecord<Scalar>& rec,
                                            const AcovOptions<Scalar>& opts = {}) {
  require(rec.Ts > 0, "record sampling period must be positive");
  require(rec.nz() >= 1, "record has no channels");
  require(rec.Z.allFinite(), "record contains non-finite samples");
  const Index N = rec.steps();
  require(N >= 2, "record too short for any Allan (co)variance");
  const Index n = rec.nz() + 1;
  const Index m_cap = N / 2;
  const Index m_max = opts.m_max > 0 ? std::min(opts.m_max, m_cap) : m_cap;

  EstimateReport<Scalar> rep;
  rep.method = "acov";
  const auto grid = log_spaced_grid<Scalar>(opts.ell, m_max, rec.Ts);
  if (grid.truncated)
    rep.warnings.push_back("only " + std::to_string(grid.size()) + " distinct averaging factors available");
  if (opts.m_max > m_cap) rep.warnings.push_back("m_max clipped to floor(N/2)");

  const auto acov = acov_grid(rec, grid, opts.rule);
  const auto sys = build_regression(acov, n);
  const auto fit = solve_theta_a(sys);
  const ThetaALayout lay{n};
  const Index nz = n - 1;

  Mat<Scalar> F(nz, nz), Fse(nz, nz);
  for (Index c = 0; c < nz; ++c)
    for (Index e = c; e < nz; ++e) {
      F(c, e) = F(e, c) = fit.theta(lay.f(c, e));
      Fse(c, e) = Fse(e, c) = fit.standard_errors(lay.f(c, e));
    }
  const Scalar floor = Fse.minCoeff();
  const auto drift = recover_drifts<Scalar>(F, opts.d1, trend_signs(rec), floor);

  rep.params.clocks.resize(static_cast<std::size_t>(n));
  rep.params.R.resize(nz, nz);
  for (Index k = 0; k < n; ++k) {
    auto& c = rep.params.clocks[static_cast<std::size_t>(k)];
    c.q1 = fit.theta(lay.q1(k));
    c.q2 = fit.theta(lay.q2(k));
    c.d = k == 0 ? opts.d1 : drift.d(k - 1);
  }
  for (Index c = 0; c < nz; ++c)
    for (Index e = c; e < nz; ++e) rep.params.R(c, e) = rep.params.R(e, c) = fit.theta(lay.r(c, e));
  rep.theta = pack_theta(rep.params);

  rep.standard_errors = unknown_errors<Scalar>(n);
  for (Index k = 0; k < n; ++k) {
    rep.standard_errors(k) = fit.standard_errors(lay.q1(k));
    rep.standard_errors(n + k) = fit.standard_errors(lay.q2(k));
  }
  rep.standard_errors(2 * n) = 0;  // pivot drift is given
  for (Index c = 0; c < nz; ++c) {
    // half-width of sqrt over f_cc +- se, finite at f_cc = 0
    const Scalar f = std::abs(F(c, c)), s = Fse(c, c);
    rep.standard_errors(2 * n + 1 + c) = std::sqrt(f + s) - std::sqrt(std::max(f - s, Scalar(0)));
  }
  {
    Index k = 3 * n;
    for (auto [c, e] : upper_pairs(nz)) rep.standard_errors(k++) = fit.standard_errors(lay.r(c, e));
  }

  rep.residual = fit.diagnostics.residual_norm;
  rep.cond = fit.diagnostics.condition_number;
  rep.rank = fit.diagnostics.rank;
  rep.clamped = fit.clamped;
  if (fit.structural_null > 0)
    rep.warnings.push_back("two-clock ensemble: pivot and second-clock intensities are split by minimum norm");
  if (drift.degenerate) rep.warnings.push_back("drift products below noise floor; drifts set to the pivot drift");
  rep.extras["ell"] = static_cast<double>(grid.size());
  rep.extras["m_max"] = static_cast<double>(grid.m.back());
  rep.extras["drift_fit_residual"] = drift.diagnostics.residual_norm;
  return rep;
}

}  // namespace chronident

#endif  // CHRONIDENT_IDENT_ACOV_HPP
