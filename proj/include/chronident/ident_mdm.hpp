#ifndef CHRONIDENT_IDENT_MDM_HPP
#define CHRONIDENT_IDENT_MDM_HPP

#include "chronident/ident_acov.hpp"
#include "chronident/model.hpp"
#include "chronident/numerics.hpp"
#include "chronident/report.hpp"
#include "chronident/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace chronident {

template <typename Scalar = double>
struct MdmConfig {
  Index L{5};
  Scalar ts_target{5000};
};

/// Number of noise-covariance parameters: n(n+3)/2 (q1, q2 per clock and
/// the unique entries of R).
inline Index theta_alpha_size(Index n) { return n * (n + 3) / 2; }

inline constexpr double kAnnihilatorTolerance = 1e-10;

/// Stacked-window matrices for a model sampled at Ts.
///
///   Z_k = O x_k + Gamma W_k + V_k     (window of L measurements)
///   residue = Am Z_k = A E_k,   A = Am [Gamma, I],  E_k = [W_k; V_k]
///
/// drift_map maps all n drifts to the residue mean; theta_map maps
/// theta_alpha to vec(E[residue residue^T]) for zero-mean residues.
template <typename Scalar = double>
struct MdmSystem {
  Index n{0}, nz{0}, nx{0}, L{0};
  Scalar Ts{0};
  Mat<Scalar> O;
  Mat<Scalar> Gamma;
  Mat<Scalar> Am;
  Mat<Scalar> A;
  Mat<Scalar> drift_map;
  Mat<Scalar> theta_map;
  Index rank_O{0};

  Index n_ao() const { return Am.rows(); }
  Index n_e() const { return A.cols(); }
};

template <typename Scalar = double>
struct StructureMatrices {
  std::vector<Mat<Scalar>> BQ;
  std::vector<Mat<Scalar>> BR;
};

/// Basis with Q = sum theta_i BQ_i and R = sum theta_i BR_i for
/// theta_alpha = [q1(1..n), q2(1..n), r_upper]. Per-clock selectors are
/// placed as Kronecker blocks, diag(e_i) (x) [[Ts,0],[0,0]] and
/// diag(e_i) (x) [[Ts^3/3, Ts^2/2],[Ts^2/2, Ts]].
template <typename Scalar>
StructureMatrices<Scalar> build_structure_matrices(Index n, Scalar Ts) {
  require(n >= 2, "ensemble needs at least two clocks");
  require(Ts > 0, "sampling period must be positive");
  const Index nz = n - 1, nx = 2 * n;
  StructureMatrices<Scalar> s;
  const Mat2<Scalar> white = clock_noise_cov<Scalar>(1, 0, Ts);
  const Mat2<Scalar> walk = clock_noise_cov<Scalar>(0, 1, Ts);
  for (Index i = 0; i < 2 * n; ++i) {
    Mat<Scalar> B = Mat<Scalar>::Zero(nx, nx);
    const Index clock = i % n;
    B.template block<2, 2>(2 * clock, 2 * clock) = i < n ? white : walk;
    s.BQ.push_back(std::move(B));
    s.BR.push_back(Mat<Scalar>::Zero(nz, nz));
  }
  for (auto [a, b] : upper_pairs(nz)) {
    Mat<Scalar> I = Mat<Scalar>::Zero(nz, nz);
    I(a, b) = 1;
    I(b, a) = 1;
    s.BQ.push_back(Mat<Scalar>::Zero(nx, nx));
    s.BR.push_back(std::move(I));
  }
  return s;
}

template <typename Scalar>
Vec<Scalar> theta_alpha_from_params(const EnsembleParams<Scalar>& p) {
  const Index n = p.n();
  Vec<Scalar> t(theta_alpha_size(n));
  for (Index i = 0; i < n; ++i) {
    t(i) = p.clocks[static_cast<std::size_t>(i)].q1;
    t(n + i) = p.clocks[static_cast<std::size_t>(i)].q2;
  }
  t.tail(t.size() - 2 * n) = pack_r_upper<Scalar>(p.R);
  return t;
}

/// O, Gamma, annihilator and the two moment maps for window length L.
template <typename Scalar>
MdmSystem<Scalar> build_mdm_system(const EnsembleModel<Scalar>& model, Index L) {
  require(L >= 2, "window length L must be >= 2");
  MdmSystem<Scalar> s;
  s.n = model.n;
  s.nz = model.nz;
  s.nx = model.nx;
  s.L = L;
  s.Ts = model.Ts;
  const Index nz = s.nz, nx = s.nx, n = s.n;

  std::vector<Mat<Scalar>> HFp;  // H F^p, p = 0..L-1
  Mat<Scalar> Fp = Mat<Scalar>::Identity(nx, nx);
  for (Index p = 0; p < L; ++p) {
    HFp.push_back(model.H * Fp);
    Fp = Fp * model.F;
  }
  s.O.resize(L * nz, nx);
  for (Index p = 0; p < L; ++p) s.O.middleRows(p * nz, nz) = HFp[static_cast<std::size_t>(p)];
  s.Gamma = Mat<Scalar>::Zero(L * nz, (L - 1) * nx);
  for (Index r = 1; r < L; ++r)
    for (Index c = 0; c < r; ++c)
      s.Gamma.block(r * nz, c * nx, nz, nx) = HFp[static_cast<std::size_t>(r - 1 - c)];

  s.Am = left_null_space<Scalar>(s.O, Scalar(kAnnihilatorTolerance), &s.rank_O);
  if (s.Am.rows() == 0)
    fail(ErrorKind::no_residue, "stacked observation matrix has full row rank for L=" + std::to_string(L) +
                                    "; increase L");

  const Index ne = (L - 1) * nx + L * nz;
  s.A.resize(s.Am.rows(), ne);
  s.A.leftCols((L - 1) * nx) = s.Am * s.Gamma;
  s.A.rightCols(L * nz) = s.Am;

  Mat<Scalar> ups = Mat<Scalar>::Zero((L - 1) * nx, n);
  for (Index blk = 0; blk < L - 1; ++blk)
    for (Index i = 0; i < n; ++i) ups.template block<2, 1>(blk * nx + 2 * i, i) = clock_noise_mean<Scalar>(1, s.Ts);
  s.drift_map = s.Am * s.Gamma * ups;

  const auto basis = build_structure_matrices<Scalar>(n, s.Ts);
  const Index nth = theta_alpha_size(n);
  const Index na = s.Am.rows();
  s.theta_map.resize(na * na, nth);
  Mat<Scalar> M = Mat<Scalar>::Zero(ne, ne);
  for (Index i = 0; i < nth; ++i) {
    M.setZero();
    for (Index blk = 0; blk < L - 1; ++blk) M.block(blk * nx, blk * nx, nx, nx) = basis.BQ[static_cast<std::size_t>(i)];
    for (Index blk = 0; blk < L; ++blk)
      M.block((L - 1) * nx + blk * nz, (L - 1) * nx + blk * nz, nz, nz) = basis.BR[static_cast<std::size_t>(i)];
    // (A (x) A) vec(M) = vec(A M A^T)
    const Mat<Scalar> C = s.A * M * s.A.transpose();
    s.theta_map.col(i) = Eigen::Map<const Vec<Scalar>>(C.data(), na * na);
  }
  return s;
}

/// Residues Am [z_k; ...; z_{k+L-1}] for k = 0..N-L+1, one per column.
template <typename Scalar>
Mat<Scalar> compute_residues(const MeasurementRecord<Scalar>& rec, const MdmSystem<Scalar>& sys) {
  require(rec.nz() == sys.nz, "record channel count does not match the MDM system");
  require(rec.samples() >= sys.L, "record shorter than the window length L");
  const Index count = rec.samples() - sys.L + 1;
  // overlapping windows: column k starts at z_k, stride nz
  Eigen::Map<const Mat<Scalar>, 0, Eigen::OuterStride<>> windows(rec.Z.data(), sys.L * sys.nz, count,
                                                                  Eigen::OuterStride<>(sys.nz));
  return sys.Am * windows;
}

template <typename Scalar = double>
struct MdmDriftFit {
  /// Drifts of clocks 2..n.
  Vec<Scalar> d;
  Vec<Scalar> standard_errors;
  Vec<Scalar> residue_mean;
};

/// d(2..n) = pinv(drift_map[:,1:]) (mean - drift_map[:,0] d1).
template <typename Scalar>
Vec<Scalar> solve_drifts(const MdmSystem<Scalar>& sys, const Vec<Scalar>& residue_mean, Scalar d1) {
  require(residue_mean.size() == sys.n_ao(), "residue mean has wrong dimension");
  const Mat<Scalar> rest = sys.drift_map.rightCols(sys.n - 1);
  Mat<Scalar> eq = rest;
  Vec<Scalar> scale = eq.colwise().norm().transpose();
  for (Index j = 0; j < scale.size(); ++j)
    if (!(scale(j) > 0)) scale(j) = 1;
  eq = eq * scale.cwiseInverse().asDiagonal();
  Eigen::JacobiSVD<Mat<Scalar>> svd(eq);
  const Index rank = detail::numerical_rank<Scalar>(svd.singularValues(), Scalar(kAnnihilatorTolerance));
  if (rank < sys.n - 1)
    fail(ErrorKind::drift_unidentifiable, "drift map has rank " + std::to_string(rank) + " < " +
                                              std::to_string(sys.n - 1) + "; increase L");
  const Vec<Scalar> rhs = residue_mean - sys.drift_map.col(0) * d1;
  return pinv_solve<Scalar>(eq, rhs).cwiseQuotient(scale);
}

namespace detail {

/// Covariance of the mean of a series whose terms are independent beyond
/// max_lag apart: (G0 + sum_h (Gh + Gh^T)) / K, with Gh the lag-h sample
/// autocovariance. Column k of the series is make(k0, k1) column k - k0.
template <typename Scalar, typename Make>
Mat<Scalar> mean_cov_dependent(Index dim, Index count, Index max_lag, const Vec<Scalar>& mean, Make make) {
  constexpr Index chunk = 4096;
  std::vector<Mat<Scalar>> G(static_cast<std::size_t>(max_lag + 1), Mat<Scalar>::Zero(dim, dim));
  for (Index k0 = 0; k0 < count; k0 += chunk) {
    const Index k1 = std::min(count, k0 + chunk + max_lag);
    const Mat<Scalar> U = make(k0, k1).colwise() - mean;
    const Index b = std::min(chunk, count - k0);
    for (Index h = 0; h <= max_lag; ++h) {
      const Index m = std::min(b, count - k0 - h);
      if (m > 0) G[static_cast<std::size_t>(h)].noalias() += U.leftCols(m) * U.middleCols(h, m).transpose();
    }
  }
  Mat<Scalar> lr = G[0];
  for (Index h = 1; h <= max_lag; ++h) {
    lr += G[static_cast<std::size_t>(h)];
    lr += G[static_cast<std::size_t>(h)].transpose();
  }
  const Scalar K = static_cast<Scalar>(count);
  return lr / (K * K);
}

}  // namespace detail

/// Drifts from the sample mean of the residues. Residues L or more apart
/// share no noise, so the standard errors sum autocovariances up to lag L-1.
template <typename Scalar>
MdmDriftFit<Scalar> estimate_drifts_mdm(const Mat<Scalar>& residues, const MdmSystem<Scalar>& sys, Scalar d1) {
  require(residues.rows() == sys.n_ao() && residues.cols() >= 1, "residues have wrong shape");
  MdmDriftFit<Scalar> fit;
  fit.residue_mean = residues.rowwise().mean();
  fit.d = solve_drifts(sys, fit.residue_mean, d1);

  const Index count = residues.cols();
  fit.standard_errors = Vec<Scalar>::Constant(sys.n - 1, std::numeric_limits<Scalar>::quiet_NaN());
  if (count > 1) {
    const Mat<Scalar> S = detail::mean_cov_dependent<Scalar>(
        sys.n_ao(), count, std::min(sys.L - 1, count - 1), fit.residue_mean,
        [&](Index k0, Index k1) { return Mat<Scalar>(residues.middleCols(k0, k1 - k0)); });
    Mat<Scalar> P(sys.n - 1, sys.n_ao());
    const Mat<Scalar> rest = sys.drift_map.rightCols(sys.n - 1);
    for (Index i = 0; i < sys.n_ao(); ++i) P.col(i) = pinv_solve<Scalar>(rest, Vec<Scalar>::Unit(sys.n_ao(), i));
    const Mat<Scalar> cov = P * S * P.transpose();
    fit.standard_errors = cov.diagonal().cwiseMax(Scalar(0)).cwiseSqrt();
  }
  return fit;
}

template <typename Scalar = double>
struct ThetaAlphaFit {
  Vec<Scalar> theta;
  Vec<Scalar> standard_errors;
  std::vector<std::string> clamped;
  LsDiagnostics diagnostics;
  Index structural_null{0};
};

inline std::vector<std::string> theta_alpha_names(Index n) {
  std::vector<std::string> names;
  for (Index i = 0; i < n; ++i) names.push_back("q1[" + std::to_string(i + 1) + "]");
  for (Index i = 0; i < n; ++i) names.push_back("q2[" + std::to_string(i + 1) + "]");
  for (auto [a, b] : upper_pairs(n - 1))
    names.push_back("r[" + std::to_string(a + 1) + "," + std::to_string(b + 1) + "]");
  return names;
}

/// theta_alpha = pinv(theta_map) vec(second moment), with column
/// equilibration of theta_map. moment_cov is the sampling covariance of the
/// moment; when empty the standard errors come from the fit misfit instead.
/// Negative q1, q2 and r_cc are clamped to 1e-3 of their standard error.
template <typename Scalar>
ThetaAlphaFit<Scalar> solve_theta_alpha(const MdmSystem<Scalar>& sys, const Vec<Scalar>& moment,
                                        const Mat<Scalar>& moment_cov = {}) {
  const Index na = sys.n_ao();
  require(moment.size() == na * na, "residue moment has wrong dimension");
  const Index nth = sys.theta_map.cols();
  const auto names = theta_alpha_names(sys.n);

  Vec<Scalar> scale = sys.theta_map.colwise().norm().transpose();
  for (Index j = 0; j < nth; ++j)
    if (!(scale(j) > 0)) scale(j) = 1;
  const Mat<Scalar> eq = sys.theta_map * scale.cwiseInverse().asDiagonal();
  Eigen::JacobiSVD<Mat<Scalar>> svd(eq, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec<Scalar>& sv = svd.singularValues();
  const Index rank = detail::numerical_rank<Scalar>(sv, Scalar(kPinvTolerance));
  const Index need = structural_rank(sys.n, nth);
  if (rank < need) {
    fail(ErrorKind::unidentifiable, "MDM covariance map has rank " + std::to_string(rank) + " < " +
                                        std::to_string(need) + " for L=" + std::to_string(sys.L) +
                                        "; increase L. " + describe_null_directions<Scalar>(eq, rank, names));
  }
  const auto V = svd.matrixV().leftCols(rank);
  const Vec<Scalar> inv_s = sv.head(rank).cwiseInverse();
  const Vec<Scalar> y = V * (svd.matrixU().leftCols(rank).transpose() * moment).cwiseProduct(inv_s);

  ThetaAlphaFit<Scalar> fit;
  fit.theta = y.cwiseQuotient(scale);
  fit.structural_null = nth - rank;
  const Scalar rss = (moment - sys.theta_map * fit.theta).squaredNorm();
  const Index dof = std::max<Index>(moment.size() - rank, 1);
  // theta = P moment
  const Mat<Scalar> P =
      scale.cwiseInverse().asDiagonal() * V * inv_s.asDiagonal() * svd.matrixU().leftCols(rank).transpose();
  const Mat<Scalar> cov = moment_cov.size() > 0 ? Mat<Scalar>(P * moment_cov * P.transpose())
                                                : Mat<Scalar>((rss / static_cast<Scalar>(dof)) * P * P.transpose());
  fit.standard_errors = cov.diagonal().cwiseMax(Scalar(0)).cwiseSqrt();
  fit.diagnostics.residual_norm = static_cast<double>(std::sqrt(rss));
  fit.diagnostics.rank = rank;
  fit.diagnostics.rank_deficient = rank < nth;
  fit.diagnostics.condition_number = detail::effective_condition<Scalar>(sv, rank);

  std::vector<Index> nonneg;
  for (Index i = 0; i < 2 * sys.n; ++i) nonneg.push_back(i);
  {
    Index k = 2 * sys.n;
    for (auto [a, b] : upper_pairs(sys.nz)) {
      if (a == b) nonneg.push_back(k);
      ++k;
    }
  }
  for (Index i : nonneg) {
    if (fit.theta(i) >= 0) continue;
    Scalar floor = Scalar(1e-3) * fit.standard_errors(i);
    if (!(floor > 0)) floor = std::numeric_limits<Scalar>::min();
    fit.theta(i) = floor;
    fit.clamped.push_back(names[static_cast<std::size_t>(i)]);
  }
  return fit;
}

/// Removes the drift-induced mean from the residues (all n drifts, pivot
/// included) and solves for theta_alpha from the sample second moment.
template <typename Scalar>
ThetaAlphaFit<Scalar> estimate_theta_alpha(const Mat<Scalar>& residues, const Vec<Scalar>& drifts,
                                           const MdmSystem<Scalar>& sys) {
  require(residues.rows() == sys.n_ao() && residues.cols() >= 1, "residues have wrong shape");
  require(drifts.size() == sys.n, "need one drift per clock");
  const Mat<Scalar> centered = residues.colwise() - sys.drift_map * drifts;
  const Index na = sys.n_ao();
  const Index count = residues.cols();
  const Mat<Scalar> S = centered * centered.transpose() / static_cast<Scalar>(count);
  const Vec<Scalar> moment = Eigen::Map<const Vec<Scalar>>(S.data(), na * na);
  // products of residues are also independent beyond lag L-1
  const auto products = [&](Index k0, Index k1) {
    Mat<Scalar> U(na * na, k1 - k0);
    for (Index k = k0; k < k1; ++k) {
      const Vec<Scalar> c = centered.col(k);
      Eigen::Map<Mat<Scalar>>(U.col(k - k0).data(), na, na).noalias() = c * c.transpose();
    }
    return U;
  };
  const Mat<Scalar> moment_cov =
      count > 1 ? detail::mean_cov_dependent<Scalar>(na * na, count, std::min(sys.L - 1, count - 1), moment, products)
                : Mat<Scalar>();
  return solve_theta_alpha(sys, moment, moment_cov);
}

/// Decimate to ts_target, annihilate the state over windows of L samples,
/// recover drifts from the residue mean and theta_alpha from its covariance.
template <typename Scalar>
EstimateReport<Scalar> estimate_mdm(const MeasurementRecord<Scalar>& rec, const MdmConfig<Scalar>& cfg = {},
                                    Scalar d1 = Scalar(0)) {
  require(rec.Ts > 0, "record sampling period must be positive");
  require(rec.nz() >= 1, "record has no channels");
  require(rec.Z.allFinite(), "record contains non-finite samples");
  require(cfg.ts_target > 0, "target sampling period must be positive");
  require(cfg.L >= 2, "window length L must be >= 2");
  const Scalar ratio = cfg.ts_target / rec.Ts;
  const Index factor = static_cast<Index>(std::llround(static_cast<double>(ratio)));
  require(factor >= 1 && std::abs(ratio - static_cast<Scalar>(factor)) <= Scalar(1e-9) * ratio,
          "target sampling period must be an integer multiple of the record period");
  require(rec.samples() >= factor, "record shorter than one resampling period");
  const auto dec = decimate(rec, factor);
  require(dec.samples() >= cfg.L, "resampled record too short for window length L");

  const Index n = rec.nz() + 1, nz = n - 1;
  EnsembleParams<Scalar> shape;
  shape.clocks.assign(static_cast<std::size_t>(n), ClockParams<Scalar>{});
  shape.R = Mat<Scalar>::Zero(nz, nz);
  const auto sys = build_mdm_system(assemble_ensemble(shape, dec.Ts), cfg.L);
  const Mat<Scalar> residues = compute_residues(dec, sys);
  const auto drift = estimate_drifts_mdm(residues, sys, d1);
  Vec<Scalar> d_all(n);
  d_all(0) = d1;
  d_all.tail(nz) = drift.d;
  const auto fit = estimate_theta_alpha(residues, d_all, sys);

  EstimateReport<Scalar> rep;
  rep.method = "mdm";
  rep.params.clocks.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    rep.params.clocks[static_cast<std::size_t>(i)] = {fit.theta(i), fit.theta(n + i), d_all(i)};
  rep.params.R = unpack_r_upper<Scalar>(fit.theta.tail(fit.theta.size() - 2 * n), nz);
  rep.theta = pack_theta(rep.params);
  rep.standard_errors = unknown_errors<Scalar>(n);
  rep.standard_errors.head(2 * n) = fit.standard_errors.head(2 * n);
  rep.standard_errors(2 * n) = 0;
  rep.standard_errors.segment(2 * n + 1, nz) = drift.standard_errors;
  rep.standard_errors.tail(nz * (nz + 1) / 2) = fit.standard_errors.tail(nz * (nz + 1) / 2);

  rep.residual = fit.diagnostics.residual_norm;
  rep.cond = fit.diagnostics.condition_number;
  rep.rank = fit.diagnostics.rank;
  rep.clamped = fit.clamped;
  if (fit.structural_null > 0)
    rep.warnings.push_back("two-clock ensemble: pivot and second-clock intensities are split by minimum norm");
  rep.extras["L"] = static_cast<double>(cfg.L);
  rep.extras["ts_target_s"] = static_cast<double>(dec.Ts);
  rep.extras["n_residue_dim"] = static_cast<double>(sys.n_ao());
  rep.extras["n_residues"] = static_cast<double>(residues.cols());
  return rep;
}

}  // namespace chronident

#endif  // CHRONIDENT_IDENT_MDM_HPP
