#ifndef CHRONIDENT_SIMULATE_HPP
#define CHRONIDENT_SIMULATE_HPP

#include "chronident/model.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace chronident {

struct RecordOrigin {
  enum class Kind { synthetic, ingested };
  Kind kind{Kind::synthetic};
  std::uint64_t seed{0};
  std::string path;
};

/// Uniformly sampled differential phase: Z is nz x (N+1), column k = z_k [s].
template <typename Scalar = double>
struct MeasurementRecord {
  Scalar Ts{0};
  Mat<Scalar> Z;
  RecordOrigin origin;

  Index nz() const { return Z.rows(); }
  Index samples() const { return Z.cols(); }
  Index steps() const { return Z.cols() - 1; }
};

template <typename Scalar = double>
struct StateTrajectory {
  Mat<Scalar> X;
};

/// splitmix64 finalizer over (master, index); used to give each Monte-Carlo
/// run its own independent stream.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Factor G with G G^T = C for a symmetric PSD C. Eigenvalues down to
/// -1e-12 trace are clamped to zero; anything more negative is rejected.
/// Uses the Cholesky factor when C is positive definite and a pivoted LDL^T
/// factor otherwise.
template <typename Scalar>
Mat<Scalar> symmetric_factor(const Mat<Scalar>& C) {
  require(C.rows() == C.cols(), "covariance must be square");
  const Index n = C.rows();
  if (n == 0) return C;
  const Scalar tr = C.trace();
  if (C.cwiseAbs().maxCoeff() == 0) return Mat<Scalar>::Zero(n, n);
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(C);
  const Vec<Scalar> ev = es.eigenvalues();
  if (ev.minCoeff() < -Scalar(1e-12) * std::abs(tr))
    fail(ErrorKind::invalid_covariance, "covariance has a negative eigenvalue beyond tolerance");
  Mat<Scalar> Cs = C;
  if (ev.minCoeff() < 0)
    Cs = es.eigenvectors() * ev.cwiseMax(Scalar(0)).asDiagonal() * es.eigenvectors().transpose();
  Eigen::LLT<Mat<Scalar>> llt(Cs);
  if (llt.info() == Eigen::Success && (llt.matrixL().toDenseMatrix().diagonal().array() > 0).all())
    return llt.matrixL();
  Eigen::LDLT<Mat<Scalar>> ldlt(Cs);
  const Vec<Scalar> D = ldlt.vectorD().cwiseMax(Scalar(0)).cwiseSqrt();
  Mat<Scalar> L = ldlt.matrixL();
  Mat<Scalar> G = ldlt.transpositionsP().transpose() * (L * D.asDiagonal());
  return G;
}

namespace detail {

template <typename Scalar, typename StateSink>
MeasurementRecord<Scalar> run_simulation(const EnsembleModel<Scalar>& model, Index N, std::uint64_t seed,
                                         const std::optional<Vec<Scalar>>& x0, StateSink&& sink) {
  require(N >= 1, "simulation needs N >= 1");
  require(model.F.rows() == model.nx && model.H.rows() == model.nz && model.R.rows() == model.nz,
          "inconsistent ensemble model");
  const Mat<Scalar> Gq = symmetric_factor<Scalar>(model.Q);
  const Mat<Scalar> Gr = symmetric_factor<Scalar>(model.R);

  std::mt19937_64 rng(seed);
  std::normal_distribution<Scalar> normal(Scalar(0), Scalar(1));

  Vec<Scalar> x = x0 ? *x0 : Vec<Scalar>::Zero(model.nx);
  require(x.size() == model.nx, "initial state has wrong dimension");
  Vec<Scalar> xi_w(model.nx), xi_v(model.nz), xn(model.nx);

  MeasurementRecord<Scalar> rec;
  rec.Ts = model.Ts;
  rec.Z.resize(model.nz, N + 1);
  rec.origin = {RecordOrigin::Kind::synthetic, seed, {}};
  for (Index k = 0; k <= N; ++k) {
    sink(k, x);
    for (Index i = 0; i < model.nz; ++i) xi_v(i) = normal(rng);
    rec.Z.col(k).noalias() = model.H * x;
    rec.Z.col(k).noalias() += Gr * xi_v;
    if (k == N) break;
    for (Index i = 0; i < model.nx; ++i) xi_w(i) = normal(rng);
    xn.noalias() = model.F * x;
    xn += model.mu;
    xn.noalias() += Gq * xi_w;
    x.swap(xn);
  }
  return rec;
}

}  // namespace detail

/// x_{k+1} = F x_k + w_k, z_k = H x_k + v_k with w ~ N(mu, Q), v ~ N(0, R).
/// Same (model, N, seed, x0) always gives bit-identical output.
template <typename Scalar>
std::pair<StateTrajectory<Scalar>, MeasurementRecord<Scalar>> simulate_ensemble(
    const EnsembleModel<Scalar>& model, Index N, std::uint64_t seed, const std::optional<Vec<Scalar>>& x0 = {}) {
  StateTrajectory<Scalar> traj;
  traj.X.resize(model.nx, N + 1);
  auto rec = detail::run_simulation(model, N, seed, x0, [&](Index k, const Vec<Scalar>& x) { traj.X.col(k) = x; });
  return {std::move(traj), std::move(rec)};
}

/// As simulate_ensemble but without keeping the state trajectory.
template <typename Scalar>
MeasurementRecord<Scalar> simulate_measurements(const EnsembleModel<Scalar>& model, Index N, std::uint64_t seed,
                                                const std::optional<Vec<Scalar>>& x0 = {}) {
  return detail::run_simulation(model, N, seed, x0, [](Index, const Vec<Scalar>&) {});
}

/// Keeps samples 0, f, 2f, ... (point samples, no averaging).
template <typename Scalar>
MeasurementRecord<Scalar> decimate(const MeasurementRecord<Scalar>& rec, Index factor) {
  require(factor >= 1, "decimation factor must be >= 1");
  require(rec.samples() >= factor, "record shorter than decimation factor");
  if (factor == 1) return rec;
  const Index kept = rec.steps() / factor + 1;
  MeasurementRecord<Scalar> out;
  out.Ts = rec.Ts * static_cast<Scalar>(factor);
  out.origin = rec.origin;
  out.Z.resize(rec.nz(), kept);
  for (Index k = 0; k < kept; ++k) out.Z.col(k) = rec.Z.col(k * factor);
  return out;
}

struct OutlierReport {
  /// Flagged sample indices (0-based) per channel.
  std::vector<std::vector<Index>> flagged;
  std::vector<double> threshold;

  std::size_t total() const {
    std::size_t t = 0;
    for (const auto& f : flagged) t += f.size();
    return t;
  }
};

namespace detail {

template <typename Scalar>
Scalar median_inplace(std::vector<Scalar>& v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  Scalar m = v[mid];
  if (v.size() % 2 == 0) {
    const Scalar lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    m = (m + lo) / 2;
  }
  return m;
}

}  // namespace detail

/// Robust spike filter on phase data.
///
/// For each channel the lag-1 second differences s_k (centred on sample
/// k+1) are compared with their median; the scale is the normal-consistent
/// MAD (1.4826 * MAD). Sample k+1 is flagged when |s_k - median| exceeds
/// k * scale and is a local maximum of that deviation, which keeps the two
/// neighbours of an isolated spike from being flagged as well. Flagged
/// samples are replaced by linear interpolation between the nearest
/// unflagged neighbours.
template <typename Scalar>
std::pair<MeasurementRecord<Scalar>, OutlierReport> remove_outliers(const MeasurementRecord<Scalar>& rec,
                                                                   Scalar k = Scalar(5)) {
  require(k > 0, "outlier threshold must be positive");
  MeasurementRecord<Scalar> out = rec;
  OutlierReport report;
  report.flagged.resize(static_cast<std::size_t>(rec.nz()));
  report.threshold.assign(static_cast<std::size_t>(rec.nz()), 0.0);
  const Index S = rec.samples();
  if (S < 3) return {std::move(out), std::move(report)};
  const Index M = S - 2;

  std::vector<Scalar> s(static_cast<std::size_t>(M)), work;
  for (Index c = 0; c < rec.nz(); ++c) {
    const auto z = rec.Z.row(c);
    for (Index i = 0; i < M; ++i) s[static_cast<std::size_t>(i)] = z(i + 2) - 2 * z(i + 1) + z(i);
    work = s;
    const Scalar med = detail::median_inplace(work);
    for (Index i = 0; i < M; ++i) work[static_cast<std::size_t>(i)] = std::abs(s[static_cast<std::size_t>(i)] - med);
    std::vector<Scalar> dev = work;
    const Scalar mad = detail::median_inplace(work);
    const Scalar scale_floor =
        Scalar(64) * std::numeric_limits<Scalar>::epsilon() * rec.Z.row(c).cwiseAbs().maxCoeff();
    const Scalar thr = std::max(k * Scalar(1.4826) * mad, scale_floor);
    report.threshold[static_cast<std::size_t>(c)] = static_cast<double>(thr);

    std::vector<Index>& flags = report.flagged[static_cast<std::size_t>(c)];
    for (Index i = 0; i < M; ++i) {
      const Scalar d = dev[static_cast<std::size_t>(i)];
      if (!(d > thr)) continue;
      if (i > 0 && dev[static_cast<std::size_t>(i - 1)] > d) continue;
      if (i + 1 < M && dev[static_cast<std::size_t>(i + 1)] > d) continue;
      flags.push_back(i + 1);
    }
    if (2 * static_cast<Index>(flags.size()) > S)
      fail(ErrorKind::channel_unusable, "channel " + std::to_string(c + 1) + " has more than 50% flagged samples");

    for (std::size_t a = 0; a < flags.size();) {
      // contiguous run [lo, hi] of flagged samples; endpoints are never flagged
      const Index lo = flags[a];
      Index hi = lo;
      std::size_t b = a + 1;
      while (b < flags.size() && flags[b] == hi + 1) hi = flags[b++];
      const Index left = lo - 1, right = hi + 1;
      const Scalar zl = rec.Z(c, left), zr = rec.Z(c, right);
      for (Index t = lo; t <= hi; ++t)
        out.Z(c, t) = zl + (zr - zl) * static_cast<Scalar>(t - left) / static_cast<Scalar>(right - left);
      a = b;
    }
  }
  return {std::move(out), std::move(report)};
}

}  // namespace chronident

#endif  // CHRONIDENT_SIMULATE_HPP
