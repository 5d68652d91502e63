#ifndef CHRONIDENT_MODEL_HPP
#define CHRONIDENT_MODEL_HPP

#include "chronident/core.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace chronident {

/// Noise intensities and drift of a single clock.
///   q1: white-FM intensity [s^2/s], q2: random-walk-FM intensity [s^2/s^3],
///   d: linear frequency drift [1/s].
template <typename Scalar = double>
struct ClockParams {
  Scalar q1{0};
  Scalar q2{0};
  Scalar d{0};

  bool valid() const { return q1 > 0 && q2 > 0 && std::isfinite(static_cast<double>(d)); }
};

/// Clock list plus measurement-noise covariance. Clock 0 is the pivot; the
/// measurement channel c (0-based) observes phase(clock c+1) - phase(clock 0).
template <typename Scalar = double>
struct EnsembleParams {
  std::vector<ClockParams<Scalar>> clocks;
  Mat<Scalar> R;

  Index n() const { return static_cast<Index>(clocks.size()); }
  Index nz() const { return n() - 1; }
};

template <typename Scalar = double>
struct EnsembleModel {
  Mat<Scalar> F;
  Mat<Scalar> H;
  Mat<Scalar> Q;
  Vec<Scalar> mu;
  Mat<Scalar> R;
  Scalar Ts{0};
  Index n{0};
  Index nz{0};
  Index nx{0};
};

/// (row, col) of the unique R entries in the order used everywhere:
/// row-major upper triangle, r11, r12, ..., r1nz, r22, ...
inline std::vector<std::pair<Index, Index>> upper_pairs(Index nz) {
  std::vector<std::pair<Index, Index>> out;
  out.reserve(static_cast<std::size_t>(nz * (nz + 1) / 2));
  for (Index i = 0; i < nz; ++i)
    for (Index j = i; j < nz; ++j) out.emplace_back(i, j);
  return out;
}

/// Number of parameters in the full vector: n(n+5)/2.
inline Index theta_size(Index n) { return n * (n + 5) / 2; }

template <typename Scalar>
Mat2<Scalar> clock_transition(Scalar Ts) {
  require(Ts >= 0, "sampling period must be non-negative");
  Mat2<Scalar> F1;
  F1 << 1, Ts, 0, 1;
  return F1;
}

template <typename Scalar>
Mat2<Scalar> clock_noise_cov(Scalar q1, Scalar q2, Scalar Ts) {
  require(Ts > 0, "sampling period must be positive");
  require(q1 >= 0 && q2 >= 0, "noise intensities must be non-negative");
  const Scalar Ts2 = Ts * Ts;
  const Scalar Ts3 = Ts2 * Ts;
  Mat2<Scalar> Q;
  Q << q1 * Ts + q2 * Ts3 / 3, q2 * Ts2 / 2,
       q2 * Ts2 / 2,           q2 * Ts;
  return Q;
}

/// Per-step mean of the clock state noise produced by a constant drift.
template <typename Scalar>
Vec2<Scalar> clock_noise_mean(Scalar d, Scalar Ts) {
  require(Ts > 0, "sampling period must be positive");
  require(std::isfinite(static_cast<double>(d)), "drift must be finite");
  return Vec2<Scalar>(d * Ts * Ts / 2, d * Ts);
}

/// Structural checks shared by assembly and I/O: n >= 2, R square nz x nz,
/// symmetric and positive semi-definite (eigenvalues >= -1e-12 trace).
template <typename Scalar>
void validate(const EnsembleParams<Scalar>& params) {
  require(params.n() >= 2, "ensemble needs at least two clocks (one differential channel)");
  const Index nz = params.nz();
  require(params.R.rows() == nz && params.R.cols() == nz, "R must be (n-1) x (n-1)");
  for (const auto& c : params.clocks)
    require(c.q1 >= 0 && c.q2 >= 0 && std::isfinite(static_cast<double>(c.q1)) &&
                std::isfinite(static_cast<double>(c.q2)) && std::isfinite(static_cast<double>(c.d)),
            "clock intensities must be finite and non-negative");
  require(params.R.allFinite(), "R must be finite");
  const Scalar scale = params.R.cwiseAbs().maxCoeff();
  require((params.R - params.R.transpose()).cwiseAbs().maxCoeff() <= scale * Scalar(1e-12),
          "R must be symmetric");
  if (scale > 0) {
    Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(params.R, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -Scalar(1e-12) * params.R.trace())
      fail(ErrorKind::invalid_covariance, "R is not positive semi-definite");
  }
}

/// Assemble F = I_n (x) F1, H = V (I_n (x) [1 0]), block-diagonal Q and the
/// stacked drift mean.
template <typename Scalar>
EnsembleModel<Scalar> assemble_ensemble(const EnsembleParams<Scalar>& params, Scalar Ts) {
  validate(params);
  require(Ts > 0, "sampling period must be positive");
  EnsembleModel<Scalar> m;
  m.n = params.n();
  m.nz = m.n - 1;
  m.nx = 2 * m.n;
  m.Ts = Ts;
  m.F = Mat<Scalar>::Zero(m.nx, m.nx);
  m.Q = Mat<Scalar>::Zero(m.nx, m.nx);
  m.mu = Vec<Scalar>::Zero(m.nx);
  const Mat2<Scalar> F1 = clock_transition(Ts);
  for (Index i = 0; i < m.n; ++i) {
    const auto& c = params.clocks[static_cast<std::size_t>(i)];
    m.F.template block<2, 2>(2 * i, 2 * i) = F1;
    m.Q.template block<2, 2>(2 * i, 2 * i) = clock_noise_cov(c.q1, c.q2, Ts);
    m.mu.template segment<2>(2 * i) = clock_noise_mean(c.d, Ts);
  }
  m.H = Mat<Scalar>::Zero(m.nz, m.nx);
  for (Index c = 0; c < m.nz; ++c) {
    m.H(c, 0) = -1;
    m.H(c, 2 * (c + 1)) = 1;
  }
  m.R = params.R;
  return m;
}

/// theta = [q1(1..n), q2(1..n), d(1..n), r_upper].
template <typename Scalar>
Vec<Scalar> pack_theta(const EnsembleParams<Scalar>& params) {
  const Index n = params.n();
  require(n >= 2, "ensemble needs at least two clocks");
  require(params.R.rows() == n - 1 && params.R.cols() == n - 1, "R must be (n-1) x (n-1)");
  Vec<Scalar> theta(theta_size(n));
  for (Index i = 0; i < n; ++i) {
    const auto& c = params.clocks[static_cast<std::size_t>(i)];
    theta(i) = c.q1;
    theta(n + i) = c.q2;
    theta(2 * n + i) = c.d;
  }
  Index k = 3 * n;
  for (auto [i, j] : upper_pairs(n - 1)) theta(k++) = params.R(i, j);
  return theta;
}

template <typename Scalar>
EnsembleParams<Scalar> unpack_theta(const Eigen::Ref<const Vec<Scalar>>& theta, Index n) {
  require(n >= 2, "ensemble needs at least two clocks");
  require(theta.size() == theta_size(n), "theta length must be n(n+5)/2");
  EnsembleParams<Scalar> p;
  p.clocks.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) p.clocks[static_cast<std::size_t>(i)] = {theta(i), theta(n + i), theta(2 * n + i)};
  p.R = Mat<Scalar>::Zero(n - 1, n - 1);
  Index k = 3 * n;
  for (auto [i, j] : upper_pairs(n - 1)) {
    p.R(i, j) = theta(k);
    p.R(j, i) = theta(k);
    ++k;
  }
  return p;
}

template <typename Scalar>
Vec<Scalar> pack_r_upper(const Mat<Scalar>& R) {
  const auto pairs = upper_pairs(R.rows());
  Vec<Scalar> out(static_cast<Index>(pairs.size()));
  Index k = 0;
  for (auto [i, j] : pairs) out(k++) = R(i, j);
  return out;
}

template <typename Scalar>
Mat<Scalar> unpack_r_upper(const Eigen::Ref<const Vec<Scalar>>& upper, Index nz) {
  require(upper.size() == nz * (nz + 1) / 2, "r_upper length must be nz(nz+1)/2");
  Mat<Scalar> R(nz, nz);
  Index k = 0;
  for (auto [i, j] : upper_pairs(nz)) {
    R(i, j) = upper(k);
    R(j, i) = upper(k);
    ++k;
  }
  return R;
}

/// The four-clock hydrogen-maser scenario used throughout the tests and the
/// CLI defaults (intensities in s^2/s and s^2/s^3, drifts in 1/s).
template <typename Scalar = double>
EnsembleParams<Scalar> maser_scenario() {
  EnsembleParams<Scalar> p;
  p.clocks = {{Scalar(1e-27), Scalar(0.1e-35), Scalar(0)},
              {Scalar(1.5e-27), Scalar(2e-35), Scalar(8e-21)},
              {Scalar(5e-27), Scalar(1.5e-35), Scalar(7.5e-21)},
              {Scalar(7e-27), Scalar(2.5e-35), Scalar(3e-21)}};
  p.R.resize(3, 3);
  p.R << 9, 6, 5,
         6, 8.7, 4,
         5, 4, 9.5;
  p.R *= Scalar(1e-35);
  return p;
}

}  // namespace chronident

#endif  // CHRONIDENT_MODEL_HPP
