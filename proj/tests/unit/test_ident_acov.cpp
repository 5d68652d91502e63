#include "helpers.hpp"

#include "chronident/ident_acov.hpp"

#include <doctest.h>

#include <random>

using namespace chronident;
using testutil::rel_err;
using testutil::rel_norm_err;

namespace {

/// ACOV model evaluated term by term in the test, independent of
/// analytic_acov: common pivot noise, own noise on the diagonal, white PM
/// and the drift-difference product.
double model_acov(const EnsembleParams<double>& p, Index i, Index j, double tau) {
  const auto& c0 = p.clocks[0];
  const auto& ci = p.clocks[static_cast<std::size_t>(i + 1)];
  const auto& cj = p.clocks[static_cast<std::size_t>(j + 1)];
  double v = c0.q1 / tau + c0.q2 * tau / 3;
  if (i == j) v += ci.q1 / tau + ci.q2 * tau / 3;
  v += 3 * p.R(i, j) / (tau * tau);
  v += (ci.d - c0.d) * (cj.d - c0.d) * tau * tau / 2;
  return v;
}

AcovEstimate<double> exact_estimate(const EnsembleParams<double>& p, const TauGrid<double>& grid, Index N) {
  AcovEstimate<double> est;
  est.grid = grid;
  est.nz = p.nz();
  est.N = N;
  est.pairs = acov_pairs(p.nz());
  est.sigma2.resize(static_cast<Index>(est.pairs.size()), grid.size());
  est.variance.resizeLike(est.sigma2);
  for (std::size_t q = 0; q < est.pairs.size(); ++q)
    for (Index k = 0; k < grid.size(); ++k) {
      const auto [i, j] = est.pairs[q];
      const double s = model_acov(p, i, j, grid.tau(k));
      est.sigma2(static_cast<Index>(q), k) = s;
      const double scale = std::sqrt(model_acov(p, i, i, grid.tau(k)) * model_acov(p, j, j, grid.tau(k)));
      est.variance(static_cast<Index>(q), k) =
          acov_variance(s, N, grid.m[static_cast<std::size_t>(k)], VarianceRule::chi_square, scale);
    }
  return est;
}

Mat<double> f_matrix(const Vec<double>& delta) { return delta * delta.transpose(); }

}  // namespace

TEST_SUITE("ident_acov") {

TEST_CASE("layout") {
  const ThetaALayout lay{4};
  CHECK(lay.size() == 20);
  const auto names = lay.names();
  CHECK(names[0] == "q1[1]");
  CHECK(names[1] == "q2[1]");
  CHECK(names[2] == "r[1,1]");
  CHECK(names[3] == "f[1,1]");
  CHECK(names[4] == "q1[2]");
  CHECK(names[5] == "q2[2]");
  CHECK(names[14] == "r[1,2]");
  CHECK(names[15] == "f[1,2]");
  CHECK(names[19] == "f[2,3]");
}

TEST_CASE("regression is exact on model values") {
  const auto p = maser_scenario<double>();
  const auto grid = log_spaced_grid<double>(20, 3150000, 5.0);
  const auto sys = build_regression(exact_estimate(p, grid, 6312000), 4);
  CHECK(sys.Phi.rows() == 120);
  CHECK(sys.Phi.cols() == 20);
  const Vec<double> theta = theta_a_from_params(p);
  CHECK(rel_norm_err(Vec<double>(sys.Phi * theta), sys.z) <= 1e-12);
  for (Index r = 0; r < sys.z.size(); ++r) CHECK(rel_err((sys.Phi * theta)(r), sys.z(r)) < 1e-12);
}

TEST_CASE("single AVAR row for two clocks") {
  EnsembleParams<double> p;
  p.clocks = {{1, 1, 0}, {1, 1, 0}};
  p.R = Mat<double>::Constant(1, 1, 1);
  TauGrid<double> grid;
  grid.Ts = 2;
  grid.m = {5};
  const auto sys = build_regression(exact_estimate(p, grid, 100), 2);
  REQUIRE(sys.Phi.rows() == 1);
  REQUIRE(sys.Phi.cols() == 6);
  const double t = 10;
  Mat<double> row(1, 6);
  // [q1(1), q2(1), r11, f11, q1(2), q2(2)]
  row << 1 / t, t / 3, 3 / (t * t), t * t / 2, 1 / t, t / 3;
  CHECK((sys.Phi - row).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("noiseless solve recovers theta_a") {
  const auto p = maser_scenario<double>();
  const auto grid = log_spaced_grid<double>(20, 3150000, 5.0);
  const auto fit = solve_theta_a(build_regression(exact_estimate(p, grid, 6312000), 4));
  const Vec<double> truth = theta_a_from_params(p);
  CHECK(fit.clamped.empty());
  CHECK(fit.diagnostics.rank == 20);
  // white PM adds at most ~1e-7 of any row, so r comes back with
  // correspondingly fewer digits
  const ThetaALayout lay{4};
  for (Index i = 0; i < truth.size(); ++i) {
    INFO(lay.names()[static_cast<std::size_t>(i)]);
    const bool is_r = lay.names()[static_cast<std::size_t>(i)][0] == 'r';
    CHECK(rel_err(fit.theta(i), truth(i)) < (is_r ? 1e-6 : 1e-10));
  }
}

TEST_CASE("two averaging times are not enough") {
  const auto p = maser_scenario<double>();
  const auto grid = log_spaced_grid<double>(2, 3150000, 5.0);
  try {
    solve_theta_a(build_regression(exact_estimate(p, grid, 6312000), 4));
    FAIL("expected unidentifiable");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::unidentifiable);
  }
}

TEST_CASE("drift factorization") {
  Vec<double> delta(3);
  delta << 8e-21, 7.5e-21, 3e-21;
  const Mat<double> F = f_matrix(delta);
  CHECK(rel_err(F(0, 0), 6.4e-41) < 1e-14);
  CHECK(rel_err(F(0, 1), 6.0e-41) < 1e-14);
  CHECK(rel_err(F(0, 2), 2.4e-41) < 1e-14);
  CHECK(rel_err(F(1, 1), 5.625e-41) < 1e-14);
  CHECK(rel_err(F(1, 2), 2.25e-41) < 1e-14);
  CHECK(rel_err(F(2, 2), 9e-42) < 1e-14);

  const auto fit = recover_drifts<double>(F, 0.0, Vec<double>::Ones(3));
  for (Index i = 0; i < 3; ++i) CHECK(rel_err(fit.d(i), delta(i)) < 1e-10);
  const auto neg = recover_drifts<double>(F, 0.0, -Vec<double>::Ones(3));
  for (Index i = 0; i < 3; ++i) CHECK(rel_err(neg.d(i), -delta(i)) < 1e-10);
  // the known pivot drift shifts all estimates
  const auto shifted = recover_drifts<double>(F, 1e-21, Vec<double>::Ones(3));
  for (Index i = 0; i < 3; ++i) CHECK(rel_err(shifted.d(i), delta(i) + 1e-21) < 1e-10);

  const auto zero = recover_drifts<double>(Mat<double>::Zero(3, 3), 0.0, Vec<double>::Ones(3));
  CHECK(zero.d.isZero());
  CHECK(zero.degenerate);

  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-0.01, 0.01);
  Mat<double> Fp = F;
  for (Index i = 0; i < 3; ++i)
    for (Index j = i; j < 3; ++j) Fp(i, j) = Fp(j, i) = F(i, j) * (1 + u(rng));
  const auto pert = recover_drifts<double>(Fp, 0.0, Vec<double>::Ones(3));
  for (Index i = 0; i < 3; ++i) CHECK(rel_err(pert.d(i), delta(i)) < 0.02);

  // local optimality against random unit-scaled directions
  const auto upper_misfit = [&](const Vec<double>& v) {
    double s = 0;
    for (Index i = 0; i < 3; ++i)
      for (Index j = i; j < 3; ++j) s += std::pow(Fp(i, j) - v(i) * v(j), 2);
    return s;
  };
  std::normal_distribution<double> g;
  const double best = upper_misfit(pert.delta);
  for (int t = 0; t < 100; ++t) {
    Vec<double> v(3);
    for (Index i = 0; i < 3; ++i) v(i) = g(rng);
    v *= pert.delta.norm() / v.norm();
    CHECK(best <= upper_misfit(v));
  }
}

TEST_CASE("exact moments through the full chain") {
  const auto p = maser_scenario<double>();
  const auto grid = log_spaced_grid<double>(20, 3150000, 5.0);
  const auto fit = solve_theta_a(build_regression(exact_estimate(p, grid, 6312000), 4));
  const ThetaALayout lay{4};
  Mat<double> F(3, 3);
  for (Index c = 0; c < 3; ++c)
    for (Index e = c; e < 3; ++e) F(c, e) = F(e, c) = fit.theta(lay.f(c, e));
  const auto drift = recover_drifts<double>(F, 0.0, Vec<double>::Ones(3));
  for (Index c = 0; c < 3; ++c)
    CHECK(rel_err(drift.d(c), p.clocks[static_cast<std::size_t>(c + 1)].d) < 1e-8);
}

TEST_CASE("full-scale single run") {
  const auto p = maser_scenario<double>();
  const auto rec = simulate_measurements(assemble_ensemble(p, 5.0), 6312000, 31337);
  AcovOptions<double> o;
  o.m_max = 3150000;
  const auto rep = estimate_acov_method(rec, o);
  CHECK(rep.method == "acov");
  CHECK(rep.theta.size() == 18);
  CHECK(std::abs(rep.params.clocks[1].q1 / 1.5e-27 - 1) < 0.15);
  CHECK(rep.params.clocks[0].d == 0);
  for (Index c = 1; c < 4; ++c) CHECK(rep.params.clocks[static_cast<std::size_t>(c)].d > 0);

  // optimality: weighted residual at the solution <= at the truth
  const auto grid = log_spaced_grid<double>(20, 3150000, 5.0);
  const auto sys = build_regression(acov_grid(rec, grid), 4);
  const auto fit = solve_theta_a(sys);
  const auto wres = [&](const Vec<double>& t) { return (sys.w.cwiseSqrt().asDiagonal() * (sys.z - sys.Phi * t)).norm(); };
  CHECK(wres(fit.theta) <= wres(theta_a_from_params(p)));

  // equivariance: permuting clocks 2..4 permutes the estimates
  auto perm = rec;
  perm.Z.row(0) = rec.Z.row(2);
  perm.Z.row(2) = rec.Z.row(0);
  const auto sys_p = build_regression(acov_grid(perm, grid), 4);
  const auto fit_p = solve_theta_a(sys_p);
  const ThetaALayout lay{4};
  CHECK(rel_err(fit_p.theta(lay.q1(1)), fit.theta(lay.q1(3))) < 1e-8);
  CHECK(rel_err(fit_p.theta(lay.q2(3)), fit.theta(lay.q2(1))) < 1e-8);
  CHECK(rel_err(fit_p.theta(lay.r(0, 1)), fit.theta(lay.r(1, 2))) < 1e-8);
  CHECK(rel_err(fit_p.theta(lay.f(0, 0)), fit.theta(lay.f(2, 2))) < 1e-8);
  CHECK(rel_err(fit_p.theta(lay.q1(0)), fit.theta(lay.q1(0))) < 1e-8);

  const auto again = estimate_acov_method(rec, o);
  CHECK(again.theta == rep.theta);
}

TEST_CASE("two-clock white noise toy") {
  EnsembleParams<double> p;
  p.clocks = {{1e-24, 0, 0}, {2e-24, 0, 0}};
  p.R = Mat<double>::Constant(1, 1, 1e-30);
  const auto rec = simulate_measurements(assemble_ensemble(p, 1.0), 200000, 8);
  const auto rep = estimate_acov_method(rec);
  CHECK(rep.theta.size() == 7);
  CHECK(rel_err(rep.params.clocks[0].q1 + rep.params.clocks[1].q1, 3e-24) < 0.1);
  // q2 and drift near zero within three reported standard errors
  for (Index k : {2, 3, 5}) {
    INFO("theta index " << k);
    CHECK(std::abs(rep.theta(k)) <= 3 * rep.standard_errors(k));
  }
  CHECK_FALSE(rep.warnings.empty());
}

}
