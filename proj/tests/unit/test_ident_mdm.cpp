#include "helpers.hpp"

#include "chronident/ident_mdm.hpp"

#include <doctest.h>

#include <random>

using namespace chronident;
using testutil::kron;
using testutil::rel_err;
using testutil::rel_norm_err;

namespace {

/// Residue covariance A blkdiag(I (x) Q, I (x) R) A^T, built with the
/// explicit Kronecker helper from the assembled Q and R.
Mat<double> residue_cov_oracle(const MdmSystem<double>& sys, const EnsembleModel<double>& model) {
  const Index L = sys.L;
  const Index nw = (L - 1) * sys.nx, nv = L * sys.nz;
  Mat<double> M = Mat<double>::Zero(nw + nv, nw + nv);
  M.topLeftCorner(nw, nw) = kron(Mat<double>::Identity(L - 1, L - 1), model.Q);
  M.bottomRightCorner(nv, nv) = kron(Mat<double>::Identity(L, L), model.R);
  return sys.A * M * sys.A.transpose();
}

/// Residue mean from a noiseless, drift-only simulation: with w = v = 0
/// every residue equals the mean.
Vec<double> residue_mean_oracle(const EnsembleParams<double>& p, double Ts, const MdmSystem<double>& sys) {
  EnsembleParams<double> drift_only = p;
  for (auto& c : drift_only.clocks) c.q1 = c.q2 = 0;
  drift_only.R.setZero();
  const auto rec = simulate_measurements(assemble_ensemble(drift_only, Ts), sys.L + 3, 1);
  const Mat<double> res = compute_residues(rec, sys);
  return res.col(res.cols() - 1);
}

}  // namespace

TEST_SUITE("ident_mdm") {

TEST_CASE("system dimensions") {
  const auto model = assemble_ensemble(maser_scenario<double>(), 5000.0);
  const auto sys = build_mdm_system(model, 5);
  CHECK(sys.O.rows() == 15);
  CHECK(sys.O.cols() == 8);
  CHECK(sys.rank_O == 6);
  CHECK(sys.Am.rows() == 9);
  CHECK(sys.Am.cols() == 15);
  CHECK(sys.A.rows() == 9);
  CHECK(sys.A.cols() == 47);
  CHECK(sys.theta_map.rows() == 81);
  CHECK(sys.theta_map.cols() == 14);
  CHECK((sys.Am * sys.O).norm() <= 1e-10 * sys.O.norm());
  CHECK((sys.Am * sys.Am.transpose() - Mat<double>::Identity(9, 9)).cwiseAbs().maxCoeff() < 1e-12);

  // O stacks H F^p: check against repeated multiplication
  Mat<double> Fp = Mat<double>::Identity(8, 8);
  for (Index p = 0; p < 5; ++p) {
    CHECK((sys.O.middleRows(3 * p, 3) - model.H * Fp).cwiseAbs().maxCoeff() == 0);
    Fp = Fp * model.F;
  }
}

TEST_CASE("annihilation and rank for random models") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (int t = 0; t < 20; ++t) {
    const Index n = 2 + t % 4;
    const Index L = 3 + t % 4;
    EnsembleParams<double> p;
    for (Index i = 0; i < n; ++i) p.clocks.push_back({u(rng), u(rng), u(rng) - 1});
    p.R = Mat<double>::Identity(n - 1, n - 1) * u(rng);
    const auto sys = build_mdm_system(assemble_ensemble(p, u(rng) * 1000), L);
    CHECK((sys.Am * sys.O).norm() <= 1e-10 * sys.O.norm());
    CHECK(sys.rank_O == 2 * (n - 1));
    CHECK(sys.Am.rows() == L * (n - 1) - 2 * (n - 1));
  }
}

TEST_CASE("no residue for two clocks and L = 2") {
  EnsembleParams<double> p;
  p.clocks = {{1, 1, 0}, {1, 1, 0}};
  p.R = Mat<double>::Constant(1, 1, 1);
  try {
    build_mdm_system(assemble_ensemble(p, 1.0), 2);
    FAIL("expected no_residue");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::no_residue);
  }
}

TEST_CASE("kronecker identity") {
  const auto sys = build_mdm_system(assemble_ensemble(maser_scenario<double>(), 5000.0), 4);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  const Mat<double> AA = kron(sys.A, sys.A);
  for (int t = 0; t < 5; ++t) {
    Vec<double> e(sys.n_e());
    for (Index i = 0; i < e.size(); ++i) e(i) = g(rng);
    const Vec<double> Ae = sys.A * e;
    const Vec<double> lhs = kron(Ae, Ae);
    const Vec<double> rhs = AA * kron(e, e);
    CHECK(rel_norm_err(lhs, rhs) < 1e-12);
  }
}

TEST_CASE("structure matrices") {
  const auto s = build_structure_matrices<double>(4, 5000.0);
  CHECK(s.BQ.size() == 14);
  // first R selector is diag(1, 0, 0); r13 selector has ones at (1,3), (3,1)
  Mat<double> I1 = Mat<double>::Zero(3, 3);
  I1(0, 0) = 1;
  CHECK(s.BR[8] == I1);
  Mat<double> I3 = Mat<double>::Zero(3, 3);
  I3(0, 2) = I3(2, 0) = 1;
  CHECK(s.BR[10] == I3);

  for (const auto& p : {maser_scenario<double>(), testutil::unit_scenario()}) {
    const auto model = assemble_ensemble(p, 5000.0);
    const Vec<double> t = theta_alpha_from_params(p);
    Mat<double> Q = Mat<double>::Zero(8, 8), R = Mat<double>::Zero(3, 3);
    for (Index i = 0; i < 14; ++i) {
      Q += t(i) * s.BQ[static_cast<std::size_t>(i)];
      R += t(i) * s.BR[static_cast<std::size_t>(i)];
    }
    CHECK((Q - model.Q).cwiseAbs().maxCoeff() <= 1e-15 * model.Q.cwiseAbs().maxCoeff());
    CHECK((R - model.R).cwiseAbs().maxCoeff() <= 1e-15 * model.R.cwiseAbs().maxCoeff());
  }
}

TEST_CASE("residues") {
  // noiseless, drift-free record: pure state evolution from a random start
  EnsembleParams<double> p = maser_scenario<double>();
  for (auto& c : p.clocks) c = {0, 0, 0};
  p.R.setZero();
  const auto model = assemble_ensemble(p, 5000.0);
  Vec<double> x0(8);
  x0 << 1e-6, 2e-11, -3e-6, 1e-11, 4e-7, -5e-12, 2e-6, 7e-12;
  const auto rec = simulate_measurements(model, 30, 1, std::optional<Vec<double>>(x0));
  const auto sys = build_mdm_system(model, 5);
  const Mat<double> res = compute_residues(rec, sys);
  CHECK(res.cols() == 30 - 5 + 2);
  CHECK(res.cwiseAbs().maxCoeff() <= 1e-10 * rec.Z.cwiseAbs().maxCoeff());

  // measurement noise only: covariance Am (I (x) R) Am^T
  EnsembleParams<double> pm = testutil::unit_scenario();
  for (auto& c : pm.clocks) c = {0, 0, 0};
  const auto mm = assemble_ensemble(pm, 1.0);
  const auto sm = build_mdm_system(mm, 3);
  const Mat<double> r = compute_residues(simulate_measurements(mm, 100000, 2), sm);
  const Mat<double> S = r * r.transpose() / static_cast<double>(r.cols());
  const Mat<double> expect = sm.Am * kron(Mat<double>::Identity(3, 3), mm.R) * sm.Am.transpose();
  CHECK((S - expect).norm() / expect.norm() < 0.05);
}

TEST_CASE("exact moments at unit scale") {
  const auto p = testutil::unit_scenario();
  const auto model = assemble_ensemble(p, 1.0);
  const auto sys = build_mdm_system(model, 5);

  const Vec<double> mean = residue_mean_oracle(p, 1.0, sys);
  const Vec<double> d = solve_drifts(sys, mean, p.clocks[0].d);
  for (Index i = 0; i < 3; ++i) CHECK(rel_err(d(i), p.clocks[static_cast<std::size_t>(i + 1)].d) < 1e-10);

  const Mat<double> C = residue_cov_oracle(sys, model);
  const Vec<double> t_true = theta_alpha_from_params(p);
  const Vec<double> vecC = Eigen::Map<const Vec<double>>(C.data(), C.size());
  CHECK(rel_norm_err(Vec<double>(sys.theta_map * t_true), vecC) < 1e-12);
  const auto fit = solve_theta_alpha(sys, vecC);
  CHECK(fit.clamped.empty());
  for (Index i = 0; i < t_true.size(); ++i) CHECK(rel_err(fit.theta(i), t_true(i)) < 1e-10);
}

TEST_CASE("exact moments at maser scale") {
  const auto p = maser_scenario<double>();
  const auto model = assemble_ensemble(p, 5000.0);
  const auto sys = build_mdm_system(model, 5);
  const Vec<double> mean = residue_mean_oracle(p, 5000.0, sys);
  const Vec<double> d = solve_drifts(sys, mean, 0.0);
  for (Index i = 0; i < 3; ++i) CHECK(rel_err(d(i), p.clocks[static_cast<std::size_t>(i + 1)].d) < 1e-10);

  const Mat<double> C = residue_cov_oracle(sys, model);
  const auto fit = solve_theta_alpha(sys, Vec<double>(Eigen::Map<const Vec<double>>(C.data(), C.size())));
  const Vec<double> t_true = theta_alpha_from_params(p);
  CHECK(rel_norm_err(fit.theta, t_true) < 1e-10);
  // white-FM intensities dominate the moments and come back elementwise
  for (Index i = 0; i < 4; ++i) CHECK(rel_err(fit.theta(i), t_true(i)) < 1e-10);
}

TEST_CASE("two-clock white PM toy") {
  EnsembleParams<double> p;
  p.clocks = {{0, 0, 0}, {0, 0, 0}};
  const double s2 = 2.0;
  p.R = Mat<double>::Constant(1, 1, s2);
  const auto rec = simulate_measurements(assemble_ensemble(p, 1.0), 100000, 6);
  MdmConfig<double> cfg;
  cfg.ts_target = 1;
  // two clocks need L >= 5: below that the residue covariance has fewer
  // distinct moments than identifiable combinations
  for (Index L : {3, 4}) {
    cfg.L = L;
    try {
      estimate_mdm(rec, cfg, 0.0);
      FAIL("expected unidentifiable");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::unidentifiable);
      CHECK(std::string(e.what()).find("increase L") != std::string::npos);
    }
  }
  cfg.L = 5;
  const auto rep = estimate_mdm(rec, cfg, 0.0);
  CHECK(std::abs(rep.params.R(0, 0) - s2) <= 3 * rep.standard_errors(3 * 2));
}

TEST_CASE("end to end") {
  const auto p = maser_scenario<double>();
  const auto rec = simulate_measurements(assemble_ensemble(p, 5.0), 6312000, 555);
  const auto rep = estimate_mdm(rec);
  CHECK(rep.method == "mdm");
  CHECK(rep.theta.size() == 18);
  CHECK(rep.extras.at("L") == 5);
  CHECK(rep.extras.at("ts_target_s") == 5000);
  CHECK(rep.extras.at("n_residue_dim") == 9);
  CHECK(estimate_mdm(rec).theta == rep.theta);

  EnsembleParams<double> two;
  two.clocks = {{1e-27, 1e-35, 0}, {2e-27, 2e-35, 5e-21}};
  two.R = Mat<double>::Constant(1, 1, 1e-34);
  const auto rec2 = simulate_measurements(assemble_ensemble(two, 5.0), 400000, 4);
  MdmConfig<double> cfg;
  cfg.L = 5;
  const auto rep2 = estimate_mdm(rec2, cfg, 0.0);
  CHECK(rep2.theta.size() == 7);
  CHECK(rep2.theta.allFinite());

  MdmConfig<double> bad;
  bad.ts_target = 7;
  CHECK_THROWS_AS(estimate_mdm(rec2, bad, 0.0), Error);
}

}
