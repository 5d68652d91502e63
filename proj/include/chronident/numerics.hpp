#ifndef CHRONIDENT_NUMERICS_HPP
#define CHRONIDENT_NUMERICS_HPP

#include "chronident/core.hpp"

#include <cmath>
#include <functional>
#include <limits>

namespace chronident {

struct LsDiagnostics {
  double residual_norm{0};
  double condition_number{1};
  Index rank{0};
  int iterations{0};
  bool rank_deficient{false};
};

template <typename Scalar>
struct LsSolution {
  Vec<Scalar> x;
  /// (A^T W A)^+ in the original parameter units.
  Mat<Scalar> covariance;
  LsDiagnostics diagnostics;
};

namespace detail {

template <typename Scalar>
Index numerical_rank(const Vec<Scalar>& singular_values, Scalar tol_rel) {
  if (singular_values.size() == 0) return 0;
  const Scalar cut = tol_rel * singular_values(0);
  Index r = 0;
  while (r < singular_values.size() && singular_values(r) > cut) ++r;
  return r;
}

template <typename Scalar>
double effective_condition(const Vec<Scalar>& sv, Index rank) {
  if (rank == 0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(sv(0) / sv(rank - 1));
}

}  // namespace detail

inline constexpr double kPinvTolerance = 1e-12;

/// Minimum-norm least-squares solution x = A^+ b. Singular values at or
/// below tol_rel * sigma_max are treated as zero.
template <typename Scalar>
Vec<Scalar> pinv_solve(const Mat<Scalar>& A, const Vec<Scalar>& b, Scalar tol_rel = Scalar(kPinvTolerance)) {
  require(A.rows() == b.size(), "pinv_solve: dimension mismatch");
  if (A.size() == 0) return Vec<Scalar>::Zero(A.cols());
  Eigen::JacobiSVD<Mat<Scalar>> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Index r = detail::numerical_rank<Scalar>(svd.singularValues(), tol_rel);
  Vec<Scalar> x = Vec<Scalar>::Zero(A.cols());
  if (r == 0) return x;
  const Vec<Scalar> utb = svd.matrixU().leftCols(r).transpose() * b;
  x = svd.matrixV().leftCols(r) * utb.cwiseQuotient(svd.singularValues().head(r));
  return x;
}

/// Solves min ||W^{1/2}(b - A x)||^2 with W = diag(w).
///
/// Columns of W^{1/2}A are equilibrated to unit norm before an SVD, so
/// regressors spanning many decades (tau^-2 ... tau^2) are handled without
/// forming normal equations. A rank-deficient system yields the
/// minimum-norm minimizer in the equilibrated coordinates and sets
/// diagnostics.rank_deficient.
template <typename Scalar>
LsSolution<Scalar> weighted_least_squares(const Mat<Scalar>& A, const Vec<Scalar>& b, const Vec<Scalar>& w,
                                          Scalar tol_rel = Scalar(kPinvTolerance)) {
  require(A.rows() == b.size() && A.rows() == w.size(), "weighted_least_squares: dimension mismatch");
  require(A.cols() > 0, "weighted_least_squares: no unknowns");
  require((w.array() > 0).all() && w.allFinite(), "weighted_least_squares: weights must be positive and finite");

  const Vec<Scalar> sw = w.cwiseSqrt();
  const Mat<Scalar> Aw = sw.asDiagonal() * A;
  const Vec<Scalar> bw = sw.cwiseProduct(b);

  Vec<Scalar> scale = Aw.colwise().norm().transpose();
  for (Index j = 0; j < scale.size(); ++j)
    if (!(scale(j) > 0)) scale(j) = 1;
  const Mat<Scalar> As = Aw * scale.cwiseInverse().asDiagonal();

  Eigen::JacobiSVD<Mat<Scalar>> svd(As, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec<Scalar>& sv = svd.singularValues();
  const Index r = detail::numerical_rank<Scalar>(sv, tol_rel);

  LsSolution<Scalar> out;
  out.x = Vec<Scalar>::Zero(A.cols());
  out.covariance = Mat<Scalar>::Zero(A.cols(), A.cols());
  if (r > 0) {
    const auto V = svd.matrixV().leftCols(r);
    const Vec<Scalar> inv_s = sv.head(r).cwiseInverse();
    const Vec<Scalar> y = V * (svd.matrixU().leftCols(r).transpose() * bw).cwiseProduct(inv_s);
    out.x = y.cwiseQuotient(scale);
    const Mat<Scalar> Vs = V * inv_s.asDiagonal();
    out.covariance = scale.cwiseInverse().asDiagonal() * (Vs * Vs.transpose()) * scale.cwiseInverse().asDiagonal();
  }
  out.diagnostics.residual_norm = static_cast<double>((bw - Aw * out.x).norm());
  out.diagnostics.rank = r;
  out.diagnostics.rank_deficient = r < A.cols();
  out.diagnostics.condition_number = detail::effective_condition<Scalar>(sv, r);
  return out;
}

/// Orthonormal rows spanning the left null space {v : v^T M = 0}. The
/// numerical rank of M is taken at tol_rel * sigma_max. Returns a 0-row
/// matrix when M has full row rank.
template <typename Scalar>
Mat<Scalar> left_null_space(const Mat<Scalar>& M, Scalar tol_rel, Index* rank_out = nullptr) {
  require(M.rows() > 0, "left_null_space: empty matrix");
  Eigen::JacobiSVD<Mat<Scalar>> svd(M, Eigen::ComputeFullU);
  const Index r = detail::numerical_rank<Scalar>(svd.singularValues(), tol_rel);
  if (rank_out) *rank_out = r;
  return svd.matrixU().rightCols(M.rows() - r).transpose();
}

template <typename Scalar>
struct GaussNewtonOptions {
  int max_iter{100};
  Scalar gtol{0};
  int max_halvings{30};
};

template <typename Scalar>
struct GaussNewtonResult {
  Vec<Scalar> x;
  LsDiagnostics diagnostics;
  bool converged{false};
};

/// Gauss-Newton with step halving. Stops when ||J^T r|| <= gtol, after
/// max_iter iterations, or when no halved step reduces ||r||.
template <typename Scalar>
GaussNewtonResult<Scalar> gauss_newton(const std::function<Vec<Scalar>(const Vec<Scalar>&)>& residual,
                                       const std::function<Mat<Scalar>(const Vec<Scalar>&)>& jacobian,
                                       Vec<Scalar> x, const GaussNewtonOptions<Scalar>& opts = {}) {
  GaussNewtonResult<Scalar> out;
  Vec<Scalar> r = residual(x);
  if (!r.allFinite()) fail(ErrorKind::diverged, "gauss_newton: non-finite residual at start");
  int it = 0;
  for (; it < opts.max_iter; ++it) {
    const Mat<Scalar> J = jacobian(x);
    if (J.norm() == 0 || (J.transpose() * r).norm() <= opts.gtol) {
      out.converged = true;
      break;
    }
    const Vec<Scalar> step = pinv_solve<Scalar>(J, -r);
    const Scalar f0 = r.squaredNorm();
    Scalar t = 1;
    bool accepted = false;
    for (int h = 0; h <= opts.max_halvings; ++h, t /= 2) {
      const Vec<Scalar> xn = x + t * step;
      const Vec<Scalar> rn = residual(xn);
      if (!rn.allFinite()) fail(ErrorKind::diverged, "gauss_newton: non-finite residual");
      if (rn.squaredNorm() < f0) {
        x = xn;
        r = rn;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      out.converged = true;  // stationary to working precision
      break;
    }
  }
  const Mat<Scalar> J = jacobian(x);
  Eigen::JacobiSVD<Mat<Scalar>> svd(J);
  const Index rank = detail::numerical_rank<Scalar>(svd.singularValues(), Scalar(kPinvTolerance));
  out.x = std::move(x);
  out.diagnostics.residual_norm = static_cast<double>(r.norm());
  out.diagnostics.rank = rank;
  out.diagnostics.rank_deficient = rank < J.cols();
  out.diagnostics.condition_number = detail::effective_condition<Scalar>(svd.singularValues(), rank);
  out.diagnostics.iterations = it;
  if ((J.transpose() * r).norm() <= opts.gtol) out.converged = true;
  return out;
}

}  // namespace chronident

#endif  // CHRONIDENT_NUMERICS_HPP
