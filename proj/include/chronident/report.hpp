#ifndef CHRONIDENT_REPORT_HPP
#define CHRONIDENT_REPORT_HPP

#include "chronident/model.hpp"

#include <limits>
#include <map>
#include <string>
#include <vector>

namespace chronident {

/// Identified ensemble parameters plus solver diagnostics. `theta` and
/// `standard_errors` follow the pack_theta layout; a NaN standard error
/// means none is available for that entry.
template <typename Scalar = double>
struct EstimateReport {
  std::string method;
  EnsembleParams<Scalar> params;
  Vec<Scalar> theta;
  Vec<Scalar> standard_errors;

  double residual{0};
  double cond{1};
  Index rank{0};
  std::vector<std::string> clamped;
  std::vector<std::string> warnings;
  /// Method-specific scalars (e.g. L, ts_target_s, n_residue_dim, ell).
  std::map<std::string, double> extras;
};

template <typename Scalar>
Vec<Scalar> unknown_errors(Index n) {
  return Vec<Scalar>::Constant(theta_size(n), std::numeric_limits<Scalar>::quiet_NaN());
}

}  // namespace chronident

#endif  // CHRONIDENT_REPORT_HPP
