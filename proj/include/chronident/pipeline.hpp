#ifndef CHRONIDENT_PIPELINE_HPP
#define CHRONIDENT_PIPELINE_HPP

#include "chronident/io.hpp"
#include "chronident/report.hpp"
#include "chronident/simulate.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace chronident {

/// Optional spike filter, then the selected identification method. When the
/// filter runs, the number of replaced samples goes to extras["outliers"].
EstimateReport<double> run_estimation(const MeasurementRecord<double>& rec, const EstimationOptions& opts);

struct McParameterStats {
  std::string name;
  double truth{0};
  double mean{0};
  /// Empty when fewer than two runs succeeded.
  std::optional<double> stddev;
  /// (mean - truth) / |truth|; empty when truth is zero.
  std::optional<double> rel_error;
};

/// Analytic clock AVAR on the estimation grid: from the true parameters,
/// from the MC-mean parameters, and 2.5 / 97.5 percentiles of the per-run
/// curves.
struct McCurve {
  Vec<double> tau, truth, mean_est, p025, p975;
};

struct McSummary {
  std::string method;
  Index runs{0};
  Index failed{0};
  std::uint64_t seed{0};
  std::vector<McParameterStats> parameters;
  std::vector<McCurve> curves;
  std::vector<std::string> failures;
  /// Successful per-run parameter vectors (pack_theta order), by run index.
  std::vector<Vec<double>> estimates;
};

struct McOptions {
  Index runs{10};
  std::uint64_t seed{1};
  Index jobs{1};
};

/// Runs are independent (run i uses derive_seed(seed, i)) and are reduced in
/// run-index order, so the summary does not depend on jobs.
McSummary run_montecarlo(const ScenarioConfig& cfg, const McOptions& opts);

/// Names in pack_theta order: q1_1..q1_n, q2_1..q2_n, d_1..d_n, r_ij.
std::vector<std::string> theta_names(Index n);

json summary_to_json(const McSummary& s);
/// summary.json plus avar_clock{i}.csv for every clock; returns the written
/// file names.
std::vector<std::string> write_montecarlo(const McSummary& s, const std::string& out_dir);

/// Linear-interpolated percentile (0 <= p <= 1) of an unsorted sample.
double percentile(std::vector<double> v, double p);

}  // namespace chronident

#endif  // CHRONIDENT_PIPELINE_HPP
