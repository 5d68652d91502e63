#ifndef CHRONIDENT_IO_HPP
#define CHRONIDENT_IO_HPP

#include "chronident/model.hpp"
#include "chronident/report.hpp"
#include "chronident/simulate.hpp"
#include "chronident/stability.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>

namespace chronident {

using json = nlohmann::json;

struct EstimationOptions {
  std::string method{"acov"};
  Index ell{20};
  /// 0 selects floor(N/2).
  Index m_max{0};
  Index L{5};
  double ts_target{5000};
  double d1{0};
  /// Spike filter threshold in robust sigmas; empty disables the filter.
  std::optional<double> outlier_k;
};

/// Ensemble configuration plus the scenario fields used by simulate and
/// montecarlo (all optional in the file).
struct ScenarioConfig {
  EnsembleParams<double> params;
  double Ts{5};
  Index N{6312000};
  std::uint64_t seed{1};
  EstimationOptions estimation;
};

ScenarioConfig parse_config(const json& doc);
ScenarioConfig load_config(const std::string& path);
json config_to_json(const ScenarioConfig& cfg);

/// CSV `t_s,z1,...,z{nz}` at 17 significant digits.
void write_measurements(const MeasurementRecord<double>& rec, const std::string& path);
MeasurementRecord<double> read_measurements(const std::string& path);

/// CSV `tau_s,pair_i,pair_j,sigma2,var_sigma2`, 1-based channel indices.
void write_acov_csv(const AcovEstimate<double>& est, const std::string& path);

json report_to_json(const EstimateReport<double>& rep);
void write_json(const json& doc, const std::string& path);

/// Shortest round-trip representation is not used on purpose: every value
/// gets exactly 17 significant digits so files are byte-stable.
std::string format_double(double v);
double parse_double(const std::string& text, const std::string& where);

}  // namespace chronident

#endif  // CHRONIDENT_IO_HPP
