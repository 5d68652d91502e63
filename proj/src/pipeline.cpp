#include "chronident/pipeline.hpp"

#include "chronident/ident_acov.hpp"
#include "chronident/ident_mdm.hpp"
#include "chronident/log.hpp"
#include "chronident/stability.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

namespace chronident {

EstimateReport<double> run_estimation(const MeasurementRecord<double>& rec, const EstimationOptions& opts) {
  const MeasurementRecord<double>* input = &rec;
  MeasurementRecord<double> cleaned;
  std::size_t replaced = 0;
  if (opts.outlier_k) {
    auto [out, report] = remove_outliers(rec, *opts.outlier_k);
    replaced = report.total();
    if (replaced > 0) log::info("outlier filter replaced " + std::to_string(replaced) + " samples");
    cleaned = std::move(out);
    input = &cleaned;
  }

  EstimateReport<double> rep;
  if (opts.method == "acov") {
    AcovOptions<double> o;
    o.ell = opts.ell;
    o.m_max = opts.m_max;
    o.d1 = opts.d1;
    rep = estimate_acov_method(*input, o);
  } else if (opts.method == "mdm") {
    MdmConfig<double> c;
    c.L = opts.L;
    c.ts_target = opts.ts_target;
    rep = estimate_mdm(*input, c, opts.d1);
  } else {
    fail(ErrorKind::invalid_argument, "unknown method '" + opts.method + "' (expected acov or mdm)");
  }
  if (opts.outlier_k) rep.extras["outliers"] = static_cast<double>(replaced);
  return rep;
}

std::vector<std::string> theta_names(Index n) {
  std::vector<std::string> names;
  for (const char* p : {"q1_", "q2_", "d_"})
    for (Index i = 0; i < n; ++i) names.push_back(p + std::to_string(i + 1));
  for (auto [i, j] : upper_pairs(n - 1)) names.push_back("r_" + std::to_string(i + 1) + std::to_string(j + 1));
  return names;
}

double percentile(std::vector<double> v, double p) {
  require(!v.empty(), "percentile of an empty sample");
  require(p >= 0 && p <= 1, "percentile must be in [0, 1]");
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

McSummary run_montecarlo(const ScenarioConfig& cfg, const McOptions& opts) {
  require(opts.runs >= 1, "runs must be >= 1");
  require(opts.jobs >= 1, "jobs must be >= 1");
  validate(cfg.params);
  const auto model = assemble_ensemble(cfg.params, cfg.Ts);
  const Index n = cfg.params.n();
  const std::size_t R = static_cast<std::size_t>(opts.runs);

  std::vector<std::optional<Vec<double>>> results(R);
  std::vector<std::string> errors(R);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < R; i = next++) {
      try {
        const auto rec = simulate_measurements(model, cfg.N, derive_seed(opts.seed, i));
        results[i] = run_estimation(rec, cfg.estimation).theta;
        log::info("run " + std::to_string(i + 1) + "/" + std::to_string(R) + " done");
      } catch (const Error& e) {
        errors[i] = e.what();
        log::warn("run " + std::to_string(i + 1) + " failed: " + e.what());
      }
    }
  };
  const std::size_t nthreads = std::min<std::size_t>(static_cast<std::size_t>(opts.jobs), R);
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  McSummary s;
  s.method = cfg.estimation.method;
  s.runs = opts.runs;
  s.seed = opts.seed;
  for (std::size_t i = 0; i < R; ++i) {
    if (results[i])
      s.estimates.push_back(*results[i]);
    else
      s.failures.push_back("run " + std::to_string(i) + ": " + errors[i]);
  }
  s.failed = static_cast<Index>(s.failures.size());

  const Vec<double> truth = pack_theta(cfg.params);
  const auto names = theta_names(n);
  const std::size_t ok = s.estimates.size();
  Vec<double> mean = Vec<double>::Zero(truth.size());
  for (const auto& e : s.estimates) mean += e;
  if (ok > 0) mean /= static_cast<double>(ok);
  for (Index k = 0; k < truth.size(); ++k) {
    McParameterStats p;
    p.name = names[static_cast<std::size_t>(k)];
    p.truth = truth(k);
    p.mean = ok > 0 ? mean(k) : std::nan("");
    if (ok >= 2) {
      double ss = 0;
      for (const auto& e : s.estimates) ss += (e(k) - mean(k)) * (e(k) - mean(k));
      p.stddev = std::sqrt(ss / static_cast<double>(ok - 1));
    }
    if (ok > 0 && truth(k) != 0) p.rel_error = (mean(k) - truth(k)) / std::abs(truth(k));
    s.parameters.push_back(p);
  }

  // curves on the estimation grid of the simulated record
  const Index m_cap = cfg.N / 2;
  const Index m_max = cfg.estimation.m_max > 0 ? std::min(cfg.estimation.m_max, m_cap) : m_cap;
  const auto grid = log_spaced_grid<double>(std::max<Index>(cfg.estimation.ell, 2), std::max<Index>(m_max, 1), cfg.Ts);
  const Vec<double> tau = grid.taus();
  const auto mean_params = unpack_theta<double>(mean, n);
  for (Index c = 0; c < n; ++c) {
    McCurve cv;
    cv.tau = tau;
    const Index P = tau.size();
    cv.truth.resize(P);
    cv.mean_est.resize(P);
    cv.p025.resize(P);
    cv.p975.resize(P);
    std::vector<double> vals(ok);
    for (Index p = 0; p < P; ++p) {
      cv.truth(p) = clock_avar(cfg.params.clocks[static_cast<std::size_t>(c)], tau(p));
      if (ok == 0) {
        cv.mean_est(p) = cv.p025(p) = cv.p975(p) = std::nan("");
        continue;
      }
      cv.mean_est(p) = clock_avar(mean_params.clocks[static_cast<std::size_t>(c)], tau(p));
      for (std::size_t r = 0; r < ok; ++r)
        vals[r] = clock_avar(unpack_theta<double>(s.estimates[r], n).clocks[static_cast<std::size_t>(c)], tau(p));
      cv.p025(p) = percentile(vals, 0.025);
      cv.p975(p) = percentile(vals, 0.975);
    }
    s.curves.push_back(std::move(cv));
  }
  return s;
}

json summary_to_json(const McSummary& s) {
  auto opt = [](const std::optional<double>& v) { return v && std::isfinite(*v) ? json(*v) : json(nullptr); };
  json doc;
  doc["method"] = s.method;
  doc["runs"] = s.runs;
  doc["succeeded"] = s.runs - s.failed;
  doc["failed_runs"] = s.failed;
  doc["failures"] = s.failures;
  doc["seed"] = s.seed;
  doc["parameters"] = json::array();
  for (const auto& p : s.parameters)
    doc["parameters"].push_back({{"name", p.name},
                                 {"truth", p.truth},
                                 {"mean", std::isfinite(p.mean) ? json(p.mean) : json(nullptr)},
                                 {"std", opt(p.stddev)},
                                 {"rel_error", opt(p.rel_error)}});
  return doc;
}

std::vector<std::string> write_montecarlo(const McSummary& s, const std::string& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory '" + out_dir + "': " + ec.message());
  const std::filesystem::path dir(out_dir);
  std::vector<std::string> files;
  json doc = summary_to_json(s);
  doc["curve_files"] = json::array();
  for (std::size_t c = 0; c < s.curves.size(); ++c) {
    const std::string name = "avar_clock" + std::to_string(c + 1) + ".csv";
    const std::string path = (dir / name).string();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
    os << "tau_s,avar_true,avar_mean_est,p025,p975\n";
    const auto& cv = s.curves[c];
    for (Index p = 0; p < cv.tau.size(); ++p)
      os << format_double(cv.tau(p)) << ',' << format_double(cv.truth(p)) << ',' << format_double(cv.mean_est(p))
         << ',' << format_double(cv.p025(p)) << ',' << format_double(cv.p975(p)) << '\n';
    if (!os) fail(ErrorKind::io, "write to '" + path + "' failed");
    files.push_back(name);
    doc["curve_files"].push_back(name);
  }
  write_json(doc, (dir / "summary.json").string());
  files.insert(files.begin(), "summary.json");
  return files;
}

}  // namespace chronident
