// chronident: simulate clock ensembles, estimate their noise parameters,
// export Allan (co)variances and run Monte-Carlo studies.
//
// Exit status: 0 ok, 1 usage error, 2 invalid input, 3 unidentifiable,
// 4 numerical failure.

#include "chronident/io.hpp"
#include "chronident/log.hpp"
#include "chronident/pipeline.hpp"
#include "chronident/stability.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

using namespace chronident;

namespace {

enum Exit { ok = 0, usage = 1, invalid_input = 2, unidentifiable = 3, numerical = 4 };

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument:
    case ErrorKind::invalid_covariance:
    case ErrorKind::channel_unusable:
    case ErrorKind::io: return invalid_input;
    case ErrorKind::unidentifiable:
    case ErrorKind::no_residue:
    case ErrorKind::drift_unidentifiable: return unidentifiable;
    case ErrorKind::diverged: return numerical;
  }
  return numerical;
}

std::optional<double> parse_outlier_k(const std::string& s) {
  if (s == "off") return std::nullopt;
  const double k = parse_double(s, "--outlier-k");
  require(k > 0, "--outlier-k must be positive or 'off'");
  return k;
}

struct Flags {
  std::string config, in, out;
  std::optional<std::string> method, outlier_k;
  std::optional<Index> ell, m_max, L, N;
  std::optional<double> ts_target, d1;
  std::optional<std::uint64_t> seed;
  Index runs{10};
  Index jobs{1};
};

void apply(const Flags& f, EstimationOptions& e) {
  if (f.method) e.method = *f.method;
  if (f.ell) e.ell = *f.ell;
  if (f.m_max) e.m_max = *f.m_max;
  if (f.L) e.L = *f.L;
  if (f.ts_target) e.ts_target = *f.ts_target;
  if (f.d1) e.d1 = *f.d1;
  if (f.outlier_k) e.outlier_k = parse_outlier_k(*f.outlier_k);
}

void add_estimation_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--method", f.method, "identification method")->check(CLI::IsMember({"acov", "mdm"}));
  cmd->add_option("--ell", f.ell, "number of log-spaced averaging times (acov)")->check(CLI::PositiveNumber);
  cmd->add_option("--m-max", f.m_max, "largest averaging factor, 0 = floor(N/2) (acov)")->check(CLI::NonNegativeNumber);
  cmd->add_option("--L", f.L, "window length (mdm)")->check(CLI::PositiveNumber);
  cmd->add_option("--ts-target", f.ts_target, "resampling period in s (mdm)")->check(CLI::PositiveNumber);
  cmd->add_option("--d1", f.d1, "known drift of the pivot clock");
  cmd->add_option("--outlier-k", f.outlier_k, "spike filter threshold in robust sigmas, or 'off'");
}

int cmd_simulate(const Flags& f) {
  auto cfg = load_config(f.config);
  if (f.N) cfg.N = *f.N;
  if (f.seed) cfg.seed = *f.seed;
  require(cfg.N >= 1, "N must be >= 1");
  const auto model = assemble_ensemble(cfg.params, cfg.Ts);
  const auto rec = simulate_measurements(model, cfg.N, cfg.seed);
  write_measurements(rec, f.out);
  std::cout << "simulated n=" << cfg.params.n() << " N=" << cfg.N << " Ts=" << cfg.Ts << " seed=" << cfg.seed
            << " -> " << f.out << '\n';
  return ok;
}

int cmd_estimate(const Flags& f) {
  EstimationOptions opts;
  opts.outlier_k = 5.0;
  if (!f.config.empty()) opts = load_config(f.config).estimation;
  apply(f, opts);
  const auto rec = read_measurements(f.in);
  log::info("read " + std::to_string(rec.samples()) + " samples of " + std::to_string(rec.nz()) + " channels");
  const auto rep = run_estimation(rec, opts);
  for (const auto& w : rep.warnings) log::warn(w);
  write_json(report_to_json(rep), f.out);
  std::cout << "estimated " << rep.theta.size() << " parameters (" << rep.method << ") -> " << f.out << '\n';
  return ok;
}

int cmd_avar(const Flags& f) {
  const auto rec = read_measurements(f.in);
  const Index N = rec.steps();
  require(N >= 2, "record too short for any Allan (co)variance");
  const Index m_cap = N / 2;
  const Index m_max = f.m_max && *f.m_max > 0 ? std::min(*f.m_max, m_cap) : m_cap;
  const auto grid = log_spaced_grid<double>(f.ell.value_or(20), m_max, rec.Ts);
  if (grid.truncated) log::warn("only " + std::to_string(grid.size()) + " distinct averaging factors available");
  const auto est = acov_grid(rec, grid);
  write_acov_csv(est, f.out);
  std::cout << "wrote " << est.pairs.size() * static_cast<std::size_t>(grid.size()) << " rows -> " << f.out << '\n';
  return ok;
}

int cmd_montecarlo(const Flags& f) {
  auto cfg = load_config(f.config);
  apply(f, cfg.estimation);
  if (f.N) cfg.N = *f.N;
  McOptions mc;
  mc.runs = f.runs;
  mc.jobs = f.jobs;
  mc.seed = f.seed.value_or(cfg.seed);
  const auto s = run_montecarlo(cfg, mc);
  const auto files = write_montecarlo(s, f.out);
  std::cout << "montecarlo " << s.method << ": " << s.runs - s.failed << "/" << s.runs << " runs ok, " << files.size()
            << " files -> " << f.out << '\n';
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clock-ensemble noise identification (Allan covariance and measurement difference methods)"};
  app.require_subcommand(1);
  Flags f;

  auto* sim = app.add_subcommand("simulate", "simulate differential phase measurements from a config");
  sim->add_option("--config", f.config, "ensemble config JSON")->required()->check(CLI::ExistingFile);
  sim->add_option("--N", f.N, "number of steps (overrides n_steps)")->check(CLI::PositiveNumber);
  sim->add_option("--seed", f.seed, "RNG seed (overrides config)");
  sim->add_option("--out", f.out, "output measurement CSV")->required();

  auto* est = app.add_subcommand("estimate", "identify noise parameters from a measurement CSV");
  est->add_option("input", f.in, "measurement CSV")->required()->check(CLI::ExistingFile);
  est->add_option("--config", f.config, "take estimation defaults from a config JSON");
  add_estimation_flags(est, f);
  est->add_option("--out", f.out, "output report JSON")->required();

  auto* av = app.add_subcommand("avar", "export Allan (co)variances of all channel pairs");
  av->add_option("input", f.in, "measurement CSV")->required()->check(CLI::ExistingFile);
  av->add_option("--ell", f.ell, "number of log-spaced averaging times")->check(CLI::Range(2, 100000));
  av->add_option("--m-max", f.m_max, "largest averaging factor, 0 = floor(N/2)")->check(CLI::NonNegativeNumber);
  av->add_option("--out", f.out, "output CSV")->required();

  auto* mc = app.add_subcommand("montecarlo", "repeat simulate + estimate with derived seeds");
  mc->add_option("--config", f.config, "scenario config JSON")->required()->check(CLI::ExistingFile);
  add_estimation_flags(mc, f);
  mc->add_option("--N", f.N, "number of steps per run (overrides n_steps)")->check(CLI::PositiveNumber);
  mc->add_option("--runs", f.runs, "number of runs")->check(CLI::PositiveNumber);
  mc->add_option("--seed", f.seed, "master seed (overrides config)");
  mc->add_option("--jobs", f.jobs, "worker threads")->check(CLI::PositiveNumber);
  mc->add_option("--out", f.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ok : usage;
  }

  try {
    if (*sim) return cmd_simulate(f);
    if (*est) return cmd_estimate(f);
    if (*av) return cmd_avar(f);
    if (*mc) return cmd_montecarlo(f);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::bad_alloc&) {
    std::cerr << "error: out of memory\n";
    return numerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return numerical;
  }
  return usage;
}
