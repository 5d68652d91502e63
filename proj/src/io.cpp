#include "chronident/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string_view>

namespace chronident {

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
  return os;
}

void finish(std::ofstream& os, const std::string& path) {
  os.flush();
  if (!os) fail(ErrorKind::io, "write to '" + path + "' failed");
}

double number_field(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(ErrorKind::invalid_argument, where + ": missing field '" + key + "'");
  if (!it->is_number()) fail(ErrorKind::invalid_argument, where + "." + key + ": expected a number");
  return it->get<double>();
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text, const std::string& where) {
  const std::string_view s = trim(text);
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    fail(ErrorKind::invalid_argument, where + ": cannot parse '" + std::string(s) + "' as a number");
  return v;
}

ScenarioConfig parse_config(const json& doc) {
  if (!doc.is_object()) fail(ErrorKind::invalid_argument, "config: top level must be an object");
  ScenarioConfig cfg;
  cfg.Ts = number_field(doc, "ts_seconds", "config");
  if (!(cfg.Ts > 0)) fail(ErrorKind::invalid_argument, "config.ts_seconds: must be positive");

  auto clocks = doc.find("clocks");
  if (clocks == doc.end() || !clocks->is_array())
    fail(ErrorKind::invalid_argument, "config: 'clocks' must be an array");
  if (clocks->size() < 2) fail(ErrorKind::invalid_argument, "config.clocks: need at least two clocks");
  for (std::size_t i = 0; i < clocks->size(); ++i) {
    const std::string where = "config.clocks[" + std::to_string(i) + "]";
    const json& c = (*clocks)[i];
    if (!c.is_object()) fail(ErrorKind::invalid_argument, where + ": expected an object");
    ClockParams<double> p{number_field(c, "q1", where), number_field(c, "q2", where), number_field(c, "d", where)};
    if (!(p.q1 >= 0) || !(p.q2 >= 0)) fail(ErrorKind::invalid_argument, where + ": q1, q2 must be >= 0");
    cfg.params.clocks.push_back(p);
  }

  const Index nz = static_cast<Index>(clocks->size()) - 1;
  auto r = doc.find("r_upper");
  if (r == doc.end() || !r->is_array()) fail(ErrorKind::invalid_argument, "config: 'r_upper' must be an array");
  const Index expect = nz * (nz + 1) / 2;
  if (static_cast<Index>(r->size()) != expect)
    fail(ErrorKind::invalid_argument, "config.r_upper: expected " + std::to_string(expect) + " entries for " +
                                          std::to_string(nz + 1) + " clocks, got " + std::to_string(r->size()));
  Vec<double> upper(expect);
  for (Index k = 0; k < expect; ++k) {
    const json& v = (*r)[static_cast<std::size_t>(k)];
    if (!v.is_number())
      fail(ErrorKind::invalid_argument, "config.r_upper[" + std::to_string(k) + "]: expected a number");
    upper(k) = v.get<double>();
  }
  cfg.params.R = unpack_r_upper<double>(upper, nz);
  validate(cfg.params);

  if (auto it = doc.find("n_steps"); it != doc.end()) {
    if (!it->is_number_integer() || it->get<long long>() < 1)
      fail(ErrorKind::invalid_argument, "config.n_steps: expected a positive integer");
    cfg.N = it->get<Index>();
  }
  if (auto it = doc.find("seed"); it != doc.end()) {
    if (!it->is_number_unsigned()) fail(ErrorKind::invalid_argument, "config.seed: expected a non-negative integer");
    cfg.seed = it->get<std::uint64_t>();
  }
  if (auto it = doc.find("estimation"); it != doc.end()) {
    if (!it->is_object()) fail(ErrorKind::invalid_argument, "config.estimation: expected an object");
    auto& e = cfg.estimation;
    const json& o = *it;
    if (auto m = o.find("method"); m != o.end()) {
      if (!m->is_string() || (*m != "acov" && *m != "mdm"))
        fail(ErrorKind::invalid_argument, "config.estimation.method: expected \"acov\" or \"mdm\"");
      e.method = m->get<std::string>();
    }
    auto int_field = [&](const char* key, Index& dst) {
      if (auto f = o.find(key); f != o.end()) {
        if (!f->is_number_integer() || f->get<long long>() < 0)
          fail(ErrorKind::invalid_argument, std::string("config.estimation.") + key + ": expected an integer >= 0");
        dst = f->get<Index>();
      }
    };
    int_field("ell", e.ell);
    int_field("m_max", e.m_max);
    int_field("L", e.L);
    if (o.contains("ts_target_s")) e.ts_target = number_field(o, "ts_target_s", "config.estimation");
    if (o.contains("d1")) e.d1 = number_field(o, "d1", "config.estimation");
    if (auto k = o.find("outlier_k"); k != o.end()) {
      if (k->is_null() || (k->is_string() && *k == "off"))
        e.outlier_k.reset();
      else
        e.outlier_k = number_field(o, "outlier_k", "config.estimation");
    }
  }
  return cfg;
}

ScenarioConfig load_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open config '" + path + "'");
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::invalid_argument, path + ": " + e.what());
  }
  try {
    return parse_config(doc);
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.detail());
  }
}

json config_to_json(const ScenarioConfig& cfg) {
  json doc;
  doc["ts_seconds"] = cfg.Ts;
  doc["clocks"] = json::array();
  for (const auto& c : cfg.params.clocks) doc["clocks"].push_back({{"q1", c.q1}, {"q2", c.q2}, {"d", c.d}});
  const Vec<double> r = pack_r_upper(cfg.params.R);
  doc["r_upper"] = std::vector<double>(r.data(), r.data() + r.size());
  doc["n_steps"] = cfg.N;
  doc["seed"] = cfg.seed;
  const auto& e = cfg.estimation;
  doc["estimation"] = {{"method", e.method}, {"ell", e.ell},     {"m_max", e.m_max},
                       {"L", e.L},           {"ts_target_s", e.ts_target}, {"d1", e.d1}};
  doc["estimation"]["outlier_k"] = e.outlier_k ? json(*e.outlier_k) : json("off");
  return doc;
}

void write_measurements(const MeasurementRecord<double>& rec, const std::string& path) {
  require(rec.Ts > 0, "record sampling period must be positive");
  auto os = open_out(path);
  os << "t_s";
  for (Index c = 0; c < rec.nz(); ++c) os << ",z" << c + 1;
  os << '\n';
  std::string line;
  for (Index k = 0; k < rec.samples(); ++k) {
    line = format_double(static_cast<double>(k) * rec.Ts);
    for (Index c = 0; c < rec.nz(); ++c) {
      line += ',';
      line += format_double(rec.Z(c, k));
    }
    line += '\n';
    os << line;
  }
  finish(os, path);
}

MeasurementRecord<double> read_measurements(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open measurement file '" + path + "'");
  std::string line;
  if (!std::getline(is, line)) fail(ErrorKind::invalid_argument, path + ": empty file");
  const auto header = split_fields(line);
  if (header.size() < 2 || header[0] != "t_s")
    fail(ErrorKind::invalid_argument, path + ":1: header must be 't_s,z1,...'");
  const Index nz = static_cast<Index>(header.size()) - 1;
  for (Index c = 0; c < nz; ++c)
    if (header[static_cast<std::size_t>(c + 1)] != "z" + std::to_string(c + 1))
      fail(ErrorKind::invalid_argument, path + ":1: column " + std::to_string(c + 2) + " must be named z" +
                                            std::to_string(c + 1));

  std::vector<double> t, z;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_fields(line);
    const std::string where = path + ":" + std::to_string(lineno);
    if (static_cast<Index>(f.size()) != nz + 1)
      fail(ErrorKind::invalid_argument, where + ": expected " + std::to_string(nz + 1) + " fields, got " +
                                            std::to_string(f.size()));
    t.push_back(parse_double(std::string(f[0]), where));
    for (Index c = 0; c < nz; ++c) {
      const double v = parse_double(std::string(f[static_cast<std::size_t>(c + 1)]), where);
      if (!std::isfinite(v)) fail(ErrorKind::invalid_argument, where + ": non-finite sample");
      z.push_back(v);
    }
  }
  const Index S = static_cast<Index>(t.size());
  if (S < 2) fail(ErrorKind::invalid_argument, path + ": need at least 2 samples to infer Ts, got " + std::to_string(S));

  MeasurementRecord<double> rec;
  rec.Ts = t[1] - t[0];
  if (!(rec.Ts > 0)) fail(ErrorKind::invalid_argument, path + ": t_s must be strictly increasing");
  for (Index k = 0; k < S; ++k) {
    const double expect = t[0] + static_cast<double>(k) * rec.Ts;
    if (std::abs(t[static_cast<std::size_t>(k)] - expect) > 1e-6 * rec.Ts)
      fail(ErrorKind::invalid_argument, path + ": row " + std::to_string(k + 1) +
                                            ": t_s is not on the uniform grid (gaps are not supported)");
  }
  rec.Z = Eigen::Map<const Mat<double>>(z.data(), nz, S);
  rec.origin = {RecordOrigin::Kind::ingested, 0, path};
  return rec;
}

void write_acov_csv(const AcovEstimate<double>& est, const std::string& path) {
  auto os = open_out(path);
  os << "tau_s,pair_i,pair_j,sigma2,var_sigma2\n";
  for (Index p = 0; p < est.grid.size(); ++p)
    for (std::size_t q = 0; q < est.pairs.size(); ++q) {
      const auto [i, j] = est.pairs[q];
      os << format_double(est.grid.tau(p)) << ',' << i + 1 << ',' << j + 1 << ','
         << format_double(est.sigma2(static_cast<Index>(q), p)) << ','
         << format_double(est.variance(static_cast<Index>(q), p)) << '\n';
    }
  finish(os, path);
}

json report_to_json(const EstimateReport<double>& rep) {
  const Index n = rep.params.n();
  const Index nz = n - 1;
  json doc;
  doc["method"] = rep.method;
  doc["n_clocks"] = n;
  doc["n_parameters"] = rep.theta.size();
  doc["clocks"] = json::array();
  for (Index i = 0; i < n; ++i) {
    const auto& c = rep.params.clocks[static_cast<std::size_t>(i)];
    const auto se = [&](Index k) { return nullable(rep.standard_errors(k)); };
    doc["clocks"].push_back({{"q1", c.q1},
                             {"q2", c.q2},
                             {"d", c.d},
                             {"se", {{"q1", se(i)}, {"q2", se(n + i)}, {"d", se(2 * n + i)}}}});
  }
  const Vec<double> r = pack_r_upper(rep.params.R);
  doc["r_upper"] = std::vector<double>(r.data(), r.data() + r.size());
  json r_se = json::array();
  for (Index k = 0; k < nz * (nz + 1) / 2; ++k) r_se.push_back(nullable(rep.standard_errors(3 * n + k)));
  doc["r_upper_se"] = r_se;
  doc["theta"] = std::vector<double>(rep.theta.data(), rep.theta.data() + rep.theta.size());

  json diag;
  diag["residual"] = nullable(rep.residual);
  diag["cond"] = nullable(rep.cond);
  diag["rank"] = rep.rank;
  diag["clamped"] = rep.clamped;
  diag["warnings"] = rep.warnings;
  for (const auto& [key, value] : rep.extras) diag[key] = nullable(value);
  doc["diagnostics"] = diag;
  // flat copies of the method-specific settings for quick access
  for (const char* key : {"L", "ts_target_s", "n_residue_dim"})
    if (auto it = rep.extras.find(key); it != rep.extras.end()) doc[key] = it->second;
  return doc;
}

void write_json(const json& doc, const std::string& path) {
  auto os = open_out(path);
  os << doc.dump(2) << '\n';
  finish(os, path);
}

}  // namespace chronident
