#include "fvicm/cli_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <gsl/gsl_cdf.h>
#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

namespace fvicm {

namespace {

using nlohmann::json;

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '\n')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '\n')) --e;
  std::string out(s.substr(b, e - b));
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return out;
}

std::vector<std::string> split(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(delim, start);
    out.push_back(trim(std::string_view(line).substr(start, pos == std::string::npos ? pos : pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_real(const std::string& cell, int row, const std::string& column) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc() || ptr != last || !std::isfinite(v))
    throw InputError(fmt::format("row {}, column '{}': cannot parse '{}' as a number", row, column, cell));
  return v;
}

int parse_genotype(const std::string& cell, int row) {
  int v = -1;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size() || v < 0 || v > 2)
    throw InputError(fmt::format("row {}, column 'g': expected 0, 1 or 2, got '{}'", row, cell));
  return v;
}

// Column index of x<k> for k = 1..p, from a header map.
std::vector<int> covariate_columns(const std::map<std::string, int>& cols, std::vector<std::string>& names) {
  std::map<int, int> by_number;
  for (const auto& [name, idx] : cols) {
    if (name.size() < 2 || name[0] != 'x') continue;
    int k = 0;
    auto [ptr, ec] = std::from_chars(name.data() + 1, name.data() + name.size(), k);
    if (ec != std::errc() || ptr != name.data() + name.size() || k < 1) continue;
    by_number[k] = idx;
  }
  std::vector<int> out;
  for (int k = 1; by_number.count(k); ++k) {
    out.push_back(by_number[k]);
    names.push_back("x" + std::to_string(k));
  }
  if (out.size() != by_number.size())
    throw InputError(fmt::format("covariate columns must be x1..xp without gaps (found {} x-columns, x1..x{} contiguous)",
                                 by_number.size(), out.size()));
  return out;
}

std::string num(double v) {
  if (std::isnan(v)) return "NA";
  return fmt::format("{}", v);
}

json maybe_number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json vec_json(const Eigen::VectorXd& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw InputError(fmt::format("cannot write '{}'", p.string()));
  return os;
}

void write_curve(const std::filesystem::path& p, const CurveGrid& c) {
  auto os = open_out(p);
  os << "u\testimate\tband_lo\tband_hi\n";
  for (std::size_t i = 0; i < c.u.size(); ++i)
    os << num(c.u[i]) << '\t' << num(c.estimate[i]) << '\t' << num(c.lower[i]) << '\t' << num(c.upper[i]) << '\n';
}

// u = beta' x_std = intercept + sum_k (beta_k / scale_k) x_k on original scales.
json index_map_json(const Eigen::VectorXd& beta, const std::vector<AffineMap>& maps) {
  double intercept = 0.0;
  std::vector<double> slopes;
  for (int k = 0; k < beta.size(); ++k) {
    slopes.push_back(beta[k] / maps[k].scale);
    intercept -= beta[k] * maps[k].offset / maps[k].scale;
  }
  return json{{"intercept", intercept}, {"slopes", slopes}};
}

bool testable(const FitResult& fit) { return fit.spec1.degree >= 2 || fit.spec1.num_knots() >= 1; }

}  // namespace

IngestedData ingest_stream(std::istream& in, const IngestOptions& options, const std::string& source) {
  std::string header;
  if (!std::getline(in, header) || trim(header).empty()) throw InputError(fmt::format("{}: empty file", source));
  char delim = options.delimiter;
  if (delim == '\0') delim = header.find('\t') != std::string::npos ? '\t' : ',';

  std::vector<std::string> names = split(header, delim);
  std::map<std::string, int> cols;
  for (int c = 0; c < static_cast<int>(names.size()); ++c) {
    if (names[c].empty()) throw InputError(fmt::format("{}: header column {} is empty", source, c + 1));
    if (!cols.emplace(names[c], c).second)
      throw InputError(fmt::format("{}: duplicate column '{}'", source, names[c]));
  }
  for (const char* req : {"subject_id", "y", "g"})
    if (!cols.count(req)) throw InputError(fmt::format("{}: missing column '{}'", source, req));

  IngestedData out;
  std::vector<int> xcols = covariate_columns(cols, out.covariate_names);
  const int p = static_cast<int>(xcols.size());
  if (p < 2) throw InputError(fmt::format("{}: need at least two covariate columns x1, x2 (found {})", source, p));
  const int c_id = cols["subject_id"], c_y = cols["y"], c_g = cols["g"];
  const int c_time = cols.count(options.time_column) ? cols[options.time_column] : -1;

  struct Row {
    double time;
    double y;
    std::vector<double> x;
  };
  struct Group {
    std::string id;
    int g;
    std::vector<Row> rows;
  };
  std::vector<Group> groups;
  std::map<std::string, std::size_t> index;

  std::string line;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    std::vector<std::string> cells = split(line, delim);
    if (cells.size() != names.size())
      throw InputError(fmt::format("{}: row {} has {} cells, header has {}", source, row, cells.size(), names.size()));
    const std::string& id = cells[c_id];
    if (id.empty()) throw InputError(fmt::format("{}: row {}, column 'subject_id': empty", source, row));
    Row r;
    r.y = parse_real(cells[c_y], row, "y");
    r.time = c_time >= 0 ? parse_real(cells[c_time], row, options.time_column) : 0.0;
    for (int k = 0; k < p; ++k) r.x.push_back(parse_real(cells[xcols[k]], row, out.covariate_names[k]));
    const int g = parse_genotype(cells[c_g], row);

    auto [it, fresh] = index.emplace(id, groups.size());
    if (fresh) groups.push_back({id, g, {}});
    Group& grp = groups[it->second];
    if (grp.g != g)
      throw InputError(fmt::format("{}: subject '{}' has non-constant g ({} then {} at row {})", source, id, grp.g, g, row));
    grp.rows.push_back(std::move(r));
  }
  if (groups.empty()) throw InputError(fmt::format("{}: no data rows", source));

  out.maps.assign(p, AffineMap{});
  if (options.standardize) {
    for (int k = 0; k < p; ++k) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (const auto& grp : groups)
        for (const auto& r : grp.rows) {
          lo = std::min(lo, r.x[k]);
          hi = std::max(hi, r.x[k]);
        }
      out.maps[k].offset = lo;
      out.maps[k].scale = hi > lo ? hi - lo : 1.0;
    }
    out.standardized = true;
  }

  out.data.p = p;
  for (auto& grp : groups) {
    if (c_time >= 0)
      std::stable_sort(grp.rows.begin(), grp.rows.end(), [](const Row& a, const Row& b) { return a.time < b.time; });
    Subject s;
    s.id = grp.id;
    s.g = grp.g;
    const int n = static_cast<int>(grp.rows.size());
    s.y.resize(n);
    s.x.resize(n, p);
    for (int j = 0; j < n; ++j) {
      s.y[j] = grp.rows[j].y;
      for (int k = 0; k < p; ++k) s.x(j, k) = out.maps[k].forward(grp.rows[j].x[k]);
    }
    out.data.subjects.push_back(std::move(s));
  }
  out.data.validate();
  return out;
}

IngestedData ingest(const std::filesystem::path& path, const IngestOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(fmt::format("cannot open '{}'", path.string()));
  return ingest_stream(in, options, path.string());
}

Eigen::MatrixXd destandardize(const Eigen::MatrixXd& x_std, const std::vector<AffineMap>& maps) {
  if (static_cast<std::size_t>(x_std.cols()) != maps.size()) throw ConfigError("destandardize: column count mismatch");
  Eigen::MatrixXd x(x_std.rows(), x_std.cols());
  for (int k = 0; k < x.cols(); ++k)
    for (int i = 0; i < x.rows(); ++i) x(i, k) = maps[k].inverse(x_std(i, k));
  return x;
}

void RunConfig::validate() const {
  if (degrees.empty()) throw ConfigError("degrees: must be nonempty");
  if (knot_counts.empty()) throw ConfigError("knots: must be nonempty");
  for (int q : degrees)
    if (q < 1 || q > 5) throw ConfigError(fmt::format("degrees: {} outside 1..5", q));
  for (int k : knot_counts)
    if (k < 0 || k > 20) throw ConfigError(fmt::format("knots: {} outside 0..20", k));
  if (lambda_mode == LambdaMode::fixed && !(lambda >= 0.0 && std::isfinite(lambda)))
    throw ConfigError("lambda: must be a finite value >= 0");
  if (!(lambda_lo > 0.0 && lambda_hi > lambda_lo && std::isfinite(lambda_hi)))
    throw ConfigError("lambda_range: need 0 < lo < hi");
  if (null_draws < 1) throw ConfigError("null_draws: must be >= 1");
  if (grid_points < 2) throw ConfigError("grid_points: must be >= 2");
  if (output_dir.empty()) throw ConfigError("output_dir: must be nonempty");
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config: top level must be an object");
  RunConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "degrees") {
        c.degrees = v.get<std::vector<int>>();
      } else if (key == "knots") {
        c.knot_counts = v.get<std::vector<int>>();
      } else if (key == "select") {
        c.select = v.get<bool>();
      } else if (key == "lambda") {
        if (v.is_string()) {
          if (v.get<std::string>() != "gcv") throw ConfigError("lambda: expected \"gcv\" or a number");
          c.lambda_mode = LambdaMode::gcv;
        } else {
          c.lambda_mode = LambdaMode::fixed;
          c.lambda = v.get<double>();
        }
      } else if (key == "lambda_range") {
        auto r = v.get<std::vector<double>>();
        if (r.size() != 2) throw ConfigError("lambda_range: expected [lo, hi]");
        c.lambda_lo = r[0];
        c.lambda_hi = r[1];
      } else if (key == "basis") {
        c.basis = parse_basis_kind(v.get<std::string>());
      } else if (key == "test") {
        c.run_test = v.get<bool>();
      } else if (key == "null_draws") {
        c.null_draws = v.get<int>();
      } else if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (key == "standardize") {
        c.standardize = v.get<bool>();
      } else if (key == "grid_points") {
        c.grid_points = v.get<int>();
      } else if (key == "output_dir") {
        c.output_dir = v.get<std::string>();
      } else {
        throw ConfigError(fmt::format("run config: unknown key '{}'", key));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("run config: {}", e.what()));
  }
  c.validate();
  return c;
}

json run_config_to_json(const RunConfig& c) {
  json j;
  j["degrees"] = c.degrees;
  j["knots"] = c.knot_counts;
  j["select"] = c.select;
  j["lambda"] = c.lambda_mode == LambdaMode::gcv ? json("gcv") : json(c.lambda);
  j["lambda_range"] = {c.lambda_lo, c.lambda_hi};
  j["basis"] = to_string(c.basis);
  j["test"] = c.run_test;
  j["null_draws"] = c.null_draws;
  j["seed"] = c.seed;
  j["standardize"] = c.standardize;
  j["grid_points"] = c.grid_points;
  j["output_dir"] = c.output_dir;
  return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return run_config_from_json(j);
}

std::vector<ParamReport> wald_table(const FitResult& fit, const std::vector<std::string>& covariate_names) {
  const Eigen::VectorXd theta = fit.theta_hat.flat();
  const ParamLayout lay = fit.theta_hat.layout();
  std::vector<std::string> names;
  for (int l = 0; l < 2; ++l)
    for (int k = 0; k < lay.p; ++k)
      names.push_back(fmt::format("beta{}_{}", l, k < static_cast<int>(covariate_names.size()) ? covariate_names[k]
                                                                                             : "x" + std::to_string(k + 1)));
  for (int j = 0; j < lay.d0; ++j) names.push_back(fmt::format("gamma0_{}", j));
  for (int j = 0; j < lay.d1; ++j) names.push_back(fmt::format("gamma1_{}", j));

  std::vector<ParamReport> out;
  for (int i = 0; i < theta.size(); ++i) {
    ParamReport r;
    r.name = names[i];
    r.estimate = theta[i];
    r.se = i < fit.se.size() ? fit.se[i] : std::numeric_limits<double>::quiet_NaN();
    if (r.se > 0.0) {
      r.z = r.estimate / r.se;
      r.p_value = 2.0 * gsl_cdf_ugaussian_Q(std::abs(r.z));
    } else {
      r.z = std::numeric_limits<double>::quiet_NaN();
      r.p_value = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(r);
  }
  return out;
}

AnalysisReport analyze(const IngestedData& input, const RunConfig& config) {
  config.validate();
  const LongitudinalDataset& data = input.data;
  AnalysisReport rep;
  rep.covariate_names = input.covariate_names;
  rep.maps = input.maps;

  FitConfig base;
  base.basis = config.basis;
  base.seed = config.seed;
  base.degree = config.degrees.front();
  base.num_knots = config.knot_counts.front();

  SelectionGrid grid;
  grid.degrees = config.degrees;
  grid.knot_counts = config.knot_counts;
  grid.lambda_lo = config.lambda_lo;
  grid.lambda_hi = config.lambda_hi;
  if (config.lambda_mode == LambdaMode::fixed) grid.fixed_lambda = config.lambda;

  if (config.select) {
    rep.selection = select_model(data, base, grid);
    rep.fit = rep.selection->chosen_fit;
  } else if (config.lambda_mode == LambdaMode::gcv) {
    rep.fit = gcv_select(data, base, grid).fit;
  } else {
    base.lambda = config.lambda;
    rep.fit = fit(data, base);
  }
  if (!rep.fit.converged) spdlog::warn("fit did not converge in {} iterations; reporting the last iterate", rep.fit.iterations);

  GridPolicy policy;
  policy.num_points = config.grid_points;
  std::tie(rep.fit.curve0, rep.fit.curve1) = eval_curves(rep.fit, policy);
  rep.params = wald_table(rep.fit, input.covariate_names);
  rep.mse = in_sample_mse(rep.fit, data);

  if (config.run_test) {
    if (testable(rep.fit)) {
      LrtOptions opt;
      opt.null_draws = config.null_draws;
      opt.seed = config.seed;
      rep.test = linearity_test(rep.fit, data, opt);
    } else {
      spdlog::warn("linearity test skipped: selected m1 basis is linear with no knots");
    }
  }
  return rep;
}

json report_to_json(const AnalysisReport& rep, const RunConfig& config) {
  const FitResult& f = rep.fit;
  json j;
  j["config"] = run_config_to_json(config);
  j["model"] = {{"degree", f.spec1.degree},
                {"knots0", f.spec0.knots},
                {"knots1", f.spec1.knots},
                {"lambda", f.lambda},
                {"basis", to_string(f.basis)}};
  j["theta_hat"] = {{"beta0", vec_json(f.theta_hat.beta0)},
                    {"beta1", vec_json(f.theta_hat.beta1)},
                    {"gamma0", vec_json(f.theta_hat.gamma0)},
                    {"gamma1", vec_json(f.theta_hat.gamma1)}};
  json params = json::array();
  for (const auto& p : rep.params)
    params.push_back({{"name", p.name},
                      {"estimate", p.estimate},
                      {"se", maybe_number(p.se)},
                      {"z", maybe_number(p.z)},
                      {"p_value", maybe_number(p.p_value)}});
  j["params"] = params;
  j["fit"] = {{"q_at_hat", f.q_at_hat},
              {"num_moments", f.num_moments},
              {"moment_rank", f.moment_rank},
              {"num_free_params", f.num_free_params},
              {"converged", f.converged},
              {"iterations", f.iterations},
              {"acov_pseudo_inverse", f.acov_pseudo_inverse},
              {"num_subjects", f.num_subjects},
              {"mse", rep.mse}};
  json maps = json::array();
  for (std::size_t k = 0; k < rep.maps.size(); ++k)
    maps.push_back({{"name", rep.covariate_names[k]}, {"offset", rep.maps[k].offset}, {"scale", rep.maps[k].scale}});
  j["covariate_maps"] = maps;
  j["index_original_scale"] = {{"u0", index_map_json(f.theta_hat.beta0, rep.maps)},
                               {"u1", index_map_json(f.theta_hat.beta1, rep.maps)}};
  if (rep.selection) {
    json cands = json::array();
    for (const auto& c : rep.selection->candidates)
      cands.push_back({{"degree", c.degree},
                       {"knots", c.num_knots},
                       {"lambda", c.lambda},
                       {"q", c.q_at_hat},
                       {"bic", c.bic},
                       {"k", c.k},
                       {"r", c.r},
                       {"rank", c.rank},
                       {"gof_p", c.gof.p_value},
                       {"converged", c.converged}});
    j["selection"] = {{"chosen", rep.selection->chosen}, {"candidates", cands}};
  }
  if (rep.test) {
    const LrtResult& t = *rep.test;
    j["linearity_test"] = {{"status", "done"},
                           {"lrt", t.lrt_obs},
                           {"p_value", t.p_value},
                           {"null_draws", t.null_samples.size()},
                           {"p_prime", t.p_prime},
                           {"num_random", t.num_random},
                           {"sigma2_a", t.variances.sigma2_a},
                           {"sigma2_b0", t.variances.sigma2_b0},
                           {"sigma2_b1", t.variances.sigma2_b1},
                           {"sigma2_eps", t.variances.sigma2_eps}};
  } else {
    j["linearity_test"] = {{"status", config.run_test ? "not_applicable" : "disabled"}};
  }
  return j;
}

void write_reports(const AnalysisReport& rep, const RunConfig& config) {
  const std::filesystem::path dir(config.output_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError(fmt::format("cannot create output directory '{}': {}", dir.string(), ec.message()));

  {
    auto os = open_out(dir / "fit_summary.tsv");
    os << "param\testimate\tse\tz\tp_value\n";
    for (const auto& p : rep.params)
      os << p.name << '\t' << num(p.estimate) << '\t' << num(p.se) << '\t' << num(p.z) << '\t' << num(p.p_value)
         << '\n';
  }
  {
    const FitResult& f = rep.fit;
    auto os = open_out(dir / "fit_stats.tsv");
    os << "key\tvalue\n";
    os << "mse\t" << num(rep.mse) << '\n';
    os << "q_at_hat\t" << num(f.q_at_hat) << '\n';
    os << "degree\t" << f.spec1.degree << '\n';
    os << "knots\t" << f.spec1.num_knots() << '\n';
    os << "lambda\t" << num(f.lambda) << '\n';
    os << "converged\t" << (f.converged ? 1 : 0) << '\n';
    os << "iterations\t" << f.iterations << '\n';
    os << "num_subjects\t" << f.num_subjects << '\n';
  }
  write_curve(dir / "curve_m0.tsv", rep.fit.curve0);
  write_curve(dir / "curve_m1.tsv", rep.fit.curve1);
  {
    auto os = open_out(dir / "linearity_test.tsv");
    os << "status\tlrt\tp_value\tnull_draws\tsigma2_a\tsigma2_b0\tsigma2_b1\tsigma2_eps\n";
    if (rep.test) {
      const LrtResult& t = *rep.test;
      os << "done\t" << num(t.lrt_obs) << '\t' << num(t.p_value) << '\t' << t.null_samples.size() << '\t'
         << num(t.variances.sigma2_a) << '\t' << num(t.variances.sigma2_b0) << '\t' << num(t.variances.sigma2_b1)
         << '\t' << num(t.variances.sigma2_eps) << '\n';
    } else {
      os << (config.run_test ? "not_applicable" : "disabled") << "\tNA\tNA\t0\tNA\tNA\tNA\tNA\n";
    }
  }
  if (rep.selection) {
    auto os = open_out(dir / "selection.tsv");
    os << "degree\tknots\tlambda\tq\tk\tr\trank\tbic\tgof_p\tconverged\tchosen\n";
    for (std::size_t i = 0; i < rep.selection->candidates.size(); ++i) {
      const Candidate& c = rep.selection->candidates[i];
      os << c.degree << '\t' << c.num_knots << '\t' << num(c.lambda) << '\t' << num(c.q_at_hat) << '\t' << c.k << '\t'
         << c.r << '\t' << c.rank << '\t' << num(c.bic) << '\t' << num(c.gof.p_value) << '\t' << (c.converged ? 1 : 0) << '\t'
         << (i == rep.selection->chosen ? 1 : 0) << '\n';
    }
  }
  {
    auto os = open_out(dir / "summary.json");
    os << report_to_json(rep, config).dump(2) << '\n';
  }
}

AnalysisReport run_analysis(const IngestedData& input, const RunConfig& config) {
  AnalysisReport rep = analyze(input, config);
  write_reports(rep, config);
  return rep;
}

Eigen::VectorXd read_summary_theta(const std::filesystem::path& summary_json) {
  std::ifstream in(summary_json);
  if (!in) throw InputError(fmt::format("cannot open '{}'", summary_json.string()));
  json j;
  try {
    j = json::parse(in);
    std::vector<double> flat;
    for (const char* key : {"beta0", "beta1", "gamma0", "gamma1"}) {
      auto part = j.at("theta_hat").at(key).get<std::vector<double>>();
      flat.insert(flat.end(), part.begin(), part.end());
    }
    return Eigen::Map<Eigen::VectorXd>(flat.data(), static_cast<Eigen::Index>(flat.size()));
  } catch (const json::exception& e) {
    throw InputError(fmt::format("{}: {}", summary_json.string(), e.what()));
  }
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::input:
    case ErrorKind::config: return 2;
    case ErrorKind::numerical:
    case ErrorKind::convergence: return 3;
  }
  return 1;
}

}  // namespace fvicm
