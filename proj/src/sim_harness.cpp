#include "fvicm/sim_harness.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>

#include <spdlog/spdlog.h>

#include "fvicm/errors.hpp"
#include "fvicm/rng.hpp"

namespace fvicm {

namespace {

constexpr double kPi = std::numbers::pi;
const double kHalfWidth = 1.645 / std::sqrt(12.0);

// Stream tags so datasets, null draws and studies never share RNG streams.
enum Stream : std::uint64_t { estimation = 1, curves = 2, power_data = 3, power_null = 4 };

}  // namespace

Eigen::VectorXd SimTruth::beta0() { return Eigen::Vector3d(std::sqrt(5.0), 2.0, 2.0) / std::sqrt(13.0); }
Eigen::VectorXd SimTruth::beta1() { return Eigen::Vector3d(1.0, 1.0, 1.0) / std::sqrt(3.0); }
double SimTruth::lower() { return std::sqrt(3.0) / 2.0 - kHalfWidth; }
double SimTruth::upper() { return std::sqrt(3.0) / 2.0 + kHalfWidth; }
double SimTruth::m0(double u) { return std::cos(kPi * u); }
double SimTruth::m1(double u) { return std::sin(kPi * (u - lower()) / (upper() - lower())); }

std::pair<double, double> SimTruth::projection_line() {
  // Composite Simpson moments of m1 against 1 and u over [A, B].
  const double a = lower(), b = upper();
  const int n = 2000;
  const double h = (b - a) / n;
  double s0 = 0.0, s1 = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double u = a + h * i;
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    s0 += w * m1(u);
    s1 += w * m1(u) * u;
  }
  s0 *= h / 3.0;
  s1 *= h / 3.0;
  const double len = b - a, mid = 0.5 * (a + b);
  const double slope = (s1 - mid * s0) / (len * len * len / 12.0);
  return {s0 / len - slope * mid, slope};
}

std::pair<double, double> SimTruth::rising_line() {
  const double a = lower(), b = upper();
  return {-a / (b - a), 1.0 / (b - a)};
}

double m1_tau(double u, double tau, NullLine kind) {
  static const auto projection = SimTruth::projection_line();
  static const auto rising = SimTruth::rising_line();
  const auto& line = kind == NullLine::projection ? projection : rising;
  const double lin = line.first + line.second * u;
  return lin + tau * (SimTruth::m1(u) - lin);
}

void SimConfig::validate() const {
  if (n_subjects < 1 || n_times < 1) throw ConfigError("simulation needs at least one subject and one time point");
  if (!(p_a > 0.0 && p_a <= 0.5)) throw ConfigError("p_A must lie in (0, 0.5]");
  if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("rho must lie in [0, 1)");
  if (!(error_var > 0.0)) throw ConfigError("error variance must be positive");
  if (reps < 1) throw ConfigError("reps must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!std::isfinite(tau)) throw ConfigError("tau must be finite");
}

LongitudinalDataset generate_dataset(const SimConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 eng(splitmix64(seed));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal;
  const Eigen::VectorXd b0 = SimTruth::beta0(), b1 = SimTruth::beta1();
  const double p2 = c.p_a * c.p_a, p1 = 2.0 * c.p_a * (1.0 - c.p_a);
  const double shared = std::sqrt(c.error_var * c.rho), own = std::sqrt(c.error_var * (1.0 - c.rho));

  LongitudinalDataset d;
  d.p = 3;
  d.subjects.reserve(static_cast<std::size_t>(c.n_subjects));
  for (int i = 0; i < c.n_subjects; ++i) {
    Subject s;
    s.id = "s" + std::to_string(i + 1);
    const double ug = unif(eng);
    s.g = ug < p2 ? 2 : (ug < p2 + p1 ? 1 : 0);
    s.x.resize(c.n_times, 3);
    for (int j = 0; j < c.n_times; ++j)
      for (int k = 0; k < 3; ++k) s.x(j, k) = unif(eng);
    const double z = normal(eng);
    s.y.resize(c.n_times);
    for (int j = 0; j < c.n_times; ++j) {
      const double eps = shared * z + own * normal(eng);
      s.y[j] = SimTruth::m0(s.x.row(j).dot(b0)) + s.g * m1_tau(s.x.row(j).dot(b1), c.tau, c.null_line) + eps;
    }
    d.subjects.push_back(std::move(s));
  }
  return d;
}

FitResult study_fit(const LongitudinalDataset& data, const StudyFit& policy) {
  if (policy.reselect) return select_model(data, policy.fit, *policy.reselect).chosen_fit;
  return fit(data, policy.fit);
}

namespace {

StudyFit serial_policy(StudyFit p) {
  p.fit.execution = Execution::serial;
  return p;
}

// Runs body(i) for every replication, in parallel, keeping exceptions per index.
template <class Body>
std::vector<std::string> run_replications(int reps, Body&& body) {
  std::vector<std::string> errors(static_cast<std::size_t>(reps));
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < reps; ++i) {
    try {
      body(i);
    } catch (const std::exception& e) {
      errors[i] = e.what();
      if (errors[i].empty()) errors[i] = "unknown failure";
    }
  }
  return errors;
}

void warn_failures(const char* what, int failed, int total) {
  if (failed == 0) return;
  const double frac = static_cast<double>(failed) / total;
  if (frac > 0.02)
    spdlog::warn("{}: {} of {} replications failed ({:.1f}%)", what, failed, total, 100.0 * frac);
  else
    spdlog::info("{}: {} of {} replications failed", what, failed, total);
}

}  // namespace

EstimationTable estimation_study(const SimConfig& config, const StudyFit& policy_in) {
  config.validate();
  const StudyFit policy = serial_policy(policy_in);
  EstimationTable t;
  t.records.resize(static_cast<std::size_t>(config.reps));
  const auto errors = run_replications(config.reps, [&](int i) {
    ReplicationRecord& rec = t.records[i];
    rec.index = i;
    const auto data = generate_dataset(config, derive_seed(config.seed, Stream::estimation, i));
    const FitResult f = study_fit(data, policy);
    rec.converged = f.converged;
    if (!f.converged) throw ConvergenceError("fit did not converge");
    rec.beta.resize(6);
    rec.beta << f.theta_hat.beta0, f.theta_hat.beta1;
    rec.se = f.se.head(6);
    rec.q_at_hat = f.q_at_hat;
    rec.r = f.num_moments;
    rec.k = f.num_free_params;
    if (!rec.beta.allFinite() || !rec.se.allFinite()) throw ConditioningError("non-finite estimate");
    rec.ok = true;
  });
  for (int i = 0; i < config.reps; ++i) {
    t.records[i].error = errors[i];
    if (!errors[i].empty()) t.records[i].ok = false;
  }

  Eigen::VectorXd truth(6);
  truth << SimTruth::beta0(), SimTruth::beta1();
  std::vector<const ReplicationRecord*> ok;
  for (const auto& r : t.records)
    if (r.ok) ok.push_back(&r);
  t.n_ok = static_cast<int>(ok.size());
  t.n_failed = config.reps - t.n_ok;
  warn_failures("estimation study", t.n_failed, config.reps);
  for (int j = 0; j < 6; ++j) {
    ParamRow row;
    row.name = "beta" + std::to_string(j / 3) + std::to_string(j % 3 + 1);
    row.truth = truth[j];
    if (!ok.empty()) {
      double sum = 0.0, se = 0.0, cover = 0.0;
      for (const auto* r : ok) {
        sum += r->beta[j];
        se += r->se[j];
        cover += std::abs(r->beta[j] - truth[j]) <= 1.96 * r->se[j] ? 1.0 : 0.0;
      }
      const double n = static_cast<double>(ok.size());
      const double mean = sum / n;
      double ss = 0.0;
      for (const auto* r : ok) ss += (r->beta[j] - mean) * (r->beta[j] - mean);
      row.bias = mean - truth[j];
      row.sd = ok.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      row.se = se / n;
      row.cp = cover / n;
    }
    t.rows.push_back(row);
  }
  return t;
}

namespace {

double trapezoid_ise(const std::vector<double>& u, const std::vector<double>& est, const std::vector<double>& truth) {
  double s = 0.0;
  for (std::size_t i = 1; i < u.size(); ++i) {
    const double a = est[i - 1] - truth[i - 1], b = est[i] - truth[i];
    s += 0.5 * (a * a + b * b) * (u[i] - u[i - 1]);
  }
  return s;
}

double quantile_sorted(const std::vector<double>& v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double pos = q * (v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - lo) * (v[hi] - v[lo]);
}

CurveSummary summarize_curves(const std::vector<double>& u, const std::vector<double>& truth,
                              const std::vector<std::vector<double>>& ests) {
  CurveSummary s;
  s.u = u;
  s.truth = truth;
  const std::size_t g = u.size();
  s.mean.assign(g, 0.0);
  s.lower.assign(g, 0.0);
  s.upper.assign(g, 0.0);
  std::vector<double> col(ests.size());
  for (std::size_t i = 0; i < g; ++i) {
    double sum = 0.0;
    for (std::size_t r = 0; r < ests.size(); ++r) {
      col[r] = ests[r][i];
      sum += col[r];
    }
    std::sort(col.begin(), col.end());
    s.mean[i] = ests.empty() ? 0.0 : sum / ests.size();
    s.lower[i] = quantile_sorted(col, 0.025);
    s.upper[i] = quantile_sorted(col, 0.975);
  }
  double total = 0.0;
  for (const auto& e : ests) total += trapezoid_ise(u, e, truth);
  s.mise = ests.empty() ? 0.0 : total / ests.size();
  return s;
}

}  // namespace

CurveStudy curve_recovery_study(const SimConfig& config, const StudyFit& policy_in, int grid_points) {
  config.validate();
  if (grid_points < 2) throw ConfigError("curve grid needs at least two points");
  const StudyFit policy = serial_policy(policy_in);
  const double c0 = 0.5 * SimTruth::beta0().sum();
  const double c1 = 0.5 * SimTruth::beta1().sum();
  GridPolicy grid;
  grid.num_points = grid_points;
  grid.range0 = std::pair{c0 - kHalfWidth, c0 + kHalfWidth};
  grid.range1 = std::pair{c1 - kHalfWidth, c1 + kHalfWidth};

  std::vector<std::vector<double>> est0(config.reps), est1(config.reps);
  std::vector<char> ok(static_cast<std::size_t>(config.reps), 0);
  const auto errors = run_replications(config.reps, [&](int i) {
    const auto data = generate_dataset(config, derive_seed(config.seed, Stream::curves, i));
    const FitResult f = study_fit(data, policy);
    if (!f.converged) throw ConvergenceError("fit did not converge");
    const auto [g0, g1] = eval_curves(f, grid);
    est0[i] = g0.estimate;
    est1[i] = g1.estimate;
    ok[i] = 1;
  });

  CurveStudy out;
  std::vector<std::vector<double>> kept0, kept1;
  for (int i = 0; i < config.reps; ++i) {
    if (ok[i] && errors[i].empty()) {
      kept0.push_back(std::move(est0[i]));
      kept1.push_back(std::move(est1[i]));
    }
  }
  out.n_ok = static_cast<int>(kept0.size());
  out.n_failed = config.reps - out.n_ok;
  warn_failures("curve study", out.n_failed, config.reps);

  std::vector<double> u0(grid_points), u1(grid_points), t0(grid_points), t1(grid_points);
  for (int i = 0; i < grid_points; ++i) {
    u0[i] = grid.range0->first + (grid.range0->second - grid.range0->first) * i / (grid_points - 1);
    u1[i] = grid.range1->first + (grid.range1->second - grid.range1->first) * i / (grid_points - 1);
    t0[i] = SimTruth::m0(u0[i]);
    t1[i] = m1_tau(u1[i], config.tau, config.null_line);
  }
  out.m0 = summarize_curves(u0, t0, kept0);
  out.m1 = summarize_curves(u1, t1, kept1);
  return out;
}

std::vector<PowerRow> power_study(const SimConfig& config, const StudyFit& policy_in, const LrtOptions& lrt_in) {
  config.validate();
  if (config.tau_grid.empty()) throw ConfigError("power study needs a tau grid");
  const StudyFit policy = serial_policy(policy_in);
  std::vector<PowerRow> rows;
  for (std::size_t t = 0; t < config.tau_grid.size(); ++t) {
    SimConfig c = config;
    c.tau = config.tau_grid[t];
    std::vector<char> reject(static_cast<std::size_t>(c.reps), 0), unconverged(reject);
    const auto errors = run_replications(c.reps, [&](int i) {
      const auto data = generate_dataset(c, derive_seed(c.seed, Stream::power_data, derive_seed(t, i)));
      // The test conditions on the fitted indices, so an unconverged fit still
      // gives a valid index; under tau = 0 the interaction index is not identified.
      const FitResult f = study_fit(data, policy);
      unconverged[i] = f.converged ? 0 : 1;
      LrtOptions o = lrt_in;
      o.execution = Execution::serial;
      o.seed = derive_seed(lrt_in.seed ^ c.seed, Stream::power_null, derive_seed(t, i));
      const LrtResult r = linearity_test(f, data, o);
      reject[i] = r.p_value <= c.alpha ? 1 : 0;
    });
    PowerRow row;
    row.tau = c.tau;
    int rej = 0;
    for (int i = 0; i < c.reps; ++i) {
      if (!errors[i].empty()) {
        ++row.n_failed;
        continue;
      }
      ++row.n_ok;
      rej += reject[i];
      row.n_unconverged += unconverged[i];
    }
    warn_failures("power study", row.n_failed, c.reps);
    if (row.n_ok > 0) {
      row.rate = static_cast<double>(rej) / row.n_ok;
      row.mc_se = std::sqrt(row.rate * (1.0 - row.rate) / row.n_ok);
    }
    rows.push_back(row);
  }
  return rows;
}

namespace {

struct PrecisionGuard {
  std::ostream& os;
  std::streamsize old;
  explicit PrecisionGuard(std::ostream& o, int p) : os(o), old(o.precision(p)) {}
  ~PrecisionGuard() { os.precision(old); }
};

}  // namespace

void write_estimation_tsv(std::ostream& os, const EstimationTable& t) {
  PrecisionGuard g(os, 10);
  os << "Param\tTrue\tBias\tSD\tSE\tCP\n";
  for (const auto& r : t.rows)
    os << r.name << '\t' << r.truth << '\t' << r.bias << '\t' << r.sd << '\t' << r.se << '\t' << r.cp << '\n';
}

void write_curve_tsv(std::ostream& os, const CurveSummary& c) {
  PrecisionGuard g(os, 10);
  os << "u\ttruth\tmean_estimate\tband_lo\tband_hi\n";
  for (std::size_t i = 0; i < c.u.size(); ++i)
    os << c.u[i] << '\t' << c.truth[i] << '\t' << c.mean[i] << '\t' << c.lower[i] << '\t' << c.upper[i] << '\n';
}

void write_power_tsv(std::ostream& os, const std::vector<PowerRow>& rows) {
  PrecisionGuard g(os, 10);
  os << "tau\trejection_rate\tmc_se\tn_ok\tn_failed\tn_unconverged\n";
  for (const auto& r : rows)
    os << r.tau << '\t' << r.rate << '\t' << r.mc_se << '\t' << r.n_ok << '\t' << r.n_failed << '\t' << r.n_unconverged
       << '\n';
}

void write_dataset_tsv(std::ostream& os, const LongitudinalDataset& d) {
  PrecisionGuard g(os, 17);
  os << "subject_id\ttime\ty\tg";
  for (int k = 0; k < d.p; ++k) os << "\tx" << k + 1;
  os << '\n';
  for (const auto& s : d.subjects) {
    for (int j = 0; j < s.num_obs(); ++j) {
      os << s.id << '\t' << j + 1 << '\t' << s.y[j] << '\t' << s.g;
      for (int k = 0; k < d.p; ++k) os << '\t' << s.x(j, k);
      os << '\n';
    }
  }
}

}  // namespace fvicm
