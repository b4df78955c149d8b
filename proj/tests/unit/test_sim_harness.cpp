#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "fvicm/errors.hpp"
#include "fvicm/sim_harness.hpp"

using namespace fvicm;

namespace {

constexpr double kPi = std::numbers::pi;

SimConfig small_config(int n, int t, int reps) {
  SimConfig c;
  c.n_subjects = n;
  c.n_times = t;
  c.reps = reps;
  return c;
}

StudyFit pinned(int q, int k) {
  StudyFit p;
  p.fit.degree = q;
  p.fit.num_knots = k;
  return p;
}

/// y minus the noiseless mean, recomputed from the stated truth.
Eigen::VectorXd errors_of(const Subject& s, const SimConfig& c) {
  const Eigen::Vector3d b0 = Eigen::Vector3d(std::sqrt(5.0), 2.0, 2.0) / std::sqrt(13.0);
  const Eigen::Vector3d b1 = Eigen::Vector3d::Ones() / std::sqrt(3.0);
  const double a = std::sqrt(3.0) / 2.0 - 1.645 / std::sqrt(12.0);
  const double b = std::sqrt(3.0) / 2.0 + 1.645 / std::sqrt(12.0);
  Eigen::VectorXd e(s.num_obs());
  for (int j = 0; j < s.num_obs(); ++j) {
    const double u0 = s.x.row(j).dot(b0), u1 = s.x.row(j).dot(b1);
    const double m1 = std::sin(kPi * (u1 - a) / (b - a));
    const double line = (u1 - a) / (b - a);
    e[j] = s.y[j] - std::cos(kPi * u0) - s.g * (line + c.tau * (m1 - line));
  }
  return e;
}

template <class T>
std::string to_tsv(void (*writer)(std::ostream&, const T&), const T& v) {
  std::ostringstream os;
  writer(os, v);
  return os.str();
}

}  // namespace

TEST_CASE("true indices and curves") {
  const Eigen::VectorXd b0 = SimTruth::beta0(), b1 = SimTruth::beta1();
  CHECK(b0[0] == doctest::Approx(0.620).epsilon(1e-3));
  CHECK(b0[1] == doctest::Approx(0.555).epsilon(1e-3));
  CHECK(b0[2] == doctest::Approx(0.555).epsilon(1e-3));
  for (int k = 0; k < 3; ++k) CHECK(b1[k] == doctest::Approx(0.577).epsilon(1e-3));
  CHECK(b0.norm() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(b1.norm() == doctest::Approx(1.0).epsilon(1e-15));

  const double a = SimTruth::lower(), b = SimTruth::upper();
  CHECK(0.5 * (a + b) == doctest::Approx(std::sqrt(3.0) / 2.0).epsilon(1e-15));
  CHECK(SimTruth::m1(std::sqrt(3.0) / 2.0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(std::abs(SimTruth::m1(a)) < 1e-14);
  CHECK(std::abs(SimTruth::m1(b)) < 1e-14);
  CHECK(SimTruth::m0(0.25) == doctest::Approx(std::cos(kPi / 4)).epsilon(1e-15));
}

TEST_CASE("null lines") {
  // Over [A, B], sin(pi (u - A)/(B - A)) integrates to 2 (B - A)/pi and is symmetric about the midpoint.
  const auto [d0, d1] = SimTruth::projection_line();
  CHECK(d0 == doctest::Approx(2.0 / kPi).epsilon(1e-10));
  CHECK(std::abs(d1) < 1e-10);

  const auto [r0, r1] = SimTruth::rising_line();
  CHECK(std::abs(r0 + r1 * SimTruth::lower()) < 1e-14);
  CHECK(r0 + r1 * SimTruth::upper() == doctest::Approx(1.0).epsilon(1e-14));

  for (double u : {0.3, 0.7, 0.9, 1.2}) {
    for (NullLine kind : {NullLine::rising, NullLine::projection}) {
      CHECK(m1_tau(u, 1.0, kind) == doctest::Approx(SimTruth::m1(u)).epsilon(1e-14));
      const auto line = kind == NullLine::rising ? SimTruth::rising_line() : SimTruth::projection_line();
      CHECK(m1_tau(u, 0.0, kind) == doctest::Approx(line.first + line.second * u).epsilon(1e-14));
      const double half = m1_tau(u, 0.5, kind);
      CHECK(half == doctest::Approx(0.5 * (m1_tau(u, 0.0, kind) + m1_tau(u, 1.0, kind))).epsilon(1e-13));
    }
  }
}

TEST_CASE("genotype frequencies follow Hardy-Weinberg") {
  for (double pa : {0.1, 0.3, 0.5}) {
    SimConfig c = small_config(100000, 1, 1);
    c.p_a = pa;
    const auto d = generate_dataset(c, 17);
    double count[3] = {0, 0, 0};
    for (const auto& s : d.subjects) {
      REQUIRE(s.g >= 0);
      REQUIRE(s.g <= 2);
      count[s.g] += 1.0;
    }
    const double n = c.n_subjects;
    const double expect[3] = {(1 - pa) * (1 - pa), 2 * pa * (1 - pa), pa * pa};
    for (int g = 0; g < 3; ++g) {
      const double se = std::sqrt(expect[g] * (1 - expect[g]) / n);
      CHECK(std::abs(count[g] / n - expect[g]) <= 3.0 * se);
    }
  }
}

TEST_CASE("covariates are uniform and errors exchangeable") {
  SimConfig c = small_config(50000, 3, 1);
  c.rho = 0.5;
  const auto d = generate_dataset(c, 19);
  double sx = 0.0, sxx = 0.0, nx = 0.0;
  double see = 0.0, scross = 0.0, npair = 0.0, ne = 0.0;
  for (const auto& s : d.subjects) {
    REQUIRE(s.num_obs() == 3);
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) {
        const double x = s.x(j, k);
        REQUIRE(x >= 0.0);
        REQUIRE(x < 1.0);
        sx += x;
        sxx += x * x;
        nx += 1.0;
      }
    const Eigen::VectorXd e = errors_of(s, c);
    see += e.squaredNorm();
    ne += 3.0;
    for (int j = 0; j < 3; ++j)
      for (int l = j + 1; l < 3; ++l) {
        scross += e[j] * e[l];
        npair += 1.0;
      }
  }
  CHECK(sx / nx == doctest::Approx(0.5).epsilon(0.01));
  CHECK(sxx / nx - std::pow(sx / nx, 2) == doctest::Approx(1.0 / 12.0).epsilon(0.01));
  const double var = see / ne;
  CHECK(var == doctest::Approx(c.error_var).epsilon(0.02));
  CHECK(std::abs(scross / npair / var - c.rho) < 0.02);

  c.rho = 0.8;
  const auto d8 = generate_dataset(c, 23);
  double s2 = 0.0, sc = 0.0;
  for (const auto& s : d8.subjects) {
    const Eigen::VectorXd e = errors_of(s, c);
    s2 += e.squaredNorm() / 3.0;
    sc += (e[0] * e[1] + e[0] * e[2] + e[1] * e[2]) / 3.0;
  }
  CHECK(std::abs(sc / s2 - 0.8) < 0.02);
}

TEST_CASE("tau moves the interaction curve along the power family") {
  SimConfig c = small_config(200, 4, 1);
  for (double tau : {0.0, 0.5, 1.0}) {
    c.tau = tau;
    const auto d = generate_dataset(c, 29);
    // Same seed: same covariates and errors, so the recomputed errors match across tau.
    const auto ref = generate_dataset(small_config(200, 4, 1), 29);
    for (std::size_t i = 0; i < d.subjects.size(); i += 37) {
      const Eigen::VectorXd e = errors_of(d.subjects[i], c);
      const Eigen::VectorXd e_ref = errors_of(ref.subjects[i], small_config(200, 4, 1));
      CHECK((e - e_ref).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("same seed gives identical datasets, different seeds differ") {
  const SimConfig c = small_config(30, 4, 1);
  const auto a = generate_dataset(c, 5), b = generate_dataset(c, 5), other = generate_dataset(c, 6);
  REQUIRE(a.subjects.size() == b.subjects.size());
  for (std::size_t i = 0; i < a.subjects.size(); ++i) {
    CHECK(a.subjects[i].g == b.subjects[i].g);
    CHECK(a.subjects[i].x == b.subjects[i].x);
    CHECK(a.subjects[i].y == b.subjects[i].y);
  }
  CHECK(a.subjects[0].y != other.subjects[0].y);
  std::ostringstream sa, sb;
  write_dataset_tsv(sa, a);
  write_dataset_tsv(sb, b);
  CHECK(sa.str() == sb.str());
  CHECK(sa.str().rfind("subject_id\ttime\ty\tg\tx1\tx2\tx3\n", 0) == 0);
}

TEST_CASE("config validation") {
  SimConfig c;
  CHECK_NOTHROW(c.validate());
  c.p_a = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.p_a = 0.51;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.p_a = 0.5;
  CHECK_NOTHROW(c.validate());
  c.rho = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.rho = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.reps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.tau_grid.clear();
  CHECK_THROWS_AS(power_study(c, pinned(2, 1), {}), ConfigError);
}

TEST_CASE("estimation study is reproducible and summarizes its records") {
  const SimConfig c = small_config(80, 5, 6);
  const StudyFit p = pinned(2, 1);
  const EstimationTable a = estimation_study(c, p);
  const EstimationTable b = estimation_study(c, p);
  CHECK(to_tsv(write_estimation_tsv, a) == to_tsv(write_estimation_tsv, b));
  REQUIRE(a.rows.size() == 6);
  REQUIRE(a.records.size() == 6);
  CHECK(a.n_ok + a.n_failed == c.reps);
  REQUIRE(a.n_ok >= 2);

  Eigen::VectorXd truth(6);
  truth << SimTruth::beta0(), SimTruth::beta1();
  for (int j = 0; j < 6; ++j) {
    double sum = 0.0, se = 0.0, cover = 0.0, n = 0.0;
    for (const auto& r : a.records) {
      if (!r.ok) continue;
      sum += r.beta[j];
      se += r.se[j];
      cover += std::abs(r.beta[j] - truth[j]) <= 1.96 * r.se[j];
      n += 1.0;
    }
    double ss = 0.0;
    for (const auto& r : a.records)
      if (r.ok) ss += std::pow(r.beta[j] - sum / n, 2);
    const ParamRow& row = a.rows[j];
    CHECK(row.truth == truth[j]);
    CHECK(row.bias == doctest::Approx(sum / n - truth[j]).epsilon(1e-12));
    CHECK(row.sd == doctest::Approx(std::sqrt(ss / (n - 1))).epsilon(1e-12));
    CHECK(row.se == doctest::Approx(se / n).epsilon(1e-12));
    CHECK(row.cp == doctest::Approx(cover / n).epsilon(1e-12));
    CHECK(std::abs(row.bias) < 0.05);
  }
  CHECK(a.rows[0].name == "beta01");
  CHECK(a.rows[5].name == "beta13");
  const std::string tsv = to_tsv(write_estimation_tsv, a);
  CHECK(tsv.rfind("Param\tTrue\tBias\tSD\tSE\tCP\n", 0) == 0);
}

TEST_CASE("doubling the error variance scales SD by about sqrt(2)") {
  SimConfig c = small_config(100, 5, 60);
  const StudyFit p = pinned(2, 1);
  const EstimationTable lo = estimation_study(c, p);
  c.error_var *= 2.0;
  const EstimationTable hi = estimation_study(c, p);
  double s_lo = 0.0, s_hi = 0.0;
  for (int j = 0; j < 6; ++j) {
    s_lo += lo.rows[j].sd;
    s_hi += hi.rows[j].sd;
  }
  const double ratio = s_hi / s_lo;
  MESSAGE("pooled SD ratio " << ratio);
  CHECK(ratio > std::sqrt(2.0) * 0.75);
  CHECK(ratio < std::sqrt(2.0) * 1.25);
}

TEST_CASE("curve study on a small design") {
  const SimConfig c = small_config(120, 5, 4);
  const StudyFit p = pinned(2, 1);
  const CurveStudy a = curve_recovery_study(c, p, 51);
  const CurveStudy b = curve_recovery_study(c, p, 51);
  CHECK(to_tsv(write_curve_tsv, a.m1) == to_tsv(write_curve_tsv, b.m1));
  CHECK(a.n_ok + a.n_failed == c.reps);
  REQUIRE(a.m0.u.size() == 51);
  REQUIRE(a.m1.u.size() == 51);
  CHECK(a.m1.u.front() == doctest::Approx(SimTruth::lower()).epsilon(1e-12));
  CHECK(a.m1.u.back() == doctest::Approx(SimTruth::upper()).epsilon(1e-12));
  for (std::size_t i = 0; i < a.m1.u.size(); ++i) {
    CHECK(a.m1.truth[i] == doctest::Approx(SimTruth::m1(a.m1.u[i])).epsilon(1e-14));
    CHECK(a.m0.truth[i] == doctest::Approx(SimTruth::m0(a.m0.u[i])).epsilon(1e-14));
    CHECK(a.m1.lower[i] <= a.m1.upper[i]);
  }
  CHECK(a.m0.mise >= 0.0);
  CHECK(a.m1.mise >= 0.0);
  CHECK(a.m0.mise < 0.05);
  CHECK(a.m1.mise < 0.2);
  CHECK_THROWS_AS(curve_recovery_study(c, p, 1), ConfigError);
  CHECK(to_tsv(write_curve_tsv, a.m0).rfind("u\ttruth\tmean_estimate\tband_lo\tband_hi\n", 0) == 0);
}

TEST_CASE("power study: level one rejects always, and runs are reproducible") {
  SimConfig c = small_config(60, 5, 4);
  c.tau_grid = {0.0, 1.0};
  c.alpha = 1.0;
  LrtOptions lrt;
  lrt.null_draws = 200;
  const auto rows = power_study(c, pinned(2, 1), lrt);
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(r.n_ok + r.n_failed == c.reps);
    REQUIRE(r.n_ok > 0);
    CHECK(r.rate == 1.0);
    CHECK(r.mc_se == 0.0);
  }
  c.alpha = 0.05;
  const auto x = power_study(c, pinned(2, 1), lrt);
  const auto y = power_study(c, pinned(2, 1), lrt);
  CHECK(to_tsv(write_power_tsv, x) == to_tsv(write_power_tsv, y));
  CHECK(to_tsv(write_power_tsv, x).rfind("tau\trejection_rate\tmc_se\tn_ok\tn_failed\tn_unconverged\n", 0) == 0);
}
