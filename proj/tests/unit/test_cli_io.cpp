#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "fvicm/cli_io.hpp"
#include "fvicm/sim_harness.hpp"

using namespace fvicm;
namespace fs = std::filesystem;

namespace {

IngestedData parse(const std::string& text, IngestOptions opt = {}) {
  std::istringstream in(text);
  return ingest_stream(in, opt, "t.tsv");
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const InputError& e) {
    return e.what();
  }
  return "";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("fvicm_test_cli_io_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

/// Covariates in [0, 1] with every column hitting 0 and 1 exactly.
LongitudinalDataset unit_box_dataset(int n, int t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  LongitudinalDataset d;
  d.p = 3;
  for (int i = 0; i < n; ++i) {
    Subject s;
    s.id = "id" + std::to_string(i);
    const double v = unif(rng);
    s.g = v < 0.09 ? 2 : (v < 0.51 ? 1 : 0);
    s.x.resize(t, 3);
    for (int j = 0; j < t; ++j)
      for (int k = 0; k < 3; ++k) s.x(j, k) = unif(rng);
    s.y = Eigen::VectorXd::Zero(t);
    d.subjects.push_back(std::move(s));
  }
  d.subjects[0].x.row(0).setZero();
  d.subjects[0].x.row(1).setOnes();
  return d;
}

/// Noiseless response that the degree-2 basis without knots spans exactly.
void quadratic_response(LongitudinalDataset& d) {
  const Eigen::Vector3d b0 = Eigen::Vector3d(3.0, 2.0, 1.0).normalized();
  const Eigen::Vector3d b1 = Eigen::Vector3d(1.0, 2.0, 2.0).normalized();
  for (auto& s : d.subjects)
    for (int j = 0; j < s.num_obs(); ++j) {
      const double u0 = s.x.row(j).dot(b0), u1 = s.x.row(j).dot(b1);
      s.y[j] = 1.0 - u0 + 0.5 * u0 * u0 + s.g * (0.3 + 0.8 * u1);
    }
}

std::string to_tsv(const LongitudinalDataset& d) {
  std::ostringstream os;
  write_dataset_tsv(os, d);
  return os.str();
}

RunConfig direct_config(int q, int k, const std::string& out) {
  RunConfig c;
  c.degrees = {q};
  c.knot_counts = {k};
  c.select = false;
  c.lambda_mode = LambdaMode::fixed;
  c.lambda = 0.0;
  c.output_dir = out;
  return c;
}

}  // namespace

TEST_CASE("two rows of one subject") {
  const auto in = parse("subject_id\ty\tg\tx1\tx2\na\t1.5\t1\t0.2\t3\na\t2.5\t1\t0.4\t5\n", {.standardize = false});
  REQUIRE(in.data.num_subjects() == 1);
  CHECK(in.data.subjects[0].num_obs() == 2);
  CHECK(in.data.p == 2);
  CHECK(in.data.subjects[0].g == 1);
  CHECK(in.data.subjects[0].y[1] == 2.5);
  CHECK(in.data.subjects[0].x(1, 1) == 5.0);
  CHECK(in.covariate_names == std::vector<std::string>{"x1", "x2"});
}

TEST_CASE("rows group by subject in first-appearance order and sort by time") {
  const std::string text =
      "subject_id,time,y,g,x1,x2\n"
      "b,2,20,0,1,1\n"
      "a,1,1,2,0,0\n"
      "b,1,10,0,2,2\n"
      "a,3,3,2,0,0\n"
      "a,2,2,2,0,0\n";
  const auto in = parse(text, {.standardize = false});
  REQUIRE(in.data.num_subjects() == 2);
  CHECK(in.data.subjects[0].id == "b");
  CHECK(in.data.subjects[1].id == "a");
  CHECK(in.data.subjects[0].y == Eigen::Vector2d(10, 20));
  CHECK(in.data.subjects[1].y == Eigen::Vector3d(1, 2, 3));
  CHECK(in.data.subjects[0].x(0, 0) == 2.0);

  // Without the time column, file order within each subject is kept.
  const auto plain = parse("subject_id\ty\tg\tx1\tx2\nb\t2\t0\t1\t1\nb\t1\t0\t1\t1\n", {.standardize = false});
  CHECK(plain.data.subjects[0].y == Eigen::Vector2d(2, 1));
}

TEST_CASE("min-max standardization round-trips") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n01;
  std::ostringstream os;
  os << "subject_id\ty\tg\tx1\tx2\tx3\n";
  os.precision(17);
  Eigen::MatrixXd raw(40, 3);
  for (int r = 0; r < 40; ++r) {
    raw.row(r) << 50.0 + 10.0 * n01(rng), 1e-3 * n01(rng), -7.0 + n01(rng);
    os << "s" << r / 4 << '\t' << n01(rng) << '\t' << (r / 4) % 3 << '\t' << raw(r, 0) << '\t' << raw(r, 1) << '\t'
       << raw(r, 2) << '\n';
  }
  const auto in = parse(os.str());
  REQUIRE(in.standardized);
  Eigen::MatrixXd stacked(40, 3);
  int at = 0;
  for (const auto& s : in.data.subjects)
    for (int j = 0; j < s.num_obs(); ++j) stacked.row(at++) = s.x.row(j);
  for (int k = 0; k < 3; ++k) {
    CHECK(stacked.col(k).minCoeff() == doctest::Approx(0.0));
    CHECK(stacked.col(k).maxCoeff() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(in.maps[k].offset == raw.col(k).minCoeff());
    CHECK(in.maps[k].scale == doctest::Approx(raw.col(k).maxCoeff() - raw.col(k).minCoeff()).epsilon(1e-15));
  }
  const Eigen::MatrixXd back = destandardize(stacked, in.maps);
  for (int r = 0; r < 40; ++r)
    for (int k = 0; k < 3; ++k) CHECK(std::abs(back(r, k) - raw(r, k)) <= 1e-12 * std::max(1.0, std::abs(raw(r, k))));

  // A constant column keeps scale 1.
  const auto flat = parse("subject_id\ty\tg\tx1\tx2\na\t1\t0\t4\t1\na\t2\t0\t4\t2\n");
  CHECK(flat.maps[0].scale == 1.0);
  CHECK(flat.data.subjects[0].x(0, 0) == 0.0);
}

TEST_CASE("ingest errors name the row, column or subject") {
  std::string e = error_of("subject_id\ty\tg\tx1\tx2\na\t1\t1\t0.1\t0.2\na\t2\t2\t0.3\t0.4\n");
  CHECK(e.find("'a'") != std::string::npos);
  CHECK(e.find("non-constant g") != std::string::npos);

  e = error_of("subject_id\ty\tg\tx1\tx2\na\t1\t1\t0.1\tabc\n");
  CHECK(e.find("row 2") != std::string::npos);
  CHECK(e.find("'x2'") != std::string::npos);
  CHECK(e.find("abc") != std::string::npos);

  e = error_of("subject_id\ty\tg\tx1\tx2\na\t1\t3\t0.1\t0.2\n");
  CHECK(e.find("column 'g'") != std::string::npos);

  e = error_of("subject_id\ty\tg\tx1\tx2\na\t\t1\t0.1\t0.2\n");
  CHECK(e.find("column 'y'") != std::string::npos);

  e = error_of("subject_id\tg\tx1\tx2\na\t1\t0.1\t0.2\n");
  CHECK(e.find("missing column 'y'") != std::string::npos);

  e = error_of("subject_id\ty\tg\tx1\na\t1\t1\t0.1\n");
  CHECK(e.find("two covariate") != std::string::npos);

  e = error_of("subject_id\ty\tg\tx1\tx2\na\t1\t1\t0.1\n");
  CHECK(e.find("row 2") != std::string::npos);

  e = error_of("subject_id\ty\tg\tx1\tx2\n");
  CHECK(e.find("no data rows") != std::string::npos);

  CHECK_THROWS_AS(ingest("/nonexistent/file.tsv"), InputError);
}

TEST_CASE("run config parsing and validation") {
  const RunConfig d;
  CHECK_NOTHROW(d.validate());
  const RunConfig back = run_config_from_json(run_config_to_json(d));
  CHECK(run_config_to_json(back) == run_config_to_json(d));

  const auto j = nlohmann::json::parse(R"({"degrees":[2],"knots":[1,2],"lambda":0.01,"test":false,"seed":9})");
  const RunConfig c = run_config_from_json(j);
  CHECK(c.degrees == std::vector<int>{2});
  CHECK(c.knot_counts == std::vector<int>{1, 2});
  CHECK(c.lambda_mode == LambdaMode::fixed);
  CHECK(c.lambda == 0.01);
  CHECK_FALSE(c.run_test);
  CHECK(c.seed == 9);
  CHECK(run_config_from_json(nlohmann::json::parse(R"({"lambda":"gcv"})")).lambda_mode == LambdaMode::gcv);

  auto message = [](const char* text) {
    try {
      run_config_from_json(nlohmann::json::parse(text));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message(R"({"nonsense":1})").find("nonsense") != std::string::npos);
  CHECK(message(R"({"degrees":[0]})").find("degrees") != std::string::npos);
  CHECK(message(R"({"knots":[-1]})").find("knots") != std::string::npos);
  CHECK(message(R"({"lambda":-1})").find("lambda") != std::string::npos);
  CHECK(message(R"({"lambda":"bic"})").find("lambda") != std::string::npos);
  CHECK(message(R"({"lambda_range":[1, 0.5]})").find("lambda_range") != std::string::npos);
  CHECK(message(R"({"null_draws":0})").find("null_draws") != std::string::npos);
  CHECK(message(R"({"degrees":"two"})").find("run config") != std::string::npos);
  CHECK(message(R"([1,2])").find("object") != std::string::npos);

  CHECK(exit_code_for(ErrorKind::input) == 2);
  CHECK(exit_code_for(ErrorKind::config) == 2);
  CHECK(exit_code_for(ErrorKind::numerical) == 3);
  CHECK(exit_code_for(ErrorKind::convergence) == 3);
}

TEST_CASE("noiseless data give a vanishing in-sample MSE") {
  LongitudinalDataset d = unit_box_dataset(60, 5, 11);
  quadratic_response(d);
  std::istringstream in(to_tsv(d));
  const IngestedData data = ingest_stream(in, {.standardize = false});
  RunConfig c = direct_config(2, 0, "unused");
  c.run_test = false;
  const AnalysisReport rep = analyze(data, c);
  CHECK(rep.fit.converged);
  CHECK(rep.mse < 1e-8);
}

TEST_CASE("reports round-trip and are byte-identical across reruns") {
  const fs::path dir = scratch_dir("reports");
  SimConfig sc;
  sc.n_subjects = 60;
  sc.n_times = 5;
  std::istringstream in(to_tsv(generate_dataset(sc, 3)));
  const IngestedData data = ingest_stream(in);

  RunConfig c = direct_config(2, 1, (dir / "a").string());
  c.null_draws = 200;
  const AnalysisReport rep = run_analysis(data, c);
  REQUIRE(rep.test.has_value());
  for (const char* f : {"fit_summary.tsv", "fit_stats.tsv", "curve_m0.tsv", "curve_m1.tsv", "linearity_test.tsv",
                        "summary.json"})
    CHECK(fs::exists(dir / "a" / f));
  CHECK_FALSE(fs::exists(dir / "a" / "selection.tsv"));

  const Eigen::VectorXd theta = read_summary_theta(dir / "a" / "summary.json");
  CHECK(theta == rep.fit.theta_hat.flat());

  const auto summary = nlohmann::json::parse(slurp(dir / "a" / "summary.json"));
  CHECK(summary["linearity_test"]["status"] == "done");
  CHECK(summary["linearity_test"]["p_value"].get<double>() == rep.test->p_value);
  CHECK(summary["fit"]["mse"].get<double>() == rep.mse);
  CHECK(summary["params"].size() == static_cast<std::size_t>(rep.fit.theta_hat.flat().size()));
  CHECK(summary["params"][0]["name"] == "beta0_x1");

  // Rerun into the same directory: the config, including output_dir, is part of summary.json.
  fs::rename(dir / "a", dir / "first");
  run_analysis(data, c);
  for (const char* f : {"fit_summary.tsv", "fit_stats.tsv", "curve_m0.tsv", "curve_m1.tsv", "linearity_test.tsv",
                        "summary.json"}) {
    CHECK_MESSAGE(slurp(dir / "first" / f) == slurp(dir / "a" / f), f);
  }

  // A selection run also writes the candidate table.
  RunConfig s = c;
  s.select = true;
  s.degrees = {1, 2};
  s.knot_counts = {0, 1};
  s.run_test = false;
  s.output_dir = (dir / "s").string();
  const AnalysisReport sel = run_analysis(data, s);
  REQUIRE(sel.selection.has_value());
  const std::string table = slurp(dir / "s" / "selection.tsv");
  CHECK(table.rfind("degree\tknots\tlambda\tq\tk\tr\trank\tbic\tgof_p\tconverged\tchosen\n", 0) == 0);
  CHECK(std::count(table.begin(), table.end(), '\n') == 5);
  CHECK(slurp(dir / "s" / "linearity_test.tsv").find("disabled") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("wald table") {
  SimConfig sc;
  sc.n_subjects = 60;
  sc.n_times = 5;
  FitConfig fc;
  fc.degree = 2;
  fc.num_knots = 1;
  const FitResult f = fit(generate_dataset(sc, 13), fc);
  const auto rows = wald_table(f, {"age", "dose", "bmi"});
  REQUIRE(rows.size() == static_cast<std::size_t>(f.theta_hat.flat().size()));
  CHECK(rows[0].name == "beta0_age");
  CHECK(rows[5].name == "beta1_bmi");
  CHECK(rows[6].name == "gamma0_0");
  for (const auto& r : rows) {
    if (!(r.se > 0.0)) continue;
    CHECK(r.z == doctest::Approx(r.estimate / r.se));
    CHECK(r.p_value == doctest::Approx(std::erfc(std::abs(r.z) / std::sqrt(2.0))).epsilon(1e-10));
  }
}

TEST_CASE("standardization leaves fitted means unchanged up to relabeling the index axis") {
  // Noiseless, so both fits reach the truth and the comparison is exact up to rounding.
  LongitudinalDataset d = unit_box_dataset(80, 5, 17);
  quadratic_response(d);
  // Same affine map on every column: x' = 2 + 3 x.
  LongitudinalDataset shifted = d;
  for (auto& s : shifted.subjects) s.x = (3.0 * s.x.array() + 2.0).matrix();

  std::istringstream a_in(to_tsv(shifted)), b_in(to_tsv(shifted));
  const IngestedData std_in = ingest_stream(a_in);
  const IngestedData raw_in = ingest_stream(b_in, {.standardize = false});
  for (const auto& m : std_in.maps) {
    CHECK(m.offset == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(m.scale == doctest::Approx(3.0).epsilon(1e-14));
  }

  RunConfig c = direct_config(2, 1, "unused");
  c.run_test = false;
  c.grid_points = 11;
  const AnalysisReport on_std = analyze(std_in, c);
  const AnalysisReport on_raw = analyze(raw_in, c);
  REQUIRE(on_std.fit.converged);
  REQUIRE(on_raw.fit.converged);
  CHECK((on_std.fit.theta_hat.beta0 - on_raw.fit.theta_hat.beta0).cwiseAbs().maxCoeff() < 1e-5);
  CHECK((on_std.fit.theta_hat.beta1 - on_raw.fit.theta_hat.beta1).cwiseAbs().maxCoeff() < 1e-5);
  CHECK(on_std.mse < 1e-8);
  CHECK(on_raw.mse < 1e-8);
  // u' = 3 u + 2 sum(beta), so the curves agree at corresponding grid points.
  const auto& c_std = on_std.fit.curve1;
  const auto& c_raw = on_raw.fit.curve1;
  REQUIRE(c_std.u.size() == c_raw.u.size());
  const double shift = 2.0 * on_std.fit.theta_hat.beta1.sum();
  for (std::size_t i = 0; i < c_std.u.size(); ++i) {
    CHECK(c_raw.u[i] == doctest::Approx(3.0 * c_std.u[i] + shift).epsilon(1e-5));
    CHECK(c_raw.estimate[i] == doctest::Approx(c_std.estimate[i]).epsilon(1e-5));
  }
}

TEST_CASE("linearity p-values on linear-m1 data rarely fall below 0.05") {
  SimConfig sc;
  sc.n_subjects = 100;
  sc.n_times = 5;
  sc.tau = 0.0;
  RunConfig c = direct_config(2, 1, "unused");
  c.null_draws = 500;
  int low = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::istringstream in(to_tsv(generate_dataset(sc, seed)));
    c.seed = seed;
    const AnalysisReport rep = analyze(ingest_stream(in), c);
    REQUIRE(rep.test.has_value());
    low += rep.test->p_value < 0.05;
  }
  MESSAGE(low << " of 20 p-values below 0.05");
  CHECK(low <= 3);
}
