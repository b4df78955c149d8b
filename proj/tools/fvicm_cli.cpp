#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "fvicm/cli_io.hpp"
#include "fvicm/errors.hpp"
#include "fvicm/sim_harness.hpp"

namespace {

struct AnalysisFlags {
  std::string input;
  std::string config;
  std::optional<std::string> out;
  std::optional<std::vector<int>> degrees, knots;
  std::optional<std::string> lambda;
  std::optional<std::string> basis;
  std::optional<std::uint64_t> seed;
  std::optional<int> null_draws;
  std::optional<int> grid_points;
  bool no_select = false;
  bool no_standardize = false;
};

void add_analysis_flags(CLI::App* cmd, AnalysisFlags& f, bool with_test) {
  cmd->add_option("-i,--input", f.input, "Delimited data file (subject_id, y, g, x1..xp[, time])")->required();
  cmd->add_option("-c,--config", f.config, "JSON run config");
  cmd->add_option("-o,--out", f.out, "Output directory");
  cmd->add_option("--degrees", f.degrees, "Candidate spline degrees");
  cmd->add_option("--knots", f.knots, "Candidate knot counts");
  cmd->add_option("--lambda", f.lambda, "Penalty: 'gcv' or a fixed value");
  cmd->add_option("--basis", f.basis, "Working-correlation basis: exchangeable, ar1, identity")
      ->check(CLI::IsMember({"exchangeable", "ar1", "identity"}));
  cmd->add_option("--seed", f.seed, "Root seed");
  cmd->add_option("--grid-points", f.grid_points, "Points per curve grid");
  cmd->add_flag("--no-select", f.no_select, "Fit the first degree and knot count without BIC selection");
  cmd->add_flag("--no-standardize", f.no_standardize, "Keep covariates on their original scales");
  if (with_test) cmd->add_option("--null-draws", f.null_draws, "Spectral null draws");
}

fvicm::RunConfig resolve_config(const AnalysisFlags& f, bool run_test) {
  fvicm::RunConfig c = f.config.empty() ? fvicm::RunConfig{} : fvicm::load_run_config(f.config);
  if (f.out) c.output_dir = *f.out;
  if (f.degrees) c.degrees = *f.degrees;
  if (f.knots) c.knot_counts = *f.knots;
  if (f.lambda) {
    if (*f.lambda == "gcv") {
      c.lambda_mode = fvicm::LambdaMode::gcv;
    } else {
      try {
        c.lambda = std::stod(*f.lambda);
      } catch (const std::exception&) {
        throw fvicm::ConfigError("--lambda: expected 'gcv' or a number, got '" + *f.lambda + "'");
      }
      c.lambda_mode = fvicm::LambdaMode::fixed;
    }
  }
  if (f.basis) c.basis = fvicm::parse_basis_kind(*f.basis);
  if (f.seed) c.seed = *f.seed;
  if (f.null_draws) c.null_draws = *f.null_draws;
  if (f.grid_points) c.grid_points = *f.grid_points;
  if (f.no_select) c.select = false;
  if (f.no_standardize) c.standardize = false;
  c.run_test = run_test;
  c.validate();
  return c;
}

int run_analysis_verb(const AnalysisFlags& f, bool run_test) {
  fvicm::RunConfig c = resolve_config(f, run_test);
  fvicm::IngestOptions io;
  io.standardize = c.standardize;
  fvicm::IngestedData input = fvicm::ingest(f.input, io);
  spdlog::info("{} subjects, {} observations, p = {}", input.data.num_subjects(), input.data.num_obs(), input.data.p);
  fvicm::AnalysisReport rep = fvicm::run_analysis(input, c);
  std::cout << "degree " << rep.fit.spec1.degree << ", knots " << rep.fit.spec1.num_knots() << ", lambda "
            << rep.fit.lambda << ", converged " << (rep.fit.converged ? "yes" : "no") << '\n';
  std::cout << "mse " << rep.mse << '\n';
  if (rep.test) std::cout << "linearity test: LRT " << rep.test->lrt_obs << ", p " << rep.test->p_value << '\n';
  std::cout << "reports written to " << c.output_dir << '\n';
  return 0;
}

struct SimFlags {
  fvicm::SimConfig sim;
  int degree = 3;
  int knots = 1;  // pilot choice for the default design
  double lambda = 0.0;
  bool reselect = false;
  std::string out = "-";
  int null_draws = 2000;
};

void add_sim_flags(CLI::App* cmd, SimFlags& f, bool fit_options) {
  cmd->add_option("--n", f.sim.n_subjects, "Subjects")->capture_default_str();
  cmd->add_option("--t", f.sim.n_times, "Repeated measures per subject")->capture_default_str();
  cmd->add_option("--pa", f.sim.p_a, "Minor allele frequency")->capture_default_str();
  cmd->add_option("--rho", f.sim.rho, "Exchangeable error correlation")->capture_default_str();
  cmd->add_option("--error-var", f.sim.error_var, "Error variance")->capture_default_str();
  cmd->add_option("--tau", f.sim.tau, "Nonlinearity of m1 (1 = sine, 0 = null line)")->capture_default_str();
  cmd->add_option("--seed", f.sim.seed, "Root seed")->capture_default_str();
  cmd->add_option("--null-line", f.sim.null_line, "Null line for tau < 1")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, fvicm::NullLine>{{"rising", fvicm::NullLine::rising},
                                                 {"projection", fvicm::NullLine::projection}}));
  if (fit_options) {
    cmd->add_option("--reps", f.sim.reps, "Replications")->capture_default_str();
    cmd->add_option("--degree", f.degree, "Spline degree")->capture_default_str();
    cmd->add_option("--knots", f.knots, "Interior knots")->capture_default_str();
    cmd->add_option("--lambda", f.lambda, "Penalty")->capture_default_str();
    cmd->add_flag("--reselect", f.reselect, "Select (q, K, lambda) per replication by BIC and GCV");
  }
  cmd->add_option("-o,--out", f.out, "Output file, or '-' for stdout")->capture_default_str();
}

fvicm::StudyFit study_policy(const SimFlags& f) {
  fvicm::StudyFit p;
  p.fit.degree = f.degree;
  p.fit.num_knots = f.knots;
  p.fit.lambda = f.lambda;
  p.fit.seed = f.sim.seed;
  if (f.reselect) p.reselect = fvicm::SelectionGrid{};
  return p;
}

template <class Fn>
void with_output(const std::string& path, Fn&& fn) {
  if (path == "-") {
    fn(std::cout);
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw fvicm::InputError("cannot write '" + path + "'");
  fn(os);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Functional varying index coefficient models for longitudinal gene-environment data"};
  app.require_subcommand(1);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Errors only");

  AnalysisFlags fit_flags, test_flags;
  auto* fit_cmd = app.add_subcommand("fit", "Select and fit a model, write the report set");
  add_analysis_flags(fit_cmd, fit_flags, false);
  auto* test_cmd = app.add_subcommand("test", "Fit plus the linearity test of m1");
  add_analysis_flags(test_cmd, test_flags, true);

  auto* sim_cmd = app.add_subcommand("simulate", "Simulated data and Monte Carlo studies");
  sim_cmd->require_subcommand(1);
  SimFlags data_flags, est_flags, curve_flags, power_flags;
  add_sim_flags(sim_cmd->add_subcommand("data", "Write one simulated dataset in the input format"), data_flags, false);
  add_sim_flags(sim_cmd->add_subcommand("estimation", "Bias, SD, SE and coverage of the index loadings"), est_flags,
                true);
  auto* curves_cmd = sim_cmd->add_subcommand("curves", "Mean curves, empirical bands and MISE");
  add_sim_flags(curves_cmd, curve_flags, true);
  std::string curve_which = "m1";
  curves_cmd->add_option("--curve", curve_which, "Which curve to write")
      ->check(CLI::IsMember({"m0", "m1"}))
      ->capture_default_str();

  auto* power_cmd = app.add_subcommand("power", "Rejection rate of the linearity test over a tau grid");
  add_sim_flags(power_cmd, power_flags, true);
  power_cmd->add_option("--taus", power_flags.sim.tau_grid, "Tau grid");
  power_cmd->add_option("--alpha", power_flags.sim.alpha, "Test level")->capture_default_str();
  power_cmd->add_option("--null-draws", power_flags.null_draws, "Spectral null draws per test")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error [usage]: %s\n", e.what());
    return 2;
  }
  spdlog::set_default_logger(spdlog::stderr_color_mt("fvicm"));
  spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::err : spdlog::level::info);

  try {
    if (*fit_cmd) return run_analysis_verb(fit_flags, false);
    if (*test_cmd) return run_analysis_verb(test_flags, true);
    if (sim_cmd->got_subcommand("data")) {
      data_flags.sim.validate();
      auto data = fvicm::generate_dataset(data_flags.sim, data_flags.sim.seed);
      with_output(data_flags.out, [&](std::ostream& os) { fvicm::write_dataset_tsv(os, data); });
      return 0;
    }
    if (sim_cmd->got_subcommand("estimation")) {
      auto table = fvicm::estimation_study(est_flags.sim, study_policy(est_flags));
      with_output(est_flags.out, [&](std::ostream& os) { fvicm::write_estimation_tsv(os, table); });
      spdlog::info("{} replications ok, {} failed", table.n_ok, table.n_failed);
      return 0;
    }
    if (sim_cmd->got_subcommand("curves")) {
      auto study = fvicm::curve_recovery_study(curve_flags.sim, study_policy(curve_flags));
      const auto& c = curve_which == "m0" ? study.m0 : study.m1;
      with_output(curve_flags.out, [&](std::ostream& os) { fvicm::write_curve_tsv(os, c); });
      spdlog::info("MISE m0 {:.6g}, m1 {:.6g} over {} replications", study.m0.mise, study.m1.mise, study.n_ok);
      return 0;
    }
    if (*power_cmd) {
      fvicm::LrtOptions lrt;
      lrt.null_draws = power_flags.null_draws;
      auto rows = fvicm::power_study(power_flags.sim, study_policy(power_flags), lrt);
      with_output(power_flags.out, [&](std::ostream& os) { fvicm::write_power_tsv(os, rows); });
      return 0;
    }
  } catch (const fvicm::Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", fvicm::to_string(e.kind()), e.what());
    return fvicm::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error [internal]: %s\n", e.what());
    return 1;
  }
  return 1;
}
