#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fvicm/dataset.hpp"
#include "fvicm/errors.hpp"
#include "fvicm/fvicm_fit.hpp"
#include "fvicm/lmm_lrt.hpp"
#include "fvicm/model_select.hpp"

namespace fvicm {

/// x_std = (x - offset) / scale. A constant column keeps scale 1.
struct AffineMap {
  double offset = 0.0;
  double scale = 1.0;

  double forward(double x) const { return (x - offset) / scale; }
  double inverse(double s) const { return offset + scale * s; }
};

struct IngestOptions {
  bool standardize = true;  // min-max each covariate to [0, 1]
  std::string time_column = "time";
  char delimiter = '\0';  // '\0' picks tab if the header has one, else comma
};

struct IngestedData {
  LongitudinalDataset data;
  std::vector<std::string> covariate_names;  // x1..xp in column order
  std::vector<AffineMap> maps;                // identity maps when not standardized
  bool standardized = false;
};

/// Parses a delimited table with header: subject_id, y, g, x1..xp and an
/// optional time column. Rows are grouped by subject in first-appearance
/// order, then sorted by time within a subject when the column exists.
IngestedData ingest(const std::filesystem::path& path, const IngestOptions& options = {});
IngestedData ingest_stream(std::istream& in, const IngestOptions& options = {}, const std::string& source = "<stream>");

/// Covariates mapped back to original scales.
Eigen::MatrixXd destandardize(const Eigen::MatrixXd& x_std, const std::vector<AffineMap>& maps);

enum class LambdaMode { gcv, fixed };

struct RunConfig {
  std::vector<int> degrees{1, 2, 3};
  std::vector<int> knot_counts{0, 1, 2, 3};
  bool select = true;  // false fits degrees[0], knot_counts[0] directly
  LambdaMode lambda_mode = LambdaMode::gcv;
  double lambda = 0.0;  // used when lambda_mode is fixed
  double lambda_lo = 1e-8;
  double lambda_hi = 1e2;
  BasisKind basis = BasisKind::exchangeable;
  bool run_test = true;
  int null_draws = 2000;
  std::uint64_t seed = 1;
  bool standardize = true;
  int grid_points = 201;
  std::string output_dir = "fvicm_out";

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

/// Unknown keys are rejected. Missing keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

struct ParamReport {
  std::string name;
  double estimate = 0.0;
  double se = 0.0;
  double z = 0.0;
  double p_value = 1.0;  // two-sided Wald, NaN when se is zero
};

struct AnalysisReport {
  FitResult fit;
  std::optional<SelectionReport> selection;
  std::vector<ParamReport> params;
  double mse = 0.0;
  std::optional<LrtResult> test;
  std::vector<std::string> covariate_names;
  std::vector<AffineMap> maps;
};

/// Two-sided Wald p-values for every entry of theta.
std::vector<ParamReport> wald_table(const FitResult& fit, const std::vector<std::string>& covariate_names);

/// Selection (or a direct fit), the linearity test when enabled, and the
/// in-sample MSE. Writes nothing.
AnalysisReport analyze(const IngestedData& input, const RunConfig& config);

/// Writes the fixed-name report set into config.output_dir:
/// fit_summary.tsv, curve_m0.tsv, curve_m1.tsv, linearity_test.tsv,
/// selection.tsv and summary.json.
void write_reports(const AnalysisReport& report, const RunConfig& config);

AnalysisReport run_analysis(const IngestedData& input, const RunConfig& config);

nlohmann::json report_to_json(const AnalysisReport& report, const RunConfig& config);

/// theta_hat as written to summary.json, flat (beta0, beta1, gamma0, gamma1).
Eigen::VectorXd read_summary_theta(const std::filesystem::path& summary_json);

/// CLI exit code for a library error: 2 input/config, 3 numerical or
/// convergence, 1 otherwise.
int exit_code_for(ErrorKind kind);

}  // namespace fvicm
