#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "fvicm/dataset.hpp"
#include "fvicm/qif_engine.hpp"
#include "fvicm/spline_basis.hpp"
#include "fvicm/theta.hpp"

namespace fvicm {

struct FitConfig {
  int degree = 3;     // spline degree q, shared by both index functions
  int num_knots = 3;  // K per index function
  double lambda = 0.0;
  BasisKind basis = BasisKind::exchangeable;
  int max_outer_iters = 200;
  int max_inner_iters = 50;
  double tol_theta = 1e-6;  // sup-norm change of theta between outer iterations
  double tol_obj = 1e-8;    // relative change of the objective
  int step_halving_max = 20;
  bool recompute_knots = true;  // re-place knots from the current index range each outer iteration
  bool accelerate = true;        // Anderson extrapolation across outer iterations
  int accel_depth = 5;
  bool joint_step = true;        // finish each outer iteration with a Newton step over all of theta*
  std::uint64_t seed = 0;       // carried for provenance; the fit itself is deterministic
  Execution execution = Execution::parallel;

  void validate() const;
};

struct CurveGrid {
  std::vector<double> u, estimate, lower, upper;
};

/// Objective at the start and end of one outer iteration, both at that
/// iteration's knots.
struct IterationRecord {
  double objective_start = 0.0;
  double objective_end = 0.0;
  double theta_change = 0.0;
};

struct FitResult {
  ThetaFull theta_hat;
  ThetaFree theta_free_hat;
  BasisSpec spec0, spec1;
  double lambda = 0.0;
  BasisKind basis = BasisKind::exchangeable;

  Eigen::MatrixXd acov;       // over theta, already divided by N
  Eigen::MatrixXd acov_free;  // over theta*
  Eigen::VectorXd se;
  Eigen::VectorXd se_free;
  bool acov_pseudo_inverse = false;
  Eigen::MatrixXd information;  // G' C^-1 G over theta*

  double q_at_hat = 0.0;
  double objective = 0.0;
  double scale = 1.0;  // pooled residual variance used in A_i
  bool converged = false;
  bool regularized = false;
  int iterations = 0;
  int damping_failures = 0;  // outer steps that no step length made non-increasing
  int num_subjects = 0;
  int num_moments = 0;       // r
  int moment_rank = 0;       // numerical rank of C_N at the estimate, at most r
  int num_free_params = 0;   // k
  std::vector<IterationRecord> history;

  double u0_min = 0.0, u0_max = 0.0, u1_min = 0.0, u1_max = 0.0;
  CurveGrid curve0, curve1;
};

/// Knots for both indices evenly spaced over the index ranges at the given betas.
std::pair<BasisSpec, BasisSpec> specs_at(const LongitudinalDataset& data, const Eigen::VectorXd& beta0,
                                         const Eigen::VectorXd& beta1, int degree, int num_knots);

/// Starting value: betas at (1,...,1)/sqrt(p), gammas from a ridge
/// least-squares fit of y on [B(u0), G B(u1)].
ThetaFull initialize(const LongitudinalDataset& data, const BasisSpec& spec0, const BasisSpec& spec1);

FitResult fit(const LongitudinalDataset& data, const FitConfig& config);

/// Same algorithm started from a given theta (knots re-placed from it).
FitResult fit_from(const LongitudinalDataset& data, const FitConfig& config, const ThetaFull& start);

struct Covariance {
  Eigen::MatrixXd acov, acov_free, information;
  Eigen::VectorXd se, se_free;
  bool pseudo_inverse = false;
};

/// J (G' C^-1 G)^-1 J' / N at theta.
Covariance asymptotic_covariance(const QifModel& model, const ThetaFree& theta);

struct GridPolicy {
  int num_points = 201;
  std::optional<std::pair<double, double>> range0, range1;  // default: observed index ranges
};

/// m_l(u) = B(u)' gamma_l with pointwise 1.96-sigma bands from the gamma block
/// of the covariance (betas held fixed).
std::pair<CurveGrid, CurveGrid> eval_curves(const FitResult& fit, const GridPolicy& policy = {});

/// Mean of (y - mu)^2 over all observations.
double in_sample_mse(const FitResult& fit, const LongitudinalDataset& data);

}  // namespace fvicm
