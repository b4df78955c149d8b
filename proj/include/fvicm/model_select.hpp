#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "fvicm/dataset.hpp"
#include "fvicm/fvicm_fit.hpp"

namespace fvicm {

struct SelectionGrid {
  std::vector<int> degrees{1, 2, 3};
  std::vector<int> knot_counts{0, 1, 2, 3, 4, 5};
  double lambda_lo = 1e-8;
  double lambda_hi = 1e2;
  int golden_max_iters = 40;
  double golden_tol = 1e-3;           // absolute, on ln(lambda)
  std::optional<double> fixed_lambda;  // skip GCV and use this value

  void validate() const;
};

/// Q + (h - 1) k ln N. With r = h k moment conditions this is Q + (r - k) ln N.
double bic(double q_at_hat, int k, int n, int h);

struct GofResult {
  double p_value = 1.0;
  int df = 0;
  bool saturated = false;  // r == k, no test available
};

/// P(chi2_{r-k} > Q).
GofResult gof_test(double q_at_hat, int r, int k);

/// tr[(Qdd + 2 N lambda D)^-1 Qdd], Qdd the Gauss-Newton Hessian of Q_N.
double effective_df(const Eigen::MatrixXd& qdd, const Eigen::VectorXd& d_free, double lambda, int n);

struct GcvPoint {
  double lambda = 0.0;
  double gcv = 0.0;
  double df = 0.0;
  double q = 0.0;
};

/// (Q / N) / (1 - df / N)^2 for a fitted model, Qdd = 2 N G' C^-1 G at the estimate.
GcvPoint gcv_at(const FitResult& fit, const LongitudinalDataset& data);

struct GcvSelection {
  double lambda_hat = 0.0;
  std::vector<GcvPoint> curve;  // every probed lambda, in probe order
  FitResult fit;                // refit at lambda_hat
};

/// Golden-section search on ln(lambda) over the bracket, refitting at each probe.
GcvSelection gcv_select(const LongitudinalDataset& data, const FitConfig& config, const SelectionGrid& grid);

struct Candidate {
  int degree = 0;
  int num_knots = 0;
  double lambda = 0.0;
  double q_at_hat = 0.0;
  int k = 0;
  int r = 0;
  int rank = 0;  // rank of C_N; the gof test uses rank - k degrees of freedom
  double bic = 0.0;
  GofResult gof;
  bool converged = false;
  std::vector<GcvPoint> gcv_curve;
};

struct SelectionReport {
  std::vector<Candidate> candidates;  // degree-major, knot count minor
  std::size_t chosen = 0;
  FitResult chosen_fit;

  const Candidate& best() const { return candidates.at(chosen); }
};

/// Index of the minimum BIC; ties go to smaller k, then smaller degree.
std::size_t argmin_bic(const std::vector<Candidate>& candidates);

/// For each (q, K): lambda by GCV (or the fixed value), then BIC at that lambda.
SelectionReport select_model(const LongitudinalDataset& data, const FitConfig& base, const SelectionGrid& grid);

}  // namespace fvicm
