#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "fvicm/dataset.hpp"
#include "fvicm/fvicm_fit.hpp"
#include "fvicm/qif_engine.hpp"
#include "fvicm/spline_basis.hpp"

namespace fvicm {

/// Mixed-model form of the spline fit at frozen indices:
///   y = W0 g0 + W1 g1 + Z0 b0 + Z1 b1 + U a + e,
/// with W the polynomial columns, Z the truncated-power columns and U the
/// subject indicator. G multiplies every W1 and Z1 row.
struct LmmDesign {
  Eigen::MatrixXd w0, w1, z0, z1;
  Eigen::VectorXd y;
  std::vector<int> sizes;  // n_i in subject order
  int degree = 0;
  int num_knots = 0;

  int num_obs() const { return static_cast<int>(y.size()); }
  int num_subjects() const { return static_cast<int>(sizes.size()); }
  /// [W0 W1]
  Eigen::MatrixXd fixed_design() const;
};

LmmDesign build_lmm(const LongitudinalDataset& data, const Eigen::VectorXd& beta0, const Eigen::VectorXd& beta1,
                    const BasisSpec& spec0, const BasisSpec& spec1);
LmmDesign build_lmm(const FitResult& fit, const LongitudinalDataset& data);

struct VarianceComponents {
  double sigma2_a = 0.0;
  double sigma2_b0 = 0.0;
  double sigma2_b1 = 0.0;
  double sigma2_eps = 0.0;
};

struct RemlOptions {
  int max_iters = 5000;
  double simplex_tol = 1e-6;  // simplex size on the sqrt variance-ratio scale
};

struct RemlResult {
  VarianceComponents var;
  Eigen::Vector3d ratios = Eigen::Vector3d::Zero();  // (a, b0, b1) variances over sigma2_eps
  Eigen::VectorXd fixed;                              // (g0, g1)
  Eigen::VectorXd b0, b1, a;                          // BLUPs
  double neg2_reml = 0.0;                             // -2 restricted log-likelihood up to a constant
  int iterations = 0;
};

/// -2 REML (profiled over sigma2_eps, constant dropped) at the variance ratios.
double reml_criterion(const LmmDesign& design, const Eigen::VectorXd& y, const Eigen::Vector3d& ratios);

/// REML over ratios >= 0, then BLUPs from the mixed-model equations.
RemlResult reml_fit(const LmmDesign& design, const Eigen::VectorXd& y, const RemlOptions& options = {});

/// BLUPs and GLS fixed effects at given ratios.
RemlResult blups_at(const LmmDesign& design, const Eigen::VectorXd& y, const Eigen::Vector3d& ratios);

/// y - Z0 b0 - U a; with subtract_intercept false only Z0 b0 is removed.
Eigen::VectorXd pseudo_outcome(const LmmDesign& design, const Eigen::VectorXd& y, const RemlResult& reml,
                               bool subtract_intercept = true);

/// Single-component model y = X beta + Z b + e. The first `p_null` columns of X
/// span the null fixed effects; the remaining p' are tested with var(b).
struct ReducedDesign {
  Eigen::MatrixXd x, z;
  int p_null = 0;

  int num_obs() const { return static_cast<int>(x.rows()); }
  int p() const { return static_cast<int>(x.cols()); }
  int p_prime() const { return p() - p_null; }
  int num_random() const { return static_cast<int>(z.cols()); }
};

/// X = [W0, G, G u1 | G u1^2 ... G u1^q], Z = Z1.
ReducedDesign reduced_design(const LmmDesign& design);

/// Multiplies each subject block by (I + ratio 11')^{-1/2}, in place.
void whiten_intercept(const std::vector<int>& sizes, double ratio, Eigen::Ref<Eigen::MatrixXd> m);

/// How the subject random intercept is removed before the single-component test.
enum class InterceptHandling {
  subtract,  // y - U a_hat, the plain pseudo-outcome
  whiten,    // y - Z0 b0_hat, then rows whitened by the fitted intercept variance
};

struct LrtOptions {
  int grid_points = 100;
  double ratio_lo = 1e-6;
  double ratio_hi = 1e6;
  int refine_iters = 60;
  bool log_leading_term = true;  // false reproduces n (1 + U / W) without the log
  bool xi_in_logdet = true;      // eigenvalues of Z'Z in the determinant; false uses those of Z'P0Z
  InterceptHandling intercept = InterceptHandling::whiten;
  int null_draws = 2000;
  std::uint64_t seed = 0;
  Execution execution = Execution::parallel;
};

struct LrtProfile {
  double stat = 0.0;
  double ratio_hat = 0.0;  // argmax of the variance ratio
  bool at_upper = false;   // sup still at the upper end after one widening
};

/// sup over ratio >= 0 of n log(y'S0y) - n log(GLS RSS) - log|I + ratio ZZ'|.
LrtProfile lrt_statistic(const ReducedDesign& design, const Eigen::VectorXd& y, const LrtOptions& options = {});

struct NullSpectrum {
  Eigen::VectorXd mu;  // eigenvalues of Z'P0Z, P0 the residual projector of X
  Eigen::VectorXd xi;  // eigenvalues of Z'Z
  int n = 0;
  int p = 0;
  int p_prime = 0;
};

NullSpectrum null_spectrum(const ReducedDesign& design);

/// One draw from the spectral representation, from its own RNG stream.
double null_draw(const NullSpectrum& spec, std::uint64_t stream_seed, const LrtOptions& options);

/// `count` draws; draw j uses derive_seed(seed, j).
std::vector<double> simulate_null_serial(const NullSpectrum& spec, int count, std::uint64_t seed,
                                         const LrtOptions& options);
std::vector<double> simulate_null_parallel(const NullSpectrum& spec, int count, std::uint64_t seed,
                                           const LrtOptions& options);
std::vector<double> simulate_null(const NullSpectrum& spec, int count, std::uint64_t seed, const LrtOptions& options);

/// (1 + #{null >= obs}) / (1 + n_null).
double lrt_p_value(double obs, const std::vector<double>& null_samples);

struct LrtResult {
  double lrt_obs = 0.0;
  double ratio_hat = 0.0;
  std::vector<double> null_samples;
  double p_value = 1.0;
  VarianceComponents variances;
  double max_abs_b0 = 0.0;
  double max_abs_a = 0.0;
  int p_prime = 0;
  int num_random = 0;
  NullSpectrum spectrum;
};

/// Linearity of m1: H0 drops u1^2..u1^q from the G block and sets var(b1) = 0.
LrtResult linearity_test(const FitResult& fit, const LongitudinalDataset& data, const LrtOptions& options = {});

}  // namespace fvicm
