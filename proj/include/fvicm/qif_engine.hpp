#pragma once

#include <vector>

#include <Eigen/Dense>

#include "fvicm/dataset.hpp"
#include "fvicm/qif_kernels.hpp"
#include "fvicm/spline_basis.hpp"
#include "fvicm/theta.hpp"

namespace fvicm {

/// Mean vector and its Jacobian in full coordinates, columns ordered
/// (beta0, beta1, gamma0, gamma1).
struct SubjectMean {
  Eigen::VectorXd mu;
  Eigen::MatrixXd mudot;
};

std::vector<SubjectMean> mean_and_jacobian(const ThetaFull& theta, const LongitudinalDataset& data,
                                           const BasisSpec& spec0, const BasisSpec& spec1);

/// Inverse of the moment covariance C_N with the relative ridge guard.
/// An all-zero C_N (every g_i zero) is kept as a degenerate weight whose
/// quadratic forms are zero.
class WeightMatrix {
 public:
  static WeightMatrix from_cbar(const Eigen::MatrixXd& cbar);

  bool regularized() const { return regularized_; }
  bool degenerate() const { return degenerate_; }
  double ridge() const { return ridge_; }
  const Eigen::MatrixXd& matrix() const { return cbar_; }

  /// C^-1 rhs (zero when degenerate).
  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const;
  double quad(const Eigen::VectorXd& g) const;

 private:
  Eigen::MatrixXd cbar_;
  Eigen::LDLT<Eigen::MatrixXd> ldlt_;
  bool regularized_ = false;
  bool degenerate_ = false;
  double ridge_ = 0.0;
};

struct ScoreResult {
  Eigen::VectorXd gbar;
  Eigen::MatrixXd g;  // column i = g_i
};

struct QifValue {
  double q = 0.0;
  Eigen::VectorXd gbar;
  Eigen::MatrixXd cbar;  // after any ridge
  bool regularized = false;
};

/// Penalized objective N^-1 Q + lambda theta*' D theta* with the gradient and
/// Gauss-Newton Hessian that treat C_N as fixed.
struct ObjectiveEval {
  double value = 0.0;
  double q = 0.0;
  double penalty = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
  Eigen::VectorXd gbar;
  Eigen::MatrixXd gdot;  // d gbar / d theta*
  WeightMatrix weight;   // the C_N factorization used
  bool regularized = false;
};

enum class Execution { serial, parallel };

/// QIF evaluator bound to a dataset, a pair of bases and a working
/// correlation basis. Moments and derivatives are taken in the free
/// coordinates theta*, so the moment dimension is h * dim(theta*).
class QifModel {
 public:
  QifModel(const LongitudinalDataset& data, BasisSpec spec0, BasisSpec spec1, BasisKind kind,
           double scale = 1.0);

  const LongitudinalDataset& data() const { return *data_; }
  const BasisSpec& spec0() const { return spec0_; }
  const BasisSpec& spec1() const { return spec1_; }
  const BasisMatrixSet& basis_matrices() const { return mats_; }
  int num_basis_matrices() const { return mats_.count(); }
  int num_free_params() const { return 2 * (data_->p - 1) + spec0_.dim() + spec1_.dim(); }
  int num_moments() const { return num_basis_matrices() * num_free_params(); }
  double scale() const { return scale_; }

  void set_scale(double scale);
  void set_specs(BasisSpec spec0, BasisSpec spec1);
  void set_execution(Execution exec) { exec_ = exec; }

  MomentSums moments(const ThetaFree& theta, bool derivative) const;
  ScoreResult extended_score(const ThetaFree& theta) const;
  QifValue qif_value(const ThetaFree& theta) const;

  /// Evaluates at theta using C_N(theta) as the weight, or `frozen` if given.
  ObjectiveEval objective(const ThetaFree& theta, const PenaltySpec& penalty,
                          const WeightMatrix* frozen = nullptr) const;

  /// Objective value only, weight held at `frozen`. Used by line searches.
  double objective_value(const ThetaFree& theta, const PenaltySpec& penalty,
                         const WeightMatrix& frozen) const;

  /// Mean squared residual of y around the fitted mean.
  double residual_variance(const ThetaFree& theta) const;

 private:
  const LongitudinalDataset* data_;
  BasisSpec spec0_, spec1_;
  BasisMatrixSet mats_;
  double scale_ = 1.0;
  Execution exec_ = Execution::parallel;
};

}  // namespace fvicm
