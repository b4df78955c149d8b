#pragma once

#include <Eigen/Dense>

#include "fvicm/spline_basis.hpp"

namespace fvicm {

/// Index of each block inside a flat parameter vector.
struct ParamLayout {
  int p = 0;   // covariate dimension
  int d0 = 0;  // dim of gamma0
  int d1 = 0;  // dim of gamma1

  // Full coordinates: (beta0, beta1, gamma0, gamma1).
  int full_size() const { return 2 * p + d0 + d1; }
  // Free coordinates: (beta0_tail, beta1_tail, gamma0, gamma1).
  int free_size() const { return 2 * (p - 1) + d0 + d1; }
  int tail() const { return p - 1; }
  int free_beta0() const { return 0; }
  int free_beta1() const { return p - 1; }
  int free_gamma0() const { return 2 * (p - 1); }
  int free_gamma1() const { return 2 * (p - 1) + d0; }
  int num_beta_free() const { return 2 * (p - 1); }
};

/// theta = (beta0, beta1, gamma0, gamma1) with unit-norm, positive-leading betas.
struct ThetaFull {
  Eigen::VectorXd beta0, beta1, gamma0, gamma1;

  ParamLayout layout() const {
    return {static_cast<int>(beta0.size()), static_cast<int>(gamma0.size()),
            static_cast<int>(gamma1.size())};
  }
  Eigen::VectorXd flat() const;
  static ThetaFull from_flat(const Eigen::VectorXd& v, const ParamLayout& layout);

  /// Unit norm within tol and strictly positive first entries.
  bool satisfies_constraints(double tol = 1e-10) const;
};

/// Constraint-free coordinates: beta_l = (sqrt(1 - |tail_l|^2), tail_l).
struct ThetaFree {
  Eigen::VectorXd beta0_tail, beta1_tail, gamma0, gamma1;

  ParamLayout layout() const {
    return {static_cast<int>(beta0_tail.size()) + 1, static_cast<int>(gamma0.size()),
            static_cast<int>(gamma1.size())};
  }
  Eigen::VectorXd flat() const;
  static ThetaFree from_flat(const Eigen::VectorXd& v, const ParamLayout& layout);

  /// |tail_l| < 1 for both indices.
  bool feasible() const;
};

/// sign(beta_1) beta / |beta|.
Eigen::VectorXd normalize_index(const Eigen::VectorXd& beta);

ThetaFree to_free(const ThetaFull& theta);
ThetaFull to_full(const ThetaFree& theta);

/// d beta / d tail, a p x (p-1) matrix.
Eigen::MatrixXd index_jacobian(const Eigen::VectorXd& tail);

/// Block-diagonal d theta / d theta*, full_size x free_size.
Eigen::MatrixXd theta_jacobian(const ThetaFree& theta);

/// 0/1 penalty diagonal that selects knot coefficients of gamma0 and gamma1.
struct PenaltySpec {
  double lambda = 0.0;
  Eigen::VectorXd d_full;  // over theta
  Eigen::VectorXd d_free;  // over theta*

  static PenaltySpec make(double lambda, int p, const BasisSpec& spec0, const BasisSpec& spec1);
};

}  // namespace fvicm
