#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace fvicm {

/// Truncated power spline basis of degree q with K interior knots:
/// B(u) = (1, u, ..., u^q, (u-k_1)_+^q, ..., (u-k_K)_+^q).
struct BasisSpec {
  int degree = 2;
  std::vector<double> knots;

  int num_knots() const { return static_cast<int>(knots.size()); }
  int dim() const { return degree + num_knots() + 1; }
  int poly_dim() const { return degree + 1; }

  /// Throws ConfigError unless knots are strictly increasing and degree is
  /// compatible with the knot count.
  void validate() const;
};

// Row-filling kernels used on hot paths. `out` must have spec.dim() entries.
void fill_basis(const BasisSpec& spec, double u, std::span<double> out);
void fill_basis_deriv(const BasisSpec& spec, double u, std::span<double> out);
void fill_basis_deriv2(const BasisSpec& spec, double u, std::span<double> out);

Eigen::VectorXd eval_basis(const BasisSpec& spec, double u);

/// First derivative in u. At u == knot the truncated term takes its
/// right-continuous value 0. Requires degree >= 1.
Eigen::VectorXd eval_basis_deriv(const BasisSpec& spec, double u);

/// Second derivative in u (same knot convention). Requires degree >= 1;
/// the truncated terms vanish identically for degree 1.
Eigen::VectorXd eval_basis_deriv2(const BasisSpec& spec, double u);

/// K knots at min + k (max - min) / (K + 1), k = 1..K.
std::vector<double> place_knots(std::span<const double> values, int num_knots);

/// Evaluates B(u)^T coef over many points.
Eigen::VectorXd eval_curve(const BasisSpec& spec, const Eigen::VectorXd& coef,
                           std::span<const double> points);

}  // namespace fvicm
