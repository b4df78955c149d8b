#include "fvicm/spline_basis.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fvicm/errors.hpp"

namespace fvicm {

namespace {

// (x)_+^e with (x)_+^0 = 1{x > 0}; the strict inequality gives the
// right-continuous-at-zero convention used for derivatives at knots.
inline double pow_plus(double x, int e) {
  if (x <= 0.0) return 0.0;
  double r = 1.0;
  for (int i = 0; i < e; ++i) r *= x;
  return r;
}

inline double ipow(double x, int e) {
  double r = 1.0;
  for (int i = 0; i < e; ++i) r *= x;
  return r;
}

void require_derivable(const BasisSpec& spec) {
  if (spec.degree < 1) throw ConfigError("basis derivative requires degree >= 1");
}

}  // namespace

void BasisSpec::validate() const {
  if (degree < 0) throw ConfigError("basis degree must be nonnegative");
  if (!knots.empty() && degree < 1)
    throw ConfigError("degree-0 truncated power terms are not supported");
  for (std::size_t k = 1; k < knots.size(); ++k) {
    if (!(knots[k] > knots[k - 1]))
      throw ConfigError("knots must be strictly increasing (position " + std::to_string(k) + ")");
  }
}

void fill_basis(const BasisSpec& spec, double u, std::span<double> out) {
  const int q = spec.degree;
  double pw = 1.0;
  for (int d = 0; d <= q; ++d) {
    out[d] = pw;
    pw *= u;
  }
  for (int k = 0; k < spec.num_knots(); ++k) out[q + 1 + k] = pow_plus(u - spec.knots[k], q);
}

void fill_basis_deriv(const BasisSpec& spec, double u, std::span<double> out) {
  const int q = spec.degree;
  out[0] = 0.0;
  for (int d = 1; d <= q; ++d) out[d] = d * ipow(u, d - 1);
  for (int k = 0; k < spec.num_knots(); ++k)
    out[q + 1 + k] = q * pow_plus(u - spec.knots[k], q - 1);
}

void fill_basis_deriv2(const BasisSpec& spec, double u, std::span<double> out) {
  const int q = spec.degree;
  for (int d = 0; d <= q; ++d) out[d] = d >= 2 ? d * (d - 1) * ipow(u, d - 2) : 0.0;
  for (int k = 0; k < spec.num_knots(); ++k)
    out[q + 1 + k] = q >= 2 ? q * (q - 1) * pow_plus(u - spec.knots[k], q - 2) : 0.0;
}

Eigen::VectorXd eval_basis(const BasisSpec& spec, double u) {
  Eigen::VectorXd b(spec.dim());
  fill_basis(spec, u, {b.data(), static_cast<std::size_t>(b.size())});
  return b;
}

Eigen::VectorXd eval_basis_deriv(const BasisSpec& spec, double u) {
  require_derivable(spec);
  Eigen::VectorXd b(spec.dim());
  fill_basis_deriv(spec, u, {b.data(), static_cast<std::size_t>(b.size())});
  return b;
}

Eigen::VectorXd eval_basis_deriv2(const BasisSpec& spec, double u) {
  require_derivable(spec);
  Eigen::VectorXd b(spec.dim());
  fill_basis_deriv2(spec, u, {b.data(), static_cast<std::size_t>(b.size())});
  return b;
}

std::vector<double> place_knots(std::span<const double> values, int num_knots) {
  if (values.empty()) throw InputError("place_knots: no index values");
  if (num_knots < 0) throw ConfigError("place_knots: negative knot count");
  if (num_knots == 0) return {};
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) throw InputError("place_knots: index values have a degenerate range");
  std::vector<double> knots(num_knots);
  for (int k = 1; k <= num_knots; ++k) knots[k - 1] = lo + k * (hi - lo) / (num_knots + 1);
  return knots;
}

Eigen::VectorXd eval_curve(const BasisSpec& spec, const Eigen::VectorXd& coef,
                           std::span<const double> points) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(points.size()));
  Eigen::VectorXd row(spec.dim());
  for (std::size_t i = 0; i < points.size(); ++i) {
    fill_basis(spec, points[i], {row.data(), static_cast<std::size_t>(row.size())});
    out[static_cast<Eigen::Index>(i)] = row.dot(coef);
  }
  return out;
}

}  // namespace fvicm
